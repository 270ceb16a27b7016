import numpy as np
import pytest

from nutriscreen.gat import (
    BatchItem,
    GatConfig,
    GatLayerParams,
    SubjectRetrieval,
    batch_loss_and_grads,
    gat_layer_forward,
    init_model,
    load_model,
    model_forward,
    named_params,
    save_model,
)
from nutriscreen.graphs import PoseGraph, build_subject_graph
from nutriscreen.records import DataError, TargetStats

from conftest import make_record


def complete_graph(features, subject_id="g"):
    n = features.shape[0]
    edges = tuple((j, k) for j in range(n) for k in range(j + 1, n))
    return PoseGraph(
        subject_id=subject_id, node_features=features, node_poses=tuple(), edges=edges
    )


def random_batch(rng, config, sizes, with_class=True, with_retrieval=True, reg_mask=None):
    items = []
    for n in sizes:
        retrieval = None
        if with_retrieval:
            retrieval = SubjectRetrieval(
                y_cls=float(rng.random()),
                reg_std=rng.standard_normal(4),
                reg_valid=rng.random(4) < 0.8,
                mean_distance=float(rng.uniform(0, 1.5)),
            )
        mask = reg_mask if reg_mask is not None else rng.random(4) < 0.8
        items.append(
            BatchItem(
                graph=complete_graph(rng.standard_normal((n, config.in_dim))),
                class_label=int(rng.random() < 0.5) if with_class else None,
                reg_targets_std=rng.standard_normal(4),
                reg_mask=np.asarray(mask, dtype=bool),
                retrieval=retrieval,
            )
        )
    return items


def finite_difference_gradients(items, model, pos_weight, aux_weight, step=1e-4, rng_seed=None):
    """Central-difference oracle over every parameter of the model."""

    def loss():
        rng = np.random.default_rng(rng_seed) if rng_seed is not None else None
        value, _, _ = batch_loss_and_grads(
            items,
            model,
            pos_weight=pos_weight,
            aux_weight=aux_weight,
            compute_grads=False,
            train_mode=rng_seed is not None,
            rng=rng,
        )
        return value

    grads = {}
    for path, arr in named_params(model):
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = loss()
            flat[i] = old - step
            down = loss()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * step)
        grads[path] = g
    return grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for path in analytic:
        a = analytic[path].ravel()
        b = numeric[path].ravel()
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


class TestLayerForward:
    def test_single_node_attention_is_one(self):
        rng = np.random.default_rng(0)
        params = GatLayerParams(
            weight=rng.standard_normal((5, 6)),
            attn_src=rng.standard_normal((2, 3)),
            attn_dst=rng.standard_normal((2, 3)),
            heads=2,
            head_dim=3,
            concat=True,
        )
        x = rng.standard_normal((1, 5))
        out, att, _ = gat_layer_forward(x, np.ones((1, 1), dtype=bool), params)
        np.testing.assert_allclose(att, np.ones((1, 1, 2)))
        z = (x @ params.weight).reshape(1, 2, 3)
        expected = np.where(z > 0, z, np.expm1(z)).reshape(1, 6)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_identical_features_give_uniform_attention(self):
        rng = np.random.default_rng(1)
        params = GatLayerParams(
            weight=rng.standard_normal((4, 6)),
            attn_src=rng.standard_normal((2, 3)),
            attn_dst=rng.standard_normal((2, 3)),
            heads=2,
            head_dim=3,
            concat=False,
        )
        x = np.tile(rng.standard_normal(4), (5, 1))
        _, att, _ = gat_layer_forward(x, np.ones((5, 5), dtype=bool), params)
        np.testing.assert_allclose(att, np.full((5, 5, 2), 0.2), atol=1e-12)

    def test_zero_attention_vector_two_nodes_mean(self):
        # scores all zero -> attention 1/2; averaging layer emits the plain mean
        params = GatLayerParams(
            weight=np.eye(3),
            attn_src=np.zeros((1, 3)),
            attn_dst=np.zeros((1, 3)),
            heads=1,
            head_dim=3,
            concat=False,
        )
        x = np.asarray([[1.0, 2.0, 3.0], [5.0, -2.0, 1.0]])
        out, att, _ = gat_layer_forward(x, np.ones((2, 2), dtype=bool), params)
        np.testing.assert_allclose(att, np.full((2, 2, 1), 0.5))
        np.testing.assert_allclose(out, np.tile(x.mean(axis=0), (2, 1)), atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        config = GatConfig(in_dim=7, n_layers=2, heads=3, head_dim=4, dropout=0.4)
        model = init_model(config, seed=1)
        for n in (1, 2, 5, 8):
            graph = complete_graph(rng.standard_normal((n, 7)))
            for train_mode in (False, True):
                out = model_forward(
                    graph, model, train_mode=train_mode, rng=np.random.default_rng(0)
                )
                for att in out.attentions:
                    np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-9)

    def test_dimension_mismatch(self):
        params = GatLayerParams(
            weight=np.eye(3), attn_src=np.zeros((1, 3)), attn_dst=np.zeros((1, 3)),
            heads=1, head_dim=3, concat=True,
        )
        with pytest.raises(DataError, match="dimension"):
            gat_layer_forward(np.zeros((2, 4)), np.ones((2, 2), bool), params)


class TestModelForward:
    def test_eval_forward_is_deterministic(self):
        config = GatConfig(in_dim=6, n_layers=2, heads=2, head_dim=3)
        model = init_model(config, seed=0)
        graph = complete_graph(np.random.default_rng(3).standard_normal((4, 6)))
        a = model_forward(graph, model)
        b = model_forward(graph, model)
        assert a.cls_logit == b.cls_logit
        np.testing.assert_array_equal(a.reg, b.reg)
        np.testing.assert_array_equal(a.pooled, b.pooled)

    def test_zero_weight_heads_emit_bias(self):
        config = GatConfig(in_dim=6, n_layers=2, heads=2, head_dim=3)
        model = init_model(config, seed=0)
        model.cls_w[:] = 0.0
        model.cls_b[0] = 0.7
        model.reg_w[:] = 0.0
        model.reg_b[:] = [1.0, 2.0, 3.0, 4.0]
        graph = complete_graph(np.random.default_rng(4).standard_normal((3, 6)))
        out = model_forward(graph, model)
        assert out.cls_logit == pytest.approx(0.7)
        np.testing.assert_allclose(out.reg, [1.0, 2.0, 3.0, 4.0])

    def test_pooled_dim_independent_of_pose_count(self):
        config = GatConfig(in_dim=6, n_layers=2, heads=2, head_dim=3)
        model = init_model(config, seed=0)
        rng = np.random.default_rng(5)
        dims = {
            model_forward(complete_graph(rng.standard_normal((n, 6))), model).pooled.shape
            for n in (1, 8)
        }
        assert dims == {(3,)}

    def test_node_order_equivariance(self):
        # complete graph + mean pooling: permuting nodes leaves outputs unchanged
        config = GatConfig(in_dim=9, n_layers=2, heads=3, head_dim=4)
        model = init_model(config, seed=2)
        rng = np.random.default_rng(6)
        for n in (2, 4, 8):
            features = rng.standard_normal((n, 9))
            base = model_forward(complete_graph(features), model)
            for _ in range(3):
                perm = rng.permutation(n)
                permuted = model_forward(complete_graph(features[perm]), model)
                assert permuted.cls_logit == pytest.approx(base.cls_logit, abs=1e-9)
                np.testing.assert_allclose(permuted.reg, base.reg, atol=1e-9)

    def test_age_scale_rescales_last_column(self):
        config = GatConfig(in_dim=6, n_layers=2, heads=2, head_dim=3, age_scale=0.5)
        model = init_model(config, seed=0)
        features = np.random.default_rng(7).standard_normal((3, 6))
        scaled = features.copy()
        scaled[:, -1] *= 0.5
        out_knob = model_forward(complete_graph(features), model)
        model_raw = init_model(
            GatConfig(in_dim=6, n_layers=2, heads=2, head_dim=3), seed=0
        )
        out_manual = model_forward(complete_graph(scaled), model_raw)
        assert out_knob.cls_logit == pytest.approx(out_manual.cls_logit, abs=1e-12)


class TestGradients:
    def test_gradcheck_random_models_and_graphs(self):
        rng = np.random.default_rng(42)
        for trial in range(12):
            config = GatConfig(
                in_dim=int(rng.integers(3, 8)),
                n_layers=int(rng.integers(2, 4)),
                heads=int(rng.integers(1, 3)),
                head_dim=int(rng.integers(2, 5)),
                dropout=0.0,
                fusion_hidden=int(rng.integers(2, 5)),
                fusion_space="prob" if trial % 2 == 0 else "logit",
            )
            model = init_model(config, seed=trial)
            sizes = [int(s) for s in rng.choice([1, 2, 4, 8], size=rng.integers(1, 4))]
            items = random_batch(rng, config, sizes)
            pos_weight = float(rng.uniform(0.5, 3.0))
            _, _, analytic = batch_loss_and_grads(
                items, model, pos_weight=pos_weight, aux_weight=0.5
            )
            numeric = finite_difference_gradients(items, model, pos_weight, 0.5)
            assert max_relative_error(analytic, numeric) <= 1e-4

    def test_gradcheck_with_dropout_masks_frozen(self):
        rng = np.random.default_rng(7)
        config = GatConfig(in_dim=5, n_layers=2, heads=2, head_dim=3, dropout=0.35)
        model = init_model(config, seed=9)
        items = random_batch(rng, config, [4, 8])
        _, _, analytic = batch_loss_and_grads(
            items, model, pos_weight=1.2, aux_weight=0.5,
            train_mode=True, rng=np.random.default_rng(123),
        )
        numeric = finite_difference_gradients(items, model, 1.2, 0.5, rng_seed=123)
        assert max_relative_error(analytic, numeric) <= 1e-4

    def test_perfect_regression_zeroes_head_gradients(self):
        config = GatConfig(in_dim=5, n_layers=2, heads=2, head_dim=3, dropout=0.0)
        model = init_model(config, seed=4)
        rng = np.random.default_rng(8)
        graph = complete_graph(rng.standard_normal((3, 5)))
        out = model_forward(graph, model)
        item = BatchItem(
            graph=graph,
            class_label=None,
            reg_targets_std=out.reg.copy(),
            reg_mask=np.ones(4, dtype=bool),
            retrieval=None,
        )
        loss, _, grads = batch_loss_and_grads([item], model, aux_weight=0.0)
        assert loss == pytest.approx(0.0, abs=1e-18)
        np.testing.assert_allclose(grads["reg_w"], 0.0, atol=1e-12)
        np.testing.assert_allclose(grads["reg_b"], 0.0, atol=1e-12)

    def test_pos_weight_scales_class_gradients_linearly(self):
        config = GatConfig(in_dim=5, n_layers=2, heads=2, head_dim=3, dropout=0.0)
        model = init_model(config, seed=5)
        rng = np.random.default_rng(9)
        graph = complete_graph(rng.standard_normal((2, 5)))
        item = BatchItem(
            graph=graph,
            class_label=1,
            reg_targets_std=np.zeros(4),
            reg_mask=np.zeros(4, dtype=bool),
            retrieval=None,
        )
        loss1, _, grads1 = batch_loss_and_grads([item], model, pos_weight=1.0, aux_weight=0.0)
        loss2, _, grads2 = batch_loss_and_grads([item], model, pos_weight=2.0, aux_weight=0.0)
        assert loss2 == pytest.approx(2.0 * loss1, rel=1e-12)
        for path in grads1:
            np.testing.assert_allclose(grads2[path], 2.0 * grads1[path], atol=1e-12)

    def test_empty_labels_rejected(self):
        config = GatConfig(in_dim=5, n_layers=2, heads=2, head_dim=3)
        model = init_model(config, seed=0)
        item = BatchItem(
            graph=complete_graph(np.zeros((2, 5))),
            class_label=None,
            reg_targets_std=np.zeros(4),
            reg_mask=np.zeros(4, dtype=bool),
            retrieval=None,
        )
        with pytest.raises(DataError, match="no labels"):
            batch_loss_and_grads([item], model)


class TestCheckpoint:
    def test_round_trip_preserves_parameters_exactly(self, tmp_path):
        config = GatConfig(in_dim=1025, n_layers=2, heads=8, head_dim=64)
        model = init_model(config, seed=42)
        model.threshold = 0.37
        model.target_stats = TargetStats(
            means={"height_cm": 100.0, "weight_kg": 15.0, "muac_cm": 13.0, "hc_cm": 48.0},
            stds={"height_cm": 7.0, "weight_kg": 2.0, "muac_cm": 1.0, "hc_cm": 1.5},
        )
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.threshold == model.threshold
        assert loaded.target_stats == model.target_stats
        assert loaded.config == model.config
        for (pa, a), (pb, b) in zip(named_params(model), named_params(loaded)):
            assert pa == pb
            np.testing.assert_array_equal(a, b)  # exact, not approximate

    def test_round_trip_preserves_forward(self, tmp_path):
        record = make_record(n_poses=4, seed=11)
        graph = build_subject_graph(record)
        model = init_model(GatConfig(), seed=1)
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        a = model_forward(graph, model)
        b = model_forward(graph, loaded)
        assert a.cls_logit == b.cls_logit
        np.testing.assert_array_equal(a.reg, b.reg)

    def test_version_gate(self, tmp_path):
        model = init_model(GatConfig(in_dim=5, heads=1, head_dim=2), seed=0)
        path = tmp_path / "m.json"
        save_model(model, path)
        path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 2'))
        with pytest.raises(DataError, match="version"):
            load_model(path)
