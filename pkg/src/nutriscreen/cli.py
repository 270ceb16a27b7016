"""Command-line entry point: dataset generation, KB building, training,
evaluation, single-subject prediction, ablations, sweeps, serving.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import ablation
from .gat import load_model
from .kb import build_kb, load_kb, save_kb
from .records import (
    DataError,
    SyntheticConfig,
    generate_synthetic_cohort,
    load_dataset,
    save_dataset,
)
from .pipeline import predict_subject
from .training import TrainConfig, evaluate_model, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

log = logging.getLogger("nutriscreen")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems instead of exiting with code 2."""

    def error(self, message):
        raise _UsageError(message)


def _setup_logging() -> None:
    level = os.environ.get("NUTRI_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr)


def _load_train_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = TrainConfig.from_dict(doc)
    else:
        config = TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "retrieval", None) is not None:
        overrides["retrieval_enabled"] = args.retrieval == "on"
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    return config


def build_parser() -> _Parser:
    parser = _Parser(prog="nutriscreen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic cohort dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--positive-fraction", type=float, default=0.30)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--poses", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("build-kb", help="index a dataset into a knowledge base")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--metric", choices=["cosine", "euclidean", "mahalanobis"], default="cosine"
    )

    p = sub.add_parser("train", help="run cross-validated training")
    p.add_argument("--data", required=True)
    p.add_argument("--kb")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--retrieval", choices=["on", "off"])
    p.add_argument("--format", choices=["json", "table"], default="json")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kb")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--retrieval", choices=["on", "off"])
    p.add_argument("--format", choices=["json", "table"], default="json")

    p = sub.add_parser("predict", help="screen one subject and print the result")
    p.add_argument("--model", required=True)
    p.add_argument("--kb")
    p.add_argument("--subject", required=True)
    p.add_argument("--config")
    p.add_argument("--retrieval", choices=["on", "off"])

    p = sub.add_parser("ablate", help="run an ablation axis")
    p.add_argument("--axis", required=True, choices=["pose", "architecture", "metric"])
    p.add_argument("--data", required=True)
    p.add_argument("--kb")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["json", "table"], default="json")

    p = sub.add_parser("sweep", help="retrieval hyperparameter sensitivity")
    p.add_argument("--axis", required=True, choices=["k", "tau_class", "gamma", "tau_reg"])
    p.add_argument("--values")
    p.add_argument("--data", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["json", "table"], default="json")

    p = sub.add_parser("serve", help="start the screening HTTP service")
    p.add_argument("--model", required=True)
    p.add_argument(
        "--kb",
        action="append",
        required=True,
        help="knowledge base as name=path; repeat for multiple",
    )
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--static")

    return parser


def _cmd_gen_data(args) -> int:
    config = SyntheticConfig(
        n_subjects=args.n,
        positive_fraction=args.positive_fraction,
        cluster_separation=args.separation,
        poses_per_subject=args.poses,
        seed=args.seed,
    )
    records = generate_synthetic_cohort(config)
    save_dataset(records, args.out)
    print(f"wrote {len(records)} subjects to {args.out}")
    return EXIT_OK


def _cmd_build_kb(args) -> int:
    records = load_dataset(args.data)
    metric = "mahalanobis_diag" if args.metric == "mahalanobis" else args.metric
    kb = build_kb(records, metric=metric)
    save_kb(kb, args.out)
    print(f"indexed {len(kb)} subjects ({kb.metric}) into {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_train_config(args)
    records = load_dataset(args.data)
    kb = load_kb(args.kb) if args.kb else None
    result = train(records, kb, config, out_dir=args.out)
    if args.format == "table":
        rows = [ablation._summary_row(f"fold{r.fold}", _fold_summary(r)) for r in result.fold_reports]
        print(ablation.render_table(rows, ablation.ABLATION_COLUMNS))
    else:
        print(json.dumps(result.summary))
    return EXIT_OK


def _fold_summary(report) -> dict:
    summary = {}
    cls = report.classification
    for name, value in (
        ("accuracy", cls.accuracy),
        ("precision", cls.precision),
        ("recall", cls.recall),
        ("f1", cls.f1),
        ("roc_auc", cls.roc_auc),
        ("map", cls.map),
    ):
        summary[name] = {"mean": value} if value is not None else None
    for target, rmse in report.regression.rmse.items():
        summary[f"rmse_{target}"] = {"mean": rmse}
    return summary


def _cmd_evaluate(args) -> int:
    config = _load_train_config(args)
    model = load_model(args.model)
    records = load_dataset(args.data)
    kb = load_kb(args.kb) if args.kb else None
    if config.retrieval_enabled and kb is None:
        raise DataError("retrieval is enabled but no --kb was given")
    report = evaluate_model(model, records, kb, config)
    payload = {k: v for k, v in report.items() if k not in ("probs", "labels")}
    if len(report.get("alphas", [])) >= 2 and len(set(report["mean_distances"])) > 1:
        from .metrics import pearson_r

        try:
            payload["alpha_density_r"] = pearson_r(report["alphas"], report["mean_distances"])
        except DataError:
            payload["alpha_density_r"] = None
    text = json.dumps(payload)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.format == "table" and "classification" in report:
        cls = report["classification"]
        rows = [
            {
                "variant": "eval",
                "acc": cls["accuracy"],
                "prec": cls["precision"],
                "rec": cls["recall"],
                "f1": cls["f1"],
                "auc": cls["roc_auc"],
                "map": cls["map"],
                "h": report.get("regression", {}).get("rmse", {}).get("height_cm"),
                "w": report.get("regression", {}).get("rmse", {}).get("weight_kg"),
                "muac": report.get("regression", {}).get("rmse", {}).get("muac_cm"),
                "hc": report.get("regression", {}).get("rmse", {}).get("hc_cm"),
            }
        ]
        print(ablation.render_table(rows, ablation.ABLATION_COLUMNS))
    else:
        print(text)
    return EXIT_OK


def _cmd_predict(args) -> int:
    config = _load_train_config(args)
    model = load_model(args.model)
    kb = load_kb(args.kb) if args.kb else None
    records = load_dataset(args.subject)
    if len(records) != 1:
        raise DataError(f"subject file must hold exactly one record, found {len(records)}")
    result = predict_subject(
        model, kb, config.retrieval, records[0], retrieval_enabled=config.retrieval_enabled
    )
    print(json.dumps(result.to_dict()))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = _load_train_config(args)
    records = load_dataset(args.data)
    kb = load_kb(args.kb) if args.kb else None
    rows = ablation.run_ablation(records, kb, args.axis, config)
    if args.out:
        Path(args.out).write_text(json.dumps(rows), encoding="utf-8")
    if args.format == "table":
        print(ablation.render_table(rows, ablation.ABLATION_COLUMNS))
    else:
        print(json.dumps(rows))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = _load_train_config(args)
    records = load_dataset(args.data)
    kb = load_kb(args.kb)
    values = None
    if args.values:
        values = [float(v) for v in args.values.split(",")]
    rows = ablation.run_sweep(records, kb, args.axis, config, values=values)
    if args.out:
        Path(args.out).write_text(json.dumps(rows), encoding="utf-8")
    if args.format == "table":
        print(ablation.render_table(rows, ablation.SWEEP_COLUMNS))
    else:
        print(json.dumps(rows))
    return EXIT_OK


def _cmd_serve(args) -> int:
    from .service import ScreeningService

    model = load_model(args.model)
    kbs = {}
    for spec in args.kb:
        if "=" not in spec:
            raise _UsageError(f"--kb expects name=path, got {spec!r}")
        name, path = spec.split("=", 1)
        kbs[name] = load_kb(path)
    service = ScreeningService(model=model, kbs=kbs, static_dir=args.static)
    print(f"serving on http://{args.host}:{args.port}")
    service.serve_forever(host=args.host, port=args.port)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "build-kb": _cmd_build_kb,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "serve": _cmd_serve,
}


def dispatch(argv: list[str]) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
