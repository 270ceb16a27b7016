// Pure view-model construction from a prediction payload. Every number in
// the view is the service's value verbatim; display strings are formatting
// only (two decimals), never recomputation.

import type { Measurements, MeasurementTarget, PredictionResponse } from "./types.js";

export interface MeasurementView {
  target: MeasurementTarget;
  label: string;
  value: number | null;
  display: string;
  unit: string;
  valid: boolean;
}

export interface NeighborView {
  id: string;
  distance: number;
  distanceDisplay: string;
  hasClassLabel: boolean;
  hasAnthro: boolean;
}

export interface ResultView {
  subjectId: string;
  decision: "healthy" | "malnourished";
  decisionLabel: string;
  fusedProbability: number;
  fusedProbabilityDisplay: string;
  threshold: number;
  thresholdDisplay: string;
  gatProbability: number;
  gatProbabilityDisplay: string;
  retrievedScore: number | null;
  retrievedScoreDisplay: string;
  alphaCls: number | null;
  alphaClsDisplay: string;
  alphaReg: number;
  alphaRegDisplay: string;
  meanDistance: number | null;
  meanDistanceDisplay: string;
  measurements: MeasurementView[];
  neighbors: NeighborView[];
  kbName: string | null;
  timingMs: number | null;
}

const TARGET_LABELS: Record<MeasurementTarget, string> = {
  height_cm: "Height",
  weight_kg: "Weight",
  muac_cm: "MUAC",
  hc_cm: "Head circumference",
};

export function formatNumber(value: number | null): string {
  if (value === null || !Number.isFinite(value)) {
    return "—";
  }
  return value.toFixed(2);
}

function measurementViews(measurements: Measurements): MeasurementView[] {
  return (Object.keys(TARGET_LABELS) as MeasurementTarget[]).map((target) => {
    const m = measurements[target];
    return {
      target,
      label: TARGET_LABELS[target],
      value: m.value,
      display: m.valid && m.value !== null ? `${formatNumber(m.value)} ${m.unit}` : "—",
      unit: m.unit,
      valid: m.valid,
    };
  });
}

export function buildResultView(payload: PredictionResponse): ResultView {
  return {
    subjectId: payload.subject_id,
    decision: payload.decision,
    decisionLabel:
      payload.decision === "malnourished" ? "At risk: malnourished" : "Not flagged: healthy",
    fusedProbability: payload.fused_probability,
    fusedProbabilityDisplay: formatNumber(payload.fused_probability),
    threshold: payload.threshold,
    thresholdDisplay: formatNumber(payload.threshold),
    gatProbability: payload.gat_probability,
    gatProbabilityDisplay: formatNumber(payload.gat_probability),
    retrievedScore: payload.retrieved_score,
    retrievedScoreDisplay: formatNumber(payload.retrieved_score),
    alphaCls: payload.alpha_cls,
    alphaClsDisplay: formatNumber(payload.alpha_cls),
    alphaReg: payload.alpha_reg,
    alphaRegDisplay: formatNumber(payload.alpha_reg),
    meanDistance: payload.mean_distance,
    meanDistanceDisplay: formatNumber(payload.mean_distance),
    measurements: measurementViews(payload.fused_measurements),
    neighbors: payload.neighbors.map((n) => ({
      id: n.subject_id,
      distance: n.distance,
      distanceDisplay: n.distance.toFixed(4),
      hasClassLabel: n.has_class_label,
      hasAnthro: n.has_anthro,
    })),
    kbName: payload.kb_name ?? null,
    timingMs: payload.timing_ms ?? null,
  };
}
