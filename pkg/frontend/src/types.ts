// Wire types mirroring the screening service's JSON payloads.

export interface Measurement {
  value: number | null;
  unit: string;
  valid: boolean;
}

export type MeasurementTarget = "height_cm" | "weight_kg" | "muac_cm" | "hc_cm";

export type Measurements = Record<MeasurementTarget, Measurement>;

export interface NeighborRow {
  subject_id: string;
  distance: number;
  has_class_label: boolean;
  has_anthro: boolean;
}

export interface PredictionResponse {
  subject_id: string;
  gat_logit: number;
  gat_probability: number;
  gat_measurements: Measurements;
  retrieved_score: number | null;
  retrieved_measurements: Measurements;
  alpha_cls: number | null;
  alpha_reg: number;
  fused_probability: number;
  fused_measurements: Measurements;
  mean_distance: number | null;
  threshold: number;
  decision: "healthy" | "malnourished";
  neighbors: NeighborRow[];
  kb_name?: string;
  timing_ms?: number;
}

export interface KbInfo {
  name: string;
  count: number;
  metric: string;
  active: boolean;
}

export interface KbCatalog {
  knowledge_bases: KbInfo[];
  active: string | null;
}

export interface ModelInfo {
  threshold: number;
  alpha_reg: number;
  kb: { name: string; count: number; metric: string };
  retrieval: { k: number; tau_class: number; gamma: number; tau_reg: number };
}

export interface SubjectRequest {
  id: string;
  age_months: number;
  poses: Record<string, number[]>;
  class_label: null;
  anthro: null;
}
