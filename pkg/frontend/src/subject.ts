// Parsing and validation of the subject's pose-embedding file. The file is
// produced by an external encoder; the UI only checks shape, never computes
// on the vectors. Accepted forms: a single JSON object, or the first line of
// a JSON-Lines dataset file.

import type { SubjectRequest } from "./types.js";

export const EMBEDDING_DIM = 1024;

export const POSE_KINDS = [
  "frontal_1",
  "frontal_2",
  "frontal_3",
  "frontal_4",
  "lateral_left",
  "lateral_right",
  "posterior",
  "selfie",
] as const;

export class SubjectParseError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "SubjectParseError";
  }
}

export interface ParsedSubject {
  id: string | null;
  poses: Record<string, number[]>;
}

export function parseSubjectFile(text: string): ParsedSubject {
  const firstLine = text
    .split("\n")
    .map((line) => line.trim())
    .find((line) => line.length > 0);
  if (!firstLine) {
    throw new SubjectParseError("the file is empty");
  }
  let doc: unknown;
  try {
    doc = JSON.parse(firstLine);
  } catch {
    throw new SubjectParseError("the file is not valid JSON");
  }
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new SubjectParseError("expected a JSON object with a \"poses\" field");
  }
  const record = doc as Record<string, unknown>;
  const posesRaw = record["poses"];
  if (typeof posesRaw !== "object" || posesRaw === null || Array.isArray(posesRaw)) {
    throw new SubjectParseError("missing \"poses\" object");
  }
  const poses: Record<string, number[]> = {};
  const entries = Object.entries(posesRaw as Record<string, unknown>);
  if (entries.length === 0) {
    throw new SubjectParseError("\"poses\" holds no views");
  }
  if (entries.length > POSE_KINDS.length) {
    throw new SubjectParseError(`more than ${POSE_KINDS.length} poses`);
  }
  for (const [kind, vector] of entries) {
    if (!(POSE_KINDS as readonly string[]).includes(kind)) {
      throw new SubjectParseError(`unknown pose kind "${kind}"`);
    }
    if (!Array.isArray(vector)) {
      throw new SubjectParseError(`pose ${kind} is not an array`);
    }
    if (vector.length !== EMBEDDING_DIM) {
      throw new SubjectParseError(
        `pose ${kind} has ${vector.length} entries, expected ${EMBEDDING_DIM}`,
      );
    }
    for (const x of vector) {
      if (typeof x !== "number" || !Number.isFinite(x)) {
        throw new SubjectParseError(`pose ${kind} contains a non-numeric entry`);
      }
    }
    poses[kind] = vector as number[];
  }
  const id = typeof record["id"] === "string" && record["id"] ? (record["id"] as string) : null;
  return { id, poses };
}

export function validateAge(text: string): number | null {
  if (!text.trim()) {
    return null;
  }
  const age = Number(text);
  if (!Number.isFinite(age) || age <= 0 || age > 240) {
    return null;
  }
  return age;
}

export function buildRequest(subject: ParsedSubject, ageMonths: number): SubjectRequest {
  return {
    id: subject.id ?? "screening-subject",
    age_months: ageMonths,
    poses: subject.poses,
    class_label: null,
    anthro: null,
  };
}
