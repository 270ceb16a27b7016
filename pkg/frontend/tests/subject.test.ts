import { describe, expect, it } from "vitest";

import {
  buildRequest,
  EMBEDDING_DIM,
  parseSubjectFile,
  SubjectParseError,
  validateAge,
} from "../src/subject.js";
import { subjectFileText } from "./helpers.js";

const vector = (n = EMBEDDING_DIM) => Array.from({ length: n }, (_, i) => i * 1e-3);

describe("parseSubjectFile", () => {
  it("accepts a dataset-line file", () => {
    const parsed = parseSubjectFile(subjectFileText());
    expect(Object.keys(parsed.poses)).toHaveLength(8);
    expect(parsed.poses["frontal_1"]).toHaveLength(EMBEDDING_DIM);
    expect(parsed.id).not.toBeNull();
  });

  it("accepts a bare poses object", () => {
    const parsed = parseSubjectFile(JSON.stringify({ poses: { selfie: vector() } }));
    expect(parsed.id).toBeNull();
    expect(Object.keys(parsed.poses)).toEqual(["selfie"]);
  });

  it("accepts the first line of a JSONL file", () => {
    const line = JSON.stringify({ poses: { posterior: vector() } });
    const parsed = parseSubjectFile(`${line}\n{"poses": {}}\n`);
    expect(Object.keys(parsed.poses)).toEqual(["posterior"]);
  });

  it("rejects non-JSON", () => {
    expect(() => parseSubjectFile("not json at all")).toThrow(SubjectParseError);
  });

  it("rejects a wrong embedding dimension with a specific message", () => {
    const bad = JSON.stringify({ poses: { frontal_1: vector(1023) } });
    expect(() => parseSubjectFile(bad)).toThrow(/1023 entries, expected 1024/);
  });

  it("rejects unknown pose kinds", () => {
    const bad = JSON.stringify({ poses: { sideways: vector() } });
    expect(() => parseSubjectFile(bad)).toThrow(/unknown pose kind/);
  });

  it("rejects an empty poses object", () => {
    expect(() => parseSubjectFile(JSON.stringify({ poses: {} }))).toThrow(/no views/);
  });

  it("rejects non-numeric entries", () => {
    const entries = vector() as unknown[];
    entries[3] = "x";
    const bad = JSON.stringify({ poses: { selfie: entries } });
    expect(() => parseSubjectFile(bad)).toThrow(/non-numeric/);
  });
});

describe("validateAge", () => {
  it("accepts plausible ages", () => {
    expect(validateAge("36")).toBe(36);
    expect(validateAge("6.5")).toBe(6.5);
  });

  it("rejects empty, non-numeric, non-positive and absurd values", () => {
    for (const text of ["", "abc", "0", "-4", "1000", "NaN"]) {
      expect(validateAge(text)).toBeNull();
    }
  });
});

describe("buildRequest", () => {
  it("carries the form age and file poses, labels stay null", () => {
    const parsed = parseSubjectFile(JSON.stringify({ poses: { selfie: vector() } }));
    const request = buildRequest(parsed, 42.5);
    expect(request.age_months).toBe(42.5);
    expect(request.class_label).toBeNull();
    expect(request.anthro).toBeNull();
    expect(request.poses["selfie"]).toHaveLength(EMBEDDING_DIM);
  });
});
