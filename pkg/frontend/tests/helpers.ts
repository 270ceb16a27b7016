import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import type { KbCatalog, PredictionResponse } from "../src/types.js";

const here = dirname(fileURLToPath(import.meta.url));

export function loadFixture<T>(name: string): T {
  return JSON.parse(readFileSync(join(here, "fixtures", name), "utf-8")) as T;
}

export const predictFixture = (): PredictionResponse =>
  loadFixture<PredictionResponse>("predict.json");

export const catalogFixture = (): KbCatalog => loadFixture<KbCatalog>("kb_catalog.json");

export const subjectFileText = (): string =>
  readFileSync(join(here, "fixtures", "subject.json"), "utf-8");

export function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}
