import { describe, expect, it } from "vitest";

import { ApiClient, ServiceError, UNREACHABLE_MESSAGE } from "../src/api.js";
import { catalogFixture, jsonResponse, predictFixture } from "./helpers.js";

describe("ApiClient", () => {
  it("returns the prediction payload untouched", async () => {
    const fixture = predictFixture();
    const calls: Array<{ url: string; init?: RequestInit }> = [];
    const api = new ApiClient(async (url, init) => {
      calls.push({ url, init });
      return jsonResponse(200, fixture);
    });
    const subject = {
      id: "s",
      age_months: 30,
      poses: { frontal_1: [0.5] },
      class_label: null,
      anthro: null,
    };
    const result = await api.predict(subject as never);
    expect(result).toEqual(fixture);
    expect(calls[0]?.url).toBe("/predict");
    expect(calls[0]?.init?.method).toBe("POST");
    expect(JSON.parse(String(calls[0]?.init?.body))).toEqual(subject);
  });

  it("lists knowledge bases", async () => {
    const fixture = catalogFixture();
    const api = new ApiClient(async () => jsonResponse(200, fixture));
    const catalog = await api.listKbs();
    expect(catalog.knowledge_bases.map((k) => k.name)).toEqual(["reference", "regional"]);
  });

  it("surfaces the service's error message and field", async () => {
    const api = new ApiClient(async () =>
      jsonResponse(400, { code: 400, message: "age_months must be positive", field: "age_months" }),
    );
    const error = await api
      .predict({ id: "x", age_months: -1, poses: {}, class_label: null, anthro: null })
      .catch((e: unknown) => e);
    expect(error).toBeInstanceOf(ServiceError);
    expect((error as ServiceError).status).toBe(400);
    expect((error as ServiceError).message).toBe("age_months must be positive");
    expect((error as ServiceError).field).toBe("age_months");
  });

  it("maps 404 on kb selection verbatim", async () => {
    const api = new ApiClient(async () =>
      jsonResponse(404, { code: 404, message: "unknown knowledge base 'x'" }),
    );
    const error = await api.selectKb("x").catch((e: unknown) => e);
    expect((error as ServiceError).status).toBe(404);
    expect((error as ServiceError).message).toBe("unknown knowledge base 'x'");
  });

  it("maps transport failure to a fixed unreachable error", async () => {
    const api = new ApiClient(async () => {
      throw new TypeError("fetch failed");
    });
    const error = await api.health().catch((e: unknown) => e);
    expect(error).toBeInstanceOf(ServiceError);
    expect((error as ServiceError).status).toBe(0);
    expect((error as ServiceError).message).toBe(UNREACHABLE_MESSAGE);
  });
});
