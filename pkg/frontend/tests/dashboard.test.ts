import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { buildDashboard, loadDashboard } from "../src/dashboard.js";
import { MockServer } from "./helpers.js";
import reportFixture from "./fixtures/report.json";
import singlePhaseFixture from "./fixtures/report_single_phase.json";

function client(server: MockServer): ApiClient {
  return new ApiClient("http://svc", server.fetch);
}

describe("trial dashboard", () => {
  it("values byte-equal the /trial report JSON under mocked responses", async () => {
    const server = new MockServer();
    server.on("GET", "/trial/t1/report", { status: 200, body: reportFixture });
    const model = await loadDashboard(client(server), "t1");
    expect(model.kind).toBe("dashboard");
    if (model.kind !== "dashboard") return;

    // the retained payload is byte-identical to what the service sent
    expect(JSON.stringify(model.report)).toBe(JSON.stringify(reportFixture));

    // every chart value is a verbatim copy of a report field
    const phases = reportFixture.phases as Record<
      string,
      { mean_accuracy: number; mean_kappa: number; time_minutes: { mean: number; median: number; values: number[] } }
    >;
    for (const bar of model.accuracyBars) {
      const expected = bar.label === "ai_alone" ? reportFixture.ai_accuracy : phases[bar.label]!.mean_accuracy;
      expect(JSON.stringify(bar.value)).toBe(JSON.stringify(expected));
    }
    for (const bar of model.kappaBars) {
      const expected = bar.label === "ai_alone" ? reportFixture.ai_kappa : phases[bar.label]!.mean_kappa;
      expect(JSON.stringify(bar.value)).toBe(JSON.stringify(expected));
    }
    for (const panel of model.timePanels) {
      expect(JSON.stringify({ mean: panel.mean, median: panel.median, values: panel.values })).toBe(
        JSON.stringify(phases[panel.phase]!.time_minutes),
      );
    }
  });

  it("renders the constructed accuracy and time deltas", () => {
    const model = buildDashboard(reportFixture);
    const acc = Object.fromEntries(model.accuracyBars.map((b) => [b.label, b.value]));
    expect(acc.unaided).toBe(0.72);
    expect(acc.ai_assisted).toBe(0.77);
    expect(acc.ai_alone).toBe(0.8);
    const times = Object.fromEntries(model.timePanels.map((p) => [p.phase, p.mean]));
    expect(times.unaided).toBeCloseTo(5.3, 12);
    expect(times.ai_assisted).toBeCloseTo(3.1, 12);
  });

  it("charts only the phases present in the report", () => {
    const model = buildDashboard(singlePhaseFixture);
    expect(model.accuracyBars.map((b) => b.label)).toEqual(["unaided"]);
    expect(model.timePanels.map((p) => p.phase)).toEqual(["unaided"]);
  });

  it("shows an empty state when the trial has no sessions", async () => {
    const server = new MockServer();
    server.on("GET", "/trial/t1/report", {
      status: 409,
      body: { detail: "no recorded sessions for this trial" },
    });
    const model = await loadDashboard(client(server), "t1");
    expect(model.kind).toBe("empty");
  });
});
