import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { ExplorerState, openExplorer } from "../src/explorer.js";
import type { CounterfactualJob } from "../src/types.js";
import { MockServer } from "./helpers.js";

const JOB: CounterfactualJob = {
  job_id: "j1",
  trace: {
    case_id: "c000",
    alphas: [-1, -0.5, 0, 0.5, 1],
    predictions: [0.21, 0.33, 0.48, 0.62, 0.79],
    bounds: { alpha_lower: -0.5, alpha_upper: 0.5 },
    fidelity: 0.012,
    shift_threshold: 0.05,
    mode: "linear",
  },
  heatmaps: { aggregate: "j1/heatmaps/aggregate.nii.gz", sequential: [] },
  counterfactuals: [0, 1, 2, 3, 4].map((i) => `j1/cf_0${i}.nii.gz`),
};

describe("counterfactual explorer", () => {
  it("slider readouts equal the stored trace at every position", () => {
    const state = new ExplorerState(JOB);
    for (let i = 0; i < JOB.trace.alphas.length; i++) {
      state.snapTo(JOB.trace.alphas[i]!);
      expect(state.alpha).toBe(JOB.trace.alphas[i]);
      expect(state.prediction).toBe(JOB.trace.predictions[i]);
      expect(state.counterfactualRef).toBe(JOB.counterfactuals[i]);
    }
  });

  it("opens at alpha zero showing the reconstruction prediction", () => {
    const state = new ExplorerState(JOB);
    expect(state.alpha).toBe(0);
    expect(state.prediction).toBe(JOB.trace.predictions[2]);
  });

  it("snaps arbitrary slider values to the schedule", () => {
    const state = new ExplorerState(JOB);
    expect(state.snapTo(0.74)).toBe(0.5);
    expect(state.snapTo(0.76)).toBe(1);
    expect(state.snapTo(-10)).toBe(-1);
  });

  it("readout crosses 0.5 exactly when the stored trace does", () => {
    const state = new ExplorerState(JOB);
    const readouts = JOB.trace.alphas.map((a) => {
      state.snapTo(a);
      return state.prediction;
    });
    const crossesInTrace = JOB.trace.predictions.some((p, i) =>
      i > 0 ? (JOB.trace.predictions[i - 1]! - 0.5) * (p - 0.5) < 0 : false,
    );
    const crossesInUi = readouts.some((p, i) => (i > 0 ? (readouts[i - 1]! - 0.5) * (p - 0.5) < 0 : false));
    expect(crossesInUi).toBe(crossesInTrace);
    expect(crossesInUi).toBe(true);
  });

  it("heatmap off composites the plain slice only; opacity is clamped", () => {
    const state = new ExplorerState(JOB);
    expect(state.viewportLayers()).toEqual([{ source: JOB.counterfactuals[2], opacity: 1 }]);
    state.heatmapVisible = true;
    state.setOpacity(2.5);
    expect(state.viewportLayers()).toEqual([
      { source: JOB.counterfactuals[2], opacity: 1 },
      { source: JOB.heatmaps.aggregate, opacity: 1 },
    ]);
  });

  it("fidelity-gate rejection becomes a notice carrying the shift", async () => {
    const server = new MockServer();
    server.on("POST", "/counterfactual", {
      status: 422,
      body: { detail: { error: "fidelity gate failed", delta_p: 0.184, threshold: 0.1 } },
    });
    const result = await openExplorer(new ApiClient("http://svc", server.fetch), "c000");
    expect(result instanceof ExplorerState).toBe(false);
    if (!(result instanceof ExplorerState)) {
      expect(result.kind).toBe("fidelity");
      expect(result.deltaP).toBe(0.184);
      expect(result.threshold).toBe(0.1);
    }
  });

  it("loads a stored job over the API", async () => {
    const server = new MockServer();
    server.on("POST", "/counterfactual", {
      status: 200,
      body: { job_id: "j1", case_id: "c000", n_samples: 5 },
    });
    server.on("GET", "/counterfactual/j1", { status: 200, body: JOB });
    const result = await openExplorer(new ApiClient("http://svc", server.fetch), "c000");
    expect(result instanceof ExplorerState).toBe(true);
    if (result instanceof ExplorerState) {
      expect(result.alphas).toEqual(JOB.trace.alphas);
    }
  });
});
