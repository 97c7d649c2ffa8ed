/**
 * Interactive counterfactual explorer.
 *
 * The alpha slider snaps to the alphas of the stored job trace and the
 * prediction readout is looked up from that trace verbatim; the client
 * never re-runs the model. Heatmap overlay is toggleable with an
 * opacity control, and a fidelity-gate rejection surfaces the
 * probability shift from the service error.
 */

import { ApiClient, ApiError } from "./api.js";
import { FidelityDetail, type CounterfactualJob } from "./types.js";

export interface FidelityNotice {
  kind: "fidelity";
  deltaP: number;
  threshold: number;
  message: string;
}

export class ExplorerState {
  alphaIndex: number;
  sliceIndex = 0;
  heatmapVisible = false;
  heatmapOpacity = 0.5;

  constructor(readonly job: CounterfactualJob) {
    if (job.trace.alphas.length !== job.trace.predictions.length) {
      throw new Error("trace alphas and predictions differ in length");
    }
    const zero = job.trace.alphas.indexOf(0);
    if (zero < 0) {
      throw new Error("trace must include alpha = 0");
    }
    this.alphaIndex = zero;
  }

  get alphas(): number[] {
    return this.job.trace.alphas;
  }

  get alpha(): number {
    return this.alphas[this.alphaIndex]!;
  }

  /** Live prediction readout: the stored trace value for the current alpha. */
  get prediction(): number {
    return this.job.trace.predictions[this.alphaIndex]!;
  }

  /** Path of the counterfactual volume shown at the current alpha. */
  get counterfactualRef(): string {
    return this.job.counterfactuals[this.alphaIndex]!;
  }

  /** Snap a raw slider value to the nearest alpha on the schedule. */
  snapTo(value: number): number {
    let best = 0;
    for (let i = 1; i < this.alphas.length; i++) {
      if (Math.abs(this.alphas[i]! - value) < Math.abs(this.alphas[best]! - value)) {
        best = i;
      }
    }
    this.alphaIndex = best;
    return this.alpha;
  }

  setOpacity(value: number): void {
    this.heatmapOpacity = Math.min(Math.max(value, 0), 1);
  }

  /**
   * What the viewport composites: the plain slice reference when the
   * overlay is off, otherwise slice + heatmap at the chosen opacity.
   */
  viewportLayers(): { source: string; opacity: number }[] {
    const layers = [{ source: this.counterfactualRef, opacity: 1 }];
    if (this.heatmapVisible) {
      layers.push({ source: this.job.heatmaps.aggregate, opacity: this.heatmapOpacity });
    }
    return layers;
  }
}

/**
 * Request a counterfactual job for a case. A fidelity-gate rejection
 * (422) is returned as an explanatory notice rather than thrown.
 */
export async function openExplorer(
  api: ApiClient,
  caseId: string,
): Promise<ExplorerState | FidelityNotice> {
  try {
    const { jobId } = await api.startCounterfactual(caseId);
    return new ExplorerState(await api.counterfactualJob(jobId));
  } catch (err) {
    if (err instanceof ApiError && err.status === 422) {
      const parsed = FidelityDetail.safeParse(err.detail);
      if (parsed.success) {
        return {
          kind: "fidelity",
          deltaP: parsed.data.delta_p,
          threshold: parsed.data.threshold,
          message:
            `reconstruction fidelity gate failed: prediction shift ` +
            `${parsed.data.delta_p} exceeds ${parsed.data.threshold}`,
        };
      }
    }
    throw err;
  }
}
