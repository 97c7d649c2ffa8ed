/**
 * Trial dashboard view model.
 *
 * Every number shown is copied verbatim from GET /trial/{id}/report;
 * the client performs no aggregation, rounding, or recomputation. A
 * trial without recorded sessions renders an empty-state message.
 */

import { ApiClient, ApiError } from "./api.js";
import type { PhaseStats, TrialReport } from "./types.js";

export interface Bar {
  label: string;
  value: number;
}

export interface TimePanel {
  phase: string;
  mean: number;
  median: number;
  values: number[];
}

export interface DashboardModel {
  kind: "dashboard";
  accuracyBars: Bar[];
  kappaBars: Bar[];
  timePanels: TimePanel[];
  kappaConvention: string;
  /** the raw service payload the dashboard was built from */
  report: TrialReport;
}

export interface EmptyState {
  kind: "empty";
  message: string;
}

const PHASE_ORDER = ["unaided", "ai_assisted"];

function orderedPhases(report: TrialReport): [string, PhaseStats][] {
  return PHASE_ORDER.filter((p) => p in report.phases).map(
    (p) => [p, report.phases[p]!] as [string, PhaseStats],
  );
}

/** Pure mapping from the report payload to chartable structures. */
export function buildDashboard(report: TrialReport): DashboardModel {
  const phases = orderedPhases(report);
  const accuracyBars: Bar[] = phases.map(([phase, stats]) => ({
    label: phase,
    value: stats.mean_accuracy,
  }));
  const kappaBars: Bar[] = phases.map(([phase, stats]) => ({
    label: phase,
    value: stats.mean_kappa,
  }));
  if (report.ai_accuracy !== null) {
    accuracyBars.push({ label: "ai_alone", value: report.ai_accuracy });
  }
  if (report.ai_kappa !== null) {
    kappaBars.push({ label: "ai_alone", value: report.ai_kappa });
  }
  const timePanels: TimePanel[] = phases.map(([phase, stats]) => ({
    phase,
    mean: stats.time_minutes.mean,
    median: stats.time_minutes.median,
    values: stats.time_minutes.values,
  }));
  return {
    kind: "dashboard",
    accuracyBars,
    kappaBars,
    timePanels,
    kappaConvention: report.kappa_convention,
    report,
  };
}

/** Fetch the report and build the model; 409 means no sessions yet. */
export async function loadDashboard(
  api: ApiClient,
  trialId: string,
): Promise<DashboardModel | EmptyState> {
  try {
    return buildDashboard(await api.trialReport(trialId));
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      return { kind: "empty", message: "no finalized sessions yet for this trial" };
    }
    throw err;
  }
}
