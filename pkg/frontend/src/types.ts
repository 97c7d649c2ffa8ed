/**
 * Typed contracts for the virtbiopsy HTTP API.
 *
 * Every schema mirrors a service response verbatim; the UI layer never
 * reshapes or recomputes the numbers it receives.
 */

import { z } from "zod";

export const ClinicalPayload = z.object({
  case_id: z.string(),
  age: z.number(),
  psa: z.number(),
  psa_density: z.number().nullable(),
});
export type ClinicalPayload = z.infer<typeof ClinicalPayload>;

export const CasesResponse = z.object({ cases: z.array(ClinicalPayload) });

export const Prediction = z.object({
  case_id: z.string(),
  probability: z.number(),
  logit: z.number(),
  label: z.enum(["low", "high"]),
  members: z.array(
    z.object({
      tag: z.string(),
      probability: z.number(),
      patch_scale: z.array(z.number()).nullable(),
    }),
  ),
});
export type Prediction = z.infer<typeof Prediction>;

export const SessionStart = z.object({
  session_id: z.string(),
  reader: z.string(),
  phase: z.enum(["unaided", "ai_assisted"]),
  case_ids: z.array(z.string()),
});
export type SessionStart = z.infer<typeof SessionStart>;

export const DecisionAck = z.object({
  session_id: z.string(),
  recorded: z.number(),
});

export const FinalizeAck = z.object({
  session_id: z.string(),
  phase: z.string(),
  finalized: z.boolean(),
});

export const WashoutDetail = z.object({
  error: z.string(),
  washout_deadline: z.number(),
});
export type WashoutDetail = z.infer<typeof WashoutDetail>;

export const FidelityDetail = z.object({
  error: z.string(),
  delta_p: z.number(),
  threshold: z.number(),
});
export type FidelityDetail = z.infer<typeof FidelityDetail>;

export const CounterfactualTrace = z.object({
  case_id: z.string(),
  alphas: z.array(z.number()),
  predictions: z.array(z.number()),
  bounds: z.object({
    alpha_lower: z.number().nullable(),
    alpha_upper: z.number().nullable(),
  }),
  fidelity: z.number(),
  shift_threshold: z.number(),
  mode: z.string(),
});
export type CounterfactualTrace = z.infer<typeof CounterfactualTrace>;

export const CounterfactualJob = z.object({
  job_id: z.string(),
  trace: CounterfactualTrace,
  heatmaps: z.object({
    aggregate: z.string(),
    sequential: z.array(z.string()),
  }),
  counterfactuals: z.array(z.string()),
});
export type CounterfactualJob = z.infer<typeof CounterfactualJob>;

const PhaseStats = z.object({
  mean_accuracy: z.number(),
  mean_kappa: z.number(),
  n_readers: z.number(),
  time_minutes: z.object({
    mean: z.number(),
    median: z.number(),
    values: z.array(z.number()),
  }),
});
export type PhaseStats = z.infer<typeof PhaseStats>;

export const TrialReport = z.object({
  phases: z.record(z.string(), PhaseStats),
  ai_accuracy: z.number().nullable(),
  ai_kappa: z.number().nullable(),
  experience_breakdown: z.record(
    z.string(),
    z.record(z.string(), z.object({ mean_accuracy: z.number() })),
  ),
  kappa_convention: z.string(),
});
export type TrialReport = z.infer<typeof TrialReport>;

export type Decision = "low" | "high";
export type Phase = "unaided" | "ai_assisted";
