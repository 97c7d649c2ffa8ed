/**
 * Thin fetch wrapper over the virtbiopsy service.
 *
 * The fetch implementation is injectable so tests run against mocked
 * responses; nothing here caches or transforms payloads beyond schema
 * validation.
 */

import {
  CasesResponse,
  ClinicalPayload,
  CounterfactualJob,
  DecisionAck,
  FinalizeAck,
  Prediction,
  SessionStart,
  TrialReport,
  type Decision,
  type Phase,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: unknown,
  ) {
    super(`HTTP ${status}: ${JSON.stringify(detail)}`);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const body = await res.json();
    if (!res.ok) {
      throw new ApiError(res.status, (body as { detail?: unknown }).detail ?? body);
    }
    return body;
  }

  private post(path: string, payload: unknown): Promise<unknown> {
    return this.request(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  async listCases(): Promise<ClinicalPayload[]> {
    return CasesResponse.parse(await this.request("/cases")).cases;
  }

  async clinical(caseId: string): Promise<ClinicalPayload> {
    return ClinicalPayload.parse(await this.request(`/cases/${caseId}/clinical`));
  }

  /** PNG slice bytes rendered server-side with the given window/level. */
  async slicePng(
    caseId: string,
    sliceIndex: number,
    window: number,
    level: number,
  ): Promise<{ bytes: ArrayBuffer; sliceCount: number }> {
    const url =
      `${this.baseUrl}/cases/${caseId}/volume?slice=${sliceIndex}` +
      `&window=${window}&level=${level}`;
    const res = await this.fetchImpl(url);
    if (!res.ok) {
      throw new ApiError(res.status, await res.json());
    }
    return {
      bytes: await res.arrayBuffer(),
      sliceCount: Number(res.headers.get("X-Slice-Count") ?? 0),
    };
  }

  async prediction(caseId: string): Promise<Prediction> {
    return Prediction.parse(await this.request(`/cases/${caseId}/prediction`));
  }

  async startSession(
    trialId: string,
    reader: string,
    phase: Phase,
    experience = "5-10y",
  ): Promise<SessionStart> {
    return SessionStart.parse(
      await this.post(`/trial/${trialId}/session`, { reader, phase, experience }),
    );
  }

  async postDecision(
    sessionId: string,
    caseId: string,
    decision: Decision,
    elapsedSeconds: number,
  ): Promise<number> {
    const ack = DecisionAck.parse(
      await this.post(`/session/${sessionId}/decision`, {
        case_id: caseId,
        decision,
        elapsed_seconds: elapsedSeconds,
      }),
    );
    return ack.recorded;
  }

  async finalizeSession(sessionId: string): Promise<void> {
    FinalizeAck.parse(await this.post(`/session/${sessionId}/finalize`, {}));
  }

  async startCounterfactual(caseId: string): Promise<{ jobId: string }> {
    const body = (await this.post("/counterfactual", { case_id: caseId })) as {
      job_id: string;
    };
    return { jobId: body.job_id };
  }

  async counterfactualJob(jobId: string): Promise<CounterfactualJob> {
    return CounterfactualJob.parse(await this.request(`/counterfactual/${jobId}`));
  }

  async trialReport(trialId: string): Promise<TrialReport> {
    return TrialReport.parse(await this.request(`/trial/${trialId}/report`));
  }
}
