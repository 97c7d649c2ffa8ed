/**
 * Timed case reading across trial phases.
 *
 * One ReadingFlow per active session. Each opened case gets a view
 * state with slice navigation, window/level, overlay toggles and a
 * focused-time timer; a decision is posted to the service exactly once
 * per case. In the unaided phase no AI prediction is ever fetched or
 * rendered. All state is snapshot-serializable so a page reload cannot
 * re-post decisions that already went through.
 */

import { ApiClient, ApiError } from "./api.js";
import { FocusTimer, type Clock } from "./timer.js";
import { WashoutDetail, type Decision, type Phase, type Prediction } from "./types.js";

export interface CaseViewState {
  caseId: string;
  sliceIndex: number;
  sliceCount: number;
  window: number;
  level: number;
  overlays: { gland: boolean; heatmap: boolean };
  phaseBanner: string;
  timer: FocusTimer;
}

export interface WashoutBanner {
  kind: "washout";
  deadline: number;
  message: string;
}

/** Minimal render-tree node; tests walk this instead of a real DOM. */
export interface ViewNode {
  kind: string;
  text?: string;
  children?: ViewNode[];
}

export interface SubmittedDecision {
  caseId: string;
  decision: Decision;
  elapsedSeconds: number;
}

export interface FlowSnapshot {
  sessionId: string;
  phase: Phase;
  caseIds: string[];
  submitted: SubmittedDecision[];
}

export class ReadingFlow {
  sessionId = "";
  phase: Phase = "unaided";
  caseIds: string[] = [];
  banner: WashoutBanner | null = null;
  private submitted = new Map<string, SubmittedDecision>();
  private views = new Map<string, CaseViewState>();

  constructor(
    private readonly api: ApiClient,
    private readonly trialId: string,
    private readonly clock: Clock = () => Date.now(),
  ) {}

  /** Start a session; a washout rejection becomes a blocking banner. */
  async start(reader: string, phase: Phase, experience = "5-10y"): Promise<boolean> {
    this.banner = null;
    try {
      const s = await this.api.startSession(this.trialId, reader, phase, experience);
      this.sessionId = s.session_id;
      this.phase = s.phase;
      this.caseIds = s.case_ids;
      return true;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        const washout = WashoutDetail.safeParse(err.detail);
        if (washout.success) {
          this.banner = {
            kind: "washout",
            deadline: washout.data.washout_deadline,
            message: `washout period not elapsed; next phase opens at ${washout.data.washout_deadline}`,
          };
          return false;
        }
      }
      throw err;
    }
  }

  /** Open a case: timer starts immediately, decision enabled while it runs. */
  openCase(caseId: string, sliceCount: number): CaseViewState {
    if (!this.caseIds.includes(caseId)) {
      throw new Error(`case ${caseId} is not part of this session`);
    }
    const existing = this.views.get(caseId);
    if (existing) {
      return existing;
    }
    const timer = new FocusTimer(this.clock);
    timer.start();
    const view: CaseViewState = {
      caseId,
      sliceIndex: 0,
      sliceCount,
      window: 1.5,
      level: 0.6,
      overlays: { gland: false, heatmap: false },
      phaseBanner: this.phase === "unaided" ? "Phase 1: unaided" : "Phase 2: AI-assisted",
      timer,
    };
    this.views.set(caseId, view);
    return view;
  }

  scrollSlice(view: CaseViewState, delta: number): void {
    view.sliceIndex = Math.min(Math.max(view.sliceIndex + delta, 0), view.sliceCount - 1);
  }

  decisionEnabled(view: CaseViewState): boolean {
    return view.timer.running && !this.submitted.has(view.caseId);
  }

  /**
   * The AI prediction is only ever requested in the assisted phase; the
   * unaided phase must not touch the endpoint at all.
   */
  async aiPrediction(caseId: string): Promise<Prediction | null> {
    if (this.phase !== "ai_assisted") {
      return null;
    }
    return this.api.prediction(caseId);
  }

  /**
   * Submit exactly one decision per case. A repeat submit is a no-op
   * returning the stored decision; no second request is fired.
   */
  async submitDecision(view: CaseViewState, decision: Decision): Promise<SubmittedDecision> {
    const prior = this.submitted.get(view.caseId);
    if (prior) {
      return prior;
    }
    const elapsedSeconds = view.timer.stop();
    if (!(elapsedSeconds > 0)) {
      throw new Error("cannot submit a decision with non-positive elapsed time");
    }
    await this.api.postDecision(this.sessionId, view.caseId, decision, elapsedSeconds);
    const record: SubmittedDecision = { caseId: view.caseId, decision, elapsedSeconds };
    this.submitted.set(view.caseId, record);
    return record;
  }

  async finalize(): Promise<void> {
    await this.api.finalizeSession(this.sessionId);
  }

  decisions(): SubmittedDecision[] {
    return [...this.submitted.values()];
  }

  /** Serializable snapshot for reload survival. */
  snapshot(): FlowSnapshot {
    return {
      sessionId: this.sessionId,
      phase: this.phase,
      caseIds: [...this.caseIds],
      submitted: this.decisions(),
    };
  }

  static restore(api: ApiClient, trialId: string, snap: FlowSnapshot, clock?: Clock): ReadingFlow {
    const flow = new ReadingFlow(api, trialId, clock);
    flow.sessionId = snap.sessionId;
    flow.phase = snap.phase;
    flow.caseIds = [...snap.caseIds];
    for (const d of snap.submitted) {
      flow.submitted.set(d.caseId, d);
    }
    return flow;
  }
}

/**
 * Build the case view render tree. The AI element exists only in the
 * assisted phase; the unaided tree contains no AI node of any kind.
 */
export function renderCaseView(
  flow: ReadingFlow,
  view: CaseViewState,
  prediction: Prediction | null,
  opts: { revealProbability?: boolean } = {},
): ViewNode {
  const children: ViewNode[] = [
    { kind: "phase-banner", text: view.phaseBanner },
    { kind: "slice-viewport", text: `${view.caseId}#${view.sliceIndex}` },
    { kind: "clinical-panel" },
    {
      kind: "decision-controls",
      text: flow.decisionEnabled(view) ? "enabled" : "disabled",
    },
  ];
  if (flow.phase === "ai_assisted" && prediction) {
    children.splice(3, 0, {
      kind: "ai-assist",
      text: opts.revealProbability
        ? `${prediction.label} (${prediction.probability.toFixed(3)})`
        : prediction.label,
    });
  }
  return { kind: "case-view", children };
}

export function collectNodes(root: ViewNode, kind: string): ViewNode[] {
  const hits: ViewNode[] = [];
  const walk = (n: ViewNode) => {
    if (n.kind === kind) {
      hits.push(n);
    }
    n.children?.forEach(walk);
  };
  walk(root);
  return hits;
}
