export { ApiClient, ApiError, type FetchLike } from "./api.js";
export { FocusTimer, type Clock } from "./timer.js";
export {
  ReadingFlow,
  renderCaseView,
  collectNodes,
  type CaseViewState,
  type FlowSnapshot,
  type SubmittedDecision,
  type ViewNode,
  type WashoutBanner,
} from "./caseReading.js";
export { ExplorerState, openExplorer, type FidelityNotice } from "./explorer.js";
export {
  buildDashboard,
  loadDashboard,
  type Bar,
  type DashboardModel,
  type EmptyState,
  type TimePanel,
} from "./dashboard.js";
export * from "./types.js";
