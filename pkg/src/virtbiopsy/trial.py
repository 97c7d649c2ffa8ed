"""In-silico reader-trial harness: sessions, phase state machine, analytics.

Readers first review cases unaided, wait out a washout period, then
re-review with AI assistance. The report aggregates per-phase accuracy,
reader-vs-truth kappa, AI-alone performance and review-time statistics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import cohens_kappa

PHASES = ("unaided", "ai_assisted")
EXPERIENCE_BANDS = ("<5y", "5-10y", ">10y")

DEFAULT_WASHOUT_SECONDS = 60 * 24 * 3600  # 60 days
MAX_ELAPSED_SECONDS = 2 * 3600  # server-side sanity bound on client timing


class TrialError(ValueError):
    """Raised for phase-order or session-contract violations."""


class WashoutError(TrialError):
    """AI-assisted phase attempted before the washout deadline."""

    def __init__(self, deadline: float):
        self.deadline = deadline
        super().__init__(f"washout period not elapsed; deadline at t={deadline:.0f}")


class DuplicateDecisionError(TrialError):
    """A decision for this (session, case) was already recorded."""


@dataclass
class DecisionEntry:
    case_id: str
    decision: str  # "low" | "high"
    elapsed_seconds: float
    ai_prediction_shown: bool = False

    def __post_init__(self):
        if self.decision not in ("low", "high"):
            raise TrialError(f"decision must be low|high, got {self.decision!r}")
        if not 0 < self.elapsed_seconds < MAX_ELAPSED_SECONDS:
            raise TrialError(f"elapsed_seconds {self.elapsed_seconds} outside (0, {MAX_ELAPSED_SECONDS})")


@dataclass
class ReaderSession:
    """One reader's timed decisions within a single phase."""

    reader_id: str
    phase: str
    experience: str = "5-10y"
    entries: list[DecisionEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise TrialError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.experience not in EXPERIENCE_BANDS:
            raise TrialError(f"experience must be one of {EXPERIENCE_BANDS}")
        for e in self.entries:
            self._check_entry(e)

    def _check_entry(self, entry: DecisionEntry):
        expected = self.phase == "ai_assisted"
        if entry.ai_prediction_shown != expected:
            raise TrialError(
                f"ai_prediction_shown={entry.ai_prediction_shown} inconsistent with phase {self.phase}"
            )

    def add(self, entry: DecisionEntry):
        self._check_entry(entry)
        if any(e.case_id == entry.case_id for e in self.entries):
            raise DuplicateDecisionError(f"decision for case {entry.case_id} already recorded")
        self.entries.append(entry)

    def to_json(self) -> dict:
        return {
            "reader_id": self.reader_id,
            "phase": self.phase,
            "experience": self.experience,
            "entries": [vars(e) for e in self.entries],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ReaderSession":
        return cls(
            d["reader_id"],
            d["phase"],
            d.get("experience", "5-10y"),
            [DecisionEntry(**e) for e in d["entries"]],
        )


@dataclass
class TrialReport:
    """Aggregated per-phase and AI-alone trial analytics."""

    phases: dict  # phase -> {mean_accuracy, mean_kappa, n_readers, time stats}
    ai_accuracy: float | None = None
    ai_kappa: float | None = None
    experience_breakdown: dict = field(default_factory=dict)
    kappa_convention: str = "reader-vs-ground-truth, averaged over readers"

    def to_json(self) -> dict:
        return {
            "phases": self.phases,
            "ai_accuracy": self.ai_accuracy,
            "ai_kappa": self.ai_kappa,
            "experience_breakdown": self.experience_breakdown,
            "kappa_convention": self.kappa_convention,
        }


def _session_stats(session: ReaderSession, truth: dict[str, str]):
    decisions = [e.decision for e in session.entries]
    labels = [truth[e.case_id] for e in session.entries]
    acc = float(np.mean([d == t for d, t in zip(decisions, labels)]))
    kappa = cohens_kappa(decisions, labels)
    minutes = [e.elapsed_seconds / 60.0 for e in session.entries]
    return acc, kappa, minutes


def trial_report(sessions, truth: dict[str, str], ai_preds: dict[str, str] | None = None) -> TrialReport:
    """Aggregate reader sessions against ground truth.

    Per phase: mean reader accuracy, mean reader-vs-truth kappa, and
    review-time statistics in minutes. AI-alone accuracy/kappa computed
    from ai_preds over the truth cases when provided.
    """
    if not sessions:
        raise TrialError("no sessions to report on")
    for s in sessions:
        missing = {e.case_id for e in s.entries} - set(truth)
        if missing:
            raise TrialError(f"session {s.reader_id}/{s.phase} has cases outside truth: {sorted(missing)}")

    phases: dict[str, dict] = {}
    breakdown: dict[str, dict] = {}
    for phase in PHASES:
        phase_sessions = [s for s in sessions if s.phase == phase and s.entries]
        if not phase_sessions:
            continue
        accs, kappas, all_minutes = [], [], []
        for s in phase_sessions:
            acc, kappa, minutes = _session_stats(s, truth)
            accs.append(acc)
            kappas.append(kappa)
            all_minutes.extend(minutes)
            band = breakdown.setdefault(s.experience, {}).setdefault(phase, {"accuracies": []})
            band["accuracies"].append(acc)
        phases[phase] = {
            "mean_accuracy": float(np.mean(accs)),
            "mean_kappa": float(np.mean(kappas)),
            "n_readers": len(phase_sessions),
            "time_minutes": {
                "mean": float(np.mean(all_minutes)),
                "median": float(np.median(all_minutes)),
                "values": [float(m) for m in all_minutes],
            },
        }
    for band in breakdown.values():
        for st in band.values():
            st["mean_accuracy"] = float(np.mean(st.pop("accuracies")))

    ai_accuracy = ai_kappa = None
    if ai_preds is not None:
        cases = sorted(set(truth) & set(ai_preds))
        if cases:
            preds = [ai_preds[c] for c in cases]
            labels = [truth[c] for c in cases]
            ai_accuracy = float(np.mean([p == t for p, t in zip(preds, labels)]))
            ai_kappa = cohens_kappa(preds, labels)

    return TrialReport(phases, ai_accuracy, ai_kappa, breakdown)


@dataclass
class ReaderState:
    """Per-reader progress through the trial phase machine."""

    reader_id: str
    experience: str = "5-10y"
    unaided_done_at: float | None = None
    ai_assisted_done: bool = False


class TrialState:
    """Phase machine: unaided -> washout -> ai_assisted, per reader.

    The washout duration is configurable (seconds) so desk tests can
    exercise the machine without waiting 60 days. A clock callable is
    injectable for the same reason.
    """

    def __init__(self, trial_id: str, case_ids, washout_seconds: float = DEFAULT_WASHOUT_SECONDS, clock=time.time):
        self.trial_id = trial_id
        self.case_ids = list(case_ids)
        self.washout_seconds = float(washout_seconds)
        self.clock = clock
        self.readers: dict[str, ReaderState] = {}

    def enroll(self, reader_id: str, experience: str = "5-10y"):
        if reader_id not in self.readers:
            self.readers[reader_id] = ReaderState(reader_id, experience)
        return self.readers[reader_id]

    def washout_deadline(self, reader_id: str) -> float | None:
        r = self.readers.get(reader_id)
        if r is None or r.unaided_done_at is None:
            return None
        return r.unaided_done_at + self.washout_seconds

    def start_session(self, reader_id: str, phase: str, experience: str = "5-10y") -> ReaderSession:
        if phase not in PHASES:
            raise TrialError(f"unknown phase {phase!r}")
        r = self.enroll(reader_id, experience)
        if phase == "unaided":
            if r.unaided_done_at is not None:
                raise TrialError(f"reader {reader_id} already completed the unaided phase")
        else:
            if r.unaided_done_at is None:
                raise TrialError(f"reader {reader_id} must complete the unaided phase first")
            deadline = r.unaided_done_at + self.washout_seconds
            if self.clock() < deadline:
                raise WashoutError(deadline)
            if r.ai_assisted_done:
                raise TrialError(f"reader {reader_id} already completed the ai_assisted phase")
        return ReaderSession(reader_id, phase, r.experience)

    def finalize(self, session: ReaderSession):
        r = self.readers.get(session.reader_id)
        if r is None:
            raise TrialError(f"unknown reader {session.reader_id}")
        if session.phase == "unaided":
            if r.unaided_done_at is not None:
                raise TrialError("unaided phase already finalized")
            r.unaided_done_at = self.clock()
        else:
            if r.unaided_done_at is None or self.clock() < r.unaided_done_at + self.washout_seconds:
                raise TrialError("cannot finalize ai_assisted before unaided + washout")
            if r.ai_assisted_done:
                raise TrialError("ai_assisted phase already finalized")
            r.ai_assisted_done = True

    def to_json(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "case_ids": self.case_ids,
            "washout_seconds": self.washout_seconds,
            "readers": {
                rid: {
                    "experience": r.experience,
                    "unaided_done_at": r.unaided_done_at,
                    "ai_assisted_done": r.ai_assisted_done,
                }
                for rid, r in self.readers.items()
            },
        }

    @classmethod
    def from_json(cls, d: dict, clock=time.time) -> "TrialState":
        st = cls(d["trial_id"], d["case_ids"], d["washout_seconds"], clock)
        for rid, r in d["readers"].items():
            state = ReaderState(rid, r["experience"], r["unaided_done_at"], r["ai_assisted_done"])
            st.readers[rid] = state
        return st
