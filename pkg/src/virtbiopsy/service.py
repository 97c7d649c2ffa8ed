"""JSON-over-HTTP service: case browsing, predictions, counterfactual
jobs, and the reader-trial workflow.

The app is built by create_app() over a ServiceContext holding the case
store, trained classifier members, the generative model for
counterfactuals, and trial state. Trial mutations are serialized per
trial with a writer lock file and persisted under the storage root.
"""

from __future__ import annotations

import io
import json
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from filelock import FileLock
from PIL import Image
from pydantic import BaseModel

from .classifier import ClassifierState, ensemble_predict, predict_case
from .counterfactual import (
    FidelityGateError,
    default_alpha_schedule,
    generate_counterfactuals,
    heatmaps,
)
from .data import CaseStore
from .trial import (
    DecisionEntry,
    DuplicateDecisionError,
    ReaderSession,
    TrialError,
    TrialState,
    WashoutError,
    trial_report,
)
from .vaegan import VaeGanModel


@dataclass
class ServiceContext:
    """Everything the endpoints need, injectable for tests."""

    store: CaseStore
    storage_root: Path
    classifiers: list[ClassifierState] = field(default_factory=list)
    generative: VaeGanModel | None = None
    fidelity_threshold: float = 0.1
    trials: dict[str, TrialState] = field(default_factory=dict)
    sessions: dict[str, tuple[str, ReaderSession]] = field(default_factory=dict)
    jobs: dict[str, dict] = field(default_factory=dict)
    clock: object = time.time

    def __post_init__(self):
        self.storage_root = Path(self.storage_root)

    def trial_lock(self, trial_id: str) -> FileLock:
        locks = self.storage_root / "locks"
        locks.mkdir(parents=True, exist_ok=True)
        return FileLock(str(locks / f"trial-{trial_id}.lock"))

    def persist_trial(self, trial_id: str):
        trial = self.trials[trial_id]
        d = self.storage_root / "trials" / trial_id
        d.mkdir(parents=True, exist_ok=True)
        (d / "state.json").write_text(json.dumps(trial.to_json(), indent=2))
        rows = [
            {"session_id": sid, **sess.to_json()}
            for sid, (tid, sess) in self.sessions.items()
            if tid == trial_id
        ]
        (d / "sessions.jsonl").write_text("\n".join(json.dumps(r) for r in rows))


class SessionRequest(BaseModel):
    reader: str
    phase: str
    experience: str = "5-10y"


class DecisionRequest(BaseModel):
    case_id: str
    decision: str
    elapsed_seconds: float


class CounterfactualRequest(BaseModel):
    case_id: str
    alpha_schedule: list[float] | None = None
    mode: str = "linear"


def _slice_png(grid: np.ndarray, window: float, level: float) -> bytes:
    lo, hi = level - window / 2.0, level + window / 2.0
    if hi <= lo:
        raise HTTPException(422, detail="window must be positive")
    img = np.clip((grid.astype(np.float32) - lo) / (hi - lo), 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray((img.T * 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def _clinical_payload(case) -> dict:
    rec = case.record
    return {
        "case_id": rec.case_id,
        "age": rec.age,
        "psa": rec.psa,
        "psa_density": rec.psa_density,
    }


def create_app(ctx: ServiceContext) -> FastAPI:
    app = FastAPI(title="virtbiopsy", version="0.1.0")

    def get_case(case_id: str):
        if case_id not in ctx.store:
            raise HTTPException(404, detail=f"unknown case {case_id!r}")
        return ctx.store.get(case_id)

    def get_trial(trial_id: str) -> TrialState:
        if trial_id not in ctx.trials:
            raise HTTPException(404, detail=f"unknown trial {trial_id!r}")
        return ctx.trials[trial_id]

    @app.get("/cases")
    def list_cases():
        return {"cases": [_clinical_payload(ctx.store.get(cid)) for cid in ctx.store.ids()]}

    @app.get("/cases/{case_id}/volume")
    def case_volume(case_id: str, slice: int = 0, window: float = 1.5, level: float = 0.6,
                    format: str = "png"):
        case = get_case(case_id)
        data = case.volume.data
        if not 0 <= slice < data.shape[2]:
            raise HTTPException(422, detail=f"slice must be in [0, {data.shape[2] - 1}]")
        plane = data[:, :, slice]
        if format == "raw":
            return {"case_id": case_id, "slice": slice, "shape": list(plane.shape),
                    "n_slices": data.shape[2], "values": plane.tolist()}
        if format != "png":
            raise HTTPException(422, detail="format must be png|raw")
        return Response(content=_slice_png(plane, window, level), media_type="image/png",
                        headers={"X-Slice-Count": str(data.shape[2])})

    @app.get("/cases/{case_id}/clinical")
    def case_clinical(case_id: str):
        return _clinical_payload(get_case(case_id))

    @app.get("/cases/{case_id}/prediction")
    def case_prediction(case_id: str):
        case = get_case(case_id)
        if not ctx.classifiers:
            raise HTTPException(409, detail="no trained classifiers loaded")
        members = [predict_case(case, st) for st in ctx.classifiers]
        ens = ensemble_predict(members)
        return {
            "case_id": case_id,
            "probability": ens.probability,
            "logit": ens.logit,
            "label": "high" if ens.probability >= 0.5 else "low",
            "members": [
                {"tag": m.model_tag, "probability": m.probability,
                 "patch_scale": list(m.patch_scale) if m.patch_scale else None}
                for m in members
            ],
        }

    def _clf_logit_fn(state: ClassifierState):
        net = state.model()

        def fn(x):
            return net(x)

        return fn

    @app.post("/counterfactual")
    def start_counterfactual(req: CounterfactualRequest):
        case = get_case(req.case_id)
        if ctx.generative is None or not ctx.classifiers:
            raise HTTPException(409, detail="counterfactual requires a trained generative model and classifier")
        state = ctx.classifiers[0]
        net = state.model()
        patch_size = tuple(ctx.generative.cfg.patch_size)
        from .volume import crop_centered, mask_centroid

        center = mask_centroid(case.gland)
        x = crop_centered(case.volume.data, center, patch_size)

        def clf_logit_fn(t):
            return net(t)

        def fidelity_fn(arr):
            t = torch.from_numpy(np.asarray(arr, dtype=np.float32))[None, None]
            with torch.no_grad():
                return float(torch.sigmoid(net(t)))

        sched = req.alpha_schedule or default_alpha_schedule()
        try:
            job = generate_counterfactuals(
                x, ctx.generative, clf_logit_fn, sched,
                fidelity_predict_fn=fidelity_fn,
                fidelity_threshold=ctx.fidelity_threshold,
                mode=req.mode, case_id=req.case_id,
            )
        except FidelityGateError as exc:
            raise HTTPException(422, detail={
                "error": "fidelity gate failed",
                "delta_p": exc.delta_p,
                "threshold": exc.threshold,
            })
        except ValueError as exc:
            raise HTTPException(422, detail=str(exc))

        job_id = uuid.uuid4().hex[:12]
        job_dir = ctx.storage_root / "counterfactuals" / job_id
        job.save(job_dir, spacing=case.volume.spacing)
        hm = heatmaps(job, x)
        hm.save(job_dir / "heatmaps", spacing=case.volume.spacing)
        ctx.jobs[job_id] = {"job": job, "dir": str(job_dir)}
        return {"job_id": job_id, "case_id": req.case_id, "n_samples": len(job.alphas)}

    @app.get("/counterfactual/{job_id}")
    def counterfactual_trace(job_id: str):
        if job_id not in ctx.jobs:
            raise HTTPException(404, detail=f"unknown counterfactual job {job_id!r}")
        entry = ctx.jobs[job_id]
        job = entry["job"]
        d = Path(entry["dir"])
        return {
            "job_id": job_id,
            "trace": job.trace(),
            "heatmaps": {
                "aggregate": str(d / "heatmaps" / "aggregate.nii.gz"),
                "sequential": sorted(str(p) for p in (d / "heatmaps").glob("sequential_*.nii.gz")),
            },
            "counterfactuals": sorted(str(p) for p in d.glob("cf_*.nii.gz")),
        }

    @app.post("/trial/{trial_id}/session")
    def start_session(trial_id: str, req: SessionRequest):
        trial = get_trial(trial_id)
        with ctx.trial_lock(trial_id):
            try:
                session = trial.start_session(req.reader, req.phase, req.experience)
            except WashoutError as exc:
                raise HTTPException(409, detail={
                    "error": "washout period not elapsed",
                    "washout_deadline": exc.deadline,
                })
            except TrialError as exc:
                raise HTTPException(409, detail=str(exc))
            sid = uuid.uuid4().hex[:12]
            ctx.sessions[sid] = (trial_id, session)
            ctx.persist_trial(trial_id)
        return {"session_id": sid, "reader": req.reader, "phase": req.phase,
                "case_ids": trial.case_ids}

    def get_session(sid: str):
        if sid not in ctx.sessions:
            raise HTTPException(404, detail=f"unknown session {sid!r}")
        return ctx.sessions[sid]

    @app.post("/session/{sid}/decision")
    def post_decision(sid: str, req: DecisionRequest):
        trial_id, session = get_session(sid)
        trial = get_trial(trial_id)
        if req.case_id not in trial.case_ids:
            raise HTTPException(404, detail=f"case {req.case_id!r} is not in trial {trial_id!r}")
        entry_kwargs = dict(
            case_id=req.case_id, decision=req.decision,
            elapsed_seconds=req.elapsed_seconds,
            ai_prediction_shown=session.phase == "ai_assisted",
        )
        with ctx.trial_lock(trial_id):
            try:
                session.add(DecisionEntry(**entry_kwargs))
            except DuplicateDecisionError as exc:
                raise HTTPException(409, detail=str(exc))
            except TrialError as exc:
                raise HTTPException(422, detail=str(exc))
            ctx.persist_trial(trial_id)
        return {"session_id": sid, "recorded": len(session.entries)}

    @app.post("/session/{sid}/finalize")
    def finalize_session(sid: str):
        trial_id, session = get_session(sid)
        trial = get_trial(trial_id)
        with ctx.trial_lock(trial_id):
            try:
                trial.finalize(session)
            except TrialError as exc:
                raise HTTPException(409, detail=str(exc))
            ctx.persist_trial(trial_id)
        return {"session_id": sid, "phase": session.phase, "finalized": True}

    @app.get("/trial/{trial_id}/report")
    def report(trial_id: str):
        trial = get_trial(trial_id)
        sessions = [s for tid, s in ctx.sessions.values() if tid == trial_id and s.entries]
        if not sessions:
            raise HTTPException(409, detail="no recorded sessions for this trial")
        truth = {cid: ctx.store.get(cid).record.risk for cid in trial.case_ids}
        ai_preds = None
        if ctx.classifiers:
            ai_preds = {}
            for cid in trial.case_ids:
                members = [predict_case(ctx.store.get(cid), st) for st in ctx.classifiers]
                ai_preds[cid] = "high" if ensemble_predict(members).probability >= 0.5 else "low"
        return trial_report(sessions, truth, ai_preds).to_json()

    return app


def load_context(storage_root, washout_seconds: float | None = None) -> ServiceContext:
    """Assemble a ServiceContext from artifacts under a storage root.

    Expects cases under <root>/cases, classifier members under
    <root>/classifiers/*.json(.pt), an optional generative model at
    <root>/vaegan, and trials under <root>/trials/<id>/state.json.
    """
    root = Path(storage_root)
    store = CaseStore.load(root / "cases")
    classifiers = []
    clf_dir = root / "classifiers"
    if clf_dir.is_dir():
        for meta in sorted(clf_dir.glob("*.json")):
            classifiers.append(ClassifierState.load(meta.with_suffix("")))
    generative = None
    if (root / "vaegan.json").exists():
        generative = VaeGanModel.load(root / "vaegan")
    ctx = ServiceContext(store=store, storage_root=root, classifiers=classifiers,
                         generative=generative)
    trials_dir = root / "trials"
    if trials_dir.is_dir():
        for state_file in trials_dir.glob("*/state.json"):
            st = TrialState.from_json(json.loads(state_file.read_text()))
            if washout_seconds is not None:
                st.washout_seconds = washout_seconds
            ctx.trials[st.trial_id] = st
            sessions_file = state_file.parent / "sessions.jsonl"
            if sessions_file.exists():
                for line in sessions_file.read_text().splitlines():
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    sid = row.pop("session_id")
                    ctx.sessions[sid] = (st.trial_id, ReaderSession.from_json(row))
    return ctx
