import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from virtbiopsy.classifier import TrainConfig, ensemble_predict, predict_case, train_classifier
from virtbiopsy.data import generate_dataset
from virtbiopsy.phantom import PhantomParams, build_manifest
from virtbiopsy.service import ServiceContext, create_app, load_context
from virtbiopsy.trial import TrialState, trial_report
from virtbiopsy.vaegan import VaeGanConfig, VaeGanModel


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t


def tiny_params():
    return PhantomParams(grid_size=(16, 16, 8), gland_semi_axes=(6.0, 5.0, 8.0),
                         lesion_radius_range=(3.0, 4.0), high_risk_radius=3.0,
                         center_jitter=0.5)


@pytest.fixture(scope="module")
def backend(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    store = generate_dataset(8, seed=31, base_params=tiny_params())
    manifest = build_manifest(store.records(), (0.5, 0.25, 0.25), rng_seed=0)
    cfg = dict(epochs=1, batch_size=4, accum_steps=1, patch_size=(16, 16, 8),
               target_spacing=(1.0, 1.0, 3.0), encoder_width=2,
               encoder_feature_dim=8, head_hidden=8)
    members = [
        train_classifier(manifest, store, TrainConfig(**cfg, rng_seed=s), "foundation", "image_only")
        for s in (0, 1, 2)
    ]
    generative = VaeGanModel(VaeGanConfig(patch_size=(16, 16, 8), latent_dim=4,
                                          width=4, disc_width=4, rng_seed=0))
    return root, store, members, generative


@pytest.fixture()
def ctx(backend, tmp_path):
    root, store, members, generative = backend
    clock = FakeClock()
    context = ServiceContext(store=store, storage_root=tmp_path, classifiers=members,
                             generative=generative, clock=clock)
    trial = TrialState("trial-1", store.ids()[:4], washout_seconds=100.0, clock=clock)
    context.trials["trial-1"] = trial
    return context, clock


@pytest.fixture()
def client(ctx):
    context, _ = ctx
    return TestClient(create_app(context))


class TestCaseEndpoints:
    def test_list_cases(self, client, backend):
        _, store, _, _ = backend
        body = client.get("/cases").json()
        assert [c["case_id"] for c in body["cases"]] == store.ids()
        assert all("age" in c and "psa" in c for c in body["cases"])
        assert all("risk" not in c and "ggg" not in c for c in body["cases"])

    def test_volume_png_slice(self, client, backend):
        _, store, _, _ = backend
        cid = store.ids()[0]
        r = client.get(f"/cases/{cid}/volume", params={"slice": 3})
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        img = Image.open(io.BytesIO(r.content))
        assert img.size == (16, 16)
        assert int(r.headers["X-Slice-Count"]) == 8

    def test_volume_window_level_applied(self, client, backend):
        _, store, _, _ = backend
        cid = store.ids()[0]
        narrow = client.get(f"/cases/{cid}/volume", params={"slice": 3, "window": 0.01, "level": 0.6})
        wide = client.get(f"/cases/{cid}/volume", params={"slice": 3, "window": 3.0, "level": 0.6})
        a = np.asarray(Image.open(io.BytesIO(narrow.content)))
        b = np.asarray(Image.open(io.BytesIO(wide.content)))
        assert not np.array_equal(a, b)

    def test_volume_raw_grid(self, client, backend):
        _, store, _, _ = backend
        cid = store.ids()[0]
        body = client.get(f"/cases/{cid}/volume", params={"slice": 2, "format": "raw"}).json()
        grid = np.array(body["values"], dtype=np.float32)
        np.testing.assert_allclose(grid, store.get(cid).volume.data[:, :, 2], atol=1e-6)

    def test_bad_slice_index(self, client, backend):
        _, store, _, _ = backend
        assert client.get(f"/cases/{store.ids()[0]}/volume", params={"slice": 99}).status_code == 422

    def test_unknown_case_404(self, client):
        assert client.get("/cases/nope/volume").status_code == 404
        assert client.get("/cases/nope/clinical").status_code == 404
        assert client.get("/cases/nope/prediction").status_code == 404

    def test_clinical_payload(self, client, backend):
        _, store, _, _ = backend
        cid = store.ids()[0]
        body = client.get(f"/cases/{cid}/clinical").json()
        rec = store.get(cid).record
        assert body == {"case_id": cid, "age": rec.age, "psa": rec.psa,
                        "psa_density": rec.psa_density}


class TestPrediction:
    def test_ensemble_is_member_mean(self, client, backend):
        _, store, members, _ = backend
        cid = store.ids()[0]
        body = client.get(f"/cases/{cid}/prediction").json()
        expected = ensemble_predict([predict_case(store.get(cid), st) for st in members])
        assert body["probability"] == pytest.approx(expected.probability, abs=1e-9)
        assert len(body["members"]) == 3
        member_mean = np.mean([m["probability"] for m in body["members"]])
        assert body["probability"] == pytest.approx(member_mean, abs=1e-9)


class TestCounterfactualEndpoints:
    def test_job_lifecycle(self, ctx, backend):
        context, _ = ctx
        context.fidelity_threshold = 1.0  # force the gate open
        client = TestClient(create_app(context))
        _, store, _, _ = backend
        cid = store.ids()[0]
        r = client.post("/counterfactual", json={"case_id": cid})
        assert r.status_code == 200
        job_id = r.json()["job_id"]
        body = client.get(f"/counterfactual/{job_id}").json()
        assert body["trace"]["case_id"] == cid
        assert len(body["trace"]["alphas"]) == r.json()["n_samples"]
        assert 0.0 in body["trace"]["alphas"]
        assert body["heatmaps"]["aggregate"].endswith("aggregate.nii.gz")
        assert len(body["counterfactuals"]) == len(body["trace"]["alphas"])

    def test_fidelity_fail_gives_422_with_delta(self, ctx, backend):
        context, _ = ctx
        context.fidelity_threshold = 0.0  # every case fails the gate
        client = TestClient(create_app(context))
        _, store, _, _ = backend
        r = client.post("/counterfactual", json={"case_id": store.ids()[0]})
        assert r.status_code == 422
        detail = r.json()["detail"]
        assert "delta_p" in detail and detail["threshold"] == 0.0

    def test_unknown_case_and_job(self, client):
        assert client.post("/counterfactual", json={"case_id": "nope"}).status_code == 404
        assert client.get("/counterfactual/nope").status_code == 404


class TestTrialEndpoints:
    def start(self, client, reader="r1", phase="unaided"):
        return client.post("/trial/trial-1/session", json={"reader": reader, "phase": phase})

    def decide_all(self, client, sid, case_ids, decision="high"):
        for cid in case_ids:
            r = client.post(f"/session/{sid}/decision",
                            json={"case_id": cid, "decision": decision, "elapsed_seconds": 60.0})
            assert r.status_code == 200

    def test_full_reader_flow(self, ctx, client):
        context, clock = ctx
        r = self.start(client)
        assert r.status_code == 200
        sid = r.json()["session_id"]
        cases = r.json()["case_ids"]
        self.decide_all(client, sid, cases)
        assert client.post(f"/session/{sid}/finalize").json()["finalized"]

        # assisted phase blocked until washout elapses
        blocked = self.start(client, phase="ai_assisted")
        assert blocked.status_code == 409
        assert blocked.json()["detail"]["washout_deadline"] == pytest.approx(clock.t + 100.0)

        clock.t += 150.0
        ok = self.start(client, phase="ai_assisted")
        assert ok.status_code == 200

    def test_phase_order_violation_409(self, client):
        r = self.start(client, phase="ai_assisted")
        assert r.status_code == 409

    def test_duplicate_decision_409(self, client):
        sid = self.start(client).json()["session_id"]
        body = {"case_id": "case-031-0000", "decision": "high", "elapsed_seconds": 30.0}
        assert client.post(f"/session/{sid}/decision", json=body).status_code == 200
        assert client.post(f"/session/{sid}/decision", json=body).status_code == 409

    def test_decision_validation_422(self, client):
        sid = self.start(client).json()["session_id"]
        r = client.post(f"/session/{sid}/decision",
                        json={"case_id": "case-031-0000", "decision": "maybe",
                              "elapsed_seconds": 30.0})
        assert r.status_code == 422

    def test_decision_unknown_case_404(self, client):
        sid = self.start(client).json()["session_id"]
        r = client.post(f"/session/{sid}/decision",
                        json={"case_id": "nope", "decision": "high", "elapsed_seconds": 30.0})
        assert r.status_code == 404

    def test_unknown_trial_and_session_404(self, client):
        assert client.post("/trial/none/session",
                           json={"reader": "r", "phase": "unaided"}).status_code == 404
        assert client.post("/session/none/finalize").status_code == 404
        assert client.get("/trial/none/report").status_code == 404

    def test_report_delegates_to_trial_report(self, ctx, client, backend):
        context, _ = ctx
        _, store, members, _ = backend
        sid = self.start(client).json()["session_id"]
        cases = context.trials["trial-1"].case_ids
        self.decide_all(client, sid, cases, decision="low")
        body = client.get("/trial/trial-1/report").json()

        sessions = [s for tid, s in context.sessions.values() if tid == "trial-1" and s.entries]
        truth = {cid: store.get(cid).record.risk for cid in cases}
        ai = {cid: ("high" if ensemble_predict(
            [predict_case(store.get(cid), st) for st in members]).probability >= 0.5 else "low")
            for cid in cases}
        expected = trial_report(sessions, truth, ai).to_json()
        assert json.dumps(body, sort_keys=True) == json.dumps(expected, sort_keys=True)

    def test_report_without_sessions_409(self, client):
        assert client.get("/trial/trial-1/report").status_code == 409

    def test_mutations_persisted(self, ctx, client):
        context, _ = ctx
        sid = self.start(client).json()["session_id"]
        client.post(f"/session/{sid}/decision",
                    json={"case_id": context.trials["trial-1"].case_ids[0],
                          "decision": "high", "elapsed_seconds": 20.0})
        trial_dir = context.storage_root / "trials" / "trial-1"
        assert (trial_dir / "state.json").exists()
        rows = [json.loads(l) for l in (trial_dir / "sessions.jsonl").read_text().splitlines()]
        assert rows and rows[0]["entries"][0]["decision"] == "high"


class TestLoadContext:
    def test_roundtrip_from_storage_root(self, backend, tmp_path):
        root, store, members, _ = backend
        store.save(tmp_path / "cases")
        (tmp_path / "classifiers").mkdir()
        for i, st in enumerate(members):
            st.save(tmp_path / "classifiers" / f"m{i}")
        trial = TrialState("t9", store.ids()[:2], washout_seconds=50.0)
        (tmp_path / "trials" / "t9").mkdir(parents=True)
        (tmp_path / "trials" / "t9" / "state.json").write_text(json.dumps(trial.to_json()))

        ctx = load_context(tmp_path)
        assert ctx.store.ids() == store.ids()
        assert len(ctx.classifiers) == 3
        assert "t9" in ctx.trials
        client = TestClient(create_app(ctx))
        assert client.get("/cases").status_code == 200
