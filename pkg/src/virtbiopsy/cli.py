"""Command-line interface for the virtual-biopsy pipeline.

Every command runs over a storage root, writes versioned artifacts, and
records a JSON run record (inputs, config hash, outputs, wall time).
"""

from __future__ import annotations

import hashlib
import json
import time
import uuid
from pathlib import Path

import click
import numpy as np

from . import storage
from .classifier import TrainConfig, train_classifier, predict_case, ClassifierState
from .data import CaseStore, generate_dataset
from .metrics import full_report
from .phantom import Manifest, PhantomParams, build_manifest
from .segmenter import SegmenterConfig, dice, largest_component, segment, train_segmenter
from .trial import ReaderSession, trial_report
from .vaegan import VaeGanConfig, VaeGanModel, train_vaegan
from .volume import PatchSpec, crop_centered, mask_centroid, normalize, PatchStack


def _size3(value: str, kind=int) -> tuple:
    parts = tuple(kind(v) for v in value.split(","))
    if len(parts) != 3:
        raise click.BadParameter(f"expected three comma-separated values, got {value!r}")
    return parts


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise click.ClickException(f"missing prerequisite {path}; {hint}")
    return path


def _load_store(root: Path) -> CaseStore:
    _require(root / "cases", "run `virtbiopsy phantom-gen` first")
    return CaseStore.load(root / "cases")


def _load_manifest(root: Path) -> Manifest:
    path = _require(root / "manifest.json", "run `virtbiopsy phantom-gen` first")
    return Manifest.load(path)


def _finish(root: Path, command: str, config, inputs, outputs, t0: float) -> Path:
    run_dir = storage.new_run_dir(root, command, config)
    storage.write_run_record(run_dir, command, config, inputs=inputs, outputs=outputs,
                             wall_time=time.monotonic() - t0)
    return run_dir


def _dataset_checksum(store: CaseStore) -> str:
    h = hashlib.sha256()
    for cid in store.ids():
        case = store.get(cid)
        h.update(cid.encode())
        h.update(case.volume.data.tobytes())
        h.update(case.gland.labels.tobytes())
        h.update(case.zones.labels.tobytes())
        h.update(json.dumps(case.record.to_json(), sort_keys=True).encode())
    return h.hexdigest()


@click.group()
def main():
    """Virtual-biopsy pipeline: phantoms, models, counterfactuals, trials."""


@main.command("phantom-gen")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--n", type=int, default=40, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--prevalence", type=float, default=0.5, show_default=True)
@click.option("--ratios", default="0.7,0.1,0.2", show_default=True,
              help="train,val,test split fractions")
@click.option("--grid", default="64,64,16", show_default=True, help="phantom grid size x,y,z")
@click.option("--spacing", default="1,1,3", show_default=True, help="voxel spacing in mm")
@click.option("--gland", default="22,18,16", show_default=True, help="gland semi-axes in mm")
@click.option("--lesion-radius", default="3,6", show_default=True, help="lesion radius range in mm")
@click.option("--high-risk-radius", type=float, default=4.0, show_default=True)
def phantom_gen(root, n, seed, prevalence, ratios, grid, spacing, gland, lesion_radius,
                high_risk_radius):
    """Generate a deterministic phantom cohort plus a stratified manifest."""
    t0 = time.monotonic()
    lo, hi = (float(v) for v in lesion_radius.split(","))
    params = PhantomParams(grid_size=_size3(grid), spacing=_size3(spacing, float),
                           gland_semi_axes=_size3(gland, float),
                           lesion_radius_range=(lo, hi), high_risk_radius=high_risk_radius)
    config = {"n": n, "seed": seed, "prevalence": prevalence, "ratios": ratios,
              "grid": grid, "spacing": spacing, "gland": gland,
              "lesion_radius": lesion_radius, "high_risk_radius": high_risk_radius}
    store = generate_dataset(n, seed=seed, prevalence=prevalence, base_params=params)
    store.save(root / "cases")
    manifest = build_manifest(store.records(), _size3(ratios, float), rng_seed=seed)
    manifest.save(root / "manifest.json")
    checksum = _dataset_checksum(store)
    _finish(root, "phantom-gen", config, {}, {"cases": str(root / "cases"),
            "manifest": str(root / "manifest.json"), "checksum": checksum}, t0)
    click.echo(f"generated {n} cases under {root / 'cases'}")
    click.echo(f"dataset checksum: {checksum}")


@main.command("preprocess")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--patch-size", default="160,160,20", show_default=True)
def preprocess(root, patch_size):
    """Crop and normalize gland-centered patches for every case."""
    t0 = time.monotonic()
    size = _size3(patch_size)
    store = _load_store(root)
    out_dir = root / "patches"
    out_dir.mkdir(parents=True, exist_ok=True)
    for cid in store.ids():
        case = store.get(cid)
        spec = PatchSpec(size, case.volume.spacing, allow_noncanonical=True)
        center = mask_centroid(case.gland)
        raw = crop_centered(case.volume.data, center, spec.size)
        stack = normalize(PatchStack(raw[None], ["image"], case.volume.spacing), "pminmax")
        np.save(out_dir / f"{cid}.npy", stack.channels[0])
    (out_dir / "meta.json").write_text(json.dumps({"patch_size": list(size)}))
    config = {"patch_size": patch_size}
    _finish(root, "preprocess", config, {"cases": str(root / "cases")},
            {"patches": str(out_dir), "n": len(store)}, t0)
    click.echo(f"wrote {len(store)} patches to {out_dir}")


@main.command("train-seg")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--target", type=click.Choice(["gland", "zones"]), default="gland", show_default=True)
@click.option("--epochs", type=int, default=40, show_default=True)
@click.option("--widths", default="8,16,32", show_default=True)
@click.option("--lr", type=float, default=1e-2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_seg(root, target, epochs, widths, lr, seed):
    """Train the 3D segmenter on the manifest's train split."""
    t0 = time.monotonic()
    store = _load_store(root)
    manifest = _load_manifest(root)
    cfg = SegmenterConfig(widths=tuple(int(w) for w in widths.split(",")),
                          epochs=epochs, learning_rate=lr, rng_seed=seed)
    state = train_segmenter(manifest, store, cfg, target=target)
    out = root / f"segmenter_{target}"
    state.save(out)

    test_dscs = []
    for cid in manifest.splits.get("test", []):
        case = store.get(cid)
        pred = largest_component(segment(case.volume, state))
        truth = case.gland if target == "gland" else case.zones
        test_dscs.append(dice(pred, truth))
    mean_dsc = float(np.mean(test_dscs)) if test_dscs else None
    _finish(root, "train-seg", cfg,
            {"manifest": str(root / "manifest.json")},
            {"model": str(out), "test_dsc": mean_dsc}, t0)
    click.echo(f"saved segmenter to {out}.pt (test DSC: {mean_dsc})")


@main.command("train-clf")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--family", type=click.Choice(["cnn", "foundation"]), default="foundation",
              show_default=True)
@click.option("--inputs", default="image_only", show_default=True)
@click.option("--epochs", type=int, default=None, help="override the published default")
@click.option("--batch-size", type=int, default=None)
@click.option("--accum-steps", type=int, default=None)
@click.option("--patch-size", default="224,224,28", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_clf(root, family, inputs, epochs, batch_size, accum_steps, patch_size, seed):
    """Train one risk-classifier variant and score the test split."""
    t0 = time.monotonic()
    store = _load_store(root)
    manifest = _load_manifest(root)
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, accum_steps=accum_steps,
                      patch_size=_size3(patch_size), rng_seed=seed)
    state = train_classifier(manifest, store, cfg, family=family, inputs=inputs)
    name = state.tag.replace(" ", "_").replace("+", "p")
    out_dir = root / "classifiers"
    out_dir.mkdir(parents=True, exist_ok=True)
    state.save(out_dir / name)

    preds = {}
    for cid in manifest.splits.get("test", []):
        case = store.get(cid)
        p = predict_case(case, state)
        preds[cid] = {"probability": p.probability, "label": case.record.label}
    pred_dir = root / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    pred_path = pred_dir / f"{name}.json"
    pred_path.write_text(json.dumps({"tag": state.tag, "predictions": preds}, indent=2))
    _finish(root, "train-clf", cfg,
            {"manifest": str(root / "manifest.json")},
            {"model": str(out_dir / name), "predictions": str(pred_path)}, t0)
    click.echo(f"saved classifier {state.tag!r} to {out_dir / name}.pt")
    click.echo(f"test predictions: {pred_path}")


@main.command("train-vaegan")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--epochs", type=int, default=1000, show_default=True)
@click.option("--latent", type=int, default=32, show_default=True)
@click.option("--width", type=int, default=8, show_default=True)
@click.option("--patience", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_vaegan_cmd(root, epochs, latent, width, patience, seed):
    """Train the generative model on preprocessed patches."""
    t0 = time.monotonic()
    patches_dir = _require(root / "patches", "run `virtbiopsy preprocess` first")
    manifest = _load_manifest(root)
    meta = json.loads((patches_dir / "meta.json").read_text())
    patch_size = tuple(meta["patch_size"])
    patches = {p.stem: np.load(p) for p in sorted(patches_dir.glob("*.npy"))}
    cfg = VaeGanConfig(patch_size=patch_size, latent_dim=latent, width=width,
                       epochs=epochs, patience=patience, rng_seed=seed)
    model, history = train_vaegan(manifest, patches, cfg)
    out = root / "vaegan"
    model.save(out)
    (root / "vaegan_history.json").write_text(json.dumps(history, indent=2))
    _finish(root, "train-vaegan", cfg, {"patches": str(patches_dir)},
            {"model": str(out), "epochs_run": len(history)}, t0)
    click.echo(f"saved generative model to {out}.pt ({len(history)} epochs)")


@main.command("counterfactual")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--case-id", required=True)
@click.option("--alpha-max", type=float, default=1.0, show_default=True)
@click.option("--n-points", type=int, default=11, show_default=True)
@click.option("--mode", type=click.Choice(["linear", "iterative"]), default="linear",
              show_default=True)
@click.option("--fidelity-threshold", type=float, default=0.1, show_default=True)
def counterfactual_cmd(root, case_id, alpha_max, n_points, mode, fidelity_threshold):
    """Sweep a case's latent along the classifier gradient."""
    import torch

    from .counterfactual import (
        FidelityGateError,
        default_alpha_schedule,
        generate_counterfactuals,
        heatmaps,
    )

    t0 = time.monotonic()
    _require(root / "vaegan.json", "run `virtbiopsy train-vaegan` first")
    clf_dir = _require(root / "classifiers", "run `virtbiopsy train-clf` first")
    metas = sorted(clf_dir.glob("*.json"))
    if not metas:
        raise click.ClickException(f"no classifiers under {clf_dir}; run `virtbiopsy train-clf` first")
    store = _load_store(root)
    if case_id not in store:
        raise click.ClickException(f"unknown case {case_id!r}")
    case = store.get(case_id)

    model = VaeGanModel.load(root / "vaegan")
    state = ClassifierState.load(metas[0].with_suffix(""))
    net = state.model()
    center = mask_centroid(case.gland)
    x = crop_centered(case.volume.data, center, tuple(model.cfg.patch_size))

    def fidelity_fn(arr):
        t = torch.from_numpy(np.asarray(arr, dtype=np.float32))[None, None]
        with torch.no_grad():
            return float(torch.sigmoid(net(t)))

    sched = default_alpha_schedule(alpha_max, n_points)
    try:
        job = generate_counterfactuals(x, model, lambda t: net(t), sched,
                                       fidelity_predict_fn=fidelity_fn,
                                       fidelity_threshold=fidelity_threshold,
                                       mode=mode, case_id=case_id)
    except FidelityGateError as exc:
        raise click.ClickException(str(exc))
    job_id = uuid.uuid4().hex[:12]
    job_dir = root / "counterfactuals" / job_id
    job.save(job_dir, spacing=case.volume.spacing)
    heatmaps(job, x).save(job_dir / "heatmaps", spacing=case.volume.spacing)
    config = {"case_id": case_id, "alpha_max": alpha_max, "n_points": n_points, "mode": mode}
    _finish(root, "counterfactual", config, {"case": case_id},
            {"job": str(job_dir), "bounds": job.trace()["bounds"]}, t0)
    click.echo(f"counterfactual job {job_id} written to {job_dir}")
    click.echo(f"shift bounds: {job.trace()['bounds']}")


@main.command("evaluate")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--predictions", "pred_file", type=click.Path(path_type=Path), default=None,
              help="predictions JSON; defaults to the newest file under <root>/predictions")
@click.option("--threshold", type=float, default=0.5, show_default=True)
def evaluate(root, pred_file, threshold):
    """Compute the metrics report for stored predictions."""
    t0 = time.monotonic()
    if pred_file is None:
        pred_dir = _require(root / "predictions", "run `virtbiopsy train-clf` first")
        files = sorted(pred_dir.glob("*.json"), key=lambda p: p.stat().st_mtime)
        if not files:
            raise click.ClickException(f"no prediction files under {pred_dir}")
        pred_file = files[-1]
    payload = json.loads(Path(pred_file).read_text())
    rows = payload["predictions"]
    scores = [rows[cid]["probability"] for cid in sorted(rows)]
    labels = [rows[cid]["label"] for cid in sorted(rows)]
    report = full_report(scores, labels, threshold=threshold)
    run_dir = _finish(root, "evaluate", {"predictions": str(pred_file), "threshold": threshold},
                      {"predictions": str(pred_file)}, report.to_json(), t0)
    out = run_dir / "metrics.json"
    out.write_text(json.dumps(report.to_json(), indent=2))
    click.echo(json.dumps(report.to_json(), indent=2))
    click.echo(f"metrics written to {out}")


@main.command("trial-report")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--trial-id", required=True)
def trial_report_cmd(root, trial_id):
    """Aggregate a trial's recorded sessions into a report."""
    t0 = time.monotonic()
    trial_dir = _require(root / "trials" / trial_id, f"no stored trial {trial_id!r}")
    sessions_file = _require(trial_dir / "sessions.jsonl", "no sessions recorded")
    store = _load_store(root)
    sessions = []
    for line in sessions_file.read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            row.pop("session_id", None)
            sessions.append(ReaderSession.from_json(row))
    state = json.loads((trial_dir / "state.json").read_text())
    truth = {cid: store.get(cid).record.risk for cid in state["case_ids"]}
    report = trial_report([s for s in sessions if s.entries], truth)
    run_dir = _finish(root, "trial-report", {"trial_id": trial_id},
                      {"sessions": str(sessions_file)}, report.to_json(), t0)
    out = run_dir / "trial_report.json"
    out.write_text(json.dumps(report.to_json(), indent=2))
    click.echo(json.dumps(report.to_json(), indent=2))


@main.command("grid-search")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--axes", required=True,
              help='JSON dict of parameter -> values, e.g. \'{"learning_rate": [1e-3, 1e-4]}\'')
@click.option("--objective", type=click.Choice(["composite_score", "auc"]),
              default="composite_score", show_default=True)
@click.option("--family", type=click.Choice(["cnn", "foundation"]), default="foundation",
              show_default=True)
@click.option("--epochs", type=int, default=2, show_default=True,
              help="training epochs per grid point (unless swept)")
@click.option("--patch-size", default="224,224,28", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def grid_search(root, axes, objective, family, epochs, patch_size, seed):
    """Sweep hyperparameters, one training run per grid point."""
    from .gridsearch import GridSpec, run_grid

    t0 = time.monotonic()
    store = _load_store(root)
    manifest = _load_manifest(root)
    spec = GridSpec(json.loads(axes), objective=objective)
    size = _size3(patch_size)

    def eval_point(params):
        overrides = {k: v for k, v in params.items()
                     if k in ("epochs", "batch_size", "learning_rate", "weight_decay",
                              "accum_steps", "pos_weight", "focal_alpha", "focal_gamma")}
        overrides.setdefault("epochs", epochs)
        overrides.setdefault("accum_steps", 1)
        cfg = TrainConfig(patch_size=size, rng_seed=seed, **overrides)
        state = train_classifier(manifest, store, cfg, family=family)
        scores, labels = [], []
        for cid in manifest.splits["test"]:
            case = store.get(cid)
            scores.append(predict_case(case, state).probability)
            labels.append(case.record.label)
        report = full_report(scores, labels, threshold=0.5)
        return {"auc": report.auc, "composite_score": report.composite_score}

    result = run_grid(spec, eval_point, storage_root=root)
    _finish(root, "grid-search-summary", {"axes": json.loads(axes), "objective": objective},
            {"manifest": str(root / "manifest.json")},
            {"best_params": result.best_params, "best_value": result.best_value}, t0)
    click.echo(f"evaluated {len(result.runs)} grid points")
    click.echo(f"best {objective}: {result.best_value} at {json.dumps(result.best_params)}")


@main.command("serve")
@click.option("--root", type=click.Path(path_type=Path), default=Path("storage"), show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--washout-seconds", type=float, default=None,
              help="override the stored trials' washout duration")
def serve(root, host, port, washout_seconds):
    """Serve the reader-workbench HTTP API over a storage root."""
    import uvicorn

    from .service import create_app, load_context

    ctx = load_context(root, washout_seconds=washout_seconds)
    uvicorn.run(create_app(ctx), host=host, port=port)


if __name__ == "__main__":
    main()
