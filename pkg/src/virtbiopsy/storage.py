"""Directory-tree persistence: versioned run records and artifacts.

Every artifact carries its config hash and code version; loads verify
the hash and refuse on mismatch. Runs with identical configs land in
distinct timestamped directories, never overwriting.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, is_dataclass
from pathlib import Path

from . import __version__


class ArtifactIntegrityError(RuntimeError):
    """Stored config hash does not match the stored config."""


def _canonical(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        obj = asdict(obj)
    return json.dumps(obj, sort_keys=True, default=str)


def config_hash(config) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()


def new_run_dir(root, command: str, config) -> Path:
    """Create a fresh run directory: runs/<command>/<ts>_<hash8>[_<n>]."""
    root = Path(root)
    h = config_hash(config)[:8]
    ts = time.strftime("%Y%m%dT%H%M%S")
    base = root / "runs" / command
    base.mkdir(parents=True, exist_ok=True)
    n = 0
    while True:
        name = f"{ts}_{h}" if n == 0 else f"{ts}_{h}_{n}"
        d = base / name
        try:
            d.mkdir()
            return d
        except FileExistsError:
            n += 1


def write_run_record(run_dir, command: str, config, inputs=None, outputs=None,
                     wall_time: float | None = None) -> Path:
    record = {
        "command": command,
        "config": json.loads(_canonical(config)),
        "config_hash": config_hash(config),
        "inputs": inputs or {},
        "outputs": outputs or {},
        "wall_time_seconds": wall_time,
        "code_version": __version__,
        "timestamp": time.time(),
    }
    path = Path(run_dir) / "run_record.json"
    path.write_text(json.dumps(record, indent=2))
    return path


def save_artifact_meta(directory, config) -> None:
    """Stamp an artifact directory with its config and hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": json.loads(_canonical(config)),
        "config_hash": config_hash(config),
        "code_version": __version__,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))


def verify_artifact_meta(directory) -> dict:
    """Load and verify an artifact's meta; raises on hash mismatch."""
    meta = json.loads((Path(directory) / "meta.json").read_text())
    expected = config_hash(meta["config"])
    if meta.get("config_hash") != expected:
        raise ArtifactIntegrityError(
            f"{directory}: stored config hash {meta.get('config_hash')!r} "
            f"does not match recomputed {expected!r}"
        )
    return meta
