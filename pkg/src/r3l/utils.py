"""Seeding, versioning and small serialization helpers."""

from __future__ import annotations

import json
import subprocess
from pathlib import Path

import numpy as np

from . import __version__


def derive_seed(master: int, *keys: int) -> int:
    """Counter-based child seed: distinct key tuples give independent streams."""
    seq = np.random.SeedSequence([int(master), *(int(k) for k in keys)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def version_string() -> str:
    """Package version plus ``git describe`` output when run from a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(obj), indent=2) + "\n")
