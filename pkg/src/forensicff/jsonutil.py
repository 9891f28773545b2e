"""Deterministic JSON output: fixed field order, 9-significant-digit floats."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def round_floats(obj):
    """Recursively round floats to 9 significant digits for stable output."""
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.9g}")
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [round_floats(v) for v in obj.tolist()]
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(round_floats(obj), indent=1) + "\n", encoding="utf-8")


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
