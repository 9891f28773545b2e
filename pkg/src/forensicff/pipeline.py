"""Shared plumbing for image-sweep pipelines: decode, prepare, ordered map."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DecodeError
from .imageio import grayscale, load_png, normalize

log = logging.getLogger("forensicff")


def decode_item(item) -> np.ndarray | None:
    """Return [3,H,W] pixels for a path or pass an array through; None on failure."""
    if isinstance(item, np.ndarray):
        return item
    try:
        return load_png(item)
    except DecodeError as exc:
        log.warning("skipping unreadable image: %s", exc)
        return None


def prepare(graph, pixels: np.ndarray, transform: str | None = None) -> np.ndarray:
    """Apply the optional color ablation then the model's normalization."""
    if transform == "grayscale":
        pixels = grayscale(pixels)
    elif transform not in (None, "none"):
        raise ValueError(f"unknown transform {transform!r}")
    return normalize(pixels, graph.mean, graph.std)


def ordered_map(fn, items, threads: int = 1) -> list:
    """Map fn over items, combining results in item order regardless of threads."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
