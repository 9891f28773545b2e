"""Pixel-wise explanation of a single feature map from its peak relevance neuron.

The relevance map of the chosen feature map is computed with a full backward
pass, its spatial argmax becomes the sole seed of a second backward pass,
and the channel-summed input relevance is the explanation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MaskReferenceError
from .lrp import DEFAULT_EPS, backward_from, lrp_backward
from .model import ModelGraph, forward
from .pipeline import prepare
from .relevance import FeatureMapId
from .tensor import DTYPE


@dataclass
class ExplanationMap:
    values: np.ndarray  # [H,W] channel-summed input relevance
    source: FeatureMapId
    argmax_input: tuple[int, int]
    feature_argmax: tuple[int, int]
    seed_relevance: float
    degenerate: bool = False


def _validate_fmap(graph: ModelGraph, fmap: FeatureMapId) -> None:
    if fmap.layer not in {s.id for s in graph.layers}:
        raise MaskReferenceError(f"mask reference error: unknown layer {fmap.layer}")
    if fmap.channel < 0 or fmap.channel >= graph.channels(fmap.layer):
        raise MaskReferenceError(
            f"mask reference error: channel {fmap.channel} out of range for {fmap.layer}"
        )


def lrp_max_explain(
    graph: ModelGraph,
    pixels: np.ndarray,
    fmap: FeatureMapId,
    eps: float = DEFAULT_EPS,
    seed: float | None = None,
) -> ExplanationMap:
    """Explain one feature map of one image through its maximum relevance neuron.

    An all-zero relevance map is flagged degenerate and yields an all-zero
    explanation anchored at (0, 0).
    """
    _validate_fmap(graph, fmap)
    x = prepare(graph, pixels)
    trace = forward(graph, x)
    record = lrp_backward(graph, trace, seed=seed, eps=eps)
    zmap = np.asarray(record.layers[fmap.layer], dtype=np.float64)[fmap.channel]
    h, w = zmap.shape
    flat_idx = int(np.argmax(zmap))  # ties resolve to the first scan-order position
    hstar, wstar = flat_idx // w, flat_idx % w
    seed_val = float(zmap[hstar, wstar])

    if seed_val == 0.0 and not zmap.any():
        values = np.zeros(pixels.shape[1:], dtype=DTYPE)
        return ExplanationMap(
            values=values,
            source=fmap,
            argmax_input=(0, 0),
            feature_argmax=(hstar, wstar),
            seed_relevance=0.0,
            degenerate=True,
        )

    injected = np.zeros(trace.outputs[fmap.layer].shape, dtype=np.float64)
    injected[fmap.channel, hstar, wstar] = seed_val
    reseeded = backward_from(graph, trace, fmap.layer, injected, eps=eps)
    values = np.asarray(reseeded.input_relevance, dtype=np.float64).sum(axis=0)
    flat = int(np.argmax(values))
    return ExplanationMap(
        values=values.astype(DTYPE),
        source=fmap,
        argmax_input=(flat // values.shape[1], flat % values.shape[1]),
        feature_argmax=(hstar, wstar),
        seed_relevance=seed_val,
    )


def extract_patch(
    pixels: np.ndarray, explanation: ExplanationMap, side: int
) -> tuple[np.ndarray, tuple[int, int]]:
    """Crop a side x side window of the original image around the explanation peak.

    The window is shifted (never shrunk) to stay inside the image; a side
    larger than the image clamps to the full extent. Returns the crop and its
    top-left (row, col).
    """
    if side < 1:
        raise ValueError("patch side must be >= 1")
    _, h, w = pixels.shape
    side_h, side_w = min(side, h), min(side, w)
    r, c = explanation.argmax_input
    r0 = min(max(r - side_h // 2, 0), h - side_h)
    c0 = min(max(c - side_w // 2, 0), w - side_w)
    return pixels[:, r0 : r0 + side_h, c0 : c0 + side_w], (r0, c0)


def write_heatmap_png(values: np.ndarray, path) -> None:
    """Min-max normalize an explanation map to 8-bit grayscale and save it."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        scaled = (v - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(v)
    Image.fromarray((scaled + 0.5).astype(np.uint8), mode="L").save(Path(path), format="PNG")


def dump_explanation_raw(explanation: ExplanationMap, path) -> Path:
    """Raw little-endian float32 dump of the explanation values + JSON sidecar."""
    path = Path(path)
    np.ascontiguousarray(explanation.values, dtype="<f4").tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(
        json.dumps(
            {
                "shape": list(explanation.values.shape),
                "file": path.name,
                "fmap": {"layer": explanation.source.layer, "channel": explanation.source.channel},
                "seed_relevance": explanation.seed_relevance,
            },
            indent=1,
        )
        + "\n",
        encoding="utf-8",
    )
    return sidecar
