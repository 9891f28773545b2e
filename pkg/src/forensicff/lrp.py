"""Relevance backward pass over a fused model graph.

Convolutions (and any linear layer below the top) redistribute relevance
proportionally to the positive part of each weighted input; the top linear
layer uses the stabilized epsilon rule. ReLU, flatten and fused-batchnorm
markers pass relevance through unchanged; max pooling is winner-take-all;
average pooling behaves like a convolution with uniform positive weights;
add nodes split by the positive part of each branch value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GraphValidationError, MaskReferenceError, TraceMismatchError
from .model import (
    INPUT_ID,
    ForwardTrace,
    LayerSpec,
    ModelGraph,
    _conv_attrs,
    _pair,
    col2im,
    im2col,
    pool_windows,
)
from .tensor import DTYPE

DEFAULT_EPS = 1e-6


@dataclass
class RelevanceRecord:
    layers: dict  # layer id -> relevance tensor shaped like that layer's output
    input_relevance: np.ndarray
    seed_value: float


def beta0_redistribute(inputs, r_y: float) -> list[float]:
    """Split r_y over (x_i, w_i) pairs proportionally to (w_i * x_i)_+.

    A zero positive-part denominator is the stabilized degenerate case and
    yields all zeros.
    """
    products = np.array([float(x) * float(w) for x, w in inputs], dtype=np.float64)
    pos = np.maximum(products, 0.0)
    denom = pos.sum()
    if denom <= 0.0:
        return [0.0] * len(pos)
    return list(float(r_y) * pos / denom)


def epsilon_redistribute(inputs, bias: float, r_y: float, eps: float) -> list[float]:
    """Stabilized split r_i = r_y * (w_i x_i) / (z + eps * sign(z)), sign(0) = +1."""
    products = np.array([float(x) * float(w) for x, w in inputs], dtype=np.float64)
    z = products.sum() + float(bias)
    denom = z + eps if z >= 0 else z - eps
    return list(float(r_y) * products / denom)


# ---------------------------------------------------------------------------
# per-layer relevance transfer (float64 in, float64 out)


def _conv_beta0(spec: LayerSpec, params: dict, x: np.ndarray, r_out: np.ndarray) -> np.ndarray:
    kh, kw, sh, sw, ph, pw = _conv_attrs(spec)
    c, h, w = x.shape
    weight = params["weight"].astype(np.float64).reshape(r_out.shape[0], -1)
    cols = im2col(x, kh, kw, sh, sw, ph, pw)
    xpos = np.maximum(cols, 0.0)
    xneg = np.minimum(cols, 0.0)
    wpos = np.maximum(weight, 0.0)
    wneg = np.minimum(weight, 0.0)
    zpos = wpos @ xpos + wneg @ xneg
    rflat = r_out.reshape(r_out.shape[0], -1)
    scale = np.divide(rflat, zpos, out=np.zeros_like(rflat), where=zpos > 0)
    rcols = xpos * (wpos.T @ scale) + xneg * (wneg.T @ scale)
    return col2im(rcols, c, h, w, kh, kw, sh, sw, ph, pw)


def _linear_beta0(params: dict, x: np.ndarray, r_out: np.ndarray) -> np.ndarray:
    weight = params["weight"].astype(np.float64)
    xpos = np.maximum(x, 0.0)
    xneg = np.minimum(x, 0.0)
    wpos = np.maximum(weight, 0.0)
    wneg = np.minimum(weight, 0.0)
    zpos = wpos @ xpos + wneg @ xneg
    scale = np.divide(r_out, zpos, out=np.zeros_like(r_out), where=zpos > 0)
    return xpos * (wpos.T @ scale) + xneg * (wneg.T @ scale)


def _linear_epsilon(params: dict, x: np.ndarray, r_out: np.ndarray, eps: float) -> np.ndarray:
    weight = params["weight"].astype(np.float64)
    z = weight @ x
    if "bias" in params:
        z = z + params["bias"].astype(np.float64)
    denom = np.where(z >= 0, z + eps, z - eps)
    return x * (weight.T @ (r_out / denom))


def _maxpool_wta(spec: LayerSpec, x: np.ndarray, r_out: np.ndarray) -> np.ndarray:
    kh, kw = _pair(spec.attrs["kernel"])
    sh, sw = _pair(spec.attrs.get("stride", spec.attrs["kernel"]))
    win = pool_windows(x, kh, kw, sh, sw)
    c, oh, ow = win.shape[:3]
    idx = np.argmax(win.reshape(c, oh, ow, kh * kw), axis=3)  # first max in scan order
    ci, oi, oj = np.meshgrid(np.arange(c), np.arange(oh), np.arange(ow), indexing="ij")
    ih = oi * sh + idx // kw
    iw = oj * sw + idx % kw
    rx = np.zeros_like(x)
    np.add.at(rx, (ci.ravel(), ih.ravel(), iw.ravel()), r_out.ravel())
    return rx


def _avgpool_beta0(spec: LayerSpec, x: np.ndarray, r_out: np.ndarray) -> np.ndarray:
    kh, kw = _pair(spec.attrs["kernel"])
    sh, sw = _pair(spec.attrs.get("stride", spec.attrs["kernel"]))
    win = pool_windows(x, kh, kw, sh, sw)
    pos = np.maximum(win, 0.0)
    denom = pos.sum(axis=(3, 4), keepdims=True)
    share = np.divide(pos, denom, out=np.zeros_like(pos), where=denom > 0)
    contrib = r_out[:, :, :, None, None] * share
    c, oh, ow = win.shape[:3]
    rx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            rx[:, i : i + oh * sh : sh, j : j + ow * sw : sw] += contrib[:, :, :, i, j]
    return rx


def _gap_beta0(x: np.ndarray, r_out: np.ndarray) -> np.ndarray:
    pos = np.maximum(x, 0.0)
    denom = pos.sum(axis=(1, 2), keepdims=True)
    share = np.divide(pos, denom, out=np.zeros_like(pos), where=denom > 0)
    return r_out.reshape(-1, 1, 1) * share


def _add_split(a: np.ndarray, b: np.ndarray, r_out: np.ndarray):
    apos = np.maximum(a, 0.0)
    bpos = np.maximum(b, 0.0)
    denom = apos + bpos
    fa = np.divide(apos, denom, out=np.zeros_like(apos), where=denom > 0)
    fb = np.divide(bpos, denom, out=np.zeros_like(bpos), where=denom > 0)
    return r_out * fa, r_out * fb


# ---------------------------------------------------------------------------
# graph-level propagation


def _check_trace(graph: ModelGraph, trace: ForwardTrace) -> None:
    expected = {s.id for s in graph.layers} | {INPUT_ID}
    if set(trace.outputs) != expected:
        raise TraceMismatchError("trace mismatch error: trace layers do not match the graph")


def _propagate(graph: ModelGraph, trace: ForwardTrace, initial: dict, eps: float, seed_value: float):
    if graph.has_batchnorm:
        raise GraphValidationError(
            "graph validation error: fuse batchnorm before relevance propagation"
        )
    _check_trace(graph, trace)
    acc: dict[str, np.ndarray] = {
        k: np.asarray(v, dtype=np.float64) for k, v in initial.items()
    }
    record: dict[str, np.ndarray] = {}
    for spec in reversed(graph.layers):
        r = acc.pop(spec.id, None)
        out = trace.outputs[spec.id]
        if r is None:
            record[spec.id] = np.zeros(out.shape, dtype=DTYPE)
            continue
        record[spec.id] = r.astype(DTYPE)
        xs = [np.asarray(trace.outputs[i], dtype=np.float64) for i in spec.inputs]
        kind = spec.kind
        params = graph.params.get(spec.id, {})
        if kind == "conv2d":
            contribs = [_conv_beta0(spec, params, xs[0], r)]
        elif kind == "linear":
            if spec.id == graph.output_id:
                contribs = [_linear_epsilon(params, xs[0], r, eps)]
            else:
                contribs = [_linear_beta0(params, xs[0], r)]
        elif kind in ("relu", "identity"):
            contribs = [r]
        elif kind == "flatten":
            contribs = [r.reshape(xs[0].shape)]
        elif kind == "maxpool2d":
            contribs = [_maxpool_wta(spec, xs[0], r)]
        elif kind == "avgpool2d":
            contribs = [_avgpool_beta0(spec, xs[0], r)]
        elif kind == "globalavgpool":
            contribs = [_gap_beta0(xs[0], r)]
        elif kind == "add":
            contribs = list(_add_split(xs[0], xs[1], r))
        else:
            raise GraphValidationError(f"graph validation error: no relevance rule for {kind}")
        for src, contrib in zip(spec.inputs, contribs):
            if src in acc:
                acc[src] = acc[src] + contrib
            else:
                acc[src] = contrib
    input_rel = acc.get(INPUT_ID)
    if input_rel is None:
        input_rel = np.zeros(trace.outputs[INPUT_ID].shape, dtype=np.float64)
    return RelevanceRecord(
        layers=record,
        input_relevance=input_rel.astype(DTYPE),
        seed_value=float(seed_value),
    )


def lrp_backward(
    graph: ModelGraph,
    trace: ForwardTrace,
    seed: float | None = None,
    eps: float = DEFAULT_EPS,
) -> RelevanceRecord:
    """Propagate relevance from the output logit down to the input image.

    The seed defaults to the logit itself; pass 1.0 for a normalized seed.
    """
    seed_value = trace.logit if seed is None else float(seed)
    initial = {graph.output_id: np.array([seed_value], dtype=np.float64)}
    return _propagate(graph, trace, initial, eps, seed_value)


def backward_from(
    graph: ModelGraph,
    trace: ForwardTrace,
    layer_id: str,
    relevance: np.ndarray,
    eps: float = DEFAULT_EPS,
) -> RelevanceRecord:
    """Propagate an injected relevance tensor from one layer's output downward."""
    if layer_id not in {s.id for s in graph.layers}:
        raise MaskReferenceError(f"mask reference error: unknown layer {layer_id}")
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.shape != trace.outputs[layer_id].shape:
        raise TraceMismatchError(
            f"trace mismatch error: injected relevance shape {relevance.shape} does not match "
            f"layer {layer_id} output {trace.outputs[layer_id].shape}"
        )
    seed_value = float(relevance.sum())
    return _propagate(graph, trace, {layer_id: relevance}, eps, seed_value)


def dump_relevance(record: RelevanceRecord, out_dir) -> Path:
    """Write one raw little-endian float32 file per layer plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    entries = dict(record.layers)
    entries[INPUT_ID] = record.input_relevance
    for layer_id, tensor in entries.items():
        fname = layer_id.replace("/", "_") + ".f32"
        np.ascontiguousarray(tensor, dtype="<f4").tofile(out_dir / fname)
        index[layer_id] = {"shape": list(tensor.shape), "file": fname}
    index_path = out_dir / "index.json"
    index_path.write_text(
        json.dumps({"seed_value": record.seed_value, "layers": index}, indent=1) + "\n",
        encoding="utf-8",
    )
    return index_path
