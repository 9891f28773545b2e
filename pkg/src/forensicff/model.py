"""Layer graph, forward execution, batchnorm fusion and the weight archive.

A model is a DAG of typed layers over single-image [C,H,W] tensors. The
on-disk form is a `model.json` manifest plus a flat little-endian float32
`weights.bin`. Convolutions are plain (dilation 1, groups 1, zero padding);
matmuls and reductions run in float64 and round back to float32.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    FusionTopologyError,
    GraphValidationError,
    InputShapeError,
    ManifestError,
    MaskReferenceError,
    WeightArchiveError,
)
from .tensor import DTYPE

INPUT_ID = "input"

LAYER_KINDS = {
    "conv2d",
    "batchnorm2d",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "globalavgpool",
    "add",
    "flatten",
    "linear",
    "identity",  # produced by batchnorm fusion, kept so layer indices survive
}

_PARAM_SLOTS = {
    "conv2d": ("weight", "bias"),
    "batchnorm2d": ("gamma", "beta", "running_mean", "running_var"),
    "linear": ("weight", "bias"),
}
_OPTIONAL_SLOTS = {"bias"}


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    params: dict  # layer id -> {slot: float32 array}
    input_shape: tuple[int, int, int]
    mean: np.ndarray
    std: np.ndarray
    consumers: dict  # layer id -> tuple of consumer ids
    output_id: str
    shapes: dict  # layer id -> output shape at the declared input size
    flexible_spatial: bool
    source_hash: str = ""

    def layer(self, layer_id: str) -> LayerSpec:
        for spec in self.layers:
            if spec.id == layer_id:
                return spec
        raise KeyError(layer_id)

    @property
    def conv_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.layers if s.kind == "conv2d")

    def channels(self, layer_id: str) -> int:
        shape = self.shapes[layer_id]
        if len(shape) != 3:
            raise MaskReferenceError(f"mask reference error: layer {layer_id} has no channel axis")
        return shape[0]

    @property
    def has_batchnorm(self) -> bool:
        return any(s.kind == "batchnorm2d" for s in self.layers)


@dataclass
class ForwardTrace:
    outputs: dict  # layer id -> output tensor
    logit: float


class DropoutMask:
    """Set of (layer, channel) feature maps zeroed at forward time."""

    def __init__(self, items=()):
        self.items = frozenset((str(layer), int(channel)) for layer, channel in items)

    def __len__(self):
        return len(self.items)

    def channels_for(self, layer_id: str) -> list[int]:
        return [c for (lid, c) in self.items if lid == layer_id]

    def validate(self, graph: ModelGraph) -> None:
        known = {s.id for s in graph.layers}
        for lid, channel in self.items:
            if lid not in known:
                raise MaskReferenceError(f"mask reference error: unknown layer {lid}")
            if channel < 0 or channel >= graph.channels(lid):
                raise MaskReferenceError(
                    f"mask reference error: channel {channel} out of range for layer {lid}"
                )


# ---------------------------------------------------------------------------
# conv arithmetic helpers (shared with the relevance backward pass)


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (list, tuple)):
        a, b = value
        return int(a), int(b)
    return int(value), int(value)


def conv_out_hw(h: int, w: int, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int):
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return oh, ow


def im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int) -> np.ndarray:
    """[C,H,W] -> [C*kh*kw, OH*OW] patch matrix, rows in (c, i, j) row-major order."""
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    oh, ow = win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, oh * ow)


def col2im(
    cols: np.ndarray,
    c: int,
    h: int,
    w: int,
    kh: int,
    kw: int,
    sh: int,
    sw: int,
    ph: int,
    pw: int,
) -> np.ndarray:
    """Scatter-add the inverse of im2col back onto a [C,H,W] canvas."""
    oh, ow = conv_out_hw(h, w, kh, kw, sh, sw, ph, pw)
    canvas = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    patches = cols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            canvas[:, i : i + oh * sh : sh, j : j + ow * sw : sw] += patches[:, i, j]
    return canvas[:, ph : ph + h, pw : pw + w] if (ph or pw) else canvas


def pool_windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """[C,H,W] -> [C,OH,OW,kh,kw] pooling window view (no padding)."""
    return sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]


# ---------------------------------------------------------------------------
# per-layer forward


def _conv_attrs(spec: LayerSpec):
    a = spec.attrs
    kh, kw = _pair(a["kernel"])
    sh, sw = _pair(a.get("stride", 1))
    ph, pw = _pair(a.get("padding", 0))
    return kh, kw, sh, sw, ph, pw


def _forward_layer(spec: LayerSpec, params: dict, xs: list[np.ndarray]) -> np.ndarray:
    kind = spec.kind
    if kind == "conv2d":
        x = xs[0].astype(np.float64)
        kh, kw, sh, sw, ph, pw = _conv_attrs(spec)
        weight = params["weight"].astype(np.float64)
        out_c = weight.shape[0]
        cols = im2col(x, kh, kw, sh, sw, ph, pw)
        y = weight.reshape(out_c, -1) @ cols
        if "bias" in params:
            y += params["bias"].astype(np.float64)[:, None]
        oh, ow = conv_out_hw(x.shape[1], x.shape[2], kh, kw, sh, sw, ph, pw)
        return y.reshape(out_c, oh, ow).astype(DTYPE)
    if kind == "batchnorm2d":
        x = xs[0].astype(np.float64)
        gamma = params["gamma"].astype(np.float64)[:, None, None]
        beta = params["beta"].astype(np.float64)[:, None, None]
        mu = params["running_mean"].astype(np.float64)[:, None, None]
        var = params["running_var"].astype(np.float64)[:, None, None]
        eps = float(spec.attrs.get("epsilon", 1e-5))
        return ((x - mu) * gamma / np.sqrt(var + eps) + beta).astype(DTYPE)
    if kind == "relu":
        return np.maximum(xs[0], DTYPE(0))
    if kind == "identity":
        return xs[0]
    if kind == "maxpool2d":
        kh, kw = _pair(spec.attrs["kernel"])
        sh, sw = _pair(spec.attrs.get("stride", spec.attrs["kernel"]))
        win = pool_windows(xs[0], kh, kw, sh, sw)
        return win.max(axis=(3, 4))
    if kind == "avgpool2d":
        kh, kw = _pair(spec.attrs["kernel"])
        sh, sw = _pair(spec.attrs.get("stride", spec.attrs["kernel"]))
        win = pool_windows(xs[0].astype(np.float64), kh, kw, sh, sw)
        return win.mean(axis=(3, 4)).astype(DTYPE)
    if kind == "globalavgpool":
        x = xs[0].astype(np.float64)
        return x.mean(axis=(1, 2), keepdims=True).astype(DTYPE)
    if kind == "add":
        return xs[0] + xs[1]
    if kind == "flatten":
        return xs[0].reshape(-1)
    if kind == "linear":
        x = xs[0].astype(np.float64)
        weight = params["weight"].astype(np.float64)
        y = weight @ x
        if "bias" in params:
            y += params["bias"].astype(np.float64)
        return y.astype(DTYPE)
    raise GraphValidationError(f"graph validation error: unknown layer kind {kind}")


def forward(graph: ModelGraph, x: np.ndarray, mask: DropoutMask | None = None) -> ForwardTrace:
    """Run the graph on one [3,H,W] image, optionally zeroing masked channels.

    Masked channels are zeroed on the producing layer's output before any
    consumer reads it, mirroring activation-suppression dropout.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.shape[0] != graph.input_shape[0]:
        raise InputShapeError(
            f"input shape error: expected {graph.input_shape[0]} channels, got {tuple(x.shape)}"
        )
    if not graph.flexible_spatial and tuple(x.shape) != tuple(graph.input_shape):
        raise InputShapeError(
            f"input shape error: model requires {tuple(graph.input_shape)}, got {tuple(x.shape)}"
        )
    if mask is not None:
        mask.validate(graph)

    outputs: dict[str, np.ndarray] = {INPUT_ID: x}
    for spec in graph.layers:
        xs = [outputs[i] for i in spec.inputs]
        try:
            y = _forward_layer(spec, graph.params.get(spec.id, {}), xs)
        except ValueError as exc:  # e.g. matmul dim mismatch on odd-sized inputs
            raise InputShapeError(f"input shape error: at layer {spec.id}: {exc}") from exc
        if y.ndim == 3 and (y.shape[1] < 1 or y.shape[2] < 1):
            raise InputShapeError(f"input shape error: layer {spec.id} collapsed to empty output")
        if mask is not None:
            zeroed = mask.channels_for(spec.id)
            if zeroed:
                y = y.copy()
                y[zeroed] = DTYPE(0)
        outputs[spec.id] = y
    logit = float(outputs[graph.output_id].reshape(-1)[0])
    return ForwardTrace(outputs=outputs, logit=logit)


def sigmoid(logit: float) -> float:
    """Numerically stable logistic map of a single logit."""
    if logit >= 0:
        return 1.0 / (1.0 + math.exp(-logit))
    z = math.exp(logit)
    return z / (1.0 + z)


# ---------------------------------------------------------------------------
# batchnorm fusion


def fuse_batchnorm(graph: ModelGraph) -> ModelGraph:
    """Fold every (conv2d, batchnorm2d) pair into the conv; bn becomes identity.

    Fused weights are w' = w * g / sqrt(var + eps) and the bias becomes
    b' = (b - mean) * g / sqrt(var + eps) + beta, per output channel. Layer
    ids are preserved so feature-map references stay valid.
    """
    new_params = {k: dict(v) for k, v in graph.params.items()}
    new_layers: list[LayerSpec] = []
    for spec in graph.layers:
        if spec.kind != "batchnorm2d":
            new_layers.append(spec)
            continue
        src_id = spec.inputs[0]
        src = next((s for s in graph.layers if s.id == src_id), None)
        if src is None or src.kind != "conv2d":
            raise FusionTopologyError(
                f"fusion topology error: batchnorm {spec.id} does not follow a conv2d"
            )
        if len(graph.consumers.get(src_id, ())) != 1:
            raise FusionTopologyError(
                f"fusion topology error: conv {src_id} feeds more consumers than its batchnorm"
            )
        p = new_params[spec.id]
        eps = float(spec.attrs.get("epsilon", 1e-5))
        var = p["running_var"].astype(np.float64)
        if np.any(var < 0) or np.any(var + eps <= 0):
            raise FusionTopologyError(f"fusion topology error: invalid variance in {spec.id}")
        scale = p["gamma"].astype(np.float64) / np.sqrt(var + eps)
        conv_p = new_params[src_id]
        weight = conv_p["weight"].astype(np.float64) * scale[:, None, None, None]
        bias = conv_p.get("bias")
        bias = bias.astype(np.float64) if bias is not None else np.zeros(len(scale))
        bias = (bias - p["running_mean"].astype(np.float64)) * scale + p["beta"].astype(np.float64)
        new_params[src_id] = {"weight": weight.astype(DTYPE), "bias": bias.astype(DTYPE)}
        new_params[spec.id] = {}
        new_layers.append(LayerSpec(id=spec.id, kind="identity", inputs=spec.inputs, attrs={}))
    return _build_graph(
        new_layers,
        new_params,
        graph.input_shape,
        graph.mean,
        graph.std,
        source_hash=graph.source_hash,
    )


# ---------------------------------------------------------------------------
# graph construction and validation


def _infer_shapes(layers, params, input_shape) -> dict:
    shapes = {INPUT_ID: tuple(input_shape)}
    for spec in layers:
        ins = [shapes[i] for i in spec.inputs]
        kind = spec.kind
        if kind == "conv2d":
            c, h, w = ins[0]
            kh, kw, sh, sw, ph, pw = _conv_attrs(spec)
            weight = params[spec.id]["weight"]
            out_c = int(spec.attrs["out_channels"])
            if tuple(weight.shape) != (out_c, c, kh, kw):
                raise GraphValidationError(
                    f"graph validation error: conv {spec.id} weight shape {tuple(weight.shape)} "
                    f"does not match declared ({out_c},{c},{kh},{kw})"
                )
            oh, ow = conv_out_hw(h, w, kh, kw, sh, sw, ph, pw)
            if oh < 1 or ow < 1:
                raise GraphValidationError(f"graph validation error: conv {spec.id} output empty")
            shapes[spec.id] = (out_c, oh, ow)
        elif kind == "batchnorm2d":
            c = ins[0][0]
            for slot in ("gamma", "beta", "running_mean", "running_var"):
                if params[spec.id][slot].shape != (c,):
                    raise GraphValidationError(
                        f"graph validation error: batchnorm {spec.id} {slot} shape mismatch"
                    )
            shapes[spec.id] = ins[0]
        elif kind in ("relu", "identity"):
            shapes[spec.id] = ins[0]
        elif kind in ("maxpool2d", "avgpool2d"):
            c, h, w = ins[0]
            kh, kw = _pair(spec.attrs["kernel"])
            sh, sw = _pair(spec.attrs.get("stride", spec.attrs["kernel"]))
            oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
            if oh < 1 or ow < 1:
                raise GraphValidationError(f"graph validation error: pool {spec.id} output empty")
            shapes[spec.id] = (c, oh, ow)
        elif kind == "globalavgpool":
            shapes[spec.id] = (ins[0][0], 1, 1)
        elif kind == "add":
            if ins[0] != ins[1]:
                raise GraphValidationError(
                    f"graph validation error: add {spec.id} input shapes differ"
                )
            shapes[spec.id] = ins[0]
        elif kind == "flatten":
            shapes[spec.id] = (int(np.prod(ins[0])),)
        elif kind == "linear":
            if len(ins[0]) != 1:
                raise GraphValidationError(
                    f"graph validation error: linear {spec.id} needs a flattened input"
                )
            weight = params[spec.id]["weight"]
            out_f = int(spec.attrs["out_features"])
            if tuple(weight.shape) != (out_f, ins[0][0]):
                raise GraphValidationError(
                    f"graph validation error: linear {spec.id} weight shape mismatch"
                )
            shapes[spec.id] = (out_f,)
        else:
            raise GraphValidationError(f"graph validation error: unknown kind {kind}")
    return shapes


def _build_graph(layers, params, input_shape, mean, std, source_hash="") -> ModelGraph:
    seen: set[str] = set()
    for spec in layers:
        if spec.kind not in LAYER_KINDS:
            raise GraphValidationError(f"graph validation error: unknown kind {spec.kind}")
        if spec.id in seen or spec.id == INPUT_ID:
            raise GraphValidationError(f"graph validation error: duplicate layer id {spec.id}")
        expected = 2 if spec.kind == "add" else 1
        if len(spec.inputs) != expected:
            raise GraphValidationError(
                f"graph validation error: {spec.kind} {spec.id} takes {expected} input(s)"
            )
        for ref in spec.inputs:
            if ref != INPUT_ID and ref not in seen:
                # forward or unknown reference; a cycle necessarily hits this
                raise GraphValidationError(
                    f"graph validation error: layer {spec.id} references {ref} "
                    "before it is defined"
                )
        seen.add(spec.id)
        for slot in _PARAM_SLOTS.get(spec.kind, ()):
            if slot not in params.get(spec.id, {}) and slot not in _OPTIONAL_SLOTS:
                raise GraphValidationError(
                    f"graph validation error: layer {spec.id} missing parameter {slot}"
                )

    consumers: dict[str, list[str]] = {}
    for spec in layers:
        for ref in spec.inputs:
            consumers.setdefault(ref, []).append(spec.id)
    terminals = [s for s in layers if s.id not in consumers]
    if len(terminals) != 1:
        raise GraphValidationError(
            f"graph validation error: expected one output node, found {len(terminals)}"
        )
    output = terminals[0]
    if output.kind != "linear" or int(output.attrs["out_features"]) != 1:
        raise GraphValidationError(
            "graph validation error: output node must be a linear layer with 1 logit"
        )
    if len(input_shape) != 3:
        raise GraphValidationError("graph validation error: input_shape must be C,H,W")

    shapes = _infer_shapes(layers, params, input_shape)
    flexible = all(
        len(shapes[s.inputs[0]]) != 3 or shapes[s.inputs[0]][1:] == (1, 1)
        for s in layers
        if s.kind == "flatten"
    )
    return ModelGraph(
        layers=tuple(layers),
        params={k: dict(v) for k, v in params.items()},
        input_shape=tuple(int(v) for v in input_shape),
        mean=np.asarray(mean, dtype=DTYPE),
        std=np.asarray(std, dtype=DTYPE),
        consumers={k: tuple(v) for k, v in consumers.items()},
        output_id=output.id,
        shapes=shapes,
        flexible_spatial=flexible,
        source_hash=source_hash,
    )


# ---------------------------------------------------------------------------
# weight archive


def load_model(manifest_path, weights_path) -> ModelGraph:
    """Load and eagerly validate a model archive."""
    manifest_path, weights_path = Path(manifest_path), Path(weights_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest parse error: {manifest_path}: {exc}") from exc
    for key in ("format_version", "input_shape", "normalization", "layers", "tensors"):
        if key not in manifest:
            raise ManifestError(f"manifest parse error: missing field {key}")
    if int(manifest["format_version"]) != 1:
        raise ManifestError(
            f"manifest parse error: unsupported format_version {manifest['format_version']}"
        )

    try:
        blob = weights_path.read_bytes()
    except OSError as exc:
        raise WeightArchiveError(f"weight archive error: {weights_path}: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], entry["shape"], int(entry["offset_bytes"])
        count = int(np.prod(shape)) if shape else 1
        if offset % 4 != 0:
            raise WeightArchiveError(f"weight archive error: tensor {name} offset not 4-byte aligned")
        if offset + 4 * count > len(blob):
            raise WeightArchiveError(f"weight archive error: tensor {name} overruns weights file")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(DTYPE)

    layers: list[LayerSpec] = []
    params: dict[str, dict] = {}
    for entry in manifest["layers"]:
        try:
            spec = LayerSpec(
                id=str(entry["id"]),
                kind=str(entry["kind"]),
                inputs=tuple(entry["inputs"]),
                attrs=dict(entry.get("attrs", {})),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest parse error: layer missing field {exc}") from exc
        layers.append(spec)
        slot_map = entry.get("params", {})
        resolved = {}
        for slot, tensor_name in slot_map.items():
            if tensor_name not in tensors:
                raise WeightArchiveError(
                    f"weight archive error: layer {spec.id} references missing tensor {tensor_name}"
                )
            resolved[slot] = tensors[tensor_name]
        params[spec.id] = resolved

    norm = manifest["normalization"]
    digest = hashlib.sha256()
    digest.update(json.dumps(manifest, sort_keys=True).encode())
    digest.update(blob)
    return _build_graph(
        layers,
        params,
        tuple(int(v) for v in manifest["input_shape"]),
        norm["mean"],
        norm["std"],
        source_hash=digest.hexdigest()[:16],
    )


def save_model(graph: ModelGraph, manifest_path, weights_path) -> None:
    """Write a graph back out as a manifest + weights archive."""
    tensors = []
    blob = bytearray()
    layer_entries = []
    for spec in graph.layers:
        entry = {"id": spec.id, "kind": spec.kind, "inputs": list(spec.inputs)}
        if spec.attrs:
            entry["attrs"] = dict(spec.attrs)
        slot_map = {}
        for slot, arr in sorted(graph.params.get(spec.id, {}).items()):
            name = f"{spec.id}.{slot}"
            offset = len(blob)
            blob.extend(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            tensors.append({"name": name, "shape": list(arr.shape), "offset_bytes": offset})
            slot_map[slot] = name
        if slot_map:
            entry["params"] = slot_map
        layer_entries.append(entry)
    manifest = {
        "format_version": 1,
        "input_shape": list(graph.input_shape),
        "normalization": {
            "mean": [float(v) for v in graph.mean],
            "std": [float(v) for v in graph.std],
        },
        "layers": layer_entries,
        "tensors": tensors,
    }
    Path(manifest_path).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    Path(weights_path).write_bytes(bytes(blob))


def load_model_dir(model_dir) -> ModelGraph:
    """Convenience loader for a directory holding model.json and weights.bin."""
    model_dir = Path(model_dir)
    return load_model(model_dir / "model.json", model_dir / "weights.bin")
