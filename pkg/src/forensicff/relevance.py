"""Per-feature-map relevance statistic (omega) and feature-map set selection.

For every conv feature map (layer l, channel c), omega is the image-averaged
spatial sum of the positive relevance of that map, normalized per image by
the total absolute relevance of the whole layer. Omega is bounded in [0,1],
each layer's channel sum is at most 1, and the per-layer normalization makes
the statistic invariant to positive rescaling of the relevance seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDatasetError, ForensicError, UsageError
from .jsonutil import dump_json, load_json
from .lrp import DEFAULT_EPS, lrp_backward
from .model import ModelGraph, forward
from .pipeline import decode_item, ordered_map, prepare

MODES = ("top", "random", "low")


@dataclass(frozen=True, order=True)
class FeatureMapId:
    layer: str
    channel: int

    def key(self) -> str:
        return f"{self.layer}:{self.channel}"

    @classmethod
    def parse(cls, text: str) -> "FeatureMapId":
        layer, _, channel = text.rpartition(":")
        if not layer or not channel.isdigit():
            raise UsageError(f"config error: bad feature map reference {text!r}")
        return cls(layer=layer, channel=int(channel))


@dataclass
class OmegaTable:
    entries: dict  # FeatureMapId -> float
    n_images: int
    model_hash: str = ""

    def ranked(self) -> list[tuple[FeatureMapId, float]]:
        return sorted(self.entries.items(), key=lambda kv: (-kv[1], kv[0].layer, kv[0].channel))

    def validate(self) -> None:
        per_layer: dict[str, float] = {}
        for fmap, omega in self.entries.items():
            if not (0.0 <= omega <= 1.0 + 1e-9):
                raise ForensicError(f"omega out of bounds for {fmap.key()}: {omega}")
            per_layer[fmap.layer] = per_layer.get(fmap.layer, 0.0) + omega
        for layer, total in per_layer.items():
            if total > 1.0 + 1e-6:
                raise ForensicError(f"layer {layer} omega sum {total} exceeds 1")


@dataclass
class FeatureMapSet:
    ids: tuple  # ordered FeatureMapId tuple
    mode: str
    k: int
    seed: int | None = None


def normalized_positive_shares(rel: np.ndarray) -> np.ndarray:
    """Per-channel positive relevance normalized by the layer's total absolute relevance.

    A layer with zero total absolute relevance contributes zero shares.
    """
    rel = np.asarray(rel, dtype=np.float64)
    denom = np.abs(rel).sum()
    if denom <= 0:
        return np.zeros(rel.shape[0], dtype=np.float64)
    spatial_axes = tuple(range(1, rel.ndim))
    return np.maximum(rel, 0.0).sum(axis=spatial_axes) / denom


def _per_image_shares(graph: ModelGraph, pixels, eps: float, seed):
    """One image's contribution: layer id -> per-channel normalized positive sums."""
    decoded = decode_item(pixels)
    if decoded is None:
        return None
    x = prepare(graph, decoded)
    trace = forward(graph, x)
    record = lrp_backward(graph, trace, seed=seed, eps=eps)
    return {
        layer_id: normalized_positive_shares(record.layers[layer_id])
        for layer_id in graph.conv_ids
    }


def compute_ff_rs(
    graph: ModelGraph,
    images,
    eps: float = DEFAULT_EPS,
    seed: float | None = None,
    threads: int = 1,
) -> OmegaTable:
    """Relevance statistic over a counterfeit image stream (paths or arrays).

    Unreadable images are skipped with a warning; the stream erroring out
    entirely raises. `seed=None` seeds each backward pass with the logit.
    """
    items = list(images)
    if not items:
        raise EmptyDatasetError("empty dataset error: no counterfeit images supplied")
    results = ordered_map(lambda item: _per_image_shares(graph, item, eps, seed), items, threads)
    acc: dict[str, np.ndarray] = {}
    n_used = 0
    for shares in results:
        if shares is None:
            continue
        n_used += 1
        for layer_id, vec in shares.items():
            if layer_id in acc:
                acc[layer_id] += vec
            else:
                acc[layer_id] = vec.copy()
    if n_used == 0:
        raise EmptyDatasetError("empty dataset error: all images failed to decode")
    entries = {}
    for layer_id in graph.conv_ids:
        vec = acc[layer_id] / n_used
        for channel, omega in enumerate(vec):
            entries[FeatureMapId(layer_id, channel)] = float(omega)
    table = OmegaTable(entries=entries, n_images=n_used, model_hash=graph.source_hash)
    table.validate()
    return table


def default_k(total_feature_maps: int) -> int:
    """Advisory default: about 0.5% of all feature maps, at least 1."""
    if total_feature_maps < 1:
        raise UsageError("config error: no feature maps")
    return max(1, int(0.005 * total_feature_maps + 0.5))


def select(
    table: OmegaTable,
    mode: str,
    k: int,
    seed: int | None = None,
    exclude=None,
) -> FeatureMapSet:
    """Pick k feature maps: largest omega, smallest omega, or a seeded sample.

    Ties break lexicographically on (layer id, channel). `exclude` removes
    feature maps from the candidate pool (the usual control is excluding the
    top set from the random draw).
    """
    if mode not in MODES:
        raise UsageError(f"config error: unknown selection mode {mode!r}")
    excluded = {(f.layer, f.channel) for f in (exclude or ())}
    pool = [
        (fmap, omega)
        for fmap, omega in table.entries.items()
        if (fmap.layer, fmap.channel) not in excluded
    ]
    if k < 0 or k > len(pool):
        raise UsageError(f"k out of range: k={k}, {len(pool)} candidate feature maps")
    if mode == "top":
        pool.sort(key=lambda kv: (-kv[1], kv[0].layer, kv[0].channel))
        ids = tuple(fmap for fmap, _ in pool[:k])
    elif mode == "low":
        pool.sort(key=lambda kv: (kv[1], kv[0].layer, kv[0].channel))
        ids = tuple(fmap for fmap, _ in pool[:k])
    else:
        ordered = sorted((fmap for fmap, _ in pool), key=lambda f: (f.layer, f.channel))
        rng = random.Random(seed)
        ids = tuple(rng.sample(ordered, k))
    return FeatureMapSet(ids=ids, mode=mode, k=k, seed=seed)


# ---------------------------------------------------------------------------
# on-disk formats


def write_omega(table: OmegaTable, path, config: dict | None = None) -> None:
    payload = {
        "n_images": table.n_images,
        "model_hash": table.model_hash,
        "entries": [
            {"layer": fmap.layer, "channel": fmap.channel, "omega": omega}
            for fmap, omega in table.ranked()
        ],
    }
    if config is not None:
        payload["config"] = config
    dump_json(payload, path)


def read_omega(path) -> OmegaTable:
    data = load_json(path)
    entries = {
        FeatureMapId(e["layer"], int(e["channel"])): float(e["omega"]) for e in data["entries"]
    }
    return OmegaTable(
        entries=entries,
        n_images=int(data["n_images"]),
        model_hash=data.get("model_hash", ""),
    )


def write_fmaps(fset: FeatureMapSet, path, config: dict | None = None) -> None:
    payload = {
        "mode": fset.mode,
        "k": fset.k,
        "seed": fset.seed,
        "ids": [{"layer": f.layer, "channel": f.channel} for f in fset.ids],
    }
    if config is not None:
        payload["config"] = config
    dump_json(payload, path)


def read_fmaps(path) -> FeatureMapSet:
    data = load_json(path)
    ids = tuple(FeatureMapId(e["layer"], int(e["channel"])) for e in data["ids"])
    if len(set(ids)) != len(ids):
        raise UsageError(f"config error: duplicate feature maps in {path}")
    if data["mode"] not in MODES:
        raise UsageError(f"config error: unknown mode {data['mode']!r} in {path}")
    if int(data["k"]) != len(ids):
        raise UsageError(f"config error: k does not match id count in {path}")
    return FeatureMapSet(ids=ids, mode=data["mode"], k=int(data["k"]), seed=data.get("seed"))
