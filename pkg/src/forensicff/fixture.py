"""Deterministic planted-feature fixture: a hand-built detector plus corpus.

The detector's first conv layer carries a magenta-patch channel (channel 0)
whose kernel weights per color are (+1, -2, +1)/9, so any gray pixel nets
exactly zero response, and optionally a texture channel (channel 1) whose
kernel is a luma-weighted horizontal-edge filter, making its activation map
invariant under grayscale conversion. Three second-stage channels carry the
magenta energy redundantly into the logit with enough gain that fake scores
sit at probability 1.0 in float64 even after any single non-planted channel
is dropped; only suppressing the planted channel collapses detection.

"Fake" images are textured noise plus one shaded magenta patch (and faint
luminance stripes when the texture channel is enabled); "real" images are the
same noise without the plants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ForensicError
from .imageio import LUMA_WEIGHTS, grayscale, load_png, save_png
from .model import LayerSpec, ModelGraph, _build_graph, forward, save_model, sigmoid
from .pipeline import prepare
from .tensor import DTYPE

PATCH_MARGIN = 2
STRIPE_PERIOD = 8
STRIPE_AMPLITUDE = 0.22


@dataclass(frozen=True)
class FixtureSpec:
    image_size: int = 64
    n_real: int = 64
    n_fake: int = 64
    patch_size: int = 12
    texture_channel: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.patch_size + 2 * PATCH_MARGIN > self.image_size:
            raise ForensicError("fixture patch does not fit inside the image")
        if self.n_real < 2 or self.n_fake < 2:
            raise ForensicError("fixture needs at least 2 images per class")


MAGENTA_CHANNEL = ("conv1", 0)
TEXTURE_CHANNEL = ("conv1", 1)


def build_fixture_model(spec: FixtureSpec) -> ModelGraph:
    """Hand-crafted detector: conv(3->8) -> pool -> conv(8->4) -> gap -> linear."""
    rng = np.random.default_rng(spec.rng_seed + 1)

    w1 = np.zeros((8, 3, 3, 3), dtype=np.float64)
    b1 = np.zeros(8, dtype=np.float64)
    # channel 0: magenta detector; per-pixel color weights (+1, -2, +1)/9
    w1[0, 0] = 1.0 / 9.0
    w1[0, 1] = -2.0 / 9.0
    w1[0, 2] = 1.0 / 9.0
    b1[0] = -0.5
    if spec.texture_channel:
        # channel 1: luma-weighted horizontal edge; exactly color-invariant
        edge = np.array([[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]) / 3.0
        for c, luma in enumerate(LUMA_WEIGHTS):
            w1[1, c] = luma * edge
        b1[1] = -0.12
        noise_from = 2
    else:
        noise_from = 1
    w1[noise_from:] = rng.normal(0.0, 0.02, size=w1[noise_from:].shape)
    b1[noise_from:] = -0.05

    # second stage: three redundant carriers of channel 0, one of channel 1
    w2 = np.zeros((4, 8, 3, 3), dtype=np.float64)
    for out_c, in_c in ((0, 0), (1, 1), (2, 0), (3, 0)):
        w2[out_c, in_c, 1, 1] = 10.0

    w_head = np.array([[60.0, 6.0 if spec.texture_channel else 0.0, 60.0, 60.0]])
    b_head = np.array([-2.5])

    layers = [
        LayerSpec("conv1", "conv2d", ("input",),
                  {"out_channels": 8, "kernel": [3, 3], "stride": [1, 1], "padding": [0, 0]}),
        LayerSpec("relu1", "relu", ("conv1",)),
        LayerSpec("pool1", "maxpool2d", ("relu1",), {"kernel": [2, 2], "stride": [2, 2]}),
        LayerSpec("conv2", "conv2d", ("pool1",),
                  {"out_channels": 4, "kernel": [3, 3], "stride": [1, 1], "padding": [1, 1]}),
        LayerSpec("relu2", "relu", ("conv2",)),
        LayerSpec("gap", "globalavgpool", ("relu2",)),
        LayerSpec("flat", "flatten", ("gap",)),
        LayerSpec("head", "linear", ("flat",), {"out_features": 1}),
    ]
    params = {
        "conv1": {"weight": w1.astype(DTYPE), "bias": b1.astype(DTYPE)},
        "conv2": {"weight": w2.astype(DTYPE)},
        "head": {"weight": w_head.astype(DTYPE), "bias": b_head.astype(DTYPE)},
    }
    size = spec.image_size
    return _build_graph(layers, params, (3, size, size), [0.0, 0.0, 0.0], [1.0, 1.0, 1.0])


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.30, 0.55)
    rows = (np.arange(size) / size - 0.5)[None, :, None]
    cols = (np.arange(size) / size - 0.5)[None, None, :]
    img = np.full((3, size, size), base)
    img = img + rng.uniform(-0.08, 0.08) * rows + rng.uniform(-0.08, 0.08) * cols
    img = img + rng.uniform(-0.08, 0.08, size=(3, size, size))
    return img


def _add_stripes(rng: np.random.Generator, img: np.ndarray) -> None:
    phase = int(rng.integers(0, STRIPE_PERIOD))
    img[:, phase::STRIPE_PERIOD, :] += STRIPE_AMPLITUDE


def _add_patch(rng: np.random.Generator, img: np.ndarray, patch_size: int):
    size = img.shape[1]
    r0 = int(rng.integers(PATCH_MARGIN, size - patch_size - PATCH_MARGIN + 1))
    c0 = int(rng.integers(PATCH_MARGIN, size - patch_size - PATCH_MARGIN + 1))
    half = (patch_size - 1) / 2.0
    di = np.abs(np.arange(patch_size) - half)
    dist = np.maximum(di[:, None], di[None, :]) / half
    intensity = 1.0 - 0.3 * dist**2  # shaded so the response peaks at the center
    img[0, r0 : r0 + patch_size, c0 : c0 + patch_size] = intensity
    img[1, r0 : r0 + patch_size, c0 : c0 + patch_size] = 0.0
    img[2, r0 : r0 + patch_size, c0 : c0 + patch_size] = intensity
    return r0, c0


def build_fixture_dataset(spec: FixtureSpec, out_dir) -> dict:
    """Emit real/ and fake/ PNG trees plus ground-truth patch boxes."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.rng_seed)
    (out_dir / "real").mkdir(parents=True, exist_ok=True)
    (out_dir / "fake").mkdir(parents=True, exist_ok=True)
    boxes = {}
    for i in range(spec.n_real):
        img = _background(rng, spec.image_size)
        save_png(img, out_dir / "real" / f"real_{i:04d}.png")
    for i in range(spec.n_fake):
        img = _background(rng, spec.image_size)
        if spec.texture_channel:
            _add_stripes(rng, img)
        r0, c0 = _add_patch(rng, img, spec.patch_size)
        rel = f"fake/fake_{i:04d}.png"
        save_png(img, out_dir / rel)
        boxes[rel] = [r0, c0, spec.patch_size, spec.patch_size]
    truth = {
        "image_size": spec.image_size,
        "patch_size": spec.patch_size,
        "rng_seed": spec.rng_seed,
        "texture_channel": spec.texture_channel,
        "boxes": boxes,
    }
    (out_dir / "fixture_truth.json").write_text(json.dumps(truth, indent=1) + "\n")
    return truth


def blank_image(spec: FixtureSpec) -> np.ndarray:
    return np.full((3, spec.image_size, spec.image_size), 0.45, dtype=DTYPE)


def _is_magenta(pixels: np.ndarray) -> np.ndarray:
    return (pixels[0] >= 0.6) & (pixels[1] <= 0.1) & (pixels[2] >= 0.6)


def _self_check(graph: ModelGraph, out_dir: Path, truth: dict, spec: FixtureSpec) -> None:
    prob_blank = sigmoid(forward(graph, prepare(graph, blank_image(spec))).logit)
    if not prob_blank < 0.2:
        raise ForensicError(f"fixture calibration failed: blank image prob {prob_blank}")
    rel, box = next(iter(sorted(truth["boxes"].items())))
    fake = load_png(out_dir / rel)
    prob_fake = sigmoid(forward(graph, prepare(graph, fake)).logit)
    if not prob_fake > 0.9:
        raise ForensicError(f"fixture calibration failed: fake prob {prob_fake}")
    prob_gray = sigmoid(forward(graph, prepare(graph, grayscale(fake))).logit)
    if not prob_gray < 0.5:
        raise ForensicError(f"fixture calibration failed: grayscale fake prob {prob_gray}")
    r0, c0, h, w = box
    frac = float(_is_magenta(fake[:, r0 : r0 + h, c0 : c0 + w]).mean())
    if frac < 0.9:
        raise ForensicError(f"fixture self-check failed: box magenta fraction {frac}")

    from .evaluation import evaluate  # deferred: evaluation does not depend on the fixture

    reals = sorted((out_dir / "real").glob("*.png"))
    fakes = sorted((out_dir / "fake").glob("*.png"))
    report = evaluate(graph, reals, fakes)
    if report.ap < 99.0:
        raise ForensicError(f"fixture self-check failed: AP {report.ap}")


def emit_fixture(spec: FixtureSpec, out_dir) -> ModelGraph:
    """Write the model archive, the corpus and truth file; verify calibration."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = build_fixture_model(spec)
    save_model(graph, out_dir / "model.json", out_dir / "weights.bin")
    truth = build_fixture_dataset(spec, out_dir)
    _self_check(graph, out_dir, truth, spec)
    return graph
