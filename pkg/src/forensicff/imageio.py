"""PNG ingestion, channelwise normalization, grayscale ablation, dataset scans."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, UsageError
from .tensor import DTYPE

# BT.601 luma weights; grayscale replaces every channel by the luma value.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ImageRecord:
    path: Path
    label: int  # 0 = real, 1 = fake
    pixels: np.ndarray  # [3,H,W] floats in [0,1]


def load_png(path) -> np.ndarray:
    """Decode an 8-bit RGB/RGBA PNG into a [3,H,W] float32 tensor in [0,1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise DecodeError(f"decode error: {path} is not a PNG")
            if img.mode not in ("RGB", "RGBA"):
                raise DecodeError(f"decode error: {path} has unsupported mode {img.mode}")
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise DecodeError(f"decode error: {path}: {exc}") from exc
    arr = arr[:, :, :3]  # drop alpha
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(DTYPE) / DTYPE(255)


def save_png(pixels: np.ndarray, path) -> None:
    """Write a [3,H,W] float tensor in [0,1] as an 8-bit RGB PNG."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def grayscale(pixels: np.ndarray) -> np.ndarray:
    """Color ablation: BT.601 luma replicated to all 3 channels.

    The luma is computed in float with no intermediate quantization, so the
    transform is idempotent up to rounding and gray pixels are fixed points.
    """
    if pixels.shape[0] != 3:
        raise UsageError("grayscale expects a 3-channel image")
    r, g, b = LUMA_WEIGHTS
    y = r * pixels[0] + g * pixels[1] + b * pixels[2]
    return np.stack([y, y, y]).astype(DTYPE)


def normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    """Channelwise (x - mean) / std."""
    mean = np.asarray(mean, dtype=DTYPE).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=DTYPE).reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise UsageError("config error: normalization std must be positive")
    return ((pixels - mean) / std).astype(DTYPE)


def center_crop(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Crop the spatial center; errors if the image is smaller than the crop."""
    _, h, w = pixels.shape
    if height > h or width > w:
        raise UsageError(f"config error: center crop {height}x{width} exceeds image {h}x{w}")
    r0 = (h - height) // 2
    c0 = (w - width) // 2
    return pixels[:, r0 : r0 + height, c0 : c0 + width]


def _sorted_pngs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise UsageError(f"config error: not a directory: {directory}")
    paths = [p for p in directory.rglob("*.png") if p.is_file()]
    # byte-lexicographic on the relative POSIX path, platform-independent
    return sorted(paths, key=lambda p: p.relative_to(directory).as_posix())


def scan_dataset(
    root=None,
    real_dir=None,
    fake_dir=None,
    limit: int | None = None,
) -> list[tuple[Path, int]]:
    """Deterministically ordered (path, label) list for a real/fake image tree.

    Either pass a root containing real/ and fake/ subdirectories or explicit
    per-class directories. `limit` caps each class after sorting.
    """
    if root is not None:
        root = Path(root)
        real_dir = real_dir or root / "real"
        fake_dir = fake_dir or root / "fake"
    if real_dir is None and fake_dir is None:
        raise UsageError("config error: no dataset directories given")
    entries: list[tuple[Path, int]] = []
    for directory, label in ((real_dir, 0), (fake_dir, 1)):
        if directory is None:
            continue
        paths = _sorted_pngs(Path(directory))
        if limit is not None:
            paths = paths[:limit]
        entries.extend((p, label) for p in paths)
    return entries
