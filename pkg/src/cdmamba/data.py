"""Bi-temporal sample I/O, patch splitting, and the synthetic pair generator.

On-disk layout per dataset directory: ``A/<id>.png`` and ``B/<id>.png`` hold
the two RGB acquisitions, ``label/<id>.png`` the grayscale change mask.
Split manifests are plain-text files (train.txt/val.txt/test.txt), one id
per line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class DataError(Exception):
    """Missing, malformed, or inconsistent dataset files."""


@dataclass
class SamplePair:
    """Co-registered images t1/t2 in [0,1], binary change mask, and an id."""

    t1: np.ndarray
    t2: np.ndarray
    gt: np.ndarray
    id: str
    meta: dict = field(default_factory=dict, repr=False)


def _read_rgb(path) -> np.ndarray:
    if not os.path.isfile(path):
        raise DataError(f"missing image file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def _read_label(path) -> np.ndarray:
    if not os.path.isfile(path):
        raise DataError(f"missing label file: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "I", "P"):
            raise DataError(f"label must be single-channel, got mode {im.mode!r}: {path}")
        arr = np.asarray(im.convert("L"))
    # threshold at 128 so anti-aliased masks still binarize cleanly
    return (arr >= 128).astype(np.uint8)


def load_pair(root, sample_id: str) -> SamplePair:
    t1 = _read_rgb(os.path.join(root, "A", f"{sample_id}.png"))
    t2 = _read_rgb(os.path.join(root, "B", f"{sample_id}.png"))
    gt = _read_label(os.path.join(root, "label", f"{sample_id}.png"))
    shapes = {"A": t1.shape[1:], "B": t2.shape[1:], "label": gt.shape}
    if len(set(shapes.values())) != 1:
        raise DataError(f"size mismatch for id {sample_id!r}: " +
                        ", ".join(f"{k}={v}" for k, v in shapes.items()))
    return SamplePair(t1=t1, t2=t2, gt=gt, id=sample_id)


def load_inputs(root, sample_id: str):
    """Like load_pair but tolerates a missing label; returns (t1, t2, gt|None)."""
    t1 = _read_rgb(os.path.join(root, "A", f"{sample_id}.png"))
    t2 = _read_rgb(os.path.join(root, "B", f"{sample_id}.png"))
    if t1.shape != t2.shape:
        raise DataError(f"size mismatch for id {sample_id!r}: A={t1.shape[1:]}, B={t2.shape[1:]}")
    label_path = os.path.join(root, "label", f"{sample_id}.png")
    gt = None
    if os.path.isfile(label_path):
        gt = _read_label(label_path)
        if gt.shape != t1.shape[1:]:
            raise DataError(
                f"size mismatch for id {sample_id!r}: images={t1.shape[1:]}, label={gt.shape}")
    return t1, t2, gt


def save_pair(root, sample: SamplePair) -> None:
    for sub in ("A", "B", "label"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)

    def to_png(img: np.ndarray) -> Image.Image:
        arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")

    to_png(sample.t1).save(os.path.join(root, "A", f"{sample.id}.png"))
    to_png(sample.t2).save(os.path.join(root, "B", f"{sample.id}.png"))
    Image.fromarray((sample.gt * 255).astype(np.uint8), mode="L").save(
        os.path.join(root, "label", f"{sample.id}.png"))


def list_ids(root) -> list:
    a_dir = os.path.join(root, "A")
    if not os.path.isdir(a_dir):
        raise DataError(f"dataset directory has no A/ subfolder: {root}")
    return sorted(os.path.splitext(f)[0] for f in os.listdir(a_dir) if f.endswith(".png"))


def write_manifest(root, name: str, ids) -> None:
    with open(os.path.join(root, f"{name}.txt"), "w") as f:
        f.writelines(f"{i}\n" for i in ids)


def read_manifest(root, name: str) -> list:
    path = os.path.join(root, f"{name}.txt")
    if not os.path.isfile(path):
        raise DataError(f"missing manifest: {path}")
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def patch_split(sample: SamplePair, patch: int) -> list:
    """Cut one pair into a row-major grid of non-overlapping aligned patches."""
    _, h, w = sample.t1.shape
    if h % patch or w % patch:
        raise DataError(
            f"image size {h}x{w} not divisible by patch {patch} "
            f"(remainders {h % patch}, {w % patch})")
    out = []
    for r in range(h // patch):
        for c in range(w // patch):
            ys = slice(r * patch, (r + 1) * patch)
            xs = slice(c * patch, (c + 1) * patch)
            out.append(SamplePair(
                t1=sample.t1[:, ys, xs].copy(),
                t2=sample.t2[:, ys, xs].copy(),
                gt=sample.gt[ys, xs].copy(),
                id=f"{sample.id}_r{r}_c{c}"))
    return out


# ---------------------------------------------------------------------------
# synthetic change-detection pairs: bright rectangles over a smooth background

_NOISE_AMPLITUDE = 0.05
_MAX_RECTS = 4


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency field: a coarse random grid blown up bilinearly."""
    coarse_n = max(2, size // 8)
    coarse = rng.uniform(0.2, 0.5, size=(3, coarse_n, coarse_n))
    xs = np.linspace(0, coarse_n - 1, size)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, coarse_n - 1)
    w = xs - i0
    rows = coarse[:, i0, :] * (1 - w)[None, :, None] + coarse[:, i1, :] * w[None, :, None]
    return rows[:, :, i0] * (1 - w)[None, None, :] + rows[:, :, i1] * w[None, None, :]


def _random_rect(rng: np.random.Generator, size: int) -> tuple:
    side_min, side_max = max(3, size // 8), max(4, size // 3)
    rh = int(rng.integers(side_min, side_max + 1))
    rw = int(rng.integers(side_min, side_max + 1))
    y = int(rng.integers(0, size - rh + 1))
    x = int(rng.integers(0, size - rw + 1))
    color = rng.uniform(0.7, 1.0, size=3)
    return (y, x, rh, rw, color)


def _paint(image: np.ndarray, rects) -> None:
    for (y, x, rh, rw, color) in rects:
        image[:, y:y + rh, x:x + rw] = color[:, None, None]


def _footprint(rects, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for (y, x, rh, rw, _) in rects:
        mask[y:y + rh, x:x + rw] = True
    return mask


def synth_generate(n: int, size: int, seed: int, with_rects: bool = False) -> list:
    """Deterministic synthetic dataset of n pairs of the given square size.

    Both images share a smooth background plus independent per-image noise;
    t1 carries 1..4 bright rectangles, t2 drops a random subset and may gain
    new ones; gt is the exact symmetric difference of the two footprints.
    Every 8th sample is forced to be change-free (empty gt coverage).
    """
    if size % 8:
        raise DataError(f"synthetic size must be divisible by 8, got {size}")
    if size < 16:
        raise DataError(f"synthetic size must be at least 16, got {size}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        background = _smooth_background(rng, size)
        rects_t1 = [_random_rect(rng, size) for _ in range(int(rng.integers(1, _MAX_RECTS + 1)))]
        force_unchanged = (i % 8) == 7
        if force_unchanged:
            rects_t2 = list(rects_t1)
        else:
            keep = [r for r in rects_t1 if rng.random() >= 0.5]
            added = [_random_rect(rng, size)
                     for _ in range(int(rng.integers(0, _MAX_RECTS - len(keep) + 1)))]
            rects_t2 = keep + added
        t1 = background + rng.uniform(-_NOISE_AMPLITUDE, _NOISE_AMPLITUDE, background.shape)
        t2 = background + rng.uniform(-_NOISE_AMPLITUDE, _NOISE_AMPLITUDE, background.shape)
        _paint(t1, rects_t1)
        _paint(t2, rects_t2)
        gt = (_footprint(rects_t1, size) ^ _footprint(rects_t2, size)).astype(np.uint8)
        meta = {"rects_t1": rects_t1, "rects_t2": rects_t2} if with_rects else {}
        samples.append(SamplePair(
            t1=np.clip(t1, 0.0, 1.0), t2=np.clip(t2, 0.0, 1.0), gt=gt,
            id=f"synth_{seed}_{i:04d}", meta=meta))
    return samples


# ---------------------------------------------------------------------------
# confusion-colored overlays: TP white, TN black, FP red, FN green

OVERLAY_COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 0),
    "fn": (0, 255, 0),
}


def confusion_overlay(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Render the per-pixel confusion outcome as an RGB uint8 image."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DataError(f"overlay: shape mismatch {pred.shape} vs {gt.shape}")
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & gt] = OVERLAY_COLORS["tp"]
    out[~pred & ~gt] = OVERLAY_COLORS["tn"]
    out[pred & ~gt] = OVERLAY_COLORS["fp"]
    out[~pred & gt] = OVERLAY_COLORS["fn"]
    return out


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) * 255).astype(np.uint8), mode="L").save(path)


def save_overlay(path, overlay: np.ndarray) -> None:
    Image.fromarray(overlay, mode="RGB").save(path)
