"""Paired-image manifests and synthetic desk-scale data.

A manifest is a JSON object {"split": ..., "entries": [...]} where each
entry names a low-light PNG, its reference PNG, and a spectrum tag.
Relative paths are resolved against the manifest's directory on load.

The synthetic generator produces smooth random references and degrades
them with a gamma curve, a global darkening, a red channel gain, and
sensor noise, so channel statistics are consistently miscalibrated in a
way the alignment loss can detect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import load_png

_ENTRY_KEYS = ("low", "ref", "spectrum")


class ManifestError(ValueError):
    """Raised when a manifest file is malformed."""


@dataclass(frozen=True)
class PairEntry:
    low: str
    ref: str
    spectrum: str


@dataclass(frozen=True)
class PairManifest:
    split: str
    entries: tuple[PairEntry, ...]


def load_manifest(path) -> PairManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: top level must be a JSON object")
    split = data.get("split")
    if not isinstance(split, str):
        raise ManifestError(f"{path}: 'split' must be a string")
    raw_entries = data.get("entries")
    if not isinstance(raw_entries, list):
        raise ManifestError(f"{path}: 'entries' must be a list")
    entries = []
    for i, raw in enumerate(raw_entries):
        if not isinstance(raw, dict):
            raise ManifestError(f"{path}: entry {i}: must be an object")
        for key in _ENTRY_KEYS:
            if key not in raw:
                raise ManifestError(f"{path}: entry {i}: missing key '{key}'")
            if not isinstance(raw[key], str):
                raise ManifestError(f"{path}: entry {i}: '{key}' must be a string")
        entries.append(
            PairEntry(
                low=str(path.parent / raw["low"]),
                ref=str(path.parent / raw["ref"]),
                spectrum=raw["spectrum"],
            )
        )
    return PairManifest(split=split, entries=tuple(entries))


def save_manifest(manifest: PairManifest, path) -> None:
    payload = {
        "split": manifest.split,
        "entries": [{"low": e.low, "ref": e.ref, "spectrum": e.spectrum} for e in manifest.entries],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_pairs(manifest: PairManifest) -> list[tuple[np.ndarray, np.ndarray]]:
    """Load every (low, reference) pair as float arrays, validating shapes."""
    pairs = []
    for i, entry in enumerate(manifest.entries):
        low = load_png(entry.low).data
        ref = load_png(entry.ref).data
        if low.shape != ref.shape:
            raise ManifestError(f"entry {i}: shape mismatch {low.shape} vs {ref.shape}")
        pairs.append((low, ref))
    return pairs


# ----------------------------------------------------------------- synthesis


def bilinear_upsample(field: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (C, h, w) field by sampling output pixel centers bilinearly."""
    field = np.asarray(field, dtype=np.float64)
    c, in_h, in_w = field.shape

    def axis_coords(n_out, n_in):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    row_lo, row_hi, row_frac = axis_coords(out_h, in_h)
    col_lo, col_hi, col_frac = axis_coords(out_w, in_w)
    top = field[:, row_lo][:, :, col_lo] * (1 - col_frac) + field[:, row_lo][:, :, col_hi] * col_frac
    bottom = field[:, row_hi][:, :, col_lo] * (1 - col_frac) + field[:, row_hi][:, :, col_hi] * col_frac
    return top * (1 - row_frac[None, :, None]) + bottom * row_frac[None, :, None]


def make_reference(rng: np.random.Generator, size: int = 64, control_points: int = 6) -> np.ndarray:
    """Smooth random RGB image with values comfortably inside [0, 1]."""
    coarse = rng.uniform(0.0, 1.0, size=(3, control_points, control_points))
    smooth = bilinear_upsample(coarse, size, size)
    textured = smooth + rng.normal(0.0, 0.015, size=smooth.shape)
    return np.clip(0.1 + 0.8 * textured, 0.0, 1.0)


def synthesize_low(ref: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Degrade a reference: gamma curve, darkening, red gain, sensor noise."""
    ref = np.asarray(ref, dtype=np.float64)
    gamma = rng.uniform(1.6, 2.2)
    brightness = rng.uniform(0.2, 0.35)
    red_gain = rng.uniform(1.15, 1.35)
    low = np.power(ref, gamma) * brightness
    low[0] *= red_gain
    low += rng.normal(0.0, 0.01, size=low.shape)
    return np.clip(low, 0.0, 1.0)


def make_synthetic_dataset(n_pairs: int, size: int = 64, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        ref = make_reference(rng, size=size)
        pairs.append((synthesize_low(ref, rng), ref))
    return pairs


def sample_patches(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    patch_size: int,
    count: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Draw aligned random crops from random pairs; deterministic under rng."""
    if not pairs:
        raise ValueError("need at least one pair")
    out = []
    for _ in range(count):
        idx = int(rng.integers(0, len(pairs)))
        low, ref = pairs[idx]
        if low.shape[1] < patch_size or low.shape[2] < patch_size:
            raise ValueError(f"pair {idx}: image smaller than patch size {patch_size}")
        top = int(rng.integers(0, low.shape[1] - patch_size + 1))
        left = int(rng.integers(0, low.shape[2] - patch_size + 1))
        out.append(
            (
                low[:, top : top + patch_size, left : left + patch_size].copy(),
                ref[:, top : top + patch_size, left : left + patch_size].copy(),
            )
        )
    return out
