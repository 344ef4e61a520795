"""Paired baseline metrics over (reference, candidate) image pairs.

PSNR and SSIM follow their common 8-bit conventions; SSIM uses an 11x11
Gaussian window (sigma 1.5) evaluated on valid windows only, i.e. no
padding convention is invented at the borders. Perceptual distances are
not computed here; externally computed per-pair values are imported from
CSV instead.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError, ValidationError
from .features import ImageBuffer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


@dataclass(frozen=True)
class ImagePair:
    reference: ImageBuffer
    candidate: ImageBuffer
    id: str = ""

    def __post_init__(self):
        a, b = self.reference, self.candidate
        if (a.width, a.height, a.channels) != (b.width, b.height, b.channels):
            raise ValidationError(
                f"pair {self.id!r}: dimensions differ "
                f"({a.width}x{a.height}x{a.channels} vs {b.width}x{b.height}x{b.channels})"
            )


def psnr(pair: ImagePair) -> float:
    """Peak signal-to-noise ratio in dB (8-bit scale); +inf when identical."""
    diff = pair.reference.data.astype(np.float64) - pair.candidate.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def _gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _filter_valid(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Separable valid-mode filtering; output shrinks by window - 1 per axis.
    rows = np.lib.stride_tricks.sliding_window_view(plane, kernel.size, axis=1) @ kernel
    return np.lib.stride_tricks.sliding_window_view(rows, kernel.size, axis=0) @ kernel


def ssim(pair: ImagePair) -> float:
    """Mean structural similarity in [-1, 1]; channels are averaged."""
    ref = pair.reference
    if min(ref.width, ref.height) < SSIM_WINDOW:
        raise ValidationError(
            f"image {ref.width}x{ref.height} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    kernel = _gaussian_kernel_1d(SSIM_WINDOW, SSIM_SIGMA)
    scores = []
    for ch in range(ref.channels):
        x = pair.reference.data[:, :, ch].astype(np.float64)
        y = pair.candidate.data[:, :, ch].astype(np.float64)
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x * mu_x
        var_y = _filter_valid(y * y, kernel) - mu_y * mu_y
        cov_xy = _filter_valid(x * y, kernel) - mu_x * mu_y
        ssim_map = ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov_xy + SSIM_C2)) / (
            (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        )
        scores.append(float(ssim_map.mean()))
    return float(np.mean(scores))


def import_pair_distances(path: str | Path, expected_ids: Iterable[str]) -> dict[str, float]:
    """Read a CSV of externally computed per-pair distances.

    The file must have the header ``id,distance`` and cover exactly the
    expected ids; distances must be non-negative.
    """
    path = Path(path)
    expected = set(expected_ids)
    out: dict[str, float] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "distance"]:
            raise FormatError(f"expected header 'id,distance', got {header}", path=str(path))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"line {lineno}: expected 2 fields, got {len(row)}", path=str(path))
            pair_id, raw = row
            try:
                value = float(raw)
            except ValueError as exc:
                raise FormatError(f"line {lineno}: bad distance {raw!r}", path=str(path)) from exc
            if not math.isfinite(value) or value < 0:
                raise FormatError(f"line {lineno}: distance must be >= 0, got {raw}", path=str(path))
            if pair_id in out:
                raise ValidationError(f"duplicate id {pair_id!r} in {path}")
            out[pair_id] = value
    missing = expected - set(out)
    extra = set(out) - expected
    if missing or extra:
        raise ValidationError(
            f"pair-distance ids do not match: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    return out
