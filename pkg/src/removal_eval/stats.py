"""Gaussian summary statistics of feature sets and the Fréchet distance.

All arithmetic is done in 64-bit floating point regardless of the input
precision; the matrix square root uses a symmetric eigendecomposition with
negative eigenvalues clamped to zero, which keeps 2048-dimensional
covariance work deterministic and tuning-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, NotPsdError, NumericalError, ValidationError

# Relative tolerance for the symmetry check on covariance matrices.
COV_SYMMETRY_RTOL = 1e-12
# Matrices fed to the square root may be asymmetric up to this relative level.
SQRTM_SYMMETRY_RTOL = 1e-8
# Eigenvalues down to -PSD_CLAMP_RTOL * max_eigenvalue are clamped to zero.
PSD_CLAMP_RTOL = 1e-8
# Diagonal jitter applied once when the symmetrized product is indefinite.
JITTER_SCALE = 1e-6
# Fréchet values below this are an internal error; smaller negatives clamp to 0.
NEGATIVE_DISTANCE_TOL = 1e-6


def _as_readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """N x D matrix of activation vectors with stable per-row image ids.

    Rows and ids correspond bijectively; every value must be finite.
    """

    ids: tuple[str, ...]
    data: np.ndarray

    def __init__(self, ids: Sequence[str], data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"feature data must be 2-D, got shape {arr.shape}")
        n, d = arr.shape
        if n < 1 or d < 1:
            raise ValidationError(f"feature matrix must be at least 1x1, got {n}x{d}")
        id_tuple = tuple(str(i) for i in ids)
        if len(id_tuple) != n:
            raise ValidationError(
                f"got {len(id_tuple)} ids for {n} rows; ids must index rows bijectively"
            )
        if len(set(id_tuple)) != n:
            seen: set[str] = set()
            for image_id in id_tuple:
                if image_id in seen:
                    raise ValidationError(f"duplicate image id {image_id!r}")
                seen.add(image_id)
        finite_rows = np.isfinite(arr).all(axis=1)
        if not finite_rows.all():
            bad = int(np.flatnonzero(~finite_rows)[0])
            raise ValidationError(f"non-finite feature value in row id {id_tuple[bad]!r}")
        object.__setattr__(self, "ids", id_tuple)
        object.__setattr__(self, "data", _as_readonly(arr))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def take(self, indices: Iterable[int]) -> "FeatureMatrix":
        """Row subset (used by subsampling); ids follow the selected rows."""
        idx = list(indices)
        return FeatureMatrix([self.ids[i] for i in idx], self.data[idx])

    def row_index(self) -> dict[str, int]:
        return {image_id: i for i, image_id in enumerate(self.ids)}


@dataclass(frozen=True, eq=False)
class GaussianStats:
    """Mean vector and covariance matrix of a feature set."""

    mean: np.ndarray
    cov: np.ndarray
    n_samples: int

    def __init__(self, mean: np.ndarray, cov: np.ndarray, n_samples: int):
        mu = np.asarray(mean, dtype=np.float64).reshape(-1)
        sigma = np.asarray(cov, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ValidationError(f"covariance must be square, got shape {sigma.shape}")
        if sigma.shape[0] != mu.shape[0]:
            raise ValidationError(
                f"mean has dim {mu.shape[0]} but covariance is {sigma.shape[0]}x{sigma.shape[1]}"
            )
        _check_symmetry(sigma, COV_SYMMETRY_RTOL, what="covariance")
        if n_samples < 2:
            raise DegenerateInputError(f"n_samples must be >= 2, got {n_samples}")
        object.__setattr__(self, "mean", _as_readonly(mu))
        object.__setattr__(self, "cov", _as_readonly(sigma))
        object.__setattr__(self, "n_samples", int(n_samples))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _check_symmetry(a: np.ndarray, rtol: float, what: str) -> None:
    scale = float(np.abs(a).max()) if a.size else 0.0
    if scale == 0.0:
        return
    asym = float(np.abs(a - a.T).max())
    if asym > rtol * scale:
        raise ValidationError(
            f"{what} is asymmetric beyond tolerance: max |a - a.T| = {asym:.3e}, "
            f"allowed {rtol * scale:.3e}"
        )


def compute_gaussian_stats(features: FeatureMatrix) -> GaussianStats:
    """Per-column mean and unbiased (N-1) sample covariance of a feature set.

    Raises DegenerateInputError for fewer than two rows.
    """
    n = features.n
    if n < 2:
        raise DegenerateInputError(
            f"covariance needs at least 2 samples, got {n} (id {features.ids[0]!r})"
        )
    mean = features.data.mean(axis=0)
    centered = features.data - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean, cov, n)


def sqrtm_psd(a: np.ndarray, clamp_rtol: float = PSD_CLAMP_RTOL) -> np.ndarray:
    """Symmetric PSD square root: returns S with S @ S ~= a.

    Eigenvalues in [-clamp_rtol * max_eig, 0) are clamped to zero; anything
    below that raises NotPsdError reporting the offending eigenvalue.
    """
    mat = np.asarray(a, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError(f"matrix must be square, got shape {mat.shape}")
    _check_symmetry(mat, SQRTM_SYMMETRY_RTOL, what="sqrtm input")
    sym = (mat + mat.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    max_eig = float(eigvals.max(initial=0.0))
    floor = -clamp_rtol * max(max_eig, np.finfo(np.float64).tiny)
    min_eig = float(eigvals.min(initial=0.0))
    if min_eig < floor:
        raise NotPsdError(
            f"matrix is not PSD: eigenvalue {min_eig:.6e} below clamp floor {floor:.6e}",
            eigenvalue=min_eig,
        )
    root = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return (root + root.T) / 2.0


def _frechet_cross_trace(cov_p: np.ndarray, cov_q: np.ndarray) -> float:
    # tr((Sp Sq)^{1/2}) via the symmetrized form sqrt(Sp^{1/2} Sq Sp^{1/2}),
    # so only symmetric square roots are ever taken.
    root_p = sqrtm_psd(cov_p)
    inner = root_p @ cov_q @ root_p
    cross = sqrtm_psd((inner + inner.T) / 2.0)
    return float(np.trace(cross))


def frechet_distance_info(p: GaussianStats, q: GaussianStats) -> tuple[float, bool]:
    """Fréchet distance plus a flag telling whether the jitter fallback fired.

    ||mu_p - mu_q||^2 + tr(cov_p + cov_q - 2 (cov_p cov_q)^{1/2}), with one
    retry after adding JITTER_SCALE * mean(diag) * I to both covariances if
    the symmetrized product is indefinite.
    """
    if p.dim != q.dim:
        raise ValidationError(f"dimension mismatch: {p.dim} vs {q.dim}")
    jitter_applied = False
    try:
        cross_trace = _frechet_cross_trace(p.cov, q.cov)
    except NotPsdError:
        diag_mean = float(np.concatenate([np.diag(p.cov), np.diag(q.cov)]).mean())
        eps = JITTER_SCALE * diag_mean
        bump = eps * np.eye(p.dim)
        try:
            cross_trace = _frechet_cross_trace(p.cov + bump, q.cov + bump)
        except NotPsdError as exc:
            raise NumericalError(
                f"covariance product indefinite even after jitter {eps:.3e}: {exc}"
            ) from exc
        jitter_applied = True
    diff = p.mean - q.mean
    value = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * cross_trace)
    if value < -NEGATIVE_DISTANCE_TOL:
        raise NumericalError(f"Fréchet distance came out negative: {value:.6e}")
    return max(value, 0.0), jitter_applied


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """Fréchet distance between two Gaussian summaries (non-negative)."""
    value, _ = frechet_distance_info(p, q)
    return value
