"""Distributional metrics and embedding-geometry diagnostics.

``frechet_gauss`` is the Gaussian-fit (FID-style) distance on raw sample
vectors, ``sliced_w2`` a mixture-faithful alternative and ``diversity`` the
mean pairwise distance used in place of a learned perceptual metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierdata import Taxonomy

JITTER_REL = 1e-6


def _as2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _fit(x: np.ndarray):
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return mu, cov


def _is_pd(cov: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return False
    return True


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_stats(samples_a, samples_b) -> tuple[float, float]:
    """Fréchet distance plus the covariance jitter that was applied (0 if none).

    Jitter of ``1e-6 * mean diagonal`` is added to both covariances only when
    either fails a Cholesky test.
    """
    a, b = _as2d(samples_a), _as2d(samples_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    dim = a.shape[1]
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise ValueError(f"need at least {dim + 1} samples per side")
    mu_a, cov_a = _fit(a)
    mu_b, cov_b = _fit(b)
    jitter = 0.0
    if not (_is_pd(cov_a) and _is_pd(cov_b)):
        scale = 0.5 * (np.trace(cov_a) + np.trace(cov_b)) / dim
        jitter = JITTER_REL * (scale if scale > 0 else 1.0)
        cov_a = cov_a + jitter * np.eye(dim)
        cov_b = cov_b + jitter * np.eye(dim)
    # tr((A B)^1/2) = tr((A^1/2 B A^1/2)^1/2), the inner product being symmetric PSD
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(value, 0.0), jitter


def frechet_gauss(samples_a, samples_b) -> float:
    return frechet_stats(samples_a, samples_b)[0]


def _quantiles(sorted_vals: np.ndarray, n: int) -> np.ndarray:
    m = sorted_vals.shape[-1]
    if m == n:
        return sorted_vals
    grid = (np.arange(n) + 0.5) / n
    src = (np.arange(m) + 0.5) / m
    return np.stack([np.interp(grid, src, row) for row in sorted_vals])


def sliced_w2(samples_a, samples_b, n_proj: int = 128, seed: int = 0) -> float:
    """sqrt of the mean squared 1D W2 over random unit projections.

    Unequal sample counts are matched on a common quantile grid.
    """
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    a, b = _as2d(samples_a), _as2d(samples_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((a.shape[1], n_proj))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    return float(np.sqrt(np.mean(w2_squared_1d(a @ dirs, b @ dirs))))


def w2_squared_1d(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Squared 1D W2 per column via sorted-quantile matching."""
    sa, sb = np.sort(pa, axis=0).T, np.sort(pb, axis=0).T
    n = max(sa.shape[1], sb.shape[1])
    qa, qb = _quantiles(sa, n), _quantiles(sb, n)
    return np.mean((qa - qb) ** 2, axis=1)


def diversity(samples, max_pairs: int = 10_000, seed: int = 0) -> float:
    """Mean pairwise Euclidean distance; a seeded pair subsample beyond ``max_pairs``."""
    x = _as2d(samples)
    n = len(x)
    if n < 2:
        raise ValueError("diversity needs at least 2 samples")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=max_pairs)
        j = (i + rng.integers(1, n, size=max_pairs)) % n
    diff = x[i] - x[j]
    # rescale per pair so tiny nonzero differences do not underflow to 0 when squared
    scale = np.abs(diff).max(axis=1)
    safe = np.where(scale > 0, scale, 1.0)
    return float((scale * np.linalg.norm(diff / safe[:, None], axis=1)).mean())


@dataclass(frozen=True)
class EmbeddingGeometry:
    intra_super_mean_dist: float
    inter_super_mean_dist: float
    super_to_centroid_dist: tuple[float, ...]
    separation_ratio: float
    nearest_centroid_is_own: tuple[bool, ...]

    def to_dict(self) -> dict:
        return {"intra_super_mean_dist": self.intra_super_mean_dist,
                "inter_super_mean_dist": self.inter_super_mean_dist,
                "super_to_centroid_dist": list(self.super_to_centroid_dist),
                "separation_ratio": self.separation_ratio,
                "nearest_centroid_is_own": list(self.nearest_centroid_is_own)}


def embedding_geometry(table, tax: Taxonomy) -> EmbeddingGeometry:
    """Cluster statistics of a tiered embedding table (sub rows, super rows, null)."""
    table = np.asarray(table, dtype=np.float64)
    if table.shape[0] != tax.n_rows:
        raise ValueError(f"table has {table.shape[0]} rows, taxonomy needs {tax.n_rows}")
    sub = table[: tax.n_sub]
    sup = table[tax.n_sub: tax.null_row]
    parent = np.asarray(tax.parent)
    d = np.linalg.norm(sub[:, None] - sub[None], axis=-1)
    iu = np.triu_indices(tax.n_sub, k=1)
    same = (parent[:, None] == parent[None])[iu]
    dists = d[iu]
    intra = float(dists[same].mean()) if same.any() else 0.0
    inter = float(dists[~same].mean()) if (~same).any() else 0.0
    if intra == 0.0:
        ratio = 1.0 if inter == 0.0 else float("inf")
    else:
        ratio = inter / intra
    centroids = np.stack([sub[parent == j].mean(axis=0) for j in range(tax.n_super)])
    to_cent = np.linalg.norm(sup[:, None] - centroids[None], axis=-1)  # (super, centroid)
    own = np.diagonal(to_cent)
    nearest_own = tuple(bool(own[j] < np.delete(to_cent[j], j).min()) if tax.n_super > 1 else True
                        for j in range(tax.n_super))
    return EmbeddingGeometry(intra, inter, tuple(float(v) for v in own), ratio, nearest_own)
