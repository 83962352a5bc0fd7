"""Hierarchical synthetic datasets with exact densities.

Two generators live here:

* 2D/ND Gaussian-mixture taxonomies, whose noised marginals stay Gaussian
  mixtures, so the exact score of every noised density is available in
  closed form (``analytic_eps``).
* Tiny procedural glyph images (disk / cross / bar / ring), where the
  superclass fixes the shape and the subclass fixes fill intensity and
  rotation bucket.

Labels follow the tiered row layout used by the embedder: rows
``[0, n_sub)`` are subclasses, ``[n_sub, n_sub + n_super)`` superclasses and
the final row is the null label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Taxonomy:
    """Superclass/subclass hierarchy with contiguous ids."""

    n_super: int
    parent: tuple[int, ...]
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        if self.n_super < 1 or len(parent) < 1:
            raise ValueError("taxonomy needs at least one superclass and one subclass")
        if any(p < 0 or p >= self.n_super for p in parent):
            raise ValueError(f"parent ids must lie in [0, {self.n_super})")
        if set(parent) != set(range(self.n_super)):
            raise ValueError("every superclass needs at least one subclass")
        if self.names is not None and len(self.names) != len(parent):
            raise ValueError("names must have one entry per subclass")

    @property
    def n_sub(self) -> int:
        return len(self.parent)

    @property
    def n_rows(self) -> int:
        return self.n_sub + self.n_super + 1

    @property
    def null_row(self) -> int:
        return self.n_sub + self.n_super

    def children(self, superclass: int) -> list[int]:
        self._check_super(superclass)
        return [i for i, p in enumerate(self.parent) if p == superclass]

    def sub_row(self, subclass: int) -> int:
        self._check_sub(subclass)
        return subclass

    def super_row(self, superclass: int) -> int:
        self._check_super(superclass)
        return self.n_sub + superclass

    def parent_rows(self, rows) -> np.ndarray:
        """Map subclass rows to their superclass rows (vectorized)."""
        rows = np.asarray(rows, dtype=np.int64)
        if np.any((rows < 0) | (rows >= self.n_sub)):
            raise ValueError("parent_rows expects subclass rows only")
        return np.asarray(self.parent, dtype=np.int64)[rows] + self.n_sub

    def decode_row(self, row: int) -> tuple[str, int | None]:
        row = int(row)
        if 0 <= row < self.n_sub:
            return "sub", row
        if self.n_sub <= row < self.null_row:
            return "super", row - self.n_sub
        if row == self.null_row:
            return "null", None
        raise ValueError(f"row {row} outside tiered layout of {self.n_rows} rows")

    def _check_sub(self, i):
        if not 0 <= int(i) < self.n_sub:
            raise ValueError(f"unknown subclass id {i}")

    def _check_super(self, j):
        if not 0 <= int(j) < self.n_super:
            raise ValueError(f"unknown superclass id {j}")

    def to_dict(self) -> dict:
        return {"n_super": self.n_super, "parent": list(self.parent),
                "names": None if self.names is None else list(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "Taxonomy":
        names = d.get("names")
        return cls(int(d["n_super"]), tuple(d["parent"]), None if names is None else tuple(names))


def build_taxonomy(n_super: int, subs_per_super: int) -> Taxonomy:
    if n_super < 1 or subs_per_super < 1:
        raise ValueError("n_super and subs_per_super must be >= 1")
    parent = tuple(i // subs_per_super for i in range(n_super * subs_per_super))
    return Taxonomy(n_super, parent)


def coarse_taxonomy(tax: Taxonomy) -> Taxonomy:
    """Superclass-only taxonomy: one class per superclass of ``tax``."""
    return Taxonomy(tax.n_super, tuple(range(tax.n_super)))


@dataclass(frozen=True)
class Scope:
    """Which conditional density to evaluate: one subclass, one superclass or the marginal."""

    kind: str
    index: int | None = None

    @classmethod
    def sub(cls, i: int) -> "Scope":
        return cls("sub", int(i))

    @classmethod
    def super(cls, j: int) -> "Scope":
        return cls("super", int(j))

    @classmethod
    def marginal(cls) -> "Scope":
        return cls("marginal")

    @classmethod
    def from_row(cls, tax: Taxonomy, row: int) -> "Scope":
        """The null row maps to the marginal density."""
        kind, idx = tax.decode_row(row)
        return cls.marginal() if kind == "null" else cls(kind, idx)


@dataclass(frozen=True, eq=False)
class GaussianMixtureSpec:
    """Per-subclass Gaussian mixtures stored as flat component arrays.

    ``component_sub[k]`` is the subclass owning component ``k``; weights of each
    subclass's components sum to one.
    """

    taxonomy: Taxonomy
    component_sub: np.ndarray  # (K,) int
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, dim)
    covs: np.ndarray  # (K, dim, dim)
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        comp = np.asarray(self.component_sub, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = covs[None]
        k, dim = means.shape
        if comp.shape != (k,) or weights.shape != (k,) or covs.shape != (k, dim, dim):
            raise ValueError("inconsistent mixture component shapes")
        if np.any((comp < 0) | (comp >= self.taxonomy.n_sub)):
            raise ValueError("component assigned to an unknown subclass")
        if np.any(weights < 0):
            raise ValueError("negative mixture weight")
        sums = np.bincount(comp, weights=weights, minlength=self.taxonomy.n_sub)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ValueError("weights of every subclass must sum to 1")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as err:
            raise ValueError("covariances must be positive definite") from err
        for name, val in (("component_sub", comp), ("weights", weights), ("means", means),
                          ("covs", covs), ("_chol", chol)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def scope_components(self, scope: Scope) -> tuple[np.ndarray, np.ndarray]:
        """Component indices and normalized weights making up ``scope``."""
        tax = self.taxonomy
        if scope.kind == "sub":
            tax._check_sub(scope.index)
            idx = np.flatnonzero(self.component_sub == scope.index)
            return idx, self.weights[idx]
        if scope.kind == "super":
            tax._check_super(scope.index)
            kids = tax.children(scope.index)
            idx = np.flatnonzero(np.isin(self.component_sub, kids))
            return idx, self.weights[idx] / len(kids)
        if scope.kind == "marginal":
            return np.arange(len(self.weights)), self.weights / tax.n_sub
        raise ValueError(f"unknown scope kind {scope.kind!r}")

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"component_sub": self.component_sub, "weights": self.weights,
                "means": self.means, "covs": self.covs}


def make_mixture_taxonomy(tax: Taxonomy, dim: int = 2, seed: int = 0,
                          superclass_spread: float = 8.0, subclass_spread: float = 1.0,
                          noise_scale: float = 0.5) -> GaussianMixtureSpec:
    """One isotropic Gaussian per subclass, clustered around superclass centers.

    Superclass centers sit on a circle (dim 2, with a seeded phase) or on
    well-separated, randomly rotated sphere directions (dim > 2) at radius
    ``superclass_spread``; each subclass mean is its parent center plus an
    offset of norm ``subclass_spread``.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if noise_scale <= 0 or subclass_spread <= 0 or superclass_spread <= 0:
        raise ValueError("spreads and noise_scale must be positive")
    if superclass_spread <= subclass_spread:
        raise ValueError("superclass_spread must exceed subclass_spread")
    rng = np.random.default_rng(seed)
    centers = _spread_points(tax.n_super, dim, rng) * superclass_spread
    if tax.n_super == 1:
        centers[:] = 0.0
    means = np.empty((tax.n_sub, dim))
    for j in range(tax.n_super):
        kids = tax.children(j)
        offsets = _sphere_points(len(kids), dim, rng) * subclass_spread
        if len(kids) == 1:
            offsets[:] = 0.0
        means[kids] = centers[j] + offsets
    covs = np.broadcast_to(np.eye(dim) * noise_scale**2, (tax.n_sub, dim, dim)).copy()
    return GaussianMixtureSpec(tax, np.arange(tax.n_sub), np.ones(tax.n_sub), means, covs)


def _spread_points(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Well-separated unit vectors: circle (dim 2), rotated cross-polytope
    (n <= 2 dim, pairwise distance >= sqrt 2), else farthest-point picks."""
    if dim <= 2:
        return _sphere_points(n, dim, rng)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if n <= 2 * dim:
        axes = np.stack([np.eye(dim), -np.eye(dim)], axis=1).reshape(2 * dim, dim)  # +e0, -e0, +e1, ...
        return axes[:n] @ q.T
    cand = _sphere_points(64 * n, dim, rng)
    picked = [0]
    dist = np.linalg.norm(cand - cand[0], axis=1)
    for _ in range(n - 1):
        k = int(np.argmax(dist))
        picked.append(k)
        dist = np.minimum(dist, np.linalg.norm(cand - cand[k], axis=1))
    return cand[picked]


def _sphere_points(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if dim == 1:
        return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)[:, None]
    if dim == 2:
        phase = rng.uniform(0.0, 2 * np.pi)
        ang = phase + 2 * np.pi * np.arange(n) / n
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class LabeledSample:
    x0: np.ndarray
    subclass: int


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Column-oriented list of :class:`LabeledSample` (x0 rows + subclass ids)."""

    x0: np.ndarray  # (N, dim)
    subclass: np.ndarray  # (N,)
    taxonomy: Taxonomy

    def __post_init__(self):
        if self.x0.ndim != 2 or self.subclass.shape != (self.x0.shape[0],):
            raise ValueError("x0 must be (N, dim) with one label per row")
        if len(self.subclass) and (self.subclass.min() < 0 or self.subclass.max() >= self.taxonomy.n_sub):
            raise ValueError("label outside taxonomy")

    def __len__(self) -> int:
        return self.x0.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x0[i], int(self.subclass[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    def relabel_to_superclass(self) -> "LabeledDataset":
        """Same points, labelled by superclass under the coarse taxonomy."""
        parent = np.asarray(self.taxonomy.parent)
        return LabeledDataset(self.x0, parent[self.subclass], coarse_taxonomy(self.taxonomy))


def sample_mixture(spec: GaussianMixtureSpec, scope: Scope, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    idx, w = spec.scope_components(scope)
    pick = idx[rng.choice(len(idx), size=n, p=w / w.sum())]
    z = rng.standard_normal((n, spec.dim))
    return spec.means[pick] + np.einsum("nij,nj->ni", spec._chol[pick], z)


def sample_dataset(spec: GaussianMixtureSpec, tax: Taxonomy, n_per_subclass: int,
                   seed: int) -> LabeledDataset:
    if n_per_subclass < 1:
        raise ValueError("n_per_subclass must be >= 1")
    if tax != spec.taxonomy:
        raise ValueError("taxonomy does not match the mixture spec")
    rng = np.random.default_rng(seed)
    xs = [sample_mixture(spec, Scope.sub(i), n_per_subclass, rng) for i in range(tax.n_sub)]
    labels = np.repeat(np.arange(tax.n_sub), n_per_subclass)
    return LabeledDataset(np.concatenate(xs), labels, tax)


def _component_logpdf(spec: GaussianMixtureSpec, idx: np.ndarray, x: np.ndarray):
    """log N(x; mu_k, Sigma_k) and whitened residuals for the selected components."""
    diff = x[:, None, :] - spec.means[idx][None]  # (N, K, d)
    chol = spec._chol[idx]
    z = np.linalg.solve(chol, diff.transpose(1, 2, 0)).transpose(2, 0, 1)  # L z = diff
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    logpdf = -0.5 * (spec.dim * LOG_2PI + logdet[None] + np.sum(z * z, axis=2))
    return logpdf, z, chol


def log_density(spec: GaussianMixtureSpec, scope: Scope, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[-1] != spec.dim:
        raise ValueError(f"x has dimension {x2.shape[-1]}, spec has {spec.dim}")
    idx, w = spec.scope_components(scope)
    logpdf, _, _ = _component_logpdf(spec, idx, x2)
    with np.errstate(divide="ignore"):
        out = logsumexp(logpdf + np.log(w)[None], axis=1)
    return float(out[0]) if single else out


def score(spec: GaussianMixtureSpec, scope: Scope, x) -> np.ndarray:
    """Gradient of ``log_density`` with respect to x."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    idx, w = spec.scope_components(scope)
    logpdf, z, chol = _component_logpdf(spec, idx, x2)
    with np.errstate(divide="ignore"):
        logr = logpdf + np.log(w)[None]
    resp = np.exp(logr - logsumexp(logr, axis=1, keepdims=True))  # (N, K)
    # Sigma^{-1} (x - mu) = L^{-T} z
    prec_diff = np.linalg.solve(np.swapaxes(chol, 1, 2), z.transpose(1, 2, 0)).transpose(2, 0, 1)
    g = -np.einsum("nk,nkd->nd", resp, prec_diff)
    return g[0] if np.ndim(x) == 1 else g


def noised_spec_at(spec: GaussianMixtureSpec, alpha_bar: float) -> GaussianMixtureSpec:
    """Push every component through x_t = sqrt(ab) x0 + sqrt(1 - ab) eps."""
    alpha_bar = float(alpha_bar)
    if not 0.0 <= alpha_bar <= 1.0:
        raise ValueError("alpha_bar must lie in [0, 1]")
    covs = alpha_bar * spec.covs + (1.0 - alpha_bar) * np.eye(spec.dim)
    return GaussianMixtureSpec(spec.taxonomy, spec.component_sub, spec.weights,
                               np.sqrt(alpha_bar) * spec.means, covs)


def noised_spec(spec: GaussianMixtureSpec, schedule, t: int) -> GaussianMixtureSpec:
    return noised_spec_at(spec, schedule.alpha_bar_at(t))


def analytic_eps(spec: GaussianMixtureSpec, scope: Scope, x, t: int, schedule) -> np.ndarray:
    """Exact noise prediction eps*(x, t) = -sqrt(1 - ab_t) * grad log p_t(x)."""
    ab = schedule.alpha_bar_at(t)
    if ab >= 1.0:
        raise ValueError("analytic eps is undefined at zero noise (alpha_bar == 1)")
    return -np.sqrt(1.0 - ab) * score(noised_spec_at(spec, ab), scope, x)


# --- glyph images -----------------------------------------------------------

SHAPE_KINDS = ("disk", "cross", "bar", "ring")


@dataclass(frozen=True)
class GlyphImageSpec:
    side: int = 16
    shapes: tuple[str, ...] = SHAPE_KINDS
    n_fill_levels: int = 3
    n_rotation_buckets: int = 4
    jitter_px: float = 1.5

    def __post_init__(self):
        if self.side < 4:
            raise ValueError("side must be >= 4")
        if not self.shapes or any(s not in SHAPE_KINDS for s in self.shapes):
            raise ValueError(f"shapes must be drawn from {SHAPE_KINDS}")
        if self.n_fill_levels < 1 or self.n_rotation_buckets < 1:
            raise ValueError("fill levels and rotation buckets must be >= 1")

    def subclass_style(self, tax: Taxonomy, subclass: int) -> tuple[str, float, int]:
        """(shape kind, fill intensity, rotation bucket) of a subclass."""
        sup = tax.parent[subclass]
        local = tax.children(sup).index(subclass)
        level = local % self.n_fill_levels
        bucket = (local // self.n_fill_levels) % self.n_rotation_buckets
        fill = 1.0 if self.n_fill_levels == 1 else 0.2 + 0.8 * level / (self.n_fill_levels - 1)
        return self.shapes[sup % len(self.shapes)], fill, bucket

    def to_dict(self) -> dict:
        return {"side": self.side, "shapes": list(self.shapes), "n_fill_levels": self.n_fill_levels,
                "n_rotation_buckets": self.n_rotation_buckets, "jitter_px": self.jitter_px}


def render_glyph(spec: GlyphImageSpec, kind: str, fill: float, angle: float,
                 center: Sequence[float]) -> np.ndarray:
    """Render one glyph; background is -1, shape pixels take ``fill``."""
    s = spec.side
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    dx, dy = xx - center[0], yy - center[1]
    c, sn = np.cos(angle), np.sin(angle)
    u, v = c * dx + sn * dy, -sn * dx + c * dy
    r = s * 0.3
    # each shape carries an asymmetric feature so the rotation bucket stays visible
    if kind == "disk":  # off-center hole
        mask = (u**2 + v**2 <= r**2) & ((u - 0.5 * r) ** 2 + v**2 > (0.3 * r) ** 2)
    elif kind == "ring":  # open on the +u side
        rad = np.sqrt(u**2 + v**2)
        mask = (rad <= r) & (rad >= 0.55 * r) & ~((u > 0) & (np.abs(v) <= 0.35 * r))
    elif kind == "cross":  # one long arm
        w = 0.3 * r
        mask = (((np.abs(u) <= w) & (v >= -r) & (v <= 0.5 * r))
                | ((np.abs(v) <= w) & (np.abs(u) <= r)))
    else:  # bar
        mask = (np.abs(u) <= r) & (np.abs(v) <= 0.35 * r)
    return np.where(mask, fill, -1.0)


def render_glyph_dataset(spec: GlyphImageSpec, tax: Taxonomy, n_per_subclass: int,
                         seed: int) -> LabeledDataset:
    if n_per_subclass < 1:
        raise ValueError("n_per_subclass must be >= 1")
    rng = np.random.default_rng(seed)
    bucket_width = np.pi / spec.n_rotation_buckets
    images, labels = [], []
    for sub in range(tax.n_sub):
        kind, fill, bucket = spec.subclass_style(tax, sub)
        for _ in range(n_per_subclass):
            center = spec.side / 2 + rng.uniform(-spec.jitter_px, spec.jitter_px, size=2)
            angle = bucket_width * (bucket + rng.uniform(0.25, 0.75))
            images.append(render_glyph(spec, kind, fill, angle, center).ravel())
            labels.append(sub)
    return LabeledDataset(np.stack(images), np.asarray(labels, dtype=np.int64), tax)
