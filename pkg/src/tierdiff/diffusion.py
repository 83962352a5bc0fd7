"""Noise schedules, DDPM forward/reverse steps and guided ancestral sampling.

Timesteps are 1-indexed: ``t`` runs over ``1..T`` and schedule arrays are read
at ``t - 1``. A respaced schedule keeps the original step ids in
``timesteps`` so the denoiser is always queried at training-time indices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .hierdata import GaussianMixtureSpec, Scope, Taxonomy, analytic_eps

GUIDANCE_MODES = ("none", "cfg", "fine")

# eps_fn(x_t, t, rows) -> eps, with rows in the tiered label layout.
EpsFunction = Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor]


class NumericalError(ArithmeticError):
    """Non-finite values appeared in a numerical routine."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    timesteps: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("beta must be a non-empty vector")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        steps = np.asarray(self.timesteps, dtype=np.int64)
        if steps.shape != beta.shape:
            raise ValueError("timesteps must match beta in length")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if alpha_bar[-1] <= 0.0 or np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("alpha_bar underflows in float64; use fewer steps or smaller betas")
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        # "small" posterior variance; zero at t = 1
        with np.errstate(invalid="ignore", divide="ignore"):
            posterior_var = np.where(alpha_bar_prev >= 1.0, 0.0,
                                     beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
        for name, val in (("beta", beta), ("timesteps", steps), ("alpha", alpha),
                          ("alpha_bar", alpha_bar), ("alpha_bar_prev", alpha_bar_prev),
                          ("sigma", np.sqrt(posterior_var))):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        return cls(beta, np.arange(1, len(beta) + 1))

    @property
    def T(self) -> int:
        return len(self.beta)

    def _check(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check(t) - 1])

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "timesteps": self.timesteps.tolist()}


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise ValueError("need T >= 1 and 0 < beta_start <= beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def respace(schedule: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Evenly strided subset of ``steps`` timesteps (always keeping T, and 1 when steps > 1).

    Betas are recomputed from alpha_bar ratios so the respaced chain has the
    same marginals at the retained steps.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps >= schedule.T:
        return schedule
    # counted down from T so a single step still starts from pure noise
    keep = np.unique(np.round(np.linspace(schedule.T - 1, 0, steps)).astype(np.int64))
    ab = schedule.alpha_bar[keep]
    beta = 1.0 - ab / np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(beta, schedule.timesteps[keep])


def _coef(values: np.ndarray, t, like):
    """Gather per-step coefficients at 1-indexed t, broadcastable against ``like``."""
    if isinstance(like, torch.Tensor):
        table = torch.as_tensor(values, dtype=like.dtype)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            return table[t - 1].reshape(-1, *([1] * (like.ndim - 1)))
        return table[int(t) - 1]
    if np.ndim(t) > 0:
        return values[np.asarray(t) - 1].reshape(-1, *([1] * (np.ndim(like) - 1)))
    return values[int(t) - 1]


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps (t scalar or per-row)."""
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise ValueError("x0 and eps must have the same shape")
    t_arr = t.numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any((t_arr < 1) | (t_arr > schedule.T)):
        raise ValueError(f"timestep outside [1, {schedule.T}]")
    ab = schedule.alpha_bar
    return _coef(np.sqrt(ab), t, x0) * x0 + _coef(np.sqrt(1.0 - ab), t, x0) * eps


def p_step(x_t, t: int, eps_hat, schedule: NoiseSchedule, noise):
    """One ancestral step x_t -> x_{t-1}; no noise is added at t = 1."""
    t = schedule._check(t)
    lib = torch if isinstance(x_t, torch.Tensor) else np
    if not (lib.isfinite(x_t).all() and lib.isfinite(eps_hat).all()):
        raise NumericalError(f"non-finite input to p_step at t={t}")
    i = t - 1
    beta, alpha, ab = schedule.beta[i], schedule.alpha[i], schedule.alpha_bar[i]
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mean
    return mean + schedule.sigma[i] * noise


def _affine_guidance(eps_target, eps_base, omega: float):
    # base + omega * (target - base), arranged so omega == 1 and target == base return
    # the target bit for bit (signed zeros included)
    if omega == 1.0:
        return eps_target.clone() if torch.is_tensor(eps_target) else np.array(eps_target, copy=True)
    diff = eps_target - eps_base
    out = eps_target + (omega - 1.0) * diff
    if torch.is_tensor(out):
        return torch.where(diff == 0, eps_target, out)
    return np.where(diff == 0, eps_target, out)


def _check_pair(a, b):
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ValueError("guidance inputs must have matching shapes")


def guide_eps_cfg(eps_cond, eps_null, omega: float):
    """Classifier-free guidance: null-label prediction as the base."""
    _check_pair(eps_cond, eps_null)
    return _affine_guidance(eps_cond, eps_null, omega)


def guide_eps_fine(eps_sub, eps_super, omega: float):
    """Fine-grained guidance: the parent superclass prediction replaces the null one."""
    _check_pair(eps_sub, eps_super)
    return _affine_guidance(eps_sub, eps_super, omega)


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "fine"
    omega: float = 4.0

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance mode must be one of {GUIDANCE_MODES}")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")


def sample_loop(eps_fn: EpsFunction, subclass: int | Sequence[int], tax: Taxonomy,
                guidance: GuidanceConfig, schedule: NoiseSchedule, n: int, seed: int,
                steps: int | None = 250) -> torch.Tensor:
    """Guided DDPM ancestral sampling from x_T ~ N(0, I).

    ``subclass`` is one id (``n`` samples) or one id per sample. Conditional
    and base branches are evaluated in separate calls so each branch is
    bitwise the same as an unguided run with the same seed. Returns an
    ``(n, dim)`` float64 tensor.
    """
    rows = np.full(n, subclass, dtype=np.int64) if np.ndim(subclass) == 0 \
        else np.asarray(subclass, dtype=np.int64)
    n = len(rows)
    for r in np.unique(rows):
        tax._check_sub(r)
    if guidance.mode == "fine":
        base_rows = torch.from_numpy(tax.parent_rows(rows))
    elif guidance.mode == "cfg":
        base_rows = torch.full((n,), tax.null_row, dtype=torch.int64)
    rows_t = torch.from_numpy(rows)
    chain = respace(schedule, steps) if steps else schedule
    dim = _probe_dim(eps_fn)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((n, dim), generator=gen, dtype=torch.float64)
    if n == 0:
        return x
    for i in range(chain.T, 0, -1):
        t_model = int(chain.timesteps[i - 1])
        eps = eps_fn(x, t_model, rows_t)
        if guidance.mode != "none":
            eps_base = eps_fn(x, t_model, base_rows)
            eps = _affine_guidance(eps, eps_base, guidance.omega)
        noise = torch.randn((n, dim), generator=gen, dtype=torch.float64) if i > 1 else None
        x = p_step(x, i, eps, chain, noise)
    return x


def _probe_dim(eps_fn) -> int:
    dim = getattr(eps_fn, "dim", None)
    if dim is None:
        raise ValueError("eps_fn must expose its data dimension as `.dim`")
    return int(dim)


class MixtureOracle:
    """Analytic eps predictor for a Gaussian-mixture taxonomy (an EpsFunction).

    ``null_scope`` selects what the null row means (the marginal by default).
    """

    def __init__(self, spec: GaussianMixtureSpec, schedule: NoiseSchedule,
                 null_scope: Scope | None = None):
        self.spec = spec
        self.schedule = schedule
        self.null_scope = null_scope or Scope.marginal()
        self.dim = spec.dim

    def __call__(self, x: torch.Tensor, t: int, rows: torch.Tensor) -> torch.Tensor:
        xs = x.detach().cpu().numpy().astype(np.float64)
        rows_np = rows.cpu().numpy()
        out = np.empty_like(xs)
        tax = self.spec.taxonomy
        for r in np.unique(rows_np):
            sel = rows_np == r
            scope = self.null_scope if r == tax.null_row else Scope.from_row(tax, r)
            out[sel] = analytic_eps(self.spec, scope, xs[sel], t, self.schedule)
        return torch.from_numpy(out)
