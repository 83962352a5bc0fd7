"""Toy adaLN-conditioned residual denoiser with a tiered label embedder.

Every parameter carries a role tag; fine-tuning modes are masks over tags.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NumericalError
from .hierdata import Taxonomy

TAGS = ("weight", "bias", "norm_scale", "norm_shift", "block_scale",
        "embedding_sub", "embedding_super", "embedding_null", "time_embed")

MODE_TAGS = {
    "full": frozenset(TAGS),
    "bitfit": frozenset({"bias"}),
    "difffit_like": frozenset({"bias", "norm_scale", "norm_shift", "block_scale",
                               "embedding_sub", "embedding_super", "embedding_null"}),
    "finediffusion": frozenset({"bias", "norm_scale", "norm_shift",
                                "embedding_sub", "embedding_super", "embedding_null"}),
}
FINETUNE_MODES = tuple(MODE_TAGS)
EMBED_STD = 0.02


@dataclass(frozen=True)
class DenoiserConfig:
    dim_in: int = 2
    width: int = 128
    depth: int = 4
    d_embed: int = 64
    d_time: int = 64

    def __post_init__(self):
        if min(self.dim_in, self.width, self.depth, self.d_embed, self.d_time) < 1:
            raise ValueError("all DenoiserConfig fields must be positive")
        if self.d_time % 2:
            raise ValueError("d_time must be even")

    def to_dict(self) -> dict:
        return asdict(self)


class TieredEmbedder(nn.Module):
    """One logical table: subclass rows, then superclass rows, then the null row.

    The three segments are separate parameters so each has its own tag.
    """

    def __init__(self, n_sub: int, n_super: int, d_embed: int):
        super().__init__()
        self.sub = nn.Parameter(torch.zeros(n_sub, d_embed))
        self.super = nn.Parameter(torch.zeros(n_super, d_embed))
        self.null = nn.Parameter(torch.zeros(1, d_embed))

    @property
    def n_rows(self) -> int:
        return self.sub.shape[0] + self.super.shape[0] + 1

    @property
    def table(self) -> torch.Tensor:
        return torch.cat([self.sub, self.super, self.null], dim=0)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        if rows.numel() and (int(rows.min()) < 0 or int(rows.max()) >= self.n_rows):
            raise ValueError("label row outside the tiered table")
        return F.embedding(rows, self.table)


def embed_label(embedder: TieredEmbedder, kind: str, index: int | None = None) -> torch.Tensor:
    n_sub, n_super = embedder.sub.shape[0], embedder.super.shape[0]
    if kind == "null":
        return embedder.null[0]
    if kind == "sub" and index is not None and 0 <= index < n_sub:
        return embedder.sub[index]
    if kind == "super" and index is not None and 0 <= index < n_super:
        return embedder.super[index]
    raise ValueError(f"invalid label ({kind!r}, {index!r})")


class AffineNorm(nn.Module):
    """LayerNorm with explicit elementwise scale/shift parameters."""

    def __init__(self, width: int):
        super().__init__()
        self.norm_scale = nn.Parameter(torch.ones(width))
        self.norm_shift = nn.Parameter(torch.zeros(width))

    def forward(self, h):
        return F.layer_norm(h, h.shape[-1:]) * self.norm_scale + self.norm_shift


class AdaLNBlock(nn.Module):
    def __init__(self, width: int, d_embed: int):
        super().__init__()
        self.norm = AffineNorm(width)
        self.modulation = nn.Linear(d_embed, 2 * width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.block_scale = nn.Parameter(torch.ones(()))

    def forward(self, h, c):
        scale, shift = self.modulation(c).chunk(2, dim=-1)
        u = self.norm(h) * (1 + scale) + shift
        return h + self.block_scale * self.fc2(F.silu(self.fc1(u)))


class FinalLayer(nn.Module):
    def __init__(self, width: int, d_embed: int, dim_out: int):
        super().__init__()
        self.norm = AffineNorm(width)
        self.modulation = nn.Linear(d_embed, 2 * width)
        self.proj = nn.Linear(width, dim_out)

    def forward(self, h, c):
        scale, shift = self.modulation(c).chunk(2, dim=-1)
        return self.proj(self.norm(h) * (1 + scale) + shift)


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Denoiser(nn.Module):
    """eps-prediction network conditioned on (label embedding + time embedding)."""

    def __init__(self, cfg: DenoiserConfig, tax: Taxonomy):
        super().__init__()
        self.cfg = cfg
        self.taxonomy = tax
        self.embedder = TieredEmbedder(tax.n_sub, tax.n_super, cfg.d_embed)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.d_time, cfg.d_embed), nn.SiLU(),
                                      nn.Linear(cfg.d_embed, cfg.d_embed))
        self.inp = nn.Linear(cfg.dim_in, cfg.width)
        self.blocks = nn.ModuleList([AdaLNBlock(cfg.width, cfg.d_embed) for _ in range(cfg.depth)])
        self.final = FinalLayer(cfg.width, cfg.d_embed, cfg.dim_in)

    @property
    def dim(self) -> int:
        return self.cfg.dim_in

    def denoise(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_features(t, self.cfg.d_time).to(x_t.dtype))
        c = F.silu(cond + temb)
        h = self.inp(x_t)
        for block in self.blocks:
            h = block(h, c)
        out = self.final(h, c)
        if not torch.isfinite(out).all():
            raise NumericalError("non-finite denoiser output")
        return out

    def forward(self, x_t: torch.Tensor, t, rows: torch.Tensor) -> torch.Tensor:
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.int64)
        return self.denoise(x_t, t, self.embedder(rows))

    def eps_fn(self):
        """Wrap as a no-grad float64-in/float64-out EpsFunction for sampling."""
        dtype = next(self.parameters()).dtype

        def fn(x, t, rows):
            with torch.no_grad():
                return self(x.to(dtype), t, rows).to(torch.float64)

        fn.dim = self.dim
        return fn


def param_tag(name: str) -> str:
    if name.startswith("embedder."):
        return "embedding_" + name.split(".", 1)[1]
    if name.startswith("time_mlp.") and name.endswith(".weight"):
        return "time_embed"
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("norm_scale", "norm_shift", "block_scale", "bias", "weight"):
        return leaf
    raise ValueError(f"no tag rule for parameter {name!r}")


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    tag: str


def parameter_registry(model: nn.Module) -> list[ParamEntry]:
    return [ParamEntry(n, tuple(p.shape), param_tag(n)) for n, p in model.named_parameters()]


def trainable_mask(model: nn.Module, mode: str) -> set[str]:
    if mode not in MODE_TAGS:
        raise ValueError(f"unknown fine-tuning mode {mode!r}; choose from {FINETUNE_MODES}")
    tags = MODE_TAGS[mode]
    return {e.name for e in parameter_registry(model) if e.tag in tags}


def count_trainable(model: nn.Module, mode: str) -> tuple[int, int, float]:
    mask = trainable_mask(model, mode)
    total = trainable = 0
    for name, p in model.named_parameters():
        total += p.numel()
        if name in mask:
            trainable += p.numel()
    return trainable, total, trainable / total


def _init_embedder(emb: TieredEmbedder, gen: torch.Generator):
    with torch.no_grad():
        for p in (emb.sub, emb.super, emb.null):
            p.copy_(torch.randn(p.shape, generator=gen) * EMBED_STD)


def init_model(cfg: DenoiserConfig, tax: Taxonomy, seed: int) -> Denoiser:
    """Xavier-uniform weights, zero biases, unit norm scales and block scales,
    N(0, 0.02^2) embedding rows, zero final projection."""
    model = Denoiser(cfg, tax)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            tag = param_tag(name)
            if tag in ("weight", "time_embed"):
                bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
            elif tag in ("bias", "norm_shift"):
                p.zero_()
            elif tag in ("norm_scale", "block_scale"):
                p.fill_(1.0)
        _init_embedder(model.embedder, gen)
        model.final.proj.weight.zero_()
    return model


def load_pretrained_then_extend(pretrained: Denoiser, tax_new: Taxonomy, seed: int = 0) -> Denoiser:
    """Copy every non-embedder parameter; re-lay-out the embedder for ``tax_new``.

    With an unchanged taxonomy the copy is exact. Otherwise the null row is
    carried over and subclass/superclass rows are drawn fresh.
    """
    model = Denoiser(pretrained.cfg, tax_new)
    src = dict(pretrained.named_parameters())
    with torch.no_grad():
        model.to(next(pretrained.parameters()).dtype)
        for name, p in model.named_parameters():
            if name.startswith("embedder."):
                continue
            if src[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.copy_(src[name])
        if tax_new == pretrained.taxonomy:
            model.embedder.load_state_dict(pretrained.embedder.state_dict())
        else:
            gen = torch.Generator().manual_seed(int(seed))
            _init_embedder(model.embedder, gen)
            model.embedder.null.copy_(pretrained.embedder.null)
    return model


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {n: p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}
