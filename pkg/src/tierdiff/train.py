"""DDPM eps-prediction training with masked (parameter-efficient) updates.

Per-iteration random draws come from one ``torch.Generator`` in a fixed
order: batch indices, timesteps, noise, superclass-replacement uniforms,
null-drop uniforms. The draw order does not depend on ``p_super``/``p_null``.
"""

from __future__ import annotations

import logging
import time
import dataclasses
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, NumericalError, q_sample
from .hierdata import LabeledDataset, Taxonomy
from .model import (FINETUNE_MODES, DenoiserConfig, Denoiser, count_trainable, init_model,
                    load_pretrained_then_extend, param_tag, trainable_mask)

log = logging.getLogger(__name__)

DECAY_TAGS = ("weight", "time_embed")
EXTEND_SEED_OFFSET = 7919  # seed for fresh fine-grained embedder rows


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 2000
    batch_size: int = 256
    p_super: float = 0.1
    p_null: float = 0.0
    mode: str = "full"
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 500
    eval_size: int = 2048

    def __post_init__(self):
        if not (0.0 <= self.p_super <= 1.0 and 0.0 <= self.p_null <= 1.0):
            raise ValueError("p_super and p_null must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mode not in FINETUNE_MODES:
            raise ValueError(f"mode must be one of {FINETUNE_MODES}")
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 1 or self.eval_size < 1:
            raise ValueError("iterations >= 0, batch_size, eval_every, eval_size >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    trainable: int = 0
    total: int = 0
    fraction: float = 0.0
    iterations: int = 0
    train_seconds: float = 0.0

    @property
    def steps_per_sec(self) -> float:
        return self.iterations / self.train_seconds if self.train_seconds > 0 else 0.0

    def summary(self) -> dict:
        return {"trainable": self.trainable, "total": self.total, "fraction": self.fraction,
                "iterations": self.iterations, "train_seconds": self.train_seconds,
                "steps_per_sec": self.steps_per_sec}


def replace_label(subclass: int, tax: Taxonomy, p_super: float, rng: np.random.Generator) -> int:
    """Row of the parent superclass with probability ``p_super``, else the subclass row."""
    tax._check_sub(subclass)
    if rng.random() < p_super:
        return tax.super_row(tax.parent[subclass])
    return tax.sub_row(subclass)


def replace_labels(subclass: torch.Tensor, parent: torch.Tensor, n_sub: int, null_row: int,
                   u_super: torch.Tensor, u_null: torch.Tensor, p_super: float,
                   p_null: float) -> torch.Tensor:
    """Vectorized relabelling: ``u_super < p_super`` -> parent superclass row;
    otherwise ``u_null < p_null`` -> null row."""
    rows = subclass.clone()
    to_super = u_super < p_super
    to_null = (~to_super) & (u_null < p_null)
    rows[to_super] = parent[subclass[to_super]] + n_sub
    rows[to_null] = null_row
    return rows


def _eps_loss(model: Denoiser, schedule: NoiseSchedule, x0, rows, t, eps) -> torch.Tensor:
    x_t = q_sample(x0, t, eps, schedule)
    return F.mse_loss(model(x_t, t, rows), eps)


def loss_batch(model: Denoiser, schedule: NoiseSchedule, x0, subclass, tax: Taxonomy,
               p_super: float, gen: torch.Generator, *, p_null: float = 0.0, t=None, eps=None):
    """Mean-squared eps error for one batch and its gradients.

    ``t``/``eps`` may be fixed explicitly; otherwise they are drawn from ``gen``.
    Returns ``(loss, {name: grad})`` for every parameter with ``requires_grad``.
    """
    dtype = next(model.parameters()).dtype
    x0 = torch.as_tensor(x0, dtype=dtype)
    subclass = torch.as_tensor(subclass, dtype=torch.int64)
    if x0.ndim != 2 or len(x0) == 0:
        raise ValueError("batch must be a non-empty (B, dim) array")
    b = len(x0)
    t_draw = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    eps_draw = torch.randn(x0.shape, generator=gen, dtype=dtype)
    u_super = torch.rand(b, generator=gen, dtype=torch.float64)
    u_null = torch.rand(b, generator=gen, dtype=torch.float64)
    t = t_draw if t is None else torch.as_tensor(t, dtype=torch.int64).expand(b)
    eps = eps_draw if eps is None else torch.as_tensor(eps, dtype=dtype)
    parent = torch.as_tensor(tax.parent, dtype=torch.int64)
    rows = replace_labels(subclass, parent, tax.n_sub, tax.null_row, u_super, u_null,
                          p_super, p_null)
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    loss = _eps_loss(model, schedule, x0, rows, t, eps)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    return loss.item(), {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(params, grads)}


class Trainer:
    """Holds model, optimizer and RNG so a run can be checkpointed and resumed exactly."""

    def __init__(self, model: Denoiser, data: LabeledDataset, cfg: TrainConfig,
                 schedule: NoiseSchedule):
        if len(data) == 0:
            raise ValueError("training data is empty")
        if data.taxonomy != model.taxonomy:
            raise ValueError("data taxonomy does not match the model")
        self.model, self.cfg, self.schedule = model, cfg, schedule
        self.tax = model.taxonomy
        dtype = next(model.parameters()).dtype
        self.x0 = torch.as_tensor(data.x0, dtype=dtype)
        self.labels = torch.as_tensor(data.subclass, dtype=torch.int64)
        self.parent = torch.as_tensor(self.tax.parent, dtype=torch.int64)
        mask = trainable_mask(model, cfg.mode)
        decay, no_decay = [], []
        for name, p in model.named_parameters():
            p.requires_grad_(name in mask)
            if name in mask:
                (decay if param_tag(name) in DECAY_TAGS else no_decay).append(p)
        groups = [g for g in ({"params": decay, "weight_decay": cfg.weight_decay},
                              {"params": no_decay, "weight_decay": 0.0}) if g["params"]]
        self.optimizer = torch.optim.AdamW(groups, lr=cfg.learning_rate, foreach=False)
        self.gen = torch.Generator().manual_seed(int(cfg.seed))
        self.iteration = 0
        self.records: list[dict] = []
        self.train_seconds = 0.0
        self._eval_batch = self._make_eval_batch()

    def _make_eval_batch(self):
        g = torch.Generator().manual_seed(int(self.cfg.seed) + 1)
        n = self.cfg.eval_size
        idx = torch.randint(0, len(self.x0), (n,), generator=g)
        t = torch.randint(1, self.schedule.T + 1, (n,), generator=g)
        eps = torch.randn((n, self.x0.shape[1]), generator=g, dtype=self.x0.dtype)
        return self.x0[idx], self.labels[idx], t, eps

    def eval_loss(self) -> float:
        x0, rows, t, eps = self._eval_batch
        with torch.no_grad():
            return _eps_loss(self.model, self.schedule, x0, rows, t, eps).item()

    def step(self) -> float:
        cfg, g = self.cfg, self.gen
        b = cfg.batch_size
        idx = torch.randint(0, len(self.x0), (b,), generator=g)
        t = torch.randint(1, self.schedule.T + 1, (b,), generator=g)
        eps = torch.randn((b, self.x0.shape[1]), generator=g, dtype=self.x0.dtype)
        u_super = torch.rand(b, generator=g, dtype=torch.float64)
        u_null = torch.rand(b, generator=g, dtype=torch.float64)
        rows = replace_labels(self.labels[idx], self.parent, self.tax.n_sub, self.tax.null_row,
                              u_super, u_null, cfg.p_super, cfg.p_null)
        loss = _eps_loss(self.model, self.schedule, self.x0[idx], rows, t, eps)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite training loss at iteration {self.iteration + 1}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.iteration += 1
        return loss.item()

    def run(self, on_eval=None) -> TrainReport:
        """Train up to ``cfg.iterations``; ``on_eval(trainer)`` fires at each eval boundary."""
        cfg = self.cfg
        if self.iteration == 0 and cfg.iterations > 0:
            self._record(None, 0.0, 0)
        loss_sum, n_since, t_since = 0.0, 0, 0.0
        while self.iteration < cfg.iterations:
            t0 = time.perf_counter()
            loss_sum += self.step()
            dt = time.perf_counter() - t0
            self.train_seconds += dt
            t_since += dt
            n_since += 1
            if self.iteration % cfg.eval_every == 0 or self.iteration == cfg.iterations:
                self._record(loss_sum / n_since, t_since, n_since)
                loss_sum, n_since, t_since = 0.0, 0, 0.0
                if on_eval is not None:
                    on_eval(self)
        trainable, total, frac = count_trainable(self.model, cfg.mode)
        return TrainReport(self.records, trainable, total, frac, self.iteration, self.train_seconds)

    def _record(self, train_loss: float | None, seconds: float, steps: int):
        rec = {"iteration": self.iteration, "eval_loss": self.eval_loss(), "train_loss": train_loss,
               "seconds": self.train_seconds, "steps_per_sec": steps / seconds if seconds > 0 else 0.0}
        self.records.append(rec)
        log.info("iter %d eval_loss %.5f", rec["iteration"], rec["eval_loss"])

    def state_dict(self) -> dict:
        opt = self.optimizer.state_dict()
        names = [n for n, p in self.model.named_parameters() if p.requires_grad]
        order = [n for g in self._groups_by_name() for n in g]
        state = {}
        for i, name in enumerate(order):
            st = opt["state"].get(i)
            if st is not None:
                state[name] = {k: (v.detach().clone() if torch.is_tensor(v) else v) for k, v in st.items()}
        assert set(order) == set(names)
        return {"iteration": self.iteration, "rng_state": self.gen.get_state().clone(),
                "optimizer": state}

    def load_state_dict(self, sd: dict):
        order = [n for g in self._groups_by_name() for n in g]
        opt = self.optimizer.state_dict()
        opt["state"] = {i: {k: v.clone() for k, v in sd["optimizer"][n].items()}
                        for i, n in enumerate(order) if n in sd["optimizer"]}
        self.optimizer.load_state_dict(opt)
        self.gen.set_state(sd["rng_state"].clone())
        self.iteration = int(sd["iteration"])

    def _groups_by_name(self) -> list[list[str]]:
        ids = {id(p): n for n, p in self.model.named_parameters()}
        return [[ids[id(p)] for p in g["params"]] for g in self.optimizer.param_groups]


def train(model: Denoiser, data: LabeledDataset, cfg: TrainConfig, schedule: NoiseSchedule,
          on_eval=None) -> tuple[Denoiser, TrainReport]:
    trainer = Trainer(model, data, cfg, schedule)
    report = trainer.run(on_eval)
    return model, report


def finetune(pretrained: Denoiser, data: LabeledDataset, cfg: TrainConfig,
             schedule: NoiseSchedule, seed: int = 0) -> tuple[Denoiser, TrainReport]:
    """Extend ``pretrained`` to the data's taxonomy and train the ``cfg.mode`` mask."""
    model = load_pretrained_then_extend(pretrained, data.taxonomy, seed=seed)
    return train(model, data, cfg, schedule)


def pretrain_finetune(pretrain_data: LabeledDataset, finetune_data: LabeledDataset,
                      model_cfg: DenoiserConfig, cfg_pre: TrainConfig, cfg_ft: TrainConfig,
                      schedule: NoiseSchedule, seed: int = 0):
    """Pretrain (full) on the coarse taxonomy, then fine-tune per ``cfg_ft.mode``.

    Returns ``(pretrained, finetuned, pre_report, ft_report)``.
    """
    pre = init_model(model_cfg, pretrain_data.taxonomy, seed)
    pre, pre_report = train(pre, pretrain_data, dataclasses.replace(cfg_pre, mode="full"), schedule)
    tuned, ft_report = finetune(pre, finetune_data, cfg_ft, schedule, seed=seed + EXTEND_SEED_OFFSET)
    return pre, tuned, pre_report, ft_report
