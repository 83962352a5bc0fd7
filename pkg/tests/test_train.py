import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from tierdiff.diffusion import NumericalError, make_schedule
from tierdiff.hierdata import LabeledDataset, build_taxonomy, make_mixture_taxonomy, sample_dataset
from tierdiff.model import (DenoiserConfig, init_model, load_pretrained_then_extend, param_tag,
                            state_arrays, trainable_mask)
from tierdiff.train import (DECAY_TAGS, EXTEND_SEED_OFFSET, TrainConfig, Trainer, loss_batch,
                            pretrain_finetune, replace_label, replace_labels, train)

from oracles import randomize

SMALL = DenoiserConfig(dim_in=2, width=16, depth=2, d_embed=8, d_time=8)
SCHED = make_schedule()


@pytest.fixture(scope="module")
def task():
    tax = build_taxonomy(3, 2)
    spec = make_mixture_taxonomy(tax, seed=0, superclass_spread=4.0, subclass_spread=1.0)
    return tax, spec, sample_dataset(spec, tax, 100, seed=0)


def quick(**kw):
    base = dict(learning_rate=1e-3, iterations=30, batch_size=32, eval_every=10, eval_size=64)
    base.update(kw)
    return TrainConfig(**base)


# --- label replacement ----------------------------------------------------------

def test_replace_label_extremes():
    tax = build_taxonomy(3, 4)
    rng = np.random.default_rng(0)
    assert all(replace_label(7, tax, 0.0, rng) == 7 for _ in range(100))
    assert all(replace_label(7, tax, 1.0, rng) == tax.super_row(1) for _ in range(100))
    with pytest.raises(ValueError):
        replace_label(12, tax, 0.5, rng)


def test_replacement_rate_binomial_bound():
    tax = build_taxonomy(3, 4)
    rng = np.random.default_rng(1)
    n = 1_000_000
    hits = sum(replace_label(5, tax, 0.1, rng) != 5 for _ in range(n))
    assert 0.097 <= hits / n <= 0.103


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_vectorized_replacement_rule(p_super, p_null, seed):
    tax = build_taxonomy(4, 3)
    g = torch.Generator().manual_seed(seed)
    sub = torch.randint(0, tax.n_sub, (200,), generator=g)
    u1, u2 = torch.rand(200, generator=g, dtype=torch.float64), torch.rand(200, generator=g, dtype=torch.float64)
    parent = torch.as_tensor(tax.parent)
    rows = replace_labels(sub, parent, tax.n_sub, tax.null_row, u1, u2, p_super, p_null)
    for i in range(200):
        if u1[i] < p_super:
            assert rows[i] == tax.super_row(tax.parent[sub[i]])
        elif u2[i] < p_null:
            assert rows[i] == tax.null_row
        else:
            assert rows[i] == sub[i]


# --- loss -----------------------------------------------------------------------

class EpsEcho(torch.nn.Module):
    """Returns a preset noise tensor: a denoiser that is exactly right."""

    def __init__(self, eps, tax):
        super().__init__()
        self.eps = eps
        self.taxonomy = tax
        self.anchor = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, x_t, t, rows):
        return self.eps + 0 * self.anchor


def test_exact_denoiser_has_zero_loss(task):
    tax, _, data = task
    eps = torch.randn(16, 2, dtype=torch.float64)
    loss, grads = loss_batch(EpsEcho(eps, tax), SCHED, data.x0[:16], data.subclass[:16], tax, 0.1,
                             torch.Generator().manual_seed(0), eps=eps)
    assert loss == 0.0 and set(grads) == {"anchor"}


def test_zero_output_init_has_unit_loss(task):
    tax, _, data = task
    model = init_model(SMALL, tax, 0).double()
    idx = np.random.default_rng(0).integers(0, len(data), 10_000)
    loss, _ = loss_batch(model, SCHED, data.x0[idx], data.subclass[idx], tax, 0.1, torch.Generator().manual_seed(1))
    assert loss == pytest.approx(1.0, rel=0.05)


def test_duplicated_sample_loss_equals_single(task):
    tax, _, _ = task
    cfg1 = DenoiserConfig(dim_in=1, width=16, depth=2, d_embed=8, d_time=8)
    model = randomize(init_model(cfg1, tax, 0).double())
    x = np.full((1, 1), 0.7)
    eps = torch.tensor([[0.3]], dtype=torch.float64)
    single, _ = loss_batch(model, SCHED, x, [2], tax, 0.0, torch.Generator().manual_seed(0), t=100, eps=eps)
    many, _ = loss_batch(model, SCHED, np.repeat(x, 8, axis=0), [2] * 8, tax, 0.0,
                         torch.Generator().manual_seed(0), t=100, eps=eps.expand(8, 1))
    # batched matmuls may block differently, so agreement is to rounding only
    assert many == pytest.approx(single, rel=1e-12, abs=0)


def test_empty_batch_rejected(task):
    tax, _, _ = task
    with pytest.raises(ValueError):
        loss_batch(init_model(SMALL, tax, 0), SCHED, np.zeros((0, 2)), [], tax, 0.1, torch.Generator())


def test_loss_gradient_matches_finite_differences(task):
    tax, _, data = task
    model = randomize(init_model(SMALL, tax, 0).double(), seed=3)
    x0, sub = data.x0[:24], data.subclass[:24]
    t = torch.randint(1, 1001, (24,), generator=torch.Generator().manual_seed(2))
    eps = torch.randn(24, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(3))

    def loss_only():
        return loss_batch(model, SCHED, x0, sub, tax, 0.3, torch.Generator().manual_seed(9),
                          t=t, eps=eps)[0]

    _, grads = loss_batch(model, SCHED, x0, sub, tax, 0.3, torch.Generator().manual_seed(9), t=t, eps=eps)
    params = dict(model.named_parameters())
    rng = np.random.default_rng(0)
    h = 1e-5
    for name, p in params.items():
        flat = p.data.view(-1)
        g = grads[name].reshape(-1)
        for k in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            orig = flat[k].item()
            flat[k] = orig + h
            up = loss_only()
            flat[k] = orig - h
            down = loss_only()
            flat[k] = orig
            fd = (up - down) / (2 * h)
            assert abs(g[k].item() - fd) <= 1e-4 * max(abs(fd), 1e-6), (name, k)


# --- training loop ----------------------------------------------------------------

def test_zero_iterations_leave_model_unchanged(task):
    tax, _, data = task
    model = init_model(SMALL, tax, 0)
    before = state_arrays(model)
    _, report = train(model, data, quick(iterations=0), SCHED)
    after = state_arrays(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert report.records == [] and report.iterations == 0


@pytest.mark.parametrize("mode", ["full", "bitfit", "difffit_like", "finediffusion"])
def test_frozen_parameters_are_bit_identical(task, mode):
    tax, _, data = task
    model = randomize(init_model(SMALL, tax, 0), scale=0.05)
    before = state_arrays(model)
    # p_super and p_null both positive so every embedding row sees gradient
    _, report = train(model, data, quick(mode=mode, weight_decay=0.1, p_null=0.2), SCHED)
    after = state_arrays(model)
    mask = trainable_mask(model, mode)
    for k in before:
        if k in mask:
            assert not np.array_equal(before[k], after[k]), k
        else:
            assert before[k].tobytes() == after[k].tobytes(), k
    assert report.trainable == sum(before[k].size for k in mask)


def test_weight_decay_only_on_weight_tags(task):
    tax, _, data = task
    model = init_model(SMALL, tax, 0)
    tr = Trainer(model, data, quick(weight_decay=0.3), SCHED)
    names = {id(p): n for n, p in model.named_parameters()}
    for group in tr.optimizer.param_groups:
        tags = {param_tag(names[id(p)]) for p in group["params"]}
        if group["weight_decay"] > 0:
            assert tags <= set(DECAY_TAGS)
        else:
            assert not tags & set(DECAY_TAGS)


def test_frozen_parameters_are_excluded_from_optimizer(task):
    tax, _, data = task
    model = init_model(SMALL, tax, 0)
    tr = Trainer(model, data, quick(mode="bitfit"), SCHED)
    in_opt = {id(p) for g in tr.optimizer.param_groups for p in g["params"]}
    for name, p in model.named_parameters():
        assert (id(p) in in_opt) == (param_tag(name) == "bias") == p.requires_grad


def test_loss_decreases_and_report_is_consistent(task):
    tax, _, data = task
    _, report = train(init_model(SMALL, tax, 0), data, quick(iterations=300, eval_every=100), SCHED)
    its = [r["iteration"] for r in report.records]
    assert its == [0, 100, 200, 300]
    assert report.records[-1]["eval_loss"] < report.records[0]["eval_loss"]
    assert report.steps_per_sec * report.train_seconds == pytest.approx(report.iterations, rel=0.01)
    assert report.summary()["fraction"] == 1.0


def test_training_is_deterministic(task):
    tax, _, data = task
    a, _ = train(init_model(SMALL, tax, 0), data, quick(p_super=0.3, p_null=0.1), SCHED)
    b, _ = train(init_model(SMALL, tax, 0), data, quick(p_super=0.3, p_null=0.1), SCHED)
    sa, sb = state_arrays(a), state_arrays(b)
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_resume_from_state_is_bit_identical(task):
    tax, _, data = task
    cfg = quick(iterations=40, mode="finediffusion", p_super=0.2)
    full, _ = train(init_model(SMALL, tax, 0), data, cfg, SCHED)

    first = Trainer(init_model(SMALL, tax, 0), data, dataclasses.replace(cfg, iterations=15), SCHED)
    first.run()
    state = first.state_dict()
    model = init_model(SMALL, tax, 0)
    model.load_state_dict(first.model.state_dict())
    second = Trainer(model, data, cfg, SCHED)
    second.load_state_dict(state)
    second.run()
    sa, sb = state_arrays(full), state_arrays(second.model)
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_divergence_aborts(task):
    tax, _, _ = task
    x = np.full((8, 2), 1e38, dtype=np.float32)
    data = LabeledDataset(x, np.zeros(8, dtype=np.int64), tax)
    model = randomize(init_model(SMALL, tax, 0))
    with pytest.raises(NumericalError):
        train(model, data, quick(iterations=5), SCHED)


def test_trainer_rejects_bad_inputs(task):
    tax, _, data = task
    with pytest.raises(ValueError):
        Trainer(init_model(SMALL, build_taxonomy(2, 2), 0), data, quick(), SCHED)
    with pytest.raises(ValueError):
        Trainer(init_model(SMALL, tax, 0), LabeledDataset(np.zeros((0, 2)), np.zeros(0, np.int64), tax),
                quick(), SCHED)
    for bad in (dict(p_super=1.5), dict(learning_rate=0.0), dict(mode="lora"), dict(iterations=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- pretrain -> fine-tune --------------------------------------------------------------

def test_pretrain_finetune_contracts(task):
    tax, _, data = task
    coarse = data.relabel_to_superclass()
    pre, tuned, _, rep = pretrain_finetune(coarse, data, SMALL, quick(), quick(iterations=0), SCHED, seed=4)
    ext = load_pretrained_then_extend(pre, tax, seed=4 + EXTEND_SEED_OFFSET)
    a, b = state_arrays(ext), state_arrays(tuned)
    assert all(np.array_equal(a[k], b[k]) for k in a) and rep.iterations == 0

    pre, tuned, _, _ = pretrain_finetune(coarse, data, SMALL, quick(), quick(mode="finediffusion"), SCHED, seed=4)
    p, f = state_arrays(pre), state_arrays(tuned)
    for k in p:
        if param_tag(k) in ("weight", "time_embed", "block_scale"):
            assert p[k].tobytes() == f[k].tobytes(), k
    assert tuned.taxonomy == tax and pre.taxonomy == coarse.taxonomy


@pytest.mark.slow
def test_default_task_full_training_reduces_loss_fivefold():
    from tierdiff.benchmark import mixture_task, model_config, schedule_from
    from tierdiff.config import RunConfig

    cfg = RunConfig()
    tax, _, data = mixture_task(cfg)
    _, report = train(init_model(model_config(cfg, 2), tax, 0), data,
                      TrainConfig(iterations=20_000, eval_every=5000), schedule_from(cfg))
    first, last = report.records[0]["eval_loss"], report.records[-1]["eval_loss"]
    assert last < 0.2 * first
