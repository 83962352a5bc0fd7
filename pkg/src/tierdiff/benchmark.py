"""Fine-tuning mode comparison: pretrain once per seed, fine-tune each mode,
sample, and score against fresh draws from the true mixture.

Tables have fixed column names (``METRIC_COLUMNS`` for per-scope metric
reports, ``BENCH_COLUMNS`` for the per-(mode, seed) comparison). Columns in
``TIMING_COLUMNS`` are wall-clock measurements and are not reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule, sample_loop
from .evaluation import diversity, embedding_geometry, frechet_stats, sliced_w2
from .hierdata import (GaussianMixtureSpec, LabeledDataset, Scope, Taxonomy, build_taxonomy,
                       make_mixture_taxonomy, sample_dataset, sample_mixture)
from .model import Denoiser, DenoiserConfig, init_model
from .train import EXTEND_SEED_OFFSET, TrainConfig, Trainer, finetune, train

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("run_id", "scope", "scope_id", "n", "frechet_gauss", "frechet_jitter",
                  "sliced_w2", "diversity")
BENCH_COLUMNS = ("run_id", "mode", "seed", "guidance", "frechet_gauss", "frechet_jitter",
                 "sliced_w2", "diversity", "per_class_frechet", "separation_ratio",
                 "super_nearest_own", "trainable", "total", "trainable_fraction",
                 "iterations", "steps_per_sec", "train_seconds")
TIMING_COLUMNS = ("steps_per_sec", "train_seconds")


def model_config(cfg: RunConfig, dim: int) -> DenoiserConfig:
    m = cfg.model
    return DenoiserConfig(dim_in=dim, width=m.width, depth=m.depth, d_embed=m.d_embed, d_time=m.d_time)


def schedule_from(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.kind, s.T, s.beta_start, s.beta_end)


def mixture_task(cfg: RunConfig, seed: int | None = None):
    """Taxonomy, mixture and training set described by ``cfg`` (seed defaults to ``cfg.seed``)."""
    seed = cfg.seed if seed is None else seed
    tax = build_taxonomy(cfg.taxonomy.n_super, cfg.taxonomy.subs_per_super)
    d = cfg.dataset
    spec = make_mixture_taxonomy(tax, d.dim, seed, d.superclass_spread, d.subclass_spread, d.noise_scale)
    return tax, spec, sample_dataset(spec, tax, d.n_per_subclass, seed)


def sample_classes(model: Denoiser, guidance: GuidanceConfig, schedule: NoiseSchedule,
                   n_per_class: int, seed: int, steps: int, classes=None):
    """``n_per_class`` samples for each subclass in ``classes`` (all by default), one chain batch."""
    tax = model.taxonomy
    classes = np.arange(tax.n_sub) if classes is None else np.asarray(classes, dtype=np.int64)
    labels = np.repeat(classes, n_per_class)
    x = sample_loop(model.eps_fn(), labels, tax, guidance, schedule, len(labels), seed, steps)
    return x.numpy(), labels


def reference_samples(spec: GaussianMixtureSpec, n_per_class: int, seed: int, classes=None):
    tax = spec.taxonomy
    classes = np.arange(tax.n_sub) if classes is None else np.asarray(classes, dtype=np.int64)
    rng = np.random.default_rng(seed)
    x = np.concatenate([sample_mixture(spec, Scope.sub(int(c)), n_per_class, rng) for c in classes]) \
        if len(classes) else np.zeros((0, spec.dim))
    return x, np.repeat(classes, n_per_class)


def _row(run_id, scope, scope_id, gen, ref, divs, n_proj, seed):
    fd, jitter = frechet_stats(gen, ref)
    return {"run_id": run_id, "scope": scope, "scope_id": scope_id, "n": len(gen),
            "frechet_gauss": fd, "frechet_jitter": jitter,
            "sliced_w2": sliced_w2(gen, ref, n_proj, seed), "diversity": float(np.mean(divs))}


def metric_rows(run_id: str, samples, labels, ref, ref_labels, tax: Taxonomy,
                n_proj: int = 128, max_pairs: int = 10_000, seed: int = 0) -> list[dict]:
    """Per-subclass, per-superclass and pooled ("overall") metrics.

    Fréchet and sliced W2 compare generated vs reference samples pooled over
    the scope. Diversity is within one subclass; superclass and overall rows
    carry the mean over their subclasses.
    """
    samples, ref = np.asarray(samples, np.float64), np.asarray(ref, np.float64)
    labels, ref_labels = np.asarray(labels), np.asarray(ref_labels)
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    if labels.min() < 0 or labels.max() >= tax.n_sub:
        raise ValueError(f"sample labels outside the taxonomy's {tax.n_sub} subclasses")
    present = np.unique(labels)
    missing = set(present.tolist()) - set(np.unique(ref_labels).tolist())
    if missing:
        raise ValueError(f"no reference samples for subclasses {sorted(missing)}")
    div = {int(c): diversity(samples[labels == c], max_pairs, seed) for c in present}
    rows = []
    for c in present:
        rows.append(_row(run_id, "sub", int(c), samples[labels == c], ref[ref_labels == c],
                         [div[int(c)]], n_proj, seed))
    parent = np.asarray(tax.parent)
    for j in np.unique(parent[present]):
        kids = [c for c in present if parent[c] == j]
        g, r = np.isin(labels, kids), np.isin(ref_labels, kids)
        rows.append(_row(run_id, "super", int(j), samples[g], ref[r], [div[int(c)] for c in kids],
                         n_proj, seed))
    r = np.isin(ref_labels, present)
    rows.append(_row(run_id, "overall", "", samples, ref[r], list(div.values()), n_proj, seed))
    return rows


@dataclass
class BenchResult:
    rows: list[dict] = field(default_factory=list)       # one per (mode, seed)
    medians: list[dict] = field(default_factory=list)    # one per mode
    metrics: list[dict] = field(default_factory=list)    # per-scope metric rows of every run
    geometry: dict = field(default_factory=dict)         # run_id -> EmbeddingGeometry dict
    pretrain: dict = field(default_factory=dict)         # seed -> pretrain report summary

    def table(self) -> list[dict]:
        return self.rows + self.medians

    def to_dict(self) -> dict:
        return {"columns": list(BENCH_COLUMNS), "rows": self.rows, "medians": self.medians,
                "metric_columns": list(METRIC_COLUMNS), "metrics": self.metrics,
                "geometry": self.geometry, "pretrain": {str(k): v for k, v in self.pretrain.items()}}


def seed_medians(rows: list[dict]) -> list[dict]:
    """Per-mode medians over seeds of every numeric column (order-independent)."""
    out = []
    for mode in dict.fromkeys(r["mode"] for r in rows):
        group = [r for r in rows if r["mode"] == mode]
        med = {"run_id": f"{mode}-median", "mode": mode, "seed": "median", "guidance": group[0]["guidance"]}
        for col in BENCH_COLUMNS[4:]:
            med[col] = float(np.median([float(r[col]) for r in group]))
        out.append(med)
    return out


def finetune_config(cfg: RunConfig, mode: str, seed: int) -> tuple[TrainConfig, GuidanceConfig]:
    """Training and guidance settings for one benchmark cell.

    finediffusion trains with superclass replacement and samples with
    fine-grained guidance; the other modes train with null-label dropout and
    sample with standard CFG, both at the configured omega.
    """
    if mode == "finediffusion":
        tcfg = dataclasses.replace(cfg.train, mode=mode, seed=seed, p_null=0.0)
        guidance = GuidanceConfig("fine", cfg.guidance.omega)
    else:
        tcfg = dataclasses.replace(cfg.train, mode=mode, seed=seed, p_super=0.0,
                                   p_null=cfg.bench.baseline_p_null)
        guidance = GuidanceConfig("cfg", cfg.guidance.omega)
    return tcfg, guidance


def pretrain_model(cfg: RunConfig, data: LabeledDataset, seed: int, schedule: NoiseSchedule):
    coarse = data.relabel_to_superclass()
    pre = init_model(model_config(cfg, data.dim), coarse.taxonomy, seed)
    tcfg = dataclasses.replace(cfg.pretrain, mode="full", seed=seed)
    return train(pre, coarse, tcfg, schedule)


def benchmark_modes(cfg: RunConfig, modes=None, seeds=None, data: LabeledDataset | None = None,
                    spec: GaussianMixtureSpec | None = None, progress=None) -> BenchResult:
    """Pretrain/fine-tune/sample/evaluate every (mode, seed) cell.

    The dataset and mixture are fixed (from ``cfg.seed`` unless given); each
    benchmark seed drives model init, training, sampling and the reference
    draw. ``progress(msg)`` receives one line per finished stage.
    """
    modes = tuple(modes or cfg.bench.modes)
    seeds = tuple(cfg.bench.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    if data is None or spec is None:
        _, spec, data = mixture_task(cfg)
    tax = data.taxonomy
    schedule = schedule_from(cfg)
    ev = cfg.eval
    result = BenchResult()
    say = progress or (lambda msg: log.info(msg))
    for seed in seeds:
        pre, pre_report = pretrain_model(cfg, data, seed, schedule)
        result.pretrain[seed] = pre_report.summary()
        say(f"seed {seed}: pretrained ({pre_report.iterations} it, {pre_report.train_seconds:.1f}s)")
        ref, ref_labels = reference_samples(spec, ev.n_per_class, ev.seed + seed)
        for mode in modes:
            run_id = f"{mode}-s{seed}"
            tcfg, guidance = finetune_config(cfg, mode, seed)
            model, report = finetune(pre, data, tcfg, schedule, seed=seed + EXTEND_SEED_OFFSET)
            x, labels = sample_classes(model, guidance, schedule, ev.n_per_class, seed, cfg.guidance.steps)
            rows = metric_rows(run_id, x, labels, ref, ref_labels, tax, ev.n_proj, ev.max_pairs, ev.seed)
            geom = embedding_geometry(model.embedder.table.detach().numpy(), tax)
            overall = rows[-1]
            per_class = float(np.mean([r["frechet_gauss"] for r in rows if r["scope"] == "sub"]))
            result.metrics.extend(rows)
            result.geometry[run_id] = geom.to_dict()
            result.rows.append({
                "run_id": run_id, "mode": mode, "seed": seed, "guidance": guidance.mode,
                "frechet_gauss": overall["frechet_gauss"], "frechet_jitter": overall["frechet_jitter"],
                "sliced_w2": overall["sliced_w2"], "diversity": overall["diversity"],
                "per_class_frechet": per_class, "separation_ratio": geom.separation_ratio,
                "super_nearest_own": int(sum(geom.nearest_centroid_is_own)),
                "trainable": report.trainable, "total": report.total,
                "trainable_fraction": report.fraction, "iterations": report.iterations,
                "steps_per_sec": report.steps_per_sec, "train_seconds": report.train_seconds})
            say(f"seed {seed} {mode}: frechet {overall['frechet_gauss']:.4f} "
                f"({report.steps_per_sec:.0f} it/s)")
    result.medians = seed_medians(result.rows)
    return result


def measure_throughput(cfg: RunConfig, modes, iterations: int = 200, rounds: int = 3,
                       warmup: int = 10, seed: int = 0) -> dict[str, float]:
    """Median training steps/sec per mode, modes interleaved across rounds.

    Speed does not depend on weight values, so an untrained model extended to
    the fine-grained taxonomy stands in for the pretrained one.
    """
    tax, _, data = mixture_task(cfg, seed)
    schedule = schedule_from(cfg)
    model = init_model(model_config(cfg, data.dim), tax, seed)
    state = {k: v.clone() for k, v in model.state_dict().items()}
    speeds: dict[str, list[float]] = {m: [] for m in modes}
    for _ in range(rounds):
        for mode in modes:
            model.load_state_dict(state)
            trainer = Trainer(model, data, dataclasses.replace(cfg.train, mode=mode, seed=seed), schedule)
            for _ in range(warmup):
                trainer.step()
            t0 = time.perf_counter()
            for _ in range(iterations):
                trainer.step()
            speeds[mode].append(iterations / (time.perf_counter() - t0))
    return {m: float(np.median(v)) for m, v in speeds.items()}


def table_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def strip_timing(rows: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]

