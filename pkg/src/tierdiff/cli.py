"""Command-line entry point: ``tierdiff <command> [options]``.

Exit codes: 0 success, 2 configuration/usage error, 3 data or file error,
4 numerical abort (non-finite loss or model output).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .benchmark import (BENCH_COLUMNS, METRIC_COLUMNS, TIMING_COLUMNS, benchmark_modes,
                        canonical_json, metric_rows, mixture_task, model_config, reference_samples,
                        sample_classes, table_csv)
from .config import ConfigError, RunConfig, ScheduleSection, dump_config, load_config
from .diffusion import GUIDANCE_MODES, GuidanceConfig, NumericalError, make_schedule
from .fileio import FormatError
from .hierdata import (GlyphImageSpec, Taxonomy, build_taxonomy, render_glyph_dataset)
from .model import FINETUNE_MODES, init_model, load_pretrained_then_extend
from .store import (load_checkpoint, load_dataset, load_samples, save_checkpoint, save_dataset,
                    save_samples)
from .train import EXTEND_SEED_OFFSET, Trainer

log = logging.getLogger("tierdiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


# --- helpers -----------------------------------------------------------------

def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _out_path(args, cfg: RunConfig | None, given, default_name: str) -> Path:
    root = (cfg or RunConfig()).paths.resolve_out()
    path = Path(given) if given else root / default_name
    _ensure_parent(path, args.no_mkdir)
    return path


def _ensure_parent(path: Path, no_mkdir: bool):
    parent = path.parent
    if parent.exists():
        return
    if no_mkdir:
        raise DataError(f"output directory {parent} does not exist (drop --no-mkdir to create it)")
    parent.mkdir(parents=True, exist_ok=True)


def _write_text(path: Path, text: str):
    fileio.atomic_write(path, text.encode("utf-8"))


def _input(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} {p} not found")
    return p


def _schedule(section: ScheduleSection | dict):
    s = section if isinstance(section, dict) else dataclasses.asdict(section)
    return make_schedule(s["kind"], s["T"], s["beta_start"], s["beta_end"])


def _glyph_spec(cfg: RunConfig) -> GlyphImageSpec:
    return GlyphImageSpec(side=cfg.dataset.glyph_side)


# --- dump-config -------------------------------------------------------------

def cmd_dump_config(args) -> int:
    text = dump_config(_config(args))
    if args.out:
        path = Path(args.out)
        _ensure_parent(path, args.no_mkdir)
        _write_text(path, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- gen-data ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    path = _out_path(args, cfg, args.out, "dataset.tdd")
    meta = {"kind": cfg.dataset.kind, "seed": cfg.seed, "dataset": dataclasses.asdict(cfg.dataset)}
    if cfg.dataset.kind == "mixture":
        tax, spec, data = mixture_task(cfg)
        spec_hash = hashlib.sha256(fileio.encode(b"SPEC0000", {}, spec.to_arrays())).hexdigest()
    else:
        tax = build_taxonomy(cfg.taxonomy.n_super, cfg.taxonomy.subs_per_super)
        gspec = _glyph_spec(cfg)
        data, spec = render_glyph_dataset(gspec, tax, cfg.dataset.n_per_subclass, cfg.seed), None
        meta["glyph"] = gspec.to_dict()
        spec_hash = hashlib.sha256(canonical_json(gspec.to_dict()).encode()).hexdigest()
    meta["spec_sha256"] = spec_hash
    save_dataset(path, data, meta, spec)
    print(f"wrote {path}: {len(data)} samples ({tax.n_sub} subclasses x {cfg.dataset.n_per_subclass}, "
          f"{tax.n_super} superclasses), dim {data.dim}, spec sha256 {spec_hash}")
    return EXIT_OK


# --- train -------------------------------------------------------------------

class _RunLog:
    """Line-delimited training log, rewritten atomically as records arrive."""

    def __init__(self, path: Path):
        self.path, self.lines = path, []

    def add(self, obj: dict):
        self.lines.append(json.dumps(obj, sort_keys=True))
        _write_text(self.path, "\n".join(self.lines) + "\n")


def _run_stage(stage: str, trainer: Trainer, out: Path, runlog: _RunLog, lineage, extra) -> dict:
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    final = out / f"{stage}.ckpt"
    extra = dict(extra, stage=stage)
    seen = len(trainer.records)

    def on_eval(tr: Trainer):
        nonlocal seen
        for rec in tr.records[seen:]:
            runlog.add(dict(rec, stage=stage))
        seen = len(tr.records)
        save_checkpoint(ckdir / f"{stage}-{tr.iteration:07d}.ckpt", tr.model, tr.cfg,
                        tr.state_dict(), lineage, extra)

    if trainer.iteration >= trainer.cfg.iterations:
        log.info("%s stage already complete at iteration %d", stage, trainer.iteration)
        save_checkpoint(final, trainer.model, trainer.cfg, trainer.state_dict(), lineage, extra)
        return {}
    try:
        report = trainer.run(on_eval)
    except NumericalError:
        partial = out / f"{stage}-partial.ckpt"
        save_checkpoint(partial, trainer.model, trainer.cfg, trainer.state_dict(), lineage, extra)
        print(f"{stage}: aborted at iteration {trainer.iteration + 1}; partial checkpoint {partial}",
              file=sys.stderr)
        raise
    summary = report.summary()
    runlog.add({"stage": stage, "summary": summary})
    save_checkpoint(final, trainer.model, trainer.cfg, trainer.state_dict(), lineage, extra)
    print(f"{stage}: {report.iterations} iterations, trainable {report.trainable}/{report.total} "
          f"({100 * report.fraction:.2f}%), {report.steps_per_sec:.1f} it/s -> {final}")
    return dict(summary, records=report.records)


def cmd_train(args) -> int:
    cfg = _config(args)
    root = cfg.paths.resolve_out()
    data_path = _input(args.data or root / "dataset.tdd", "dataset")
    data, _, dmeta = load_dataset(data_path)
    out = Path(args.out_dir) if args.out_dir else root / "train"
    _ensure_parent(out / "x", args.no_mkdir)
    schedule = _schedule(cfg.schedule)
    ft_cfg = dataclasses.replace(cfg.train, mode=args.mode) if args.mode else cfg.train
    extra = {"schedule": dataclasses.asdict(cfg.schedule), "dataset_sha256": fileio.file_sha256(data_path)}
    lineage = [cfg.seed, cfg.pretrain.seed, ft_cfg.seed]
    runlog = _RunLog(out / "train_log.jsonl")
    report = {}

    resume = load_checkpoint(_input(args.resume, "checkpoint")) if args.resume else None
    stage = resume.meta.get("extra", {}).get("stage") if resume else None
    if resume is not None and stage not in ("pretrain", "finetune"):
        raise DataError(f"{args.resume} is not a training checkpoint written by this tool")
    if resume is not None and resume.trainer_state is None:
        raise DataError(f"{args.resume} carries no optimizer/RNG state to resume from")

    if resume is not None and stage == "finetune":
        if args.mode and args.mode != resume.train_config.mode:
            raise ConfigError(f"--mode {args.mode} conflicts with the checkpoint's mode "
                              f"{resume.train_config.mode}")
        trainer = Trainer(resume.model, data, resume.train_config, schedule)
        trainer.load_state_dict(resume.trainer_state)
        report["finetune"] = _run_stage("finetune", trainer, out, runlog, resume.seed_lineage,
                                        resume.meta["extra"])
    else:
        if args.init:
            pre = load_checkpoint(_input(args.init, "checkpoint")).model
        else:
            coarse = data.relabel_to_superclass()
            if resume is not None:
                trainer = Trainer(resume.model, coarse, resume.train_config, schedule)
                trainer.load_state_dict(resume.trainer_state)
                lineage = resume.seed_lineage
            else:
                model = init_model(model_config(cfg, data.dim), coarse.taxonomy, cfg.seed)
                trainer = Trainer(model, coarse, dataclasses.replace(cfg.pretrain, mode="full"), schedule)
            report["pretrain"] = _run_stage("pretrain", trainer, out, runlog, lineage, extra)
            pre = trainer.model
        model = load_pretrained_then_extend(pre, data.taxonomy, seed=cfg.seed + EXTEND_SEED_OFFSET)
        trainer = Trainer(model, data, ft_cfg, schedule)
        report["finetune"] = _run_stage("finetune", trainer, out, runlog, lineage, extra)

    if any(report.values()):
        doc = {"dataset": Path(data_path).name, "dataset_sha256": extra["dataset_sha256"], **report}
        _write_text(out / "train_report.json", canonical_json(doc))
    return EXIT_OK


# --- sample ------------------------------------------------------------------

def _parse_classes(spec: str | None, tax: Taxonomy) -> np.ndarray:
    if spec is None or spec == "all":
        return np.arange(tax.n_sub)
    try:
        ids = [int(s) for s in spec.split(",")]
    except ValueError:
        raise DataError(f"--class must be 'all' or comma-separated subclass ids, got {spec!r}")
    bad = [i for i in ids if not 0 <= i < tax.n_sub]
    if bad:
        raise DataError(f"subclass id(s) {bad} out of range [0, {tax.n_sub})")
    return np.asarray(ids, dtype=np.int64)


def effective_guidance(mode: str, omega: float) -> GuidanceConfig:
    """omega=1 makes both guided rules return the conditional prediction, i.e. no guidance."""
    if mode == "none" or omega == 1.0:
        return GuidanceConfig("none", 1.0)
    return GuidanceConfig(mode, omega)


def _generate(ck_path: Path, classes, mode, omega, steps, n, seed):
    ck = load_checkpoint(ck_path)
    if "taxonomy" not in ck.meta:
        raise DataError(f"{ck_path} has no taxonomy; guided sampling needs one")
    tax = ck.model.taxonomy
    classes = _parse_classes(classes, tax)
    guidance = effective_guidance(mode, omega)
    schedule = _schedule(ck.meta.get("extra", {}).get("schedule") or ScheduleSection())
    x, labels = sample_classes(ck.model, guidance, schedule, n, seed, steps, classes)
    meta = {"guidance": guidance.mode, "omega": guidance.omega, "steps": steps, "seed": seed,
            "n_per_class": n, "classes": classes.tolist(), "taxonomy": tax.to_dict(),
            "checkpoint_sha256": fileio.file_sha256(ck_path), "schedule": schedule.to_dict()}
    return x, labels, meta


def cmd_sample(args) -> int:
    root = RunConfig().paths.resolve_out()
    ck_path = _input(args.checkpoint or root / "train" / "finetune.ckpt", "checkpoint")
    if args.n < 0 or args.steps < 1:
        raise ConfigError("--n must be >= 0 and --steps >= 1")
    x, labels, meta = _generate(ck_path, args.cls, args.guidance, args.omega, args.steps, args.n, args.seed)
    path = _out_path(args, None, args.out, "samples.tds")
    save_samples(path, x, labels, meta)
    print(f"wrote {path}: {len(labels)} samples, guidance {meta['guidance']} omega {meta['omega']} "
          f"steps {meta['steps']} seed {meta['seed']}")
    return EXIT_OK


# --- eval --------------------------------------------------------------------

def _reference(dmeta: dict, spec, tax: Taxonomy, classes, n: int, seed: int):
    if spec is not None:
        return reference_samples(spec, n, seed, classes)
    if dmeta.get("kind") != "glyph":
        raise DataError("dataset carries neither a mixture nor a glyph description")
    g = dict(dmeta["glyph"], shapes=tuple(dmeta["glyph"]["shapes"]))
    ref = render_glyph_dataset(GlyphImageSpec(**g), tax, n, seed)
    keep = np.isin(ref.subclass, classes)
    return ref.x0[keep].astype(np.float64), ref.subclass[keep]


def cmd_eval(args) -> int:
    cfg = _config(args)
    root = cfg.paths.resolve_out()
    data_path = _input(args.data or root / "dataset.tdd", "dataset")
    data, spec, dmeta = load_dataset(data_path)
    tax = data.taxonomy
    if args.checkpoint:
        g = cfg.guidance
        samples, labels, smeta = _generate(_input(args.checkpoint, "checkpoint"), "all", g.mode, g.omega,
                                           g.steps, cfg.eval.n_per_class, cfg.seed)
        source = str(args.checkpoint)
    else:
        src = _input(args.samples or root / "samples.tds", "sample file")
        samples, labels, smeta = load_samples(src)
        source = str(src)
    stax = Taxonomy.from_dict(smeta["taxonomy"]) if "taxonomy" in smeta else None
    if stax is None or stax.n_sub != tax.n_sub or stax != tax:
        got = "unknown" if stax is None else f"{stax.n_sub} subclasses/{stax.n_super} superclasses"
        raise DataError(f"sample taxonomy ({got}) does not match the dataset's "
                        f"{tax.n_sub} subclasses/{tax.n_super} superclasses")
    if len(samples) == 0:
        raise DataError(f"{source} holds no samples; nothing to evaluate")
    if samples.shape[1] != data.dim:
        raise DataError(f"sample dim {samples.shape[1]} != dataset dim {data.dim}")
    classes, counts = np.unique(labels, return_counts=True)
    ev = cfg.eval
    ref, ref_labels = _reference(dmeta, spec, tax, classes, int(counts.max()), ev.seed)
    run_id = Path(source).stem
    rows = metric_rows(run_id, samples, labels, ref, ref_labels, tax, ev.n_proj, ev.max_pairs, ev.seed)
    out = Path(args.out_dir) if args.out_dir else root / "eval"
    _ensure_parent(out / "x", args.no_mkdir)
    jittered = [{"scope": r["scope"], "scope_id": r["scope_id"], "jitter": r["frechet_jitter"]}
                for r in rows if r["frechet_jitter"] > 0]
    doc = {"columns": list(METRIC_COLUMNS), "rows": rows, "jitter_applied": jittered,
           "samples": Path(source).name, "sample_meta": {k: v for k, v in smeta.items() if k != "taxonomy"},
           "reference": {"seed": ev.seed, "n_per_class": int(counts.max()),
                         "kind": "mixture" if spec is not None else "glyph"}}
    _write_text(out / "metrics.csv", table_csv(rows, METRIC_COLUMNS))
    _write_text(out / "metrics.json", canonical_json(doc))
    overall = rows[-1]
    print(f"overall frechet {overall['frechet_gauss']:.5f} sliced_w2 {overall['sliced_w2']:.5f} "
          f"diversity {overall['diversity']:.4f}" + (f" (jitter on {len(jittered)} scopes)" if jittered else "")
          + f" -> {out}")
    return EXIT_OK


# --- bench -------------------------------------------------------------------

def cmd_bench(args) -> int:
    cfg = _config(args)
    modes = tuple(args.modes.split(",")) if args.modes else cfg.bench.modes
    bad = [m for m in modes if m not in FINETUNE_MODES]
    if bad:
        raise ConfigError(f"unknown mode(s) {bad}; choose from {FINETUNE_MODES}")
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else cfg.bench.seeds
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
    out = Path(args.out_dir) if args.out_dir else cfg.paths.resolve_out() / "bench"
    _ensure_parent(out / "x", args.no_mkdir)
    result = benchmark_modes(cfg, modes, seeds, progress=print)
    doc = result.to_dict()
    table = result.table()
    if args.omit_timing:
        table = [{k: ("" if k in TIMING_COLUMNS else v) for k, v in r.items()} for r in table]
        doc["rows"], doc["medians"] = table[:len(result.rows)], table[len(result.rows):]
        doc["pretrain"] = {k: {kk: vv for kk, vv in v.items() if kk not in ("train_seconds", "steps_per_sec")}
                           for k, v in doc["pretrain"].items()}
    doc["config"] = json.loads(json.dumps(dataclasses.asdict(cfg)))
    _write_text(out / "bench.csv", table_csv(table, BENCH_COLUMNS))
    _write_text(out / "bench_metrics.csv", table_csv(result.metrics, METRIC_COLUMNS))
    _write_text(out / "bench.json", canonical_json(doc))
    for r in result.medians:
        print(f"{r['mode']:>14}: median frechet {r['frechet_gauss']:.4f}, trainable "
              f"{100 * r['trainable_fraction']:.2f}%, {r['steps_per_sec']:.0f} it/s")
    print(f"wrote {out / 'bench.csv'}")
    return EXIT_OK


# --- export-embeddings ---------------------------------------------------------

def embedding_csv(table: np.ndarray, tax: Taxonomy) -> str:
    d = table.shape[1]
    lines = [",".join(["row", "id", "kind", "parent"] + [f"e{k}" for k in range(d)])]
    for row in range(tax.n_rows):
        kind, idx = tax.decode_row(row)
        parent = str(tax.parent[idx]) if kind == "sub" else ""
        ident = "" if idx is None else str(idx)
        lines.append(",".join([str(row), ident, kind, parent] + [repr(float(v)) for v in table[row]]))
    return "\n".join(lines) + "\n"


def cmd_export_embeddings(args) -> int:
    root = RunConfig().paths.resolve_out()
    ck_path = _input(args.checkpoint or root / "train" / "finetune.ckpt", "checkpoint")
    ck = load_checkpoint(ck_path)
    table = ck.model.embedder.table.detach().cpu().numpy()
    path = _out_path(args, None, args.out, "embeddings.csv")
    _write_text(path, embedding_csv(table, ck.model.taxonomy))
    print(f"wrote {path}: {table.shape[0]} rows x {table.shape[1]} dims")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tierdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--no-mkdir", action="store_true",
                        help="fail instead of creating missing output directories")
    withcfg = argparse.ArgumentParser(add_help=False, parents=[common])
    withcfg.add_argument("--config", help="YAML run config (defaults when omitted)")

    c = sub.add_parser("dump-config", parents=[withcfg], help="print the full config with defaults")
    c.add_argument("--out", help="write to this file instead of stdout")
    c.set_defaults(func=cmd_dump_config)

    c = sub.add_parser("gen-data", parents=[withcfg], help="generate the training dataset")
    c.add_argument("--out", help="dataset path (default <out>/dataset.tdd)")
    c.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("train", parents=[withcfg], help="pretrain on superclasses, then fine-tune")
    c.add_argument("--data", help="dataset path (default <out>/dataset.tdd)")
    c.add_argument("--out-dir", help="run directory (default <out>/train)")
    c.add_argument("--mode", choices=FINETUNE_MODES, help="fine-tuning mode (overrides train.mode)")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by train")
    g.add_argument("--init", metavar="CKPT", help="skip pretraining; fine-tune this checkpoint")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("sample", parents=[common], help="draw guided samples from a checkpoint")
    c.add_argument("--checkpoint", help="checkpoint (default <out>/train/finetune.ckpt)")
    c.add_argument("--class", dest="cls", default="all", help="subclass id(s), comma-separated, or 'all'")
    c.add_argument("--guidance", choices=GUIDANCE_MODES, default="fine")
    c.add_argument("--omega", type=float, default=4.0)
    c.add_argument("--steps", type=int, default=250)
    c.add_argument("--n", type=int, default=200, help="samples per class")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="sample file (default <out>/samples.tds)")
    c.set_defaults(func=cmd_sample)

    c = sub.add_parser("eval", parents=[withcfg], help="score samples against the true distribution")
    src = c.add_mutually_exclusive_group()
    src.add_argument("--samples", help="sample file (default <out>/samples.tds)")
    src.add_argument("--checkpoint", help="sample from this checkpoint using the config's guidance")
    c.add_argument("--data", help="dataset path (default <out>/dataset.tdd)")
    c.add_argument("--out-dir", help="report directory (default <out>/eval)")
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("bench", parents=[withcfg], help="compare fine-tuning modes over seeds")
    c.add_argument("--modes", help=f"comma-separated subset of {','.join(FINETUNE_MODES)}")
    c.add_argument("--seeds", help="comma-separated seeds")
    c.add_argument("--out-dir", help="report directory (default <out>/bench)")
    c.add_argument("--omit-timing", action="store_true",
                   help="blank wall-clock columns so reruns give byte-identical tables")
    c.set_defaults(func=cmd_bench)

    c = sub.add_parser("export-embeddings", parents=[common], help="write label embeddings as CSV")
    c.add_argument("--checkpoint", help="checkpoint (default <out>/train/finetune.ckpt)")
    c.add_argument("--out", help="CSV path (default <out>/embeddings.csv)")
    c.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, OSError, ValueError, KeyError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
