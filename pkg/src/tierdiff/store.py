"""Dataset, checkpoint and sample files on top of :mod:`tierdiff.fileio`.

Array names inside each container:

* dataset: ``x0`` (<f4, N x dim), ``labels`` (<i4), plus for mixtures
  ``mixture/component_sub`` (<i8), ``mixture/weights``, ``mixture/means``,
  ``mixture/covs`` (<f8).
* checkpoint: ``param/<name>`` for every parameter (tags in ``meta.tags``),
  ``opt/<name>/exp_avg``, ``opt/<name>/exp_avg_sq``, ``opt/<name>/step``
  and ``rng_state`` (|u1) when optimizer state is present.
* samples: ``samples`` (<f4, N x dim) and ``labels`` (<i4).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import fileio
from .fileio import CHECKPOINT_MAGIC, DATASET_MAGIC, SAMPLES_MAGIC, FormatError
from .hierdata import GaussianMixtureSpec, LabeledDataset, Taxonomy
from .model import DenoiserConfig, Denoiser, param_tag
from .train import TrainConfig


def save_dataset(path, data: LabeledDataset, meta: dict,
                 spec: GaussianMixtureSpec | None = None) -> None:
    arrays = {"x0": data.x0.astype("<f4"), "labels": data.subclass.astype("<i4")}
    if spec is not None:
        for k, v in spec.to_arrays().items():
            arrays[f"mixture/{k}"] = v
    meta = dict(meta, taxonomy=data.taxonomy.to_dict(), n=len(data), dim=data.dim)
    fileio.write_container(path, DATASET_MAGIC, meta, arrays)


def load_dataset(path) -> tuple[LabeledDataset, GaussianMixtureSpec | None, dict]:
    meta, arrays = fileio.read_container(path, DATASET_MAGIC)
    tax = Taxonomy.from_dict(meta["taxonomy"])
    data = LabeledDataset(arrays["x0"], arrays["labels"].astype(np.int64), tax)
    spec = None
    if "mixture/means" in arrays:
        spec = GaussianMixtureSpec(tax, arrays["mixture/component_sub"], arrays["mixture/weights"],
                                   arrays["mixture/means"], arrays["mixture/covs"])
    return data, spec, meta


@dataclass
class Checkpoint:
    model: Denoiser
    train_config: TrainConfig | None = None
    trainer_state: dict | None = None
    seed_lineage: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: Denoiser, train_config: TrainConfig | None = None,
                    trainer_state: dict | None = None, seed_lineage=(), extra: dict | None = None) -> None:
    arrays, tags = {}, {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
        tags[name] = param_tag(name)
    meta = {"model_config": model.cfg.to_dict(), "taxonomy": model.taxonomy.to_dict(), "tags": tags,
            "train_config": None if train_config is None else train_config.to_dict(),
            "seed_lineage": [int(s) for s in seed_lineage], "iteration": 0, "extra": extra or {}}
    if trainer_state is not None:
        meta["iteration"] = int(trainer_state["iteration"])
        arrays["rng_state"] = trainer_state["rng_state"].numpy().astype("|u1")
        for name, st in trainer_state["optimizer"].items():
            for key, val in st.items():
                arrays[f"opt/{name}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    fileio.write_container(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = fileio.read_container(path, CHECKPOINT_MAGIC)
    cfg = DenoiserConfig(**meta["model_config"])
    tax = Taxonomy.from_dict(meta["taxonomy"])
    model = Denoiser(cfg, tax)
    params = dict(model.named_parameters())
    if set(meta["tags"]) != set(params):
        raise FormatError("checkpoint parameter names do not match the model layout")
    dtype = torch.from_numpy(arrays[f"param/{next(iter(params))}"]).dtype
    model.to(dtype)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            if meta["tags"][name] != param_tag(name):
                raise FormatError(f"tag mismatch for {name}")
            p.copy_(torch.from_numpy(arrays[f"param/{name}"]))
    tcfg = None if meta["train_config"] is None else TrainConfig(**meta["train_config"])
    state = None
    if "rng_state" in arrays:
        opt: dict[str, dict] = {}
        for key, val in arrays.items():
            if key.startswith("opt/"):
                _, name, field_ = key.split("/")
                opt.setdefault(name, {})[field_] = torch.from_numpy(val)
        state = {"iteration": meta["iteration"], "rng_state": torch.from_numpy(arrays["rng_state"]),
                 "optimizer": opt}
    return Checkpoint(model, tcfg, state, list(meta["seed_lineage"]), meta)


def save_samples(path, samples, labels, meta: dict) -> None:
    samples = np.asarray(samples, dtype="<f4")
    labels = np.asarray(labels, dtype="<i4")
    if samples.ndim != 2 or labels.shape != (samples.shape[0],):
        raise ValueError("samples must be (N, dim) with one label per row")
    fileio.write_container(path, SAMPLES_MAGIC, dict(meta, n=len(labels)),
                           {"samples": samples, "labels": labels})


def load_samples(path) -> tuple[np.ndarray, np.ndarray, dict]:
    meta, arrays = fileio.read_container(path, SAMPLES_MAGIC)
    return arrays["samples"], arrays["labels"].astype(np.int64), meta
