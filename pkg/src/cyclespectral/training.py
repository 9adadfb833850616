"""Self-supervised training over the weighted loss (SGD with momentum, or Adam).

Batches are drawn with ``numpy.random.default_rng([seed, iteration])``, so the
data seen at iteration ``k`` depends only on the seed and ``k``.  Together
with seeded initialisation and restored optimizer state this makes resumed
runs follow the uninterrupted trajectory exactly.
"""

import csv
from dataclasses import dataclass, field, replace
import logging
import math
from pathlib import Path
import time

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, to_dict
from .dualcycle import forward_cycle
from .errors import ConfigError, ContractViolation, IngestionError, TrainingDivergence
from .features import FeatureExtractor
from .flowmodule import SigmaModel
from .losses import LossBreakdown, total_loss
from .synthdata import augment, collate

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "L_C", "L_B", "L_F", "L_R", "L_S", "total", "lr", "wallclock_s")
CHECKPOINT_DIR = "checkpoints"
LOG_NAME = "train_log.csv"


@dataclass
class TrainState:
    model: SigmaModel
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    history: list = field(default_factory=list)


def make_optimizer(model, cfg):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)


def dataset_spectra(dataset):
    """``{tag: channels}`` shared by every pair; raises if pairs disagree."""
    found = None
    for s in dataset:
        cur = {s.img_a.spectrum: s.img_a.channels, s.img_b.spectrum: s.img_b.channels}
        if found is None:
            found = cur
        elif cur != found:
            raise IngestionError(f"pair spectra {cur} differ from {found}", entry=s.meta.get("pair_id"))
    return found


def resolve_spectra(cfg, dataset):
    """Fill ``cfg.spectra`` from the data, or check the configured value against it."""
    found = dataset_spectra(dataset)
    if cfg.spectra is None:
        if found is None:
            raise ConfigError("spectra not set and the dataset is empty", key="train.spectra")
        return replace(cfg, spectra=found)
    if found is not None and dict(cfg.spectra) != found:
        raise ConfigError(f"configured spectra {dict(cfg.spectra)} do not match the data {found}",
                          key="train.spectra")
    return cfg


def build_model(cfg):
    if cfg.spectra is None:
        raise ConfigError("spectra must be set before building a model", key="train.spectra")
    # Seeded initialisation without disturbing the caller's global RNG.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return SigmaModel(cfg.spectra, cfg.encoder_widths, cfg.estimator_widths, cfg.radius, cfg.finest_level)


def init_state(cfg):
    model = build_model(cfg)
    return TrainState(model, make_optimizer(model, cfg))


def build_feature_extractor(cfg):
    return FeatureExtractor(cfg.feature_layer, cfg.feature_backbone)


def _stats(t):
    t = t.detach()
    finite = torch.isfinite(t)
    vals = t[finite]
    return {
        "min": float(vals.min()) if vals.numel() else None,
        "max": float(vals.max()) if vals.numel() else None,
        "mean": float(vals.mean()) if vals.numel() else None,
        "nonfinite": int((~finite).sum()),
    }


def _snapshot(state, batch, outputs, breakdown, where):
    snap = {
        "iteration": state.iteration,
        "where": where,
        "pairs": [m.get("pair_id", m.get("seed")) for m in batch.meta.get("batch", [])],
        "inputs": {"img_a": _stats(batch.img_a.data), "img_b": _stats(batch.img_b.data)},
    }
    if outputs is not None:
        snap["flows"] = {k: _stats(v) for k, v in outputs.flows().items()}
    if breakdown is not None:
        snap["losses"] = {k: float(v.detach()) for k, v in breakdown.components.items()}
    return snap


def train_step(state, batch, cfg, phi):
    """One SGD update on a list of pairs; returns ``(state, breakdown)``.

    The pairs are stacked into one batch; every loss term is a per-sample
    mean followed by a batch mean, which equals averaging one cycle per pair.
    """
    if not batch:
        raise ContractViolation("train_step needs a nonempty batch")
    hw = batch[0].img_a.hw
    if any(s.img_a.hw != hw or s.img_b.hw != hw for s in batch):
        raise ContractViolation("all pairs of a batch must share dims")
    pair = collate(batch)
    model, opt = state.model, state.optimizer
    model.train()
    outputs = forward_cycle(pair.img_a, pair.img_b, model)
    breakdown = total_loss(outputs, pair.img_a, pair.img_b, cfg.weights, phi)
    if not torch.isfinite(breakdown.total):
        raise TrainingDivergence(f"non-finite loss at iteration {state.iteration}",
                                 _snapshot(state, pair, outputs, breakdown, "loss"))
    opt.zero_grad(set_to_none=True)
    breakdown.total.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    if not torch.isfinite(norm):
        raise TrainingDivergence(f"non-finite gradient at iteration {state.iteration}",
                                 _snapshot(state, pair, outputs, breakdown, "gradient"))
    if norm > cfg.grad_clip:
        log.info("iteration %d: gradient norm %.4g clipped to %g", state.iteration, float(norm), cfg.grad_clip)
    opt.step()
    state.iteration += 1
    detached = LossBreakdown(*(getattr(breakdown, k).detach() for k in ("L_C", "L_B", "L_F", "L_R", "L_S", "total")),
                             components={k: v.detach() for k, v in breakdown.components.items()})
    return state, detached


def sample_batch(dataset, cfg, iteration):
    """Augmented batch for ``iteration``; a pure function of (seed, iteration)."""
    if len(dataset) == 0:
        raise IngestionError("training dataset is empty")
    rng = np.random.default_rng([cfg.seed, iteration])
    idx = rng.integers(0, len(dataset), size=cfg.batch_size)
    return [augment(dataset[int(i)], cfg.augment, rng) for i in idx]


@torch.no_grad()
def evaluate_loss(model, samples, weights, phi, batch_size=8):
    """Mean loss breakdown (floats) over unaugmented samples."""
    model.eval()
    totals, count = {}, 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        pair = collate(chunk)
        out = forward_cycle(pair.img_a, pair.img_b, model)
        lb = total_loss(out, pair.img_a, pair.img_b, weights, phi)
        for k, v in lb.as_floats().items():
            totals[k] = totals.get(k, 0.0) + v * len(chunk)
        count += len(chunk)
    return {k: v / count for k, v in totals.items()}


def checkpoint_path(out_dir, iteration):
    return Path(out_dir) / CHECKPOINT_DIR / f"ckpt_{iteration:06d}.safetensors"


def latest_checkpoint(out_dir):
    found = sorted((Path(out_dir) / CHECKPOINT_DIR).glob("ckpt_*.safetensors"))
    return found[-1] if found else None


def save_state(state, cfg, out_dir):
    return save_checkpoint(checkpoint_path(out_dir, state.iteration), state.model, state.optimizer,
                           state.iteration, state.history, to_dict(cfg))


def resume(path, cfg):
    """Restore a TrainState from a checkpoint written by :func:`train`."""
    model, opt, meta = load_checkpoint(path, lambda m: make_optimizer(m, cfg))
    return TrainState(model, opt, int(meta["iteration"]), list(meta.get("history", [])))


def _open_log(out_dir, keep_until):
    """Open the CSV log for appending, dropping rows past ``keep_until``."""
    path = Path(out_dir) / LOG_NAME
    rows = []
    if keep_until > 0 and path.is_file():
        with open(path, newline="") as f:
            rows = [r for r in csv.DictReader(f) if int(r["iter"]) <= keep_until]
    f = open(path, "w", newline="")
    writer = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    f.flush()
    return f, writer


def format_row(iteration, losses, lr, wallclock):
    row = {"iter": iteration, "lr": repr(float(lr)), "wallclock_s": f"{wallclock:.3f}"}
    for k in ("L_C", "L_B", "L_F", "L_R", "L_S", "total"):
        row[k] = repr(float(losses[k]))
    return row


def train(cfg, dataset, out_dir, resume_from=None, phi=None, on_iteration=None):
    """Run ``cfg.iterations`` steps, checkpointing and logging into ``out_dir``.

    ``resume_from`` is a checkpoint path (or ``"latest"``).  ``on_iteration``
    is called as ``on_iteration(state, breakdown)`` after each step.
    """
    if not isinstance(cfg, TrainConfig):
        raise ContractViolation("train expects a TrainConfig")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = resolve_spectra(cfg, dataset)
    phi = phi if phi is not None else build_feature_extractor(cfg)
    if resume_from == "latest":
        resume_from = latest_checkpoint(out_dir)
    if resume_from is not None:
        state = resume(resume_from, cfg)
        log.info("resumed from %s at iteration %d", resume_from, state.iteration)
    else:
        state = init_state(cfg)
        save_state(state, cfg, out_dir)
    f, writer = _open_log(out_dir, state.iteration)
    start = time.perf_counter()
    try:
        while state.iteration < cfg.iterations:
            batch = sample_batch(dataset, cfg, state.iteration)
            state, breakdown = train_step(state, batch, cfg, phi)
            losses = breakdown.as_floats()
            state.history.append({"iter": state.iteration, **losses})
            writer.writerow(format_row(state.iteration, losses, cfg.learning_rate, time.perf_counter() - start))
            f.flush()
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.iterations:
                save_state(state, cfg, out_dir)
            if on_iteration is not None:
                on_iteration(state, breakdown)
    finally:
        f.close()
    return state


def log_rows(out_dir):
    with open(Path(out_dir) / LOG_NAME, newline="") as f:
        return list(csv.DictReader(f))


def check_log_row(row, weights):
    """Relative gap between a row's total and the weighted sum of its components."""
    combined = weights.combine(*(float(row[k]) for k in ("L_C", "L_B", "L_F", "L_R", "L_S")))
    total = float(row["total"])
    return abs(total - combined) / max(abs(total), 1e-12) if math.isfinite(total) else math.inf
