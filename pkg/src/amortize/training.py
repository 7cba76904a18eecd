"""Joint training of the generative model and its inference model.

Each batch runs inference, accumulates the inference-parameter gradient from
every iteration's ELBO, takes the generative-parameter gradient from the final
iteration, and applies one Adam step to each parameter set.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, batches, dynamic_binarize
from .inference import (IterativeModel, StandardEncoder,
                        iterative_infer, standard_infer)
from .mathcore import Adam, ConfigError, NonFiniteError, make_rng
from .model import GenerativeModel, draw_noises, evaluate

# rng stream ids
_SHUFFLE, _BINARIZE, _NOISE, _VALID = 1, 2, 3, 4


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    T: int = 1
    K: int = 1
    lr_theta: float = 2e-4
    lr_phi: float = 2e-4
    lr_decay: float = 0.999
    kl_anneal_epochs: int = 0
    seed: int = 0
    phi_accumulation: str = "sum"  # or "average" over inference iterations
    theta_grads: str = "final"  # or "all"
    validation_K: int = 1
    kl_mode: str = "analytic"
    max_skip_fraction: float = 0.01

    def __post_init__(self):
        for name in ("epochs", "batch_size", "T", "K", "validation_K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr_theta < 0 or self.lr_phi < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.kl_anneal_epochs < 0:
            raise ConfigError("kl_anneal_epochs must be >= 0")
        if self.phi_accumulation not in ("sum", "average"):
            raise ConfigError("phi_accumulation must be 'sum' or 'average'")
        if self.theta_grads not in ("final", "all"):
            raise ConfigError("theta_grads must be 'final' or 'all'")


def anneal_weight(epoch: int, kl_anneal_epochs: int) -> float:
    """Linear KL ramp ``min(1, epoch / kl_anneal_epochs)``; 1 when disabled."""
    if epoch < 1:
        raise ConfigError("epochs are numbered from 1")
    if kl_anneal_epochs == 0:
        return 1.0
    return min(1.0, epoch / kl_anneal_epochs)


def learning_rate(lr0: float, decay: float, epoch: int) -> float:
    return lr0 * decay ** (epoch - 1)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    elbo: float
    recon: float
    kl: float
    grad_norms: list  # mean ||dL/d mean|| per inference iteration, t = 0..T
    seconds: float
    skipped: int = 0


@dataclass
class TrainReport:
    records: list = field(default_factory=list)

    def rows(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def final(self, split: str = "validation") -> EpochRecord:
        return self.rows(split)[-1]

    def write_csv(self, path) -> None:
        """Deterministic columns; wall-clock goes to :meth:`write_timing_csv`."""
        width = max(len(r.grad_norms) for r in self.records)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "elbo", "recon", "kl",
                        *[f"grad_norm_t{t}" for t in range(width)]])
            for r in self.records:
                norms = list(r.grad_norms) + [""] * (width - len(r.grad_norms))
                w.writerow([r.epoch, r.split, repr(r.elbo), repr(r.recon), repr(r.kl),
                            *[repr(float(g)) if g != "" else "" for g in norms]])

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, r.split, f"{r.seconds:.6f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        report = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                norms = [float(row[k]) for k in reader.fieldnames
                         if k.startswith("grad_norm_t") and row[k] != ""]
                report.records.append(EpochRecord(int(row["epoch"]), row["split"], float(row["elbo"]),
                                                  float(row["recon"]), float(row["kl"]), norms, 0.0))
        return report


# -- one batch ---------------------------------------------------------------------

@dataclass
class BatchResult:
    phi_grads: list
    theta_grads: list
    elbo: np.ndarray
    recon: np.ndarray
    kl: np.ndarray
    grad_norms: np.ndarray


def batch_gradients(model: GenerativeModel, strategy, x: np.ndarray, cfg: TrainConfig,
                    rng: np.random.Generator, kl_weight: float = 1.0) -> BatchResult:
    """Batch-mean gradients of the ELBO w.r.t. inference and generative params."""
    B = x.shape[0]
    if isinstance(strategy, StandardEncoder):
        lam, cache = strategy.infer(x)
        ev = evaluate(model, x, lam, draw_noises(model, B, cfg.K, rng), cfg.kl_mode,
                      kl_weight=kl_weight, need_grads=True, need_theta=True)
        phi = [g / B for g in strategy.backward(cache, ev.grads)]
        nm = np.sqrt(sum((g ** 2).sum(axis=1) for g in ev.grads.d_mean))
        e = ev.elbo
        return BatchResult(phi, ev.theta_grads, e.total, e.recon, sum(e.kl_per_level),
                           np.array([nm.mean()]))
    if not isinstance(strategy, IterativeModel):
        raise ConfigError("training supports standard and iterative strategies")
    traj = iterative_infer(strategy, model, x, cfg.T, cfg.K, rng, cfg.kl_mode,
                           accumulate_phi=True, theta=cfg.theta_grads, kl_weight=kl_weight)
    if traj.diverged_at is not None:
        raise NonFiniteError(traj.diagnostic)
    scale = 1.0 / B / (cfg.T if cfg.phi_accumulation == "average" else 1)
    phi = [g * scale for g in traj.phi_grads]
    e = traj.final_breakdown
    return BatchResult(phi, traj.theta_grads, e.total, e.recon, sum(e.kl_per_level),
                       np.array([r.grad_norm_mean.mean() for r in traj.records]))


def _finite(arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


# -- validation ---------------------------------------------------------------------

def validate(model: GenerativeModel, strategy, data, cfg: TrainConfig, rng: np.random.Generator):
    """Mean validation ELBO terms and per-iteration gradient norms."""
    x = data.examples if isinstance(data, Dataset) else np.asarray(data)
    tot, rec, kl, norms = [], [], [], []
    for xb in batches(x, 256):
        if isinstance(strategy, StandardEncoder):
            lam = standard_infer(strategy, xb)
            ev = evaluate(model, xb, lam, draw_noises(model, xb.shape[0], cfg.validation_K, rng),
                          cfg.kl_mode, need_grads=True)
            e = ev.elbo
            nm = np.sqrt(sum((g ** 2).sum(axis=1) for g in ev.grads.d_mean))
            norms.append(nm[None, :])
        else:
            traj = iterative_infer(strategy, model, xb, cfg.T, cfg.validation_K, rng, cfg.kl_mode)
            e = traj.final_breakdown
            norms.append(np.stack([r.grad_norm_mean for r in traj.records]))
        tot.append(e.total)
        rec.append(e.recon)
        kl.append(sum(e.kl_per_level))
    norms = np.concatenate(norms, axis=1)
    return (float(np.concatenate(tot).mean()), float(np.concatenate(rec).mean()),
            float(np.concatenate(kl).mean()), norms.mean(axis=1).tolist())


def binarized_validation(model: GenerativeModel, data, seed: int) -> np.ndarray:
    """Validation inputs, binarized once per seed for Bernoulli models."""
    x = data.examples if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if model.output == "bernoulli" and not np.all((x == 0) | (x == 1)):
        x = dynamic_binarize(x, make_rng(seed, _VALID, 0))
    return x


def train(model: GenerativeModel, strategy, dataset: Dataset, cfg: TrainConfig,
          validation: Dataset | None = None, on_epoch=None):
    """Train ``model`` and ``strategy`` in place; returns them with a report.

    ``on_epoch(epoch, model, strategy, report)`` is called after each epoch.
    """
    binarize = model.output == "bernoulli" and dataset.value_range == "unit-interval"
    theta = model.params()
    phi = strategy.params()
    opt_theta = Adam(theta, cfg.lr_theta)
    opt_phi = Adam(phi, cfg.lr_phi)
    val_x = binarized_validation(model, validation, cfg.seed) if validation is not None else None
    report = TrainReport()
    n_batches = skipped = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        opt_theta.lr = learning_rate(cfg.lr_theta, cfg.lr_decay, epoch)
        opt_phi.lr = learning_rate(cfg.lr_phi, cfg.lr_decay, epoch)
        weight = anneal_weight(epoch, cfg.kl_anneal_epochs)
        bin_rng = make_rng(cfg.seed, _BINARIZE, epoch)
        noise_rng = make_rng(cfg.seed, _NOISE, epoch)
        tot, rec, kl, norms = [], [], [], []
        epoch_skipped = 0
        for xb in batches(dataset, cfg.batch_size, make_rng(cfg.seed, _SHUFFLE, epoch)):
            if binarize:
                xb = dynamic_binarize(xb, bin_rng)
            n_batches += 1
            try:
                res = batch_gradients(model, strategy, xb, cfg, noise_rng, weight)
                if not (_finite(res.phi_grads) and _finite(res.theta_grads) and _finite([res.elbo])):
                    raise NonFiniteError("non-finite batch gradient")
            except (NonFiniteError, FloatingPointError):
                epoch_skipped += 1
                continue
            opt_phi.step([-g for g in res.phi_grads])
            opt_theta.step([-g for g in res.theta_grads])
            tot.append(res.elbo)
            rec.append(res.recon)
            kl.append(res.kl)
            norms.append(res.grad_norms * xb.shape[0])
        skipped += epoch_skipped
        if skipped > cfg.max_skip_fraction * n_batches:
            raise TrainingAborted(f"skipped {skipped} of {n_batches} batches with non-finite values")
        n_seen = sum(len(t) for t in tot)
        report.records.append(EpochRecord(
            epoch, "train", float(np.concatenate(tot).mean()), float(np.concatenate(rec).mean()),
            float(np.concatenate(kl).mean()), (np.sum(norms, axis=0) / n_seen).tolist(),
            time.perf_counter() - t0, epoch_skipped))
        if val_x is not None:
            t1 = time.perf_counter()
            e, r, k, g = validate(model, strategy, val_x, cfg, make_rng(cfg.seed, _VALID, epoch))
            report.records.append(EpochRecord(epoch, "validation", e, r, k, g, time.perf_counter() - t1))
        if on_epoch is not None:
            on_epoch(epoch, model, strategy, report)
    return model, strategy, report
