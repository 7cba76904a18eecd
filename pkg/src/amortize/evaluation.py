"""Post-hoc metrics: importance-weighted log-likelihood, the amortization gap,
and gradient-magnitude profiles over inference iterations."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .inference import (InferenceTrajectory, IterativeModel, StandardEncoder,
                        iterative_infer, standard_infer)
from .mathcore import ConfigError, make_optimizer
from .model import (LOG_VAR_MAX, LOG_VAR_MIN, GenerativeModel, PosteriorEstimate,
                    draw_noises, evaluate)

DEFAULT_IW_SAMPLES = 500
FULL_IW_SAMPLES = 5000


def logsumexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Max-shifted log-sum-exp; exact shift invariance for finite inputs."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def iw_from_log_weights(log_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(estimate, stderr)`` per example from ``(S, B)`` log-weights.

    The standard error is the delta-method value ``sd(w) / (sqrt(S) mean(w))``.
    """
    log_w = np.asarray(log_w, dtype=float)
    S = log_w.shape[0]
    est = logsumexp(log_w, axis=0) - np.log(S)
    w = np.exp(log_w - log_w.max(axis=0, keepdims=True))
    sd = w.std(axis=0, ddof=1) if S > 1 else np.zeros(w.shape[1:])
    return est, sd / (np.sqrt(S) * w.mean(axis=0))


def iw_log_likelihood(model: GenerativeModel, lam: PosteriorEstimate, x, S: int,
                      rng: np.random.Generator, chunk: int = 500):
    """Importance-weighted evidence estimate with ``z_s ~ q``; returns
    per-example ``(estimate, stderr)``."""
    if S < 1:
        raise ConfigError("S must be at least 1")
    if lam.point:
        raise ConfigError("importance weighting needs a distributional posterior")
    x = np.atleast_2d(x)
    parts = []
    for start in range(0, S, chunk):
        k = min(chunk, S - start)
        noises = draw_noises(model, x.shape[0], k, rng)
        parts.append(evaluate(model, x, lam, noises, "sampled").extra["log_weights"])
    return iw_from_log_weights(np.concatenate(parts, axis=0))


def infer_with(strategy, model: GenerativeModel, x, rng: np.random.Generator,
               T: int = 16, K: int = 1) -> PosteriorEstimate:
    """The estimate a strategy hands over: encoder output, final iterate, or
    the estimate itself."""
    if isinstance(strategy, PosteriorEstimate):
        return strategy
    if isinstance(strategy, StandardEncoder):
        return standard_infer(strategy, x)
    if isinstance(strategy, IterativeModel):
        return iterative_infer(strategy, model, x, T, K, rng).final
    raise ConfigError(f"cannot infer with {type(strategy).__name__}")


def refine(model: GenerativeModel, x, lam: PosteriorEstimate, noises, T_opt: int, lr_opt: float,
           kl_mode: str = "analytic", kind: str = "adam"):
    """Optimize ``lam`` under fixed noise; keep each example's best iterate.

    Returns ``(best_lam, best_elbo, start_elbo)``.
    """
    lam = lam.copy()
    comps = lam.components()
    opt = make_optimizer(kind, comps, lr_opt)
    ev = evaluate(model, x, lam, noises, kl_mode, need_grads=True)
    start = ev.elbo.total.copy()
    best = start.copy()
    best_comps = [c.copy() for c in comps]
    for _ in range(T_opt):
        opt.step([-g for g in ev.grads.components()])
        if not lam.point:
            for lv in lam.log_vars:
                np.clip(lv, LOG_VAR_MIN, LOG_VAR_MAX, out=lv)
        ev = evaluate(model, x, lam, noises, kl_mode, need_grads=True)
        better = ev.elbo.total > best
        best = np.where(better, ev.elbo.total, best)
        for b, c in zip(best_comps, comps):
            b[better] = c[better]
    return PosteriorEstimate.from_components(best_comps, lam.point), best, start


def amortization_gap(model: GenerativeModel, strategy, x, T_opt: int, lr_opt: float,
                     rng: np.random.Generator, K: int = 1, T_strategy: int = 16,
                     kl_mode: str = "analytic") -> np.ndarray:
    """Per-example ELBO gain of refining the strategy's estimate with Adam.

    Both evaluations and every refinement step share one noise draw, and the
    best iterate is kept, so the gap is never negative.
    """
    x = np.atleast_2d(x)
    lam = infer_with(strategy, model, x, rng, T_strategy, K)
    noises = draw_noises(model, x.shape[0], K, rng)
    _, best, start = refine(model, x, lam, noises, T_opt, lr_opt, kl_mode)
    return best - start


def grad_magnitude_profile(trajectories) -> np.ndarray:
    """Mean ``||dL/d mean||`` per iteration over all trajectories and examples."""
    if isinstance(trajectories, InferenceTrajectory):
        trajectories = [trajectories]
    if not trajectories:
        raise ConfigError("no trajectories given")
    lengths = {len(t) for t in trajectories}
    if len(lengths) != 1:
        raise ConfigError(f"trajectories have different lengths {sorted(lengths)}")
    stacked = [np.concatenate([tr.records[t].grad_norm_mean for tr in trajectories])
               for t in range(lengths.pop())]
    return np.array([s.mean() for s in stacked])


@dataclass
class EvalResult:
    elbo: np.ndarray
    iw_ll: np.ndarray
    gap: np.ndarray
    S: int

    def summary(self) -> dict:
        out = {}
        for name in ("elbo", "iw_ll", "gap"):
            v = getattr(self, name)
            out[name] = (float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0)
        return out

    def write_csv(self, path) -> None:
        """Per-example rows, a blank line, then ``metric,mean,stderr`` rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["example_id", "elbo", "iw_ll", "gap"])
            for i in range(len(self.elbo)):
                w.writerow([i, repr(float(self.elbo[i])), repr(float(self.iw_ll[i])), repr(float(self.gap[i]))])
            w.writerow([])
            w.writerow(["metric", "mean", "stderr", f"S={self.S}"])
            for name, (m, se) in self.summary().items():
                w.writerow([name, repr(m), repr(se)])

    @classmethod
    def read_csv(cls, path) -> "EvalResult":
        rows = list(csv.reader(open(path, newline="")))
        if rows[0] != ["example_id", "elbo", "iw_ll", "gap"]:
            raise ValueError(f"{path}: unexpected header {rows[0]}")
        blank = rows.index([])
        body = np.array([[float(v) for v in r[1:]] for r in rows[1:blank]])
        S = int(rows[blank + 1][3].split("=")[1])
        return cls(body[:, 0], body[:, 1], body[:, 2], S)


def evaluate_strategy(model: GenerativeModel, strategy, x, rng: np.random.Generator,
                      S: int = DEFAULT_IW_SAMPLES, T: int = 16, T_opt: int = 100,
                      lr_opt: float = 0.01, K: int = 1) -> EvalResult:
    """ELBO, importance-weighted log-likelihood and gap for every example."""
    x = np.atleast_2d(x)
    lam = infer_with(strategy, model, x, rng, T, K)
    noises = draw_noises(model, x.shape[0], K, rng)
    e = evaluate(model, x, lam, noises).elbo.total
    iw, _ = iw_log_likelihood(model, lam, x, S, rng)
    _, best, start = refine(model, x, lam, noises, T_opt, lr_opt)
    return EvalResult(e, iw, best - start, S)
