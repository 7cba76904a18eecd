"""Latent Gaussian generative models, the ELBO, and the analytic gradients and
precision-weighted errors of the evidence lower bound w.r.t. the approximate
posterior parameters.

Shapes: ``x`` is ``(B, n_x)``; every latent level ``l`` (0 = bottom) has
posterior mean/log-variance of shape ``(B, n_l)``; noise for level ``l`` is
``(K, B, n_l)``.  Per-sample quantities are averaged over ``K``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mathcore import SIGMOID_CLAMP, ConfigError, Layer, Mlp, NonFiniteError, sigmoid

LOG_VAR_MIN, LOG_VAR_MAX = -20.0, 20.0
LOG_2PI = float(np.log(2 * np.pi))
CHECKPOINT_VERSION = "amortize-ckpt/1"
OUTPUT_FAMILIES = ("bernoulli", "gaussian")
KL_MODES = ("analytic", "sampled")


def clamp_log_var(log_var: np.ndarray) -> np.ndarray:
    return np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)


@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_var = clamp_log_var(np.asarray(self.log_var, dtype=float))
        if self.mean.shape != self.log_var.shape:
            raise ConfigError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @classmethod
    def standard(cls, n: int) -> "DiagGaussian":
        return cls(np.zeros(n), np.zeros(n))


@dataclass
class PosteriorEstimate:
    """Per-example variational parameters, one entry per latent level.

    ``log_vars`` is ``None`` for a point estimate (a delta at the mean).
    """
    means: list
    log_vars: list | None = None

    def __post_init__(self):
        self.means = [np.atleast_2d(np.asarray(m, dtype=float)) for m in self.means]
        if self.log_vars is not None:
            self.log_vars = [clamp_log_var(np.atleast_2d(np.asarray(v, dtype=float)))
                             for v in self.log_vars]
            for m, v in zip(self.means, self.log_vars):
                if m.shape != v.shape:
                    raise ConfigError("posterior mean and log-variance shapes differ")

    @property
    def point(self) -> bool:
        return self.log_vars is None

    @property
    def n_levels(self) -> int:
        return len(self.means)

    @property
    def batch_size(self) -> int:
        return self.means[0].shape[0]

    def level(self, l: int) -> DiagGaussian:
        if self.point:
            raise ConfigError("a point estimate has no variance")
        return DiagGaussian(self.means[l], self.log_vars[l])

    def components(self) -> list[np.ndarray]:
        """Flat list ``[mean_0, log_var_0, mean_1, ...]`` (means only for points)."""
        if self.point:
            return list(self.means)
        return [a for pair in zip(self.means, self.log_vars) for a in pair]

    @classmethod
    def from_components(cls, comps: Sequence[np.ndarray], point: bool) -> "PosteriorEstimate":
        comps = list(comps)
        if point:
            return cls(comps, None)
        return cls(comps[0::2], comps[1::2])

    def copy(self) -> "PosteriorEstimate":
        return PosteriorEstimate.from_components([c.copy() for c in self.components()], self.point)

    def take(self, rows) -> "PosteriorEstimate":
        return PosteriorEstimate.from_components([c[rows] for c in self.components()], self.point)


@dataclass
class ElboBreakdown:
    """Per-example ELBO terms in nats; ``total = recon - sum(kl_per_level)``."""
    recon: np.ndarray
    kl_per_level: list
    total: np.ndarray
    samples_used: int

    def mean(self) -> float:
        return float(np.mean(self.total))


@dataclass
class GradientSignals:
    d_mean: list
    d_log_var: list | None

    def components(self) -> list[np.ndarray]:
        if self.d_log_var is None:
            return list(self.d_mean)
        return [a for pair in zip(self.d_mean, self.d_log_var) for a in pair]


@dataclass
class ErrorSignals:
    eps_x: np.ndarray
    eps_z: list


# -- densities -----------------------------------------------------------------

def reparameterize(q: DiagGaussian, noise: np.ndarray) -> np.ndarray:
    return q.mean + np.exp(0.5 * q.log_var) * noise


def log_prob_bernoulli(x, mean_x) -> np.ndarray:
    """Sum over the last axis of ``x log mu + (1 - x) log(1 - mu)``."""
    x = np.asarray(x, dtype=float)
    mean_x = np.asarray(mean_x, dtype=float)
    return (x * np.log(mean_x) + (1 - x) * np.log1p(-mean_x)).sum(axis=-1)


def log_prob_diag_gaussian(x, d: DiagGaussian) -> np.ndarray:
    return _log_normal(np.asarray(x, dtype=float), d.mean, d.log_var)


def _log_normal(x, mean, log_var):
    return -0.5 * (LOG_2PI + log_var + (x - mean) ** 2 * np.exp(-log_var)).sum(axis=-1)


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> np.ndarray:
    return _kl(q.mean, q.log_var, p.mean, p.log_var)


def _kl(mq, lvq, mp, lvp):
    inv_vp = np.exp(-lvp)
    return 0.5 * (np.exp(lvq - lvp) + (mq - mp) ** 2 * inv_vp - 1 + lvp - lvq).sum(axis=-1)


# -- generative model ----------------------------------------------------------

class GenerativeModel:
    """A chain of latent Gaussian levels over an observed vector.

    Level ``l`` (0 = bottom) has prior ``N(prior_decoders[l](z_{l+1}),
    exp(prior_log_vars[l]))``; the top level has the fixed prior ``top_prior``.
    The decoder maps ``z_0`` to the Bernoulli mean (sigmoid output) or the
    Gaussian mean (identity output, variance ``exp(output_log_var)`` shared by
    every example).
    """

    def __init__(self, decoder: Mlp, output: str, output_log_var=None,
                 prior_decoders: Sequence[Mlp] = (), prior_log_vars: Sequence = (),
                 top_prior: DiagGaussian | None = None):
        if output not in OUTPUT_FAMILIES:
            raise ConfigError(f"unsupported output family {output!r}")
        self.decoder = decoder
        self.output = output
        self.prior_decoders = list(prior_decoders)
        self.prior_log_vars = [np.asarray(v, dtype=float) for v in prior_log_vars]
        if len(self.prior_decoders) != len(self.prior_log_vars):
            raise ConfigError("one prior log-variance per prior decoder is required")
        want_last = "sigmoid" if output == "bernoulli" else "identity"
        if decoder.layers[-1].activation != want_last:
            raise ConfigError(f"{output} output needs a {want_last} final decoder layer")
        dims = [decoder.n_in]
        for dec, lv in zip(self.prior_decoders, self.prior_log_vars):
            if dec.n_out != dims[-1] or lv.shape != (dims[-1],):
                raise ConfigError("prior decoder dimensions do not chain")
            dims.append(dec.n_in)
        self.latent_dims = dims
        self.top_prior = top_prior or DiagGaussian.standard(dims[-1])
        if self.top_prior.mean.shape != (dims[-1],):
            raise ConfigError("top prior dimension mismatch")
        if output == "gaussian":
            self.output_log_var = (np.zeros(decoder.n_out) if output_log_var is None
                                   else np.asarray(output_log_var, dtype=float))
        else:
            self.output_log_var = None

    @classmethod
    def build(cls, n_x: int, latent_dims: Sequence[int], hidden: Sequence[int],
              output: str, rng: np.random.Generator,
              prior_hidden: Sequence[int] | None = None) -> "GenerativeModel":
        latent_dims = list(latent_dims)
        if not 1 <= len(latent_dims) <= 2:
            raise ConfigError("hierarchies of 1 or 2 levels are supported")
        last = "sigmoid" if output == "bernoulli" else "identity"
        decoder = Mlp.build([latent_dims[0], *hidden, n_x], rng, output=last)
        prior_hidden = list(hidden if prior_hidden is None else prior_hidden)
        prior_decoders, prior_log_vars = [], []
        for lo, hi in zip(latent_dims, latent_dims[1:]):
            prior_decoders.append(Mlp.build([hi, *prior_hidden, lo], rng))
            prior_log_vars.append(np.zeros(lo))
        return cls(decoder, output, None, prior_decoders, prior_log_vars)

    @property
    def n_levels(self) -> int:
        return len(self.latent_dims)

    @property
    def n_x(self) -> int:
        return self.decoder.n_out

    def params(self) -> list[np.ndarray]:
        ps = list(self.decoder.params())
        if self.output == "gaussian":
            ps.append(self.output_log_var)
        for dec, lv in zip(self.prior_decoders, self.prior_log_vars):
            ps += dec.params()
            ps.append(lv)
        return ps

    def top_prior_for(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        return (np.broadcast_to(self.top_prior.mean, (batch, self.latent_dims[-1])),
                np.broadcast_to(self.top_prior.log_var, (batch, self.latent_dims[-1])))

    def output_mean(self, z0: np.ndarray) -> np.ndarray:
        return self.decoder(z0)


# -- ELBO and its gradients ------------------------------------------------------

@dataclass
class Evaluation:
    elbo: ElboBreakdown
    grads: GradientSignals | None = None
    errors: ErrorSignals | None = None
    theta_grads: list | None = None
    extra: dict = field(default_factory=dict)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def _check_noises(lam: PosteriorEstimate, noises, batch: int):
    if lam.point:
        return [np.zeros((1, batch, m.shape[1])) for m in lam.means]
    if noises is None or len(noises) != lam.n_levels:
        raise ConfigError("one noise array per latent level is required")
    out = []
    for m, eps in zip(lam.means, noises):
        eps = np.asarray(eps, dtype=float)
        if eps.ndim == 2:
            eps = eps[None]
        if eps.ndim != 3 or eps.shape[1:] != m.shape:
            raise ConfigError(f"noise shape {eps.shape} does not match posterior {m.shape}")
        out.append(eps)
    K = out[0].shape[0]
    if K < 1 or any(e.shape[0] != K for e in out):
        raise ConfigError("every level needs the same number K >= 1 of noise samples")
    return out


def evaluate(model: GenerativeModel, x, lam: PosteriorEstimate, noises=None,
             kl_mode: str = "analytic", *, kl_weight: float = 1.0,
             need_grads: bool = False, need_errors: bool = False,
             need_theta: bool = False) -> Evaluation:
    """One pass computing the ELBO and, on request, its pathwise gradients.

    ``need_grads`` gives gradients w.r.t. the posterior mean and log-variance
    (per example, Monte-Carlo averaged over the noise samples).  ``need_theta``
    gives gradients of the *batch-mean* ELBO w.r.t. ``model.params()``.
    ``kl_weight`` scales the prior/entropy part of the objective in the
    gradients only; the returned breakdown is always unweighted.
    """
    if kl_mode not in KL_MODES:
        raise ConfigError(f"unknown kl_mode {kl_mode!r}")
    x = _as_batch(x)
    B = x.shape[0]
    if lam.n_levels != model.n_levels or lam.batch_size != B:
        raise ConfigError("posterior estimate does not match model levels / batch")
    for l, m in enumerate(lam.means):
        if m.shape[1] != model.latent_dims[l]:
            raise ConfigError(f"level {l} posterior has {m.shape[1]} dims, model has {model.latent_dims[l]}")
    point = lam.point
    if point:
        kl_mode = "sampled"
    noises = _check_noises(lam, noises, B)
    K = noises[0].shape[0]
    L = model.n_levels

    # latent samples, (K, B, n_l)
    zs, sds = [], []
    for l in range(L):
        if point:
            zs.append(lam.means[l][None])
            sds.append(None)
        else:
            sd = np.exp(0.5 * lam.log_vars[l])
            sds.append(sd)
            zs.append(lam.means[l][None] + sd[None] * noises[l])

    # priors per level, (K, B, n_l)
    prior_means, prior_lvs, prior_tapes = [], [], []
    for l in range(L):
        n = model.latent_dims[l]
        if l == L - 1:
            pm, plv = model.top_prior_for(B)
            prior_means.append(np.broadcast_to(pm, (K, B, n)))
            prior_lvs.append(np.broadcast_to(plv, (K, B, n)))
            prior_tapes.append(None)
        else:
            above = zs[l + 1].reshape(K * B, -1)
            pm, tape = model.prior_decoders[l].forward(above)
            prior_means.append(pm.reshape(K, B, n))
            prior_lvs.append(np.broadcast_to(model.prior_log_vars[l], (K, B, n)))
            prior_tapes.append(tape)

    # observation model
    mu_x, dec_tape = model.decoder.forward(zs[0].reshape(K * B, -1))
    mu_x = mu_x.reshape(K, B, -1)
    if model.output == "bernoulli":
        recon_k = log_prob_bernoulli(x[None], mu_x)
    else:
        recon_k = _log_normal(x[None], mu_x, model.output_log_var)

    # KL-like terms per level, (K, B)
    kl_k = []
    for l in range(L):
        if kl_mode == "analytic":
            kl_k.append(_kl(lam.means[l][None], lam.log_vars[l][None], prior_means[l], prior_lvs[l]))
        else:
            log_p = _log_normal(zs[l], prior_means[l], prior_lvs[l])
            if point:
                kl_k.append(-log_p)
            else:
                log_q = _log_normal(zs[l], lam.means[l][None], lam.log_vars[l][None])
                kl_k.append(log_q - log_p)

    recon = recon_k.mean(axis=0)
    kls = [k.mean(axis=0) for k in kl_k]
    total = recon - sum(kls)
    if not np.all(np.isfinite(total)):
        terms = {"recon": recon, **{f"kl{l}": k for l, k in enumerate(kls)}}
        bad = [name for name, v in terms.items() if not np.all(np.isfinite(v))]
        raise NonFiniteError(f"non-finite ELBO term(s): {bad}")
    result = Evaluation(ElboBreakdown(recon, kls, total, K))
    result.extra.update(mu_x=mu_x, zs=zs)
    if kl_mode == "sampled":
        result.extra["log_weights"] = recon_k - sum(kl_k)

    if not (need_grads or need_errors or need_theta):
        return result

    # precision-weighted errors per sample
    if model.output == "bernoulli":
        eps_x = (x[None] - mu_x) / (mu_x * (1.0 - mu_x))
    else:
        eps_x = (x[None] - mu_x) * np.exp(-model.output_log_var)
    eps_z = [(zs[l] - prior_means[l]) * np.exp(-prior_lvs[l]) for l in range(L)]
    if need_errors:
        result.errors = ErrorSignals(eps_x.mean(axis=0), [e.mean(axis=0) for e in eps_z])
    if not (need_grads or need_theta):
        return result

    beta = kl_weight
    theta: dict[int, list] = {}
    scale = 1.0 / (K * B)
    dec_grads, g0 = model.decoder.backward(dec_tape, eps_x.reshape(K * B, -1), need_params=need_theta)
    g_z = [g0.reshape(K, B, -1)] + [np.zeros_like(zs[l]) for l in range(1, L)]
    direct_mean = [np.zeros((B, n)) for n in model.latent_dims]
    direct_lv = [np.zeros((B, n)) for n in model.latent_dims]
    prior_theta = []
    for l in range(L):
        if kl_mode == "sampled":
            up = beta * eps_z[l]
            g_z[l] = g_z[l] - up
            if l < L - 1:
                d_plv = beta * 0.5 * ((zs[l] - prior_means[l]) ** 2 * np.exp(-prior_lvs[l]) - 1)
            if not point:
                direct_lv[l] += 0.5 * beta
        else:
            inv_vp = np.exp(-prior_lvs[l])
            delta = (lam.means[l][None] - prior_means[l]) * inv_vp
            up = beta * delta
            direct_mean[l] -= up.mean(axis=0)
            vq = np.exp(lam.log_vars[l])[None]
            direct_lv[l] -= (beta * 0.5 * (vq * inv_vp - 1)).mean(axis=0)
            if l < L - 1:
                d_plv = beta * 0.5 * ((vq + (lam.means[l][None] - prior_means[l]) ** 2) * inv_vp - 1)
        if l < L - 1:
            p_grads, g_above = model.prior_decoders[l].backward(
                prior_tapes[l], up.reshape(K * B, -1), need_params=need_theta)
            g_z[l + 1] = g_z[l + 1] + g_above.reshape(K, B, -1)
            if need_theta:
                prior_theta.append([g * scale for g in p_grads] + [d_plv.sum(axis=(0, 1)) * scale])

    if need_grads:
        d_mean = [g_z[l].mean(axis=0) + direct_mean[l] for l in range(L)]
        if point:
            result.grads = GradientSignals(d_mean, None)
        else:
            d_lv = [(g_z[l] * (0.5 * sds[l][None] * noises[l])).mean(axis=0) + direct_lv[l]
                    for l in range(L)]
            result.grads = GradientSignals(d_mean, d_lv)

    if need_theta:
        grads = [g * scale for g in dec_grads]
        if model.output == "gaussian":
            d_olv = 0.5 * ((x[None] - mu_x) ** 2 * np.exp(-model.output_log_var) - 1)
            grads.append(d_olv.sum(axis=(0, 1)) * scale)
        for pg in prior_theta:
            grads += pg
        result.theta_grads = grads
    return result


def elbo(model, x, lam, noises=None, kl_mode: str = "analytic") -> ElboBreakdown:
    """Monte-Carlo ELBO per example.

    ``analytic`` uses closed-form KL terms; ``sampled`` uses
    ``log p(x, z) - log q(z | x)`` at each noise sample.  Point estimates give
    ``log p(x, z=mean)``.
    """
    return evaluate(model, x, lam, noises, kl_mode).elbo


def grad_lambda_analytic(model, x, lam, noises=None, kl_mode: str = "sampled",
                         kl_weight: float = 1.0) -> GradientSignals:
    """ELBO gradient w.r.t. posterior means and log-variances.

    In ``sampled`` mode this is the pathwise estimator built from decoder
    Jacobians and precision-weighted errors; the log-variance gradient is the
    variance gradient times the variance, and includes the ``+1/2`` entropy
    term.
    """
    return evaluate(model, x, lam, noises, kl_mode, kl_weight=kl_weight, need_grads=True).grads


def errors(model, x, lam, noises=None) -> ErrorSignals:
    """Bottom-up ``eps_x`` and per-level top-down ``eps_z``, averaged over noise."""
    return evaluate(model, x, lam, noises, "sampled", need_errors=True).errors


def error_affine_coefficients(model, lam, noises=None):
    """``(A, b)`` with ``eps_x = A * x + b`` (``A`` is the diagonal, per example).

    Holds for Gaussian outputs whose variance does not depend on ``z``.
    """
    if model.output != "gaussian":
        raise ConfigError("eps_x is affine in x only for Gaussian outputs")
    B = lam.batch_size
    ev = evaluate(model, np.zeros((B, model.n_x)), lam, noises, "sampled")
    mu_x = ev.extra["mu_x"]
    prec = np.exp(-model.output_log_var)
    A = np.broadcast_to(prec, (B, model.n_x)).copy()
    b = -(mu_x * prec).mean(axis=0)
    return A, b


def draw_noises(model: GenerativeModel, batch: int, K: int, rng: np.random.Generator):
    return [rng.standard_normal((K, batch, n)) for n in model.latent_dims]


# -- checkpoints ---------------------------------------------------------------
# Layout: a numpy .npz archive.  Key "meta" holds a JSON document (format
# version, output family, latent dims, one shape/activation record per layer of
# every network); arrays are stored under "<net>/<layer>/<W|b|g|beta>" plus
# "output_log_var" and "prior_log_var/<l>".  Extra networks (inference models)
# can ride along under their own names.

def _net_meta(net: Mlp) -> list[dict]:
    return [{"n_in": l.n_in, "n_out": l.n_out, "activation": l.activation,
             "layer_norm": l.layer_norm} for l in net.layers]


def _net_arrays(name: str, net: Mlp) -> dict:
    out = {}
    for i, l in enumerate(net.layers):
        out[f"{name}/{i}/W"] = l.weights
        out[f"{name}/{i}/b"] = l.bias
        if l.layer_norm:
            out[f"{name}/{i}/g"] = l.ln_gain
            out[f"{name}/{i}/beta"] = l.ln_bias
    return out


def _net_from(name: str, meta: list[dict], arrays) -> Mlp:
    layers = []
    for i, m in enumerate(meta):
        W, b = arrays[f"{name}/{i}/W"], arrays[f"{name}/{i}/b"]
        if W.shape != (m["n_in"], m["n_out"]):
            raise ConfigError(f"checkpoint layer {name}/{i} shape mismatch")
        if m["layer_norm"]:
            layers.append(Layer(W, b, m["activation"], True,
                                arrays[f"{name}/{i}/g"], arrays[f"{name}/{i}/beta"]))
        else:
            layers.append(Layer(W, b, m["activation"]))
    return Mlp(layers)


def save_checkpoint(path, model: GenerativeModel, nets: dict | None = None,
                    extra_meta: dict | None = None, arrays: dict | None = None) -> None:
    nets = dict(nets or {})
    all_nets = {"decoder": model.decoder,
                **{f"prior_decoder{l}": d for l, d in enumerate(model.prior_decoders)},
                **{f"net:{k}": v for k, v in nets.items()}}
    meta = {"format": CHECKPOINT_VERSION, "output": model.output,
            "latent_dims": model.latent_dims,
            "nets": {k: _net_meta(v) for k, v in all_nets.items()},
            "extra": extra_meta or {}}
    data = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for k, v in all_nets.items():
        data.update(_net_arrays(k, v))
    if model.output_log_var is not None:
        data["output_log_var"] = model.output_log_var
    for l, lv in enumerate(model.prior_log_vars):
        data[f"prior_log_var/{l}"] = lv
    data["top_prior/mean"] = model.top_prior.mean
    data["top_prior/log_var"] = model.top_prior.log_var
    for k, v in (arrays or {}).items():
        data[f"array:{k}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **data)


def load_checkpoint(path):
    """Return ``(model, nets, extra_meta, arrays)`` from :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays["meta"]))
    if meta.get("format") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {meta.get('format')!r}")
    nets = {k: _net_from(k, m, arrays) for k, m in meta["nets"].items()}
    n_prior = len(meta["latent_dims"]) - 1
    model = GenerativeModel(
        nets["decoder"], meta["output"], arrays.get("output_log_var"),
        [nets[f"prior_decoder{l}"] for l in range(n_prior)],
        [arrays[f"prior_log_var/{l}"] for l in range(n_prior)],
        DiagGaussian(arrays["top_prior/mean"], arrays["top_prior/log_var"]))
    extra_nets = {k[4:]: v for k, v in nets.items() if k.startswith("net:")}
    extra_arrays = {k[6:]: v for k, v in arrays.items() if k.startswith("array:")}
    return model, extra_nets, meta["extra"], extra_arrays
