"""Inference strategies: direct encoders, conventional optimizers on the
posterior parameters, and learned iterative inference models.

All strategies work on a batch of examples at once and produce a
:class:`PosteriorEstimate` (``lam``).  Iterative models and encoders expose
``backward`` so the training loop can turn ELBO gradients w.r.t. ``lam`` into
gradients w.r.t. their own parameters.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .mathcore import (ConfigError, Mlp, NonFiniteError, _layer_norm_forward,
                       layer_norm_backward, make_optimizer, sigmoid)
from .model import (LOG_VAR_MAX, LOG_VAR_MIN, GenerativeModel, GradientSignals,
                    PosteriorEstimate, draw_noises, evaluate)

ENCODINGS = ("gradients", "errors", "data")
PREPROCESSING = ("log_transform", "layer_norm", "none")
INIT_MODES = ("prior", "zeros", "learned_constant")
GATE_BIAS_INIT = 2.0


class ContractError(RuntimeError):
    """A strategy was called without the inputs its configuration needs."""


def preprocess_gradient(g: np.ndarray, alpha: float = 1.0, eps_ln: float = 1e-6) -> np.ndarray:
    """``[alpha * log(|g| + eps_ln), sign(g)]`` concatenated on the last axis."""
    if eps_ln <= 0:
        raise ConfigError("eps_ln must be positive")
    g = np.asarray(g, dtype=float)
    return np.concatenate([alpha * np.log(np.abs(g) + eps_ln), np.sign(g)], axis=-1)


def init_lambda(model: GenerativeModel, batch: int, mode: str = "prior",
                point: bool = False, constant: list | None = None) -> PosteriorEstimate:
    """Initial estimate shared by every example in the batch."""
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown init mode {mode!r}")
    L = model.n_levels
    if mode == "learned_constant":
        if constant is None:
            raise ConfigError("learned_constant init needs the learned values")
        comps = [np.tile(c, (batch, 1)) for c in constant]
        return PosteriorEstimate.from_components(comps, point)
    means = [np.zeros((batch, n)) for n in model.latent_dims]
    log_vars = [np.zeros((batch, n)) for n in model.latent_dims]
    if mode == "prior":
        means[L - 1][:] = model.top_prior.mean
        log_vars[L - 1][:] = model.top_prior.log_var
        for l in range(L - 2, -1, -1):
            means[l] = model.prior_decoders[l](means[l + 1])
            log_vars[l][:] = model.prior_log_vars[l]
    return PosteriorEstimate(means, None if point else log_vars)


def _clamp_mask(log_var_pre: np.ndarray) -> np.ndarray:
    return ((log_var_pre > LOG_VAR_MIN) & (log_var_pre < LOG_VAR_MAX)).astype(float)


# -- standard encoder ---------------------------------------------------------

class StandardEncoder:
    """Direct map ``x -> lam``, bottom-up through the levels.

    ``trunks[0]`` reads ``x``; ``trunks[l]`` reads the features of
    ``trunks[l-1]``.  ``heads[l]`` maps level-``l`` features to that level's
    mean (and log-variance).
    """
    variant = "standard"

    def __init__(self, trunks: list[Mlp], heads: list[Mlp], point: bool = False):
        self.trunks, self.heads, self.point = list(trunks), list(heads), point

    @classmethod
    def build(cls, model: GenerativeModel, hidden, rng, point: bool = False) -> "StandardEncoder":
        trunks, heads = [], []
        n_in = model.n_x
        for n in model.latent_dims:
            trunk = Mlp.build([n_in, *hidden], rng, output="elu")
            trunks.append(trunk)
            heads.append(Mlp.build([hidden[-1], n if point else 2 * n], rng))
            n_in = hidden[-1]
        return cls(trunks, heads, point)

    def params(self) -> list[np.ndarray]:
        return [p for net in self.trunks + self.heads for p in net.params()]

    def nets(self) -> dict[str, Mlp]:
        return {**{f"trunk{l}": n for l, n in enumerate(self.trunks)},
                **{f"head{l}": n for l, n in enumerate(self.heads)}}

    def infer(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = x
        means, log_vars, cache = [], [], []
        for trunk, head in zip(self.trunks, self.heads):
            h, t_tape = trunk.forward(h)
            out, h_tape = head.forward(h)
            n = out.shape[1] if self.point else out.shape[1] // 2
            means.append(out[:, :n])
            if not self.point:
                log_vars.append(out[:, n:])
            cache.append((t_tape, h_tape))
        lam = PosteriorEstimate(means, None if self.point else log_vars)
        return lam, (cache, log_vars)

    def backward(self, cache, grads: GradientSignals) -> list[np.ndarray]:
        """Gradients of ``sum_examples(L)`` w.r.t. :meth:`params` (ascent sign)."""
        tapes, raw_lv = cache
        L = len(self.trunks)
        trunk_grads, head_grads = [None] * L, [None] * L
        d_feat_above = None
        for l in range(L - 1, -1, -1):
            t_tape, h_tape = tapes[l]
            if self.point:
                up = grads.d_mean[l]
            else:
                up = np.concatenate([grads.d_mean[l], grads.d_log_var[l] * _clamp_mask(raw_lv[l])], axis=1)
            head_grads[l], d_feat = self.heads[l].backward(h_tape, up)
            if d_feat_above is not None:
                d_feat = d_feat + d_feat_above
            trunk_grads[l], d_feat_above = self.trunks[l].backward(t_tape, d_feat)
        return [g for gs in trunk_grads + head_grads for g in gs]


def standard_infer(encoder: StandardEncoder, x) -> PosteriorEstimate:
    return encoder.infer(x)[0]


# -- iterative inference model ------------------------------------------------

def gated_update(current, proposal, gate):
    """Per-coordinate convex blend ``gate * current + (1 - gate) * proposal``."""
    return gate * current + (1 - gate) * proposal


@dataclass
class StepCache:
    tapes: list
    inputs: list
    ln_caches: list
    lam_prev: list
    proposal: list
    gates: list
    raw_out: list


class IterativeModel:
    """Learned update ``lam_{t+1} = g * lam_t + (1 - g) * f(signals, lam_t)``.

    One network per latent level; each has a shared trunk whose last layer holds
    the proposal heads ``f`` for the mean and log-variance followed by the
    matching gate heads.  ``encoding`` chooses which signals the network reads;
    the current estimate is always part of the input.
    """
    variant = "iterative"

    def __init__(self, nets: list[Mlp], model_dims: list[int], n_x: int,
                 encoding=("gradients",), preprocessing: str = "log_transform",
                 gated: bool = True, point: bool = False, alpha: float = 1.0,
                 eps_ln: float = 1e-6, ln_params: list | None = None,
                 init_mode: str = "prior", init_constant: list | None = None):
        encoding = tuple(e for e in ENCODINGS if e in set(encoding))
        if not encoding:
            raise ConfigError("an iterative model must encode at least one signal")
        if preprocessing not in PREPROCESSING:
            raise ConfigError(f"unknown preprocessing {preprocessing!r}")
        self.nets = list(nets)
        self.dims, self.n_x = list(model_dims), n_x
        self.encoding, self.preprocessing = encoding, preprocessing
        self.gated, self.point = gated, point
        self.alpha, self.eps_ln = alpha, eps_ln
        self.init_mode, self.init_constant = init_mode, init_constant
        for l, net in enumerate(self.nets):
            if net.n_in != self.input_size(l):
                raise ConfigError(f"level {l} network expects {net.n_in} inputs, encoding gives {self.input_size(l)}")
            if net.n_out != self.output_size(l):
                raise ConfigError(f"level {l} network has {net.n_out} outputs, need {self.output_size(l)}")
        if ln_params is None and preprocessing == "layer_norm":
            ln_params = [[(np.ones(n), np.zeros(n)) for n in self._signal_sizes(l)]
                         for l in range(len(self.dims))]
        self.ln_params = ln_params or [[] for _ in self.dims]

    # sizes ----------------------------------------------------------------
    def _n_components(self) -> int:
        return 1 if self.point else 2

    def _signal_sizes(self, l: int) -> list[int]:
        n = self.dims[l]
        sizes = []
        if "gradients" in self.encoding:
            sizes += [n] * self._n_components()
        if "errors" in self.encoding:
            sizes += [self.n_x if l == 0 else self.dims[l - 1], n]
        return sizes

    def input_size(self, l: int) -> int:
        widen = 2 if self.preprocessing == "log_transform" else 1
        size = widen * sum(self._signal_sizes(l))
        if "data" in self.encoding:
            size += self.n_x
        return size + self._n_components() * self.dims[l]

    def output_size(self, l: int) -> int:
        return self.dims[l] * self._n_components() * (2 if self.gated else 1)

    @classmethod
    def build(cls, model: GenerativeModel, hidden, rng, encoding=("gradients",),
              preprocessing: str = "log_transform", gated: bool = True,
              point: bool = False, alpha: float = 1.0, eps_ln: float = 1e-6,
              init_mode: str = "prior") -> "IterativeModel":
        shell = cls.__new__(cls)
        shell.dims, shell.n_x = list(model.latent_dims), model.n_x
        shell.encoding = tuple(e for e in ENCODINGS if e in set(encoding))
        shell.preprocessing, shell.gated, shell.point = preprocessing, gated, point
        nets = []
        for l in range(model.n_levels):
            net = Mlp.build([shell.input_size(l), *hidden, shell.output_size(l)], rng)
            if gated:
                half = shell.output_size(l) // 2
                net.layers[-1].bias[half:] = GATE_BIAS_INIT
            nets.append(net)
        init_constant = None
        if init_mode == "learned_constant":
            start = init_lambda(model, 1, "prior", point)
            init_constant = [c[0].copy() for c in start.components()]
        return cls(nets, model.latent_dims, model.n_x, encoding, preprocessing, gated,
                   point, alpha, eps_ln, None, init_mode, init_constant)

    def params(self) -> list[np.ndarray]:
        ps = [p for net in self.nets for p in net.params()]
        for level in self.ln_params:
            for gain, bias in level:
                ps += [gain, bias]
        if self.init_constant is not None:
            ps += self.init_constant
        return ps

    def nets_dict(self) -> dict[str, Mlp]:
        return {f"iter{l}": n for l, n in enumerate(self.nets)}

    def needs(self) -> tuple[bool, bool]:
        """Whether a step needs (gradients, errors)."""
        return "gradients" in self.encoding, "errors" in self.encoding

    def initial(self, model: GenerativeModel, batch: int) -> PosteriorEstimate:
        return init_lambda(model, batch, self.init_mode, self.point, self.init_constant)

    # one update -------------------------------------------------------------
    def _signals(self, l, grads, errs):
        blocks = []
        if "gradients" in self.encoding:
            if grads is None:
                raise ContractError("gradient-encoding model called without gradients")
            blocks.append(grads.d_mean[l])
            if not self.point:
                blocks.append(grads.d_log_var[l])
        if "errors" in self.encoding:
            if errs is None:
                raise ContractError("error-encoding model called without errors")
            blocks.append(errs.eps_x if l == 0 else errs.eps_z[l - 1])
            blocks.append(errs.eps_z[l])
        return blocks

    def step(self, lam: PosteriorEstimate, grads=None, errs=None, x=None):
        """Return ``(lam_next, cache)``; ``cache`` feeds :meth:`backward`."""
        if "data" in self.encoding and x is None:
            raise ContractError("data-encoding model called without x")
        comps = lam.components()
        nc = self._n_components()
        cache = StepCache([], [], [], comps, [], [], [])
        new = []
        for l, net in enumerate(self.nets):
            parts, ln_caches = [], []
            for j, s in enumerate(self._signals(l, grads, errs)):
                if self.preprocessing == "log_transform":
                    parts.append(preprocess_gradient(s, self.alpha, self.eps_ln))
                    ln_caches.append(None)
                elif self.preprocessing == "layer_norm":
                    gain, bias = self.ln_params[l][j]
                    out, c = _layer_norm_forward(s, gain, bias)
                    parts.append(out)
                    ln_caches.append(c)
                else:
                    parts.append(s)
                    ln_caches.append(None)
            if "data" in self.encoding:
                parts.append(np.atleast_2d(x))
            level_comps = comps[l * nc:(l + 1) * nc]
            parts += level_comps
            inp = np.concatenate(parts, axis=1)
            out, tape = net.forward(inp)
            n = self.dims[l]
            for c in range(nc):
                f = out[:, c * n:(c + 1) * n]
                if self.gated:
                    g = sigmoid(out[:, (nc + c) * n:(nc + c + 1) * n])
                    nxt = gated_update(level_comps[c], f, g)
                else:
                    g = None
                    nxt = f
                cache.proposal.append(f)
                cache.gates.append(g)
                cache.raw_out.append(nxt)
                new.append(nxt)
            cache.tapes.append(tape)
            cache.inputs.append(inp)
            cache.ln_caches.append(ln_caches)
        return PosteriorEstimate.from_components(new, self.point), cache

    def backward(self, cache: StepCache, grads: GradientSignals) -> list[np.ndarray]:
        """Gradient of ``sum_examples(L_{t+1})`` w.r.t. :meth:`params`.

        ``grads`` is the ELBO gradient at the estimate this step produced; the
        step's inputs are treated as constants.
        """
        ups = grads.components()
        nc = self._n_components()
        net_grads, ln_grads = [], []
        for l, net in enumerate(self.nets):
            n = self.dims[l]
            d_out = np.zeros((ups[0].shape[0], net.n_out))
            for c in range(nc):
                k = l * nc + c
                u = ups[k]
                if c == 1:
                    u = u * _clamp_mask(cache.raw_out[k])
                g = cache.gates[k]
                if self.gated:
                    d_out[:, c * n:(c + 1) * n] = (1 - g) * u
                    d_out[:, (nc + c) * n:(nc + c + 1) * n] = (
                        u * (cache.lam_prev[k] - cache.proposal[k]) * g * (1 - g))
                else:
                    d_out[:, c * n:(c + 1) * n] = u
            pg, d_in = net.backward(cache.tapes[l], d_out)
            net_grads += pg
            if self.preprocessing == "layer_norm":
                offset = 0
                for j, size in enumerate(self._signal_sizes(l)):
                    gain, _ = self.ln_params[l][j]
                    _, d_gain, d_bias = layer_norm_backward(
                        cache.ln_caches[l][j], gain, d_in[:, offset:offset + size])
                    ln_grads += [d_gain, d_bias]
                    offset += size
        out = net_grads + ln_grads
        if self.init_constant is not None:
            out += [np.zeros_like(c) for c in self.init_constant]
        return out


def iterative_step(strategy: IterativeModel, lam: PosteriorEstimate, grads=None, errs=None, x=None):
    return strategy.step(lam, grads, errs, x)[0]


# -- trajectories ---------------------------------------------------------------

@dataclass
class IterationRecord:
    t: int
    elbo: np.ndarray  # per example
    grad_norm_mean: np.ndarray  # per example, ||d L / d mean|| over all levels
    grad_norm_logvar: np.ndarray
    seconds: float
    lam: PosteriorEstimate | None = None


@dataclass
class InferenceTrajectory:
    records: list = field(default_factory=list)
    diverged_at: int | None = None
    diagnostic: str = ""
    final: PosteriorEstimate | None = None
    final_breakdown: object = None  # ElboBreakdown of the last evaluation
    phi_grads: list | None = None
    theta_grads: list | None = None

    def __len__(self) -> int:
        return len(self.records)

    def mean_elbo(self) -> np.ndarray:
        return np.array([r.elbo.mean() for r in self.records])

    def mean_grad_norm(self) -> np.ndarray:
        return np.array([r.grad_norm_mean.mean() for r in self.records])

    def seconds(self) -> np.ndarray:
        return np.array([r.seconds for r in self.records])


def _grad_norms(grads: GradientSignals):
    nm = np.sqrt(sum((g ** 2).sum(axis=1) for g in grads.d_mean))
    if grads.d_log_var is None:
        return nm, np.zeros_like(nm)
    nl = np.sqrt(sum((g ** 2).sum(axis=1) for g in grads.d_log_var))
    return nm, nl


def _record(traj, t, ev, model, x, lam, eval_noise, kl_mode, keep, t0):
    if eval_noise is not None:
        elbo_t = evaluate(model, x, lam, eval_noise, kl_mode).elbo.total
    else:
        elbo_t = ev.elbo.total
    nm, nl = _grad_norms(ev.grads)
    traj.records.append(IterationRecord(t, elbo_t, nm, nl, time.perf_counter() - t0,
                                        lam.copy() if keep else None))


def _add(acc, grads):
    if acc is None:
        return [np.array(g, dtype=float) for g in grads]
    for a, g in zip(acc, grads):
        a += g
    return acc


def optimizer_infer(kind: str, lr: float, model: GenerativeModel, x, lam0: PosteriorEstimate,
                    T: int, K: int, rng: np.random.Generator, kl_mode: str = "analytic",
                    eval_noise=None, keep: bool = False, fixed_noises=None) -> InferenceTrajectory:
    """Gradient ascent on ``lam`` with fresh noise at every iteration.

    ``fixed_noises`` replaces the fresh draws with one noise set reused at
    every step (used with quadrature-style noise sets on the linear oracle).
    A non-finite ELBO or gradient stops the run; ``diverged_at`` then holds the
    iteration and the trajectory is shorter than ``T + 1``.
    """
    if T < 1:
        raise ConfigError("T must be at least 1")
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    x = np.atleast_2d(x)
    lam = lam0.copy()
    comps = lam.components()
    opt = make_optimizer(kind, comps, lr)
    traj = InferenceTrajectory()
    for t in range(T + 1):
        t0 = time.perf_counter()
        noises = fixed_noises if fixed_noises is not None else draw_noises(model, x.shape[0], K, rng)
        try:
            ev = evaluate(model, x, lam, noises, kl_mode, need_grads=True)
            comp_grads = ev.grads.components()
            if not all(np.all(np.isfinite(g)) for g in comp_grads):
                raise NonFiniteError("non-finite posterior gradient")
            if t < T:
                _record(traj, t, ev, model, x, lam, eval_noise, kl_mode, keep, t0)
                opt.step([-g for g in comp_grads])
                if not lam.point:
                    for lv in lam.log_vars:
                        np.clip(lv, LOG_VAR_MIN, LOG_VAR_MAX, out=lv)
                if not all(np.all(np.isfinite(c)) for c in comps):
                    raise NonFiniteError("non-finite posterior estimate")
            else:
                _record(traj, t, ev, model, x, lam, eval_noise, kl_mode, keep, t0)
                traj.final_breakdown = ev.elbo
        except (NonFiniteError, FloatingPointError) as exc:
            traj.diverged_at = t
            traj.diagnostic = f"{kind} lr={lr}: stopped at iteration {t}: {exc}"
            if len(traj.records) > t:
                traj.records = traj.records[:t]
            break
    traj.final = lam
    return traj


def iterative_infer(strategy: IterativeModel, model: GenerativeModel, x, T: int, K: int,
                    rng: np.random.Generator, kl_mode: str = "analytic", eval_noise=None,
                    keep: bool = False, accumulate_phi: bool = False,
                    theta: str | None = None, kl_weight: float = 1.0) -> InferenceTrajectory:
    """Iterative amortized inference for ``T`` updates.

    At every iteration ``t`` a fresh noise draw gives ``L_t`` and its gradient
    ``g_t`` w.r.t. ``lam_t``; the model turns ``(g_t or errors, lam_t)`` into
    ``lam_{t+1}``.  With ``accumulate_phi`` the gradients of every ``L_t``
    (``t >= 1``) w.r.t. the inference parameters are summed, each taking the
    previous step's inputs as constants.  ``theta`` = ``"final"`` or ``"all"``
    also returns the generative-parameter gradient of the last (or summed) ELBO.
    """
    if T < 1:
        raise ConfigError("T must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B = x.shape[0]
    lam = strategy.initial(model, B)
    need_g, need_e = strategy.needs()
    traj = InferenceTrajectory()
    cache = None
    phi = None
    theta_acc = None
    for t in range(T + 1):
        t0 = time.perf_counter()
        noises = draw_noises(model, B, K, rng)
        want_theta = theta == "all" or (theta == "final" and t == T)
        try:
            ev = evaluate(model, x, lam, noises, kl_mode, kl_weight=kl_weight,
                          need_grads=True, need_errors=need_e, need_theta=want_theta)
            if not all(np.all(np.isfinite(g)) for g in ev.grads.components()):
                raise NonFiniteError("non-finite posterior gradient")
        except (NonFiniteError, FloatingPointError) as exc:
            traj.diverged_at = t
            traj.diagnostic = f"iterative model: stopped at iteration {t}: {exc}"
            break
        if accumulate_phi:
            if t == 0 and strategy.init_constant is not None:
                const = [g.sum(axis=0) for g in ev.grads.components()]
                phi = _add(phi, [np.zeros_like(p) for p in strategy.params()[:-len(const)]] + const)
            if cache is not None:
                phi = _add(phi, strategy.backward(cache, ev.grads))
        if want_theta:
            theta_acc = _add(theta_acc, ev.theta_grads)
        if t < T:
            nxt, cache = strategy.step(lam, ev.grads if need_g else None,
                                       ev.errors if need_e else None, x)
            _record(traj, t, ev, model, x, lam, eval_noise, kl_mode, keep, t0)
            lam = nxt
        else:
            _record(traj, t, ev, model, x, lam, eval_noise, kl_mode, keep, t0)
            traj.final_breakdown = ev.elbo
    traj.final = lam
    traj.phi_grads = phi
    traj.theta_grads = theta_acc
    return traj


def standard_trajectory(encoder: StandardEncoder, model: GenerativeModel, x, K: int,
                        rng: np.random.Generator, kl_mode: str = "analytic", eval_noise=None,
                        init_mode: str = "prior") -> InferenceTrajectory:
    """Two-record trajectory: the shared initial estimate and the encoder output."""
    x = np.atleast_2d(x)
    traj = InferenceTrajectory()
    lam0 = init_lambda(model, x.shape[0], init_mode, encoder.point)
    for t, lam in enumerate([lam0, standard_infer(encoder, x)]):
        t0 = time.perf_counter()
        ev = evaluate(model, x, lam, draw_noises(model, x.shape[0], K, rng), kl_mode, need_grads=True)
        _record(traj, t, ev, model, x, lam, eval_noise, kl_mode, False, t0)
    traj.final = lam
    traj.final_breakdown = ev.elbo
    return traj
