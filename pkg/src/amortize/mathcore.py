"""Dense numeric substrate: MLPs with hand-written backward passes, layer
normalization, parameter optimizers and seeded random streams.

Arrays are plain ``float64`` numpy arrays.  Every network operates on a batch
``(B, n_in)``; a 1-D input is treated as a batch of one and the output is
squeezed back.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("elu", "sigmoid", "identity")
ELU_ALPHA = 1.0
SIGMOID_CLAMP = 15.0
LN_VAR_FLOOR = 1e-5


class ConfigError(ValueError):
    """Raised for shape or configuration mismatches."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation that promises finiteness produced nan/inf."""


# -- random streams ----------------------------------------------------------

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """A generator for ``(seed, stream...)``.

    Child streams are independent of each other and of draw order elsewhere, so
    work split across streams stays reproducible.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def sample_standard_normal(rng: np.random.Generator, n) -> np.ndarray:
    return rng.standard_normal(n)


# -- activations -------------------------------------------------------------

def elu(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0, a, ELU_ALPHA * np.expm1(np.minimum(a, 0.0)))


def elu_grad(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(a, 0.0)))


def sigmoid(a: np.ndarray) -> np.ndarray:
    a = np.clip(a, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-a))


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "elu":
        return elu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    return a


def _activation_grad(kind: str, a: np.ndarray, out: np.ndarray) -> np.ndarray:
    if kind == "elu":
        return elu_grad(a)
    if kind == "sigmoid":
        inside = np.abs(a) < SIGMOID_CLAMP
        return out * (1.0 - out) * inside
    return np.ones_like(a)


# -- layer normalization -----------------------------------------------------

def layer_norm(v: np.ndarray, gain: np.ndarray | None = None,
               bias: np.ndarray | None = None) -> np.ndarray:
    """Normalize over the last axis to mean 0 / variance 1, then apply gain/bias.

    The population variance gets a floor of ``1e-5`` added, so a constant
    vector maps to zeros instead of dividing by zero.
    """
    return _layer_norm_forward(np.asarray(v, dtype=float), gain, bias)[0]


def _layer_norm_forward(v, gain, bias):
    if v.shape[-1] < 2:
        raise ConfigError("layer_norm needs at least 2 features")
    mean = v.mean(axis=-1, keepdims=True)
    centered = v - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_VAR_FLOOR)
    normed = centered * inv_std
    out = normed
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out, (normed, inv_std)


def layer_norm_backward(cache, gain, upstream):
    """Return ``(d_input, d_gain, d_bias)`` for a forward call's cache."""
    normed, inv_std = cache
    d_gain = (upstream * normed).reshape(-1, normed.shape[-1]).sum(axis=0)
    d_bias = upstream.reshape(-1, normed.shape[-1]).sum(axis=0)
    d_normed = upstream * gain if gain is not None else upstream
    n = normed.shape[-1]
    d_in = inv_std * (d_normed - d_normed.mean(axis=-1, keepdims=True)
                      - normed * (d_normed * normed).sum(axis=-1, keepdims=True) / n)
    return d_in, d_gain, d_bias


# -- MLP ---------------------------------------------------------------------

@dataclass
class Layer:
    weights: np.ndarray  # (n_in, n_out)
    bias: np.ndarray  # (n_out,)
    activation: str = "elu"
    layer_norm: bool = False
    ln_gain: np.ndarray | None = None
    ln_bias: np.ndarray | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ConfigError(f"layer shapes {self.weights.shape} / {self.bias.shape} disagree")
        if self.layer_norm:
            n_out = self.weights.shape[1]
            if self.ln_gain is None:
                self.ln_gain = np.ones(n_out)
            if self.ln_bias is None:
                self.ln_bias = np.zeros(n_out)

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    def params(self) -> list[np.ndarray]:
        ps = [self.weights, self.bias]
        if self.layer_norm:
            ps += [self.ln_gain, self.ln_bias]
        return ps


@dataclass
class Tape:
    """Activation cache of one forward call; consumed by :meth:`Mlp.backward`."""
    net_id: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    outs: list = field(default_factory=list)
    ln_cache: list = field(default_factory=list)
    squeeze: bool = False


class Mlp:
    """Feed-forward network; layer ``i`` computes ``act(LN?(h W + b))``."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ConfigError("an Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ConfigError(f"layer dims do not chain: {a.n_out} -> {b.n_in}")
        self.layers = layers

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator,
              hidden: str = "elu", output: str = "identity",
              layer_norm: bool = False) -> "Mlp":
        """Glorot-uniform weights, zero biases, ``hidden`` between layers."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            limit = np.sqrt(6.0 / (n_in + n_out))
            layers.append(Layer(rng.uniform(-limit, limit, size=(n_in, n_out)),
                                np.zeros(n_out),
                                output if last else hidden,
                                layer_norm=layer_norm and not last))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.n_in:
            raise ConfigError(f"input has {h.shape[-1]} features, network expects {self.n_in}")
        tape = Tape(id(self), squeeze=squeeze)
        for layer in self.layers:
            tape.inputs.append(h)
            a = h @ layer.weights + layer.bias
            if layer.layer_norm:
                a, cache = _layer_norm_forward(a, layer.ln_gain, layer.ln_bias)
                tape.ln_cache.append(cache)
            else:
                tape.ln_cache.append(None)
            h = _activate(layer.activation, a)
            tape.pre.append(a)
            tape.outs.append(h)
        return (h[0] if squeeze else h), tape

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, tape: Tape, upstream: np.ndarray, need_params: bool = True):
        """Vector-Jacobian product through the recorded forward pass.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` lines up with
        :meth:`params` (``None`` when ``need_params`` is false) and
        ``input_grad = J^T upstream``.
        """
        if tape.net_id != id(self) or len(tape.pre) != len(self.layers):
            raise RuntimeError("tape was not produced by this network")
        g = np.asarray(upstream, dtype=float)
        if tape.squeeze:
            g = g[None, :]
        grads: list[list[np.ndarray]] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = g * _activation_grad(layer.activation, tape.pre[i], tape.outs[i])
            layer_grads = []
            if layer.layer_norm:
                g, d_gain, d_bias = layer_norm_backward(tape.ln_cache[i], layer.ln_gain, g)
                layer_grads = [d_gain, d_bias]
            if need_params:
                layer_grads = [tape.inputs[i].T @ g, g.sum(axis=0)] + layer_grads
                grads.append(layer_grads)
            g = g @ layer.weights.T
        if tape.squeeze:
            g = g[0]
        if not need_params:
            return None, g
        return [p for layer_grads in reversed(grads) for p in layer_grads], g

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weights.copy(), l.bias.copy(), l.activation, l.layer_norm,
                          None if l.ln_gain is None else l.ln_gain.copy(),
                          None if l.ln_bias is None else l.ln_bias.copy())
                    for l in self.layers])


# -- optimizers --------------------------------------------------------------
# All optimizers *descend*: callers maximizing an objective pass its negated
# gradient.

class Optimizer:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ConfigError("gradient list does not match parameter list")
        bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteError(f"non-finite gradient in parameter(s) {bad}")
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if p.shape != np.shape(g):
                raise ConfigError(f"gradient {i} has shape {np.shape(g)}, parameter {p.shape}")
            p -= self._update(i, np.asarray(g, dtype=float))

    def _update(self, i: int, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, i, g):
        return self.lr * g


class Momentum(Optimizer):
    def __init__(self, params, lr, beta: float = 0.9):
        super().__init__(params, lr)
        self.beta = beta
        self.velocity = [np.zeros_like(p) for p in params]

    def _update(self, i, g):
        self.velocity[i] = self.beta * self.velocity[i] + g
        return self.lr * self.velocity[i]


class RMSProp(Optimizer):
    def __init__(self, params, lr, decay: float = 0.9, eps: float = 1e-8):
        super().__init__(params, lr)
        self.decay, self.eps = decay, eps
        self.sq = [np.zeros_like(p) for p in params]

    def _update(self, i, g):
        self.sq[i] = self.decay * self.sq[i] + (1 - self.decay) * g * g
        return self.lr * g / (np.sqrt(self.sq[i]) + self.eps)


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam(Optimizer):
    """Bias-corrected Adam; defaults are the usual ones with ``lr=2e-4``."""

    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.state = AdamState(lr, beta1, beta2, eps, 0,
                               [np.zeros_like(p) for p in params],
                               [np.zeros_like(p) for p in params])

    def step(self, grads):
        self.state.lr = self.lr
        super().step(grads)
        self.state.t = self.t

    def _update(self, i, g):
        s = self.state
        s.m[i] = s.beta1 * s.m[i] + (1 - s.beta1) * g
        s.v[i] = s.beta2 * s.v[i] + (1 - s.beta2) * g * g
        m_hat = s.m[i] / (1 - s.beta1 ** self.t)
        v_hat = s.v[i] / (1 - s.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + s.eps)


OPTIMIZERS = {"sgd": SGD, "momentum": Momentum, "rmsprop": RMSProp, "adam": Adam}


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """Functional form of one Adam descent step; updates ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    opt = Adam(params, state.lr, state.beta1, state.beta2, state.eps)
    opt.state, opt.t = state, state.t
    opt.step(grads)
    return state


def make_optimizer(kind: str, params: list[np.ndarray], lr: float) -> Optimizer:
    try:
        return OPTIMIZERS[kind](params, lr)
    except KeyError:
        raise ConfigError(f"unknown optimizer {kind!r}") from None
