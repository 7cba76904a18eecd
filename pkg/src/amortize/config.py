"""Line-oriented ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored.  Every key must be one of
:data:`SCHEMA`; lists are comma separated.  Unknown keys, repeated keys and
malformed values raise :class:`ConfigError` naming the line.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .inference import ENCODINGS, INIT_MODES, PREPROCESSING
from .mathcore import OPTIMIZERS, ConfigError

LR_GRID = (0.5, 0.4, 0.3, 0.2, 0.1, 0.01, 0.001)
ABLATE_T = (2, 5, 10, 16)
ABLATE_K = (1, 5, 10, 20)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _words(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass
class ExperimentConfig:
    # data and generative model
    dataset: str = "mnist"  # mnist | linear-gaussian
    data: str = "data/mnist5k-images-idx3-ubyte.gz"
    n_train: int = 0  # 0 = all non-validation examples
    n_validation: int = 1000
    latent_dims: tuple = (16,)
    hidden: tuple = (64, 64)
    output: str = "bernoulli"
    point: bool = False
    synthetic_nx: int = 8  # linear-gaussian problem size
    synthetic_examples: int = 500
    # inference strategy
    variant: str = "iterative"  # standard | optimizer | iterative
    encoding: tuple = ("gradients",)
    T: int = 16
    K: int = 1
    preprocessing: str = "log_transform"
    gated: bool = True
    init: str = "prior"
    alpha: float = 1.0
    eps_ln: float = 1e-6
    inference_hidden: tuple = (64, 64)
    optimizer: str = "adam"
    lr: float = 0.1
    # training
    epochs: int = 10
    iterative_epochs: int = 10  # second phase for commands that train two strategies
    batch_size: int = 64
    lr_theta: float = 2e-4
    lr_phi: float = 2e-4
    lr_decay: float = 0.999
    kl_anneal_epochs: int = 0
    phi_accumulation: str = "sum"
    theta_grads: str = "final"
    validation_K: int = 1
    # experiments
    checkpoint: str = ""
    eval_examples: int = 1000
    T_eval: int = 100
    lr_grid: tuple = LR_GRID
    optimizers: tuple = ("sgd", "momentum", "rmsprop", "adam")
    surface_example: int = 0
    surface_range: float = 5.0
    surface_step: float = 0.05
    ascent_lr: float = 0.01
    gap_T_opt: int = 200
    gap_lr_opt: float = 0.05
    iw_samples: int = 500
    trace_example: int = 0
    trace_epochs: tuple = ()
    ablate_variants: tuple = ("standard", "iterative")
    ablate_T: tuple = ABLATE_T
    ablate_K: tuple = ()
    ablate_seeds: tuple = (0,)
    source: str = field(default="", repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in ("mnist", "linear-gaussian"):
            raise ConfigError(f"dataset must be mnist or linear-gaussian, got {self.dataset!r}")
        if self.output not in ("bernoulli", "gaussian"):
            raise ConfigError(f"unknown output family {self.output!r}")
        if self.variant not in ("standard", "optimizer", "iterative"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        bad = set(self.encoding) - set(ENCODINGS)
        if bad or not self.encoding:
            raise ConfigError(f"encoding must be a non-empty subset of {ENCODINGS}")
        if self.preprocessing not in PREPROCESSING:
            raise ConfigError(f"unknown preprocessing {self.preprocessing!r}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"unknown init {self.init!r}")
        for kind in (self.optimizer, *self.optimizers):
            if kind not in OPTIMIZERS:
                raise ConfigError(f"unknown optimizer {kind!r}")
        if not 1 <= len(self.latent_dims) <= 2:
            raise ConfigError("latent_dims must list one or two levels")
        for name in ("T", "K", "epochs", "batch_size", "T_eval", "iw_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.surface_step <= 0 or self.surface_range <= 0:
            raise ConfigError("surface_range and surface_step must be positive")

    def resolve(self, path: str) -> Path:
        """Paths in the config are relative to the config file's directory."""
        p = Path(path)
        if p.is_absolute() or not self.source:
            return p
        local = Path(self.source).parent / p
        return local if local.exists() else p


_PARSERS = {int: int, float: float, str: str, bool: _bool}
_LIST_PARSERS = {"latent_dims": _ints, "hidden": _ints, "inference_hidden": _ints,
                 "trace_epochs": _ints, "ablate_T": _ints, "ablate_K": _ints, "ablate_seeds": _ints,
                 "lr_grid": _floats, "encoding": _words, "optimizers": _words, "ablate_variants": _words}
SCHEMA = {f.name: f for f in fields(ExperimentConfig) if f.name != "source"}


def _field_parser(name: str):
    if name in _LIST_PARSERS:
        return _LIST_PARSERS[name]
    kind = type(SCHEMA[name].default)
    return _PARSERS[kind]


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        try:
            values[key] = _field_parser(key)(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return ExperimentConfig(**values, source=source)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SCHEMA:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"
