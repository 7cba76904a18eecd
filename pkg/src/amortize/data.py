"""Datasets: IDX image files, dynamic binarization, batching, and a conjugate
linear-Gaussian problem whose posterior and evidence are known exactly."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mathcore import Layer, Mlp, make_rng
from .model import DiagGaussian, GenerativeModel, PosteriorEstimate

IDX_IMAGE_MAGIC = 2051
RANGE_TAGS = ("binary", "unit-interval", "real")


class IdxParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    examples: np.ndarray  # (n_examples, n_x)
    value_range: str
    split: str = "train"

    def __post_init__(self):
        ex = np.asarray(self.examples, dtype=float)
        ex.setflags(write=False)
        object.__setattr__(self, "examples", ex)
        if self.value_range not in RANGE_TAGS:
            raise ValueError(f"unknown value range {self.value_range!r}")
        if not np.all(np.isfinite(ex)):
            raise ValueError("dataset contains non-finite entries")
        if self.value_range == "binary" and not np.all((ex == 0) | (ex == 1)):
            raise ValueError("binary dataset has entries outside {0, 1}")
        if self.value_range == "unit-interval" and (ex.min(initial=0) < 0 or ex.max(initial=0) > 1):
            raise ValueError("unit-interval dataset has entries outside [0, 1]")

    def __len__(self) -> int:
        return self.examples.shape[0]

    @property
    def n_x(self) -> int:
        return self.examples.shape[1]

    def subset(self, n: int, split: str | None = None) -> "Dataset":
        return Dataset(self.examples[:n], self.value_range, split or self.split)


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Decode an IDX3 image container to a ``(n, rows, cols)`` uint8 array."""
    if len(raw) < 16:
        raise IdxParseError("truncated IDX header", len(raw))
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxParseError(f"bad magic number {magic:#010x}", 0)
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise IdxParseError(f"truncated pixel data: need {need} bytes, have {len(raw)}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def load_idx(path, split: str = "train") -> Dataset:
    """Read an IDX image file (optionally gzipped); pixels scaled to [0, 1]."""
    pixels = parse_idx_images(_read_bytes(path))
    return Dataset(pixels.reshape(pixels.shape[0], -1) / 255.0, "unit-interval", split)


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("expected a (n, rows, cols) uint8 array")
    return struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape) + images.tobytes()


def write_idx(path, images: np.ndarray) -> None:
    data = encode_idx_images(images)
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


def split_validation(ds: Dataset, n_val: int) -> tuple[Dataset, Dataset]:
    """The last ``n_val`` examples become the validation split."""
    ex = ds.examples
    return (Dataset(ex[:-n_val], ds.value_range, "train"),
            Dataset(ex[-n_val:], ds.value_range, "validation"))


def dynamic_binarize(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Each pixel becomes 1 with probability equal to its intensity."""
    batch = np.asarray(batch, dtype=float)
    return (rng.random(batch.shape) < batch).astype(float)


def batches(data, batch_size: int, shuffle_rng: np.random.Generator | None = None):
    """Yield row blocks of ``data`` (a Dataset or array); last short batch kept."""
    ex = data.examples if isinstance(data, Dataset) else np.asarray(data)
    n = ex.shape[0]
    order = shuffle_rng.permutation(n) if shuffle_rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield ex[order[start:start + batch_size]]


# -- conjugate linear-Gaussian oracle -----------------------------------------

@dataclass
class LinearGaussianProblem:
    """``z ~ N(mu_p, diag var_p)``, ``x | z ~ N(W z + b, var_x I)`` with
    ``W^T W`` diagonal, so the exact posterior is a diagonal Gaussian."""
    W: np.ndarray  # (n_x, n_z)
    b: np.ndarray
    var_x: np.ndarray  # (n_x,), all entries equal
    prior: DiagGaussian
    xs: np.ndarray  # (n, n_x)
    posterior_mean: np.ndarray  # (n, n_z)
    posterior_var: np.ndarray  # (n, n_z)
    log_evidence: np.ndarray  # (n,)

    @property
    def n_z(self) -> int:
        return self.W.shape[1]

    @property
    def n_x(self) -> int:
        return self.W.shape[0]

    def model(self) -> GenerativeModel:
        decoder = Mlp([Layer(self.W.T.copy(), self.b.copy(), "identity")])
        return GenerativeModel(decoder, "gaussian", np.log(self.var_x),
                               top_prior=DiagGaussian(self.prior.mean.copy(), self.prior.log_var.copy()))

    def exact_posterior(self, rows=slice(None)) -> PosteriorEstimate:
        return PosteriorEstimate([self.posterior_mean[rows]], [np.log(self.posterior_var[rows])])

    def dataset(self) -> Dataset:
        return Dataset(self.xs, "real", "oracle")

    def expectation_noises(self, batch: int) -> list:
        """The two-point noise set ``{+1, -1}``.

        The log-joint is quadratic in ``z`` and ``W^T W`` is diagonal, so
        averaging over these two points gives the exact expectation of the ELBO
        and of its posterior gradients.
        """
        ones = np.ones((batch, self.n_z))
        return [np.stack([ones, -ones])]


def conjugate_posterior(W, b, var_x, prior: DiagGaussian, xs):
    """Diagonal posterior moments for ``W^T W`` diagonal and isotropic noise."""
    var_p = prior.var
    wtw = (W ** 2).sum(axis=0)
    post_var = 1.0 / (1.0 / var_p + wtw / var_x[0])
    post_mean = post_var * ((xs - b) @ W / var_x[0] + prior.mean / var_p)
    return post_mean, np.broadcast_to(post_var, post_mean.shape).copy()


def gaussian_log_evidence(W, b, var_x, prior: DiagGaussian, xs) -> np.ndarray:
    mean = W @ prior.mean + b
    cov = (W * prior.var) @ W.T + np.diag(var_x)
    _, logdet = np.linalg.slogdet(cov)
    diff = np.atleast_2d(xs) - mean
    maha = np.einsum("ij,ij->i", diff, np.linalg.solve(cov, diff.T).T)
    return -0.5 * (W.shape[0] * np.log(2 * np.pi) + logdet + maha)


def make_linear_gaussian(n_z: int, n_x: int, seed: int, n_examples: int = 100) -> LinearGaussianProblem:
    if n_x < n_z:
        raise ValueError("need n_x >= n_z")
    rng = make_rng(seed, 0xC0)
    q, _ = np.linalg.qr(rng.standard_normal((n_x, n_z)))
    W = q * rng.uniform(0.5, 2.0, size=n_z)
    b = rng.normal(0.0, 0.5, size=n_x)
    var_x = np.full(n_x, rng.uniform(0.2, 1.0))
    prior = DiagGaussian(rng.normal(0.0, 0.5, size=n_z), np.log(rng.uniform(0.5, 2.0, size=n_z)))
    z = prior.mean + np.sqrt(prior.var) * rng.standard_normal((n_examples, n_z))
    xs = z @ W.T + b + np.sqrt(var_x) * rng.standard_normal((n_examples, n_x))
    post_mean, post_var = conjugate_posterior(W, b, var_x, prior, xs)
    return LinearGaussianProblem(W, b, var_x, prior, xs, post_mean, post_var,
                                 gaussian_log_evidence(W, b, var_x, prior, xs))


# CSV layout: one row per vector, "field,index,v0,v1,...".  Fields: W (one row
# per output dim), b, var_x, prior_mean, prior_log_var, then per example x,
# post_mean, post_var and log_evidence (a single value).
_VECTOR_FIELDS = ("x", "post_mean", "post_var", "log_evidence")


def write_linear_gaussian_csv(problem: LinearGaussianProblem, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field", "index", "values..."])
        for i, row in enumerate(problem.W):
            w.writerow(["W", i, *map(repr, row.tolist())])
        w.writerow(["b", 0, *map(repr, problem.b.tolist())])
        w.writerow(["var_x", 0, *map(repr, problem.var_x.tolist())])
        w.writerow(["prior_mean", 0, *map(repr, problem.prior.mean.tolist())])
        w.writerow(["prior_log_var", 0, *map(repr, problem.prior.log_var.tolist())])
        for i in range(problem.xs.shape[0]):
            w.writerow(["x", i, *map(repr, problem.xs[i].tolist())])
            w.writerow(["post_mean", i, *map(repr, problem.posterior_mean[i].tolist())])
            w.writerow(["post_var", i, *map(repr, problem.posterior_var[i].tolist())])
            w.writerow(["log_evidence", i, repr(float(problem.log_evidence[i]))])


def read_linear_gaussian_csv(path) -> LinearGaussianProblem:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for field, _index, *values in reader:
            rows.setdefault(field, []).append([float(v) for v in values])
    get = lambda k: np.array(rows[k])
    return LinearGaussianProblem(get("W"), get("b")[0], get("var_x")[0],
                                 DiagGaussian(get("prior_mean")[0], get("prior_log_var")[0]),
                                 get("x"), get("post_mean"), get("post_var"), get("log_evidence")[:, 0])
