import gzip
import struct

import numpy as np
import pytest

from amortize.data import (Dataset, IdxParseError, batches, conjugate_posterior, dynamic_binarize,
                           encode_idx_images, gaussian_log_evidence, load_idx, make_linear_gaussian,
                           read_linear_gaussian_csv, split_validation, write_idx,
                           write_linear_gaussian_csv)
from amortize.mathcore import make_rng
from amortize.model import DiagGaussian, draw_noises, elbo


def idx_fixture():
    pixels = bytes([0, 51, 102, 255, 10, 20, 30, 40])
    return struct.pack(">IIII", 2051, 2, 2, 2) + pixels


def test_load_handcrafted_idx(tmp_path):
    path = tmp_path / "tiny-idx3-ubyte"
    path.write_bytes(idx_fixture())
    ds = load_idx(path)
    assert ds.examples.shape == (2, 4)
    np.testing.assert_array_equal(ds.examples[0], np.array([0, 51, 102, 255]) / 255)
    assert ds.value_range == "unit-interval"


def test_load_gzipped_idx(tmp_path):
    path = tmp_path / "tiny.gz"
    path.write_bytes(gzip.compress(idx_fixture()))
    assert load_idx(path).examples.shape == (2, 4)


@pytest.mark.parametrize("raw, offset", [
    (b"\x00\x00\x08", 3),
    (struct.pack(">IIII", 2049, 1, 1, 1) + b"\x00", 0),
    (struct.pack(">IIII", 2051, 3, 2, 2) + bytes(5), 21),
])
def test_malformed_idx(tmp_path, raw, offset):
    path = tmp_path / "bad"
    path.write_bytes(raw)
    with pytest.raises(IdxParseError) as info:
        load_idx(path)
    assert info.value.offset == offset


@pytest.mark.parametrize("name", ["imgs-idx3-ubyte", "imgs-idx3-ubyte.gz"])
def test_idx_round_trip(tmp_path, name):
    images = make_rng(1).integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    write_idx(tmp_path / name, images)
    back = load_idx(tmp_path / name).examples
    np.testing.assert_array_equal(np.round(back * 255).astype(np.uint8).reshape(5, 3, 4), images)
    assert encode_idx_images(images) == encode_idx_images(images.copy())


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.array([[0.0, 0.5]]), "binary")
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), "real")
    ds = Dataset(np.zeros((3, 2)), "binary")
    with pytest.raises(ValueError):
        ds.examples[0, 0] = 1.0


def test_split_takes_last_rows_for_validation():
    ds = Dataset(np.arange(20.0).reshape(10, 2), "real")
    tr, va = split_validation(ds, 3)
    assert len(tr) == 7 and len(va) == 3
    np.testing.assert_array_equal(va.examples[0], [14.0, 15.0])
    assert va.split == "validation"


def test_binarize_extremes_and_rate():
    rng = make_rng(2)
    p = np.array([[0.0, 1.0]] * 100)
    out = dynamic_binarize(p, rng)
    assert np.all(out[:, 0] == 0) and np.all(out[:, 1] == 1)
    half = dynamic_binarize(np.full(10 ** 5, 0.5), rng)
    assert set(np.unique(half)) <= {0.0, 1.0}
    assert abs(half.mean() - 0.5) < 0.01


def test_binarize_reproducible():
    p = make_rng(3).random((4, 6))
    assert np.array_equal(dynamic_binarize(p, make_rng(9)), dynamic_binarize(p, make_rng(9)))


def test_batches_partition():
    data = np.arange(10.0)[:, None]
    sizes = [len(b) for b in batches(data, 4)]
    assert sizes == [4, 4, 2]
    a = np.concatenate(list(batches(data, 4, make_rng(5))))
    b = np.concatenate(list(batches(data, 4, make_rng(5))))
    assert np.array_equal(a, b)
    assert sorted(a[:, 0].tolist()) == list(range(10))


def test_conjugate_update_by_hand():
    W = np.array([[1.0], [0.0]])
    mean, var = conjugate_posterior(W, np.zeros(2), np.ones(2), DiagGaussian.standard(1),
                                    np.array([[2.0, 0.0]]))
    assert mean[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert var[0, 0] == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_generated_problem_is_self_consistent(seed):
    prob = make_linear_gaussian(3, 7, seed, n_examples=20)
    wtw = prob.W.T @ prob.W
    np.testing.assert_allclose(wtw - np.diag(np.diag(wtw)), 0.0, atol=1e-12)
    # full-covariance conjugate solution is diagonal
    prec = np.diag(1 / prob.prior.var) + wtw / prob.var_x[0]
    cov = np.linalg.inv(prec)
    np.testing.assert_allclose(cov - np.diag(np.diag(cov)), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.diag(cov), prob.posterior_var[0], rtol=1e-12)
    full_mean = ((prob.xs - prob.b) @ prob.W / prob.var_x[0] + prob.prior.mean / prob.prior.var) @ cov
    np.testing.assert_allclose(full_mean, prob.posterior_mean, atol=1e-10)
    np.testing.assert_allclose(
        gaussian_log_evidence(prob.W, prob.b, prob.var_x, prob.prior, prob.xs), prob.log_evidence, atol=1e-10)


def test_elbo_at_exact_posterior_is_evidence():
    prob = make_linear_gaussian(4, 9, seed=11, n_examples=100)
    model = prob.model()
    noises = draw_noises(model, 100, 3, make_rng(1))
    e = elbo(model, prob.xs, prob.exact_posterior(), noises, "sampled").total
    np.testing.assert_allclose(e, prob.log_evidence, rtol=0, atol=1e-8)
    lam = prob.exact_posterior()
    lam.means[0] += 0.5
    many = draw_noises(model, 100, 5000, make_rng(2))
    assert np.all(elbo(model, prob.xs, lam, many, "sampled").total < prob.log_evidence)


def test_problem_csv_round_trip(tmp_path):
    prob = make_linear_gaussian(2, 4, seed=3, n_examples=6)
    write_linear_gaussian_csv(prob, tmp_path / "p.csv")
    back = read_linear_gaussian_csv(tmp_path / "p.csv")
    for name in ("W", "b", "var_x", "xs", "posterior_mean", "posterior_var", "log_evidence"):
        assert np.array_equal(getattr(prob, name), getattr(back, name)), name
    assert np.array_equal(prob.prior.log_var, back.prior.log_var)
