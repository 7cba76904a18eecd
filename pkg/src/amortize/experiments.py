"""Experiment recipes behind the command-line driver.

Each ``run_*`` function trains (or loads) what it needs, writes CSV files to
the output directory, then renders SVG figures by reading those CSV files back.
Wall-clock measurements go to ``timing.json`` so that every CSV and SVG is a
pure function of (config, seed).
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, load_idx, make_linear_gaussian, split_validation
from .evaluation import (grad_magnitude_profile, iw_log_likelihood, refine)
from .inference import (IterativeModel, StandardEncoder, init_lambda, iterative_infer,
                        optimizer_infer, standard_infer)
from .mathcore import ConfigError, make_rng
from .model import (PosteriorEstimate, draw_noises, evaluate, load_checkpoint,
                    log_prob_bernoulli, log_prob_diag_gaussian, DiagGaussian,
                    save_checkpoint, GenerativeModel)
from .svg import PlotSpec, Series, write_svg
from .training import TrainConfig, TrainReport, binarized_validation, train

# rng stream ids
_INIT, _GRID, _EVAL_NOISE, _TRACE, _GAP, _IW = 100, 300, 301, 400, 500, 501
CSV_VERSION = "amortize-csv/1"


# -- building blocks ---------------------------------------------------------------

def load_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "mnist":
        ds = load_idx(cfg.resolve(cfg.data))
    else:
        problem = make_linear_gaussian(cfg.latent_dims[0], cfg.synthetic_nx, seed,
                                       cfg.synthetic_examples + cfg.n_validation)
        ds = problem.dataset()
    if cfg.n_validation >= len(ds):
        raise ConfigError(f"n_validation={cfg.n_validation} leaves no training data")
    train_ds, val_ds = split_validation(ds, cfg.n_validation)
    if cfg.n_train:
        train_ds = train_ds.subset(cfg.n_train, "train")
    return train_ds, val_ds


def build_model(cfg: ExperimentConfig, n_x: int, rng) -> GenerativeModel:
    return GenerativeModel.build(n_x, cfg.latent_dims, cfg.hidden, cfg.output, rng)


def build_strategy(cfg: ExperimentConfig, model: GenerativeModel, rng, variant: str,
                   encoding=None):
    if variant == "standard":
        return StandardEncoder.build(model, cfg.inference_hidden, rng, cfg.point)
    if variant == "iterative":
        return IterativeModel.build(model, cfg.inference_hidden, rng, encoding or cfg.encoding,
                                    cfg.preprocessing, cfg.gated, cfg.point, cfg.alpha,
                                    cfg.eps_ln, cfg.init)
    raise ConfigError(f"variant {variant!r} has no trainable inference model")


def train_config(cfg: ExperimentConfig, seed: int, **overrides) -> TrainConfig:
    base = dict(epochs=cfg.epochs, batch_size=cfg.batch_size, T=cfg.T, K=cfg.K,
                lr_theta=cfg.lr_theta, lr_phi=cfg.lr_phi, lr_decay=cfg.lr_decay,
                kl_anneal_epochs=cfg.kl_anneal_epochs, seed=seed,
                phi_accumulation=cfg.phi_accumulation, theta_grads=cfg.theta_grads,
                validation_K=cfg.validation_K)
    base.update(overrides)
    return TrainConfig(**base)


def _strategy_meta(s) -> dict:
    if isinstance(s, StandardEncoder):
        return {"variant": "standard", "point": s.point, "levels": len(s.trunks)}
    return {"variant": "iterative", "encoding": list(s.encoding), "preprocessing": s.preprocessing,
            "gated": s.gated, "point": s.point, "alpha": s.alpha, "eps_ln": s.eps_ln,
            "init": s.init_mode}


def save_bundle(path, model: GenerativeModel, strategies: dict) -> None:
    nets, arrays, meta = {}, {}, {}
    for name, s in strategies.items():
        meta[name] = _strategy_meta(s)
        own = s.nets() if isinstance(s, StandardEncoder) else s.nets_dict()
        nets.update({f"{name}.{k}": v for k, v in own.items()})
        if isinstance(s, IterativeModel):
            for l, level in enumerate(s.ln_params):
                for j, (g, b) in enumerate(level):
                    arrays[f"{name}.ln/{l}/{j}/gain"] = g
                    arrays[f"{name}.ln/{l}/{j}/bias"] = b
            for i, c in enumerate(s.init_constant or []):
                arrays[f"{name}.init/{i}"] = c
    save_checkpoint(path, model, nets, {"strategies": meta}, arrays)


def load_bundle(path) -> tuple[GenerativeModel, dict]:
    model, nets, extra, arrays = load_checkpoint(path)
    strategies = {}
    for name, m in extra.get("strategies", {}).items():
        own = {k[len(name) + 1:]: v for k, v in nets.items() if k.startswith(name + ".")}
        L = model.n_levels
        if m["variant"] == "standard":
            strategies[name] = StandardEncoder([own[f"trunk{l}"] for l in range(L)],
                                               [own[f"head{l}"] for l in range(L)], m["point"])
            continue
        ln = None
        if m["preprocessing"] == "layer_norm":
            ln = []
            for l in range(L):
                level, j = [], 0
                while f"{name}.ln/{l}/{j}/gain" in arrays:
                    level.append((arrays[f"{name}.ln/{l}/{j}/gain"], arrays[f"{name}.ln/{l}/{j}/bias"]))
                    j += 1
                ln.append(level)
        init = [arrays[f"{name}.init/{i}"] for i in range(2 * L) if f"{name}.init/{i}" in arrays] or None
        strategies[name] = IterativeModel([own[f"iter{l}"] for l in range(L)], model.latent_dims,
                                          model.n_x, m["encoding"], m["preprocessing"], m["gated"],
                                          m["point"], m["alpha"], m["eps_ln"], ln, m["init"], init)
    return model, strategies


class Workspace:
    """Output directory bookkeeping: written files and wall-clock notes."""

    def __init__(self, out):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.timing: dict = {}
        self.written: list = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.written.append(p)
        return p

    def write_rows(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["# " + CSV_VERSION])
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        return p

    def finish(self) -> list:
        if self.timing:
            p = self.path("timing.json")
            p.write_text(json.dumps(self.timing, indent=1, sort_keys=True) + "\n")
        return self.written


def read_rows(path, header) -> list[dict]:
    """Read a CSV written by :meth:`Workspace.write_rows`, checking its schema."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["# " + CSV_VERSION]:
        raise ConfigError(f"{path}: missing or unknown CSV version line")
    if rows[1] != list(header):
        raise ConfigError(f"{path}: header {rows[1]} does not match {list(header)}")
    return [dict(zip(header, r)) for r in rows[2:]]


def prepare(cfg: ExperimentConfig, ws: Workspace, seed: int, variants: tuple) -> tuple:
    """Model plus trained strategies, from ``checkpoint`` or by training.

    The first variant trains jointly with the generative model; later ones are
    fitted to the resulting model with its parameters frozen.
    """
    train_ds, val_ds = load_data(cfg, seed)
    if cfg.checkpoint:
        model, strategies = load_bundle(cfg.resolve(cfg.checkpoint))
        missing = [v for v in variants if v not in strategies]
        if missing:
            raise ConfigError(f"checkpoint lacks strategies {missing}")
        return model, strategies, train_ds, val_ds
    rng = make_rng(seed, _INIT)
    model = build_model(cfg, train_ds.n_x, rng)
    strategies = {}
    for i, variant in enumerate(variants):
        s = build_strategy(cfg, model, rng, variant)
        tc = train_config(cfg, seed) if i == 0 else \
            train_config(cfg, seed, epochs=cfg.iterative_epochs, lr_theta=0.0)
        _, _, report = train(model, s, train_ds, tc, val_ds)
        report.write_csv(ws.path(f"train_{variant}.csv"))
        ws.timing[f"train_{variant}_seconds_per_epoch"] = [round(r.seconds, 4) for r in report.records]
        strategies[variant] = s
    save_bundle(ws.path("checkpoint.npz"), model, strategies)
    return model, strategies, train_ds, val_ds


def _val_inputs(model, val_ds, n: int, seed: int) -> np.ndarray:
    return binarized_validation(model, val_ds, seed)[:n]


# -- train ---------------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out, seed: int) -> list:
    ws = Workspace(out)
    train_ds, val_ds = load_data(cfg, seed)
    rng = make_rng(seed, _INIT)
    model = build_model(cfg, train_ds.n_x, rng)
    strategy = build_strategy(cfg, model, rng, cfg.variant)
    _, _, report = train(model, strategy, train_ds, train_config(cfg, seed), val_ds)
    report.write_csv(ws.path("train_report.csv"))
    ws.timing["seconds_per_epoch"] = [round(r.seconds, 4) for r in report.records]
    save_bundle(ws.path("checkpoint.npz"), model, {cfg.variant: strategy})
    back = TrainReport.read_csv(ws.out / "train_report.csv")
    series = [Series(split, [r.epoch for r in back.rows(split)], [r.elbo for r in back.rows(split)])
              for split in ("train", "validation") if back.rows(split)]
    write_svg(ws.path("learning_curve.svg"),
              PlotSpec("line", "ELBO during training", "epoch", "ELBO (nats)", series))
    return ws.finish()


# -- surface --------------------------------------------------------------------------

SURFACE_HEADER = ("z1", "z2", "log_joint")
OVERLAY_HEADER = ("overlay", "step", "z1", "z2", "log_joint")


def surface_axis(radius: float, step: float) -> np.ndarray:
    n = int(round(2 * radius / step))
    return np.round(-radius + step * np.arange(n + 1), 12)


def log_joint_points(model: GenerativeModel, x: np.ndarray, zs: np.ndarray, chunk: int = 2000) -> np.ndarray:
    """``log p(x, z)`` for one example at many latent points."""
    vals = []
    for start in range(0, len(zs), chunk):
        z = zs[start:start + chunk]
        lam = PosteriorEstimate([z], None)
        vals.append(evaluate(model, np.tile(x, (len(z), 1)), lam, None, "sampled").elbo.total)
    return np.concatenate(vals)


def run_surface(cfg: ExperimentConfig, out, seed: int) -> list:
    if not cfg.point or tuple(cfg.latent_dims) != (2,):
        raise ConfigError("surface needs a 2-D point-estimate model (point = true, latent_dims = 2)")
    ws = Workspace(out)
    model, strategies, _, val_ds = prepare(cfg, ws, seed, ("standard", "iterative"))
    x = _val_inputs(model, val_ds, cfg.surface_example + 1, seed)[cfg.surface_example][None]
    axis = surface_axis(cfg.surface_range, cfg.surface_step)
    z1, z2 = np.meshgrid(axis, axis)  # rows follow z2
    grid_z = np.stack([z1.ravel(), z2.ravel()], axis=1)
    values = log_joint_points(model, x[0], grid_z)
    ws.write_rows("surface.csv", SURFACE_HEADER, [(a, b, v) for (a, b), v in zip(grid_z, values)])

    overlays = []
    best = int(np.argmax(values))
    overlays.append(("map", 0, *grid_z[best], values[best]))
    enc = standard_infer(strategies["standard"], x).means[0][0]
    overlays.append(("standard", 0, *enc, log_joint_points(model, x[0], enc[None])[0]))
    lam0 = init_lambda(model, 1, cfg.init, point=True)
    ascent = optimizer_infer("sgd", cfg.ascent_lr, model, x, lam0, cfg.T_eval, 1,
                             make_rng(seed, _TRACE), keep=True)
    for r in ascent.records:
        overlays.append(("gradient_ascent", r.t, *r.lam.means[0][0], r.elbo[0]))
    it = iterative_infer(strategies["iterative"], model, x, cfg.T, 1, make_rng(seed, _TRACE, 1), keep=True)
    for r in it.records:
        overlays.append(("iterative", r.t, *r.lam.means[0][0], r.elbo[0]))
    ws.write_rows("overlays.csv", OVERLAY_HEADER, overlays)

    rows = read_rows(ws.out / "surface.csv", SURFACE_HEADER)
    n = len(axis)
    grid = np.array([float(r["log_joint"]) for r in rows]).reshape(n, n)
    series = {}
    for r in read_rows(ws.out / "overlays.csv", OVERLAY_HEADER):
        s = series.setdefault(r["overlay"], Series(r["overlay"], [], []))
        s.x.append(float(r["z1"]))
        s.y.append(float(r["z2"]))
    write_svg(ws.path("surface.svg"), PlotSpec(
        "heatmap", "log p(x, z) over the latent plane", "z1", "z2", list(series.values()),
        grid=grid, x_range=(axis[0], axis[-1]), y_range=(axis[0], axis[-1])))
    return ws.finish()


# -- compare-optimizers --------------------------------------------------------------

GRID_HEADER = ("optimizer", "lr", "t", "mean_elbo", "diverged")
CURVE_HEADER = ("strategy", "lr", "t", "mean_elbo")


def run_compare_optimizers(cfg: ExperimentConfig, out, seed: int) -> list:
    if cfg.variant != "iterative" or "gradients" not in cfg.encoding:
        raise ConfigError("compare-optimizers needs a gradient-encoding iterative model")
    ws = Workspace(out)
    model, strategies, _, val_ds = prepare(cfg, ws, seed, ("iterative",))
    x = _val_inputs(model, val_ds, cfg.eval_examples, seed)
    B = x.shape[0]
    eval_noise = draw_noises(model, B, cfg.validation_K, make_rng(seed, _EVAL_NOISE))
    lam0 = init_lambda(model, B, cfg.init, cfg.point)

    grid_rows, best = [], {}
    for i, kind in enumerate(cfg.optimizers):
        for j, lr in enumerate(cfg.lr_grid):
            traj = optimizer_infer(kind, lr, model, x, lam0, cfg.T, cfg.K,
                                   make_rng(seed, _GRID, i, j), eval_noise=eval_noise)
            curve = traj.mean_elbo()
            for t, v in enumerate(curve):
                grid_rows.append((kind, lr, t, float(v), int(traj.diverged_at is not None)))
            score = curve[cfg.T] if len(curve) > cfg.T else -np.inf
            if kind not in best or score > best[kind][1]:
                best[kind] = (j, score)
    ws.write_rows("optimizer_grid.csv", GRID_HEADER, grid_rows)

    curves = []
    for i, kind in enumerate(cfg.optimizers):
        j, _ = best[kind]
        lr = cfg.lr_grid[j]
        traj = optimizer_infer(kind, lr, model, x, lam0, cfg.T_eval, cfg.K,
                               make_rng(seed, _GRID, i, j), eval_noise=eval_noise)
        curves += [(kind, lr, t, float(v)) for t, v in enumerate(traj.mean_elbo())]
        ws.timing[f"{kind}_seconds_per_iteration"] = float(np.mean(traj.seconds()))
    traj = iterative_infer(strategies["iterative"], model, x, cfg.T_eval, cfg.K,
                           make_rng(seed, _GRID, 99), eval_noise=eval_noise)
    curves += [("iterative", "", t, float(v)) for t, v in enumerate(traj.mean_elbo())]
    ws.timing["iterative_seconds_per_iteration"] = float(np.mean(traj.seconds()))
    ws.write_rows("optimizer_curves.csv", CURVE_HEADER, curves)

    series = {}
    for r in read_rows(ws.out / "optimizer_curves.csv", CURVE_HEADER):
        label = r["strategy"] if not r["lr"] else f"{r['strategy']} (lr={r['lr']})"
        s = series.setdefault(label, Series(label, [], []))
        s.x.append(int(r["t"]))
        s.y.append(float(r["mean_elbo"]))
    write_svg(ws.path("optimizer_curves.svg"), PlotSpec(
        "line", "Validation ELBO during inference", "inference iteration", "mean ELBO (nats)",
        list(series.values())))
    return ws.finish()


# -- trace ---------------------------------------------------------------------------

PROFILE_HEADER = ("epoch", "t", "grad_norm_mean", "grad_norm_logvar")
TRACE_HEADER = ("t", "recon_loglik", "elbo")


def _profile_rows(model, strategy, x, cfg, seed, epoch):
    traj = iterative_infer(strategy, model, x, cfg.T, cfg.K, make_rng(seed, _TRACE, 2, epoch))
    prof = grad_magnitude_profile([traj])
    lv = [float(r.grad_norm_logvar.mean()) for r in traj.records]
    return [(epoch, t, float(prof[t]), lv[t]) for t in range(len(prof))]


def recon_loglik(model: GenerativeModel, x: np.ndarray, mean_x: np.ndarray) -> np.ndarray:
    if model.output == "bernoulli":
        return log_prob_bernoulli(x, mean_x)
    return log_prob_diag_gaussian(x, DiagGaussian(mean_x, np.broadcast_to(model.output_log_var, mean_x.shape)))


def write_pgm(path, tiles: list, side: tuple) -> None:
    """Binary (P5) grayscale strip of equally sized tiles, 1-pixel gaps."""
    h, w = side
    gap = 1
    width = len(tiles) * w + (len(tiles) - 1) * gap
    img = np.full((h, width), 255, dtype=np.uint8)
    for k, tile in enumerate(tiles):
        px = np.clip(np.round(np.asarray(tile).reshape(h, w) * 255), 0, 255).astype(np.uint8)
        img[:, k * (w + gap):k * (w + gap) + w] = px
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def run_trace(cfg: ExperimentConfig, out, seed: int) -> list:
    if cfg.variant != "iterative":
        raise ConfigError("trace needs an iterative model")
    ws = Workspace(out)
    train_ds, val_ds = load_data(cfg, seed)
    profile = []
    if cfg.checkpoint:
        model, strategies = load_bundle(cfg.resolve(cfg.checkpoint))
        if "iterative" not in strategies:
            raise ConfigError("checkpoint lacks an iterative model")
        strategy = strategies["iterative"]
        x_val = _val_inputs(model, val_ds, cfg.eval_examples, seed)
    else:
        rng = make_rng(seed, _INIT)
        model = build_model(cfg, train_ds.n_x, rng)
        strategy = build_strategy(cfg, model, rng, "iterative")
        x_val = _val_inputs(model, val_ds, cfg.eval_examples, seed)

        def on_epoch(epoch, m, s, report):
            if epoch in cfg.trace_epochs and epoch != cfg.epochs:
                profile.extend(_profile_rows(m, s, x_val, cfg, seed, epoch))

        _, _, report = train(model, strategy, train_ds, train_config(cfg, seed), val_ds, on_epoch)
        report.write_csv(ws.path("train_iterative.csv"))
        save_bundle(ws.path("checkpoint.npz"), model, {"iterative": strategy})
    final_epoch = 0 if cfg.checkpoint else cfg.epochs
    profile.extend(_profile_rows(model, strategy, x_val, cfg, seed, final_epoch))
    ws.write_rows("grad_profile.csv", PROFILE_HEADER, profile)

    x = x_val[cfg.trace_example][None]
    traj = iterative_infer(strategy, model, x, cfg.T, cfg.K, make_rng(seed, _TRACE, 3), keep=True)
    means = [model.output_mean(r.lam.means[0])[0] for r in traj.records]
    rec = [float(recon_loglik(model, x, m[None])[0]) for m in means]
    ws.write_rows("trace.csv", TRACE_HEADER,
                  [(r.t, rec[k], float(r.elbo[0])) for k, r in enumerate(traj.records)])
    side = int(round(np.sqrt(model.n_x)))
    shape = (side, side) if side * side == model.n_x else (1, model.n_x)
    write_pgm(ws.path("reconstructions.pgm"), means, shape)

    series = {}
    for r in read_rows(ws.out / "grad_profile.csv", PROFILE_HEADER):
        label = f"epoch {r['epoch']}" if r["epoch"] != "0" else "checkpoint"
        s = series.setdefault(label, Series(label, [], []))
        s.x.append(int(r["t"]))
        s.y.append(float(r["grad_norm_mean"]))
    write_svg(ws.path("grad_profile.svg"), PlotSpec(
        "line", "Gradient magnitude over inference iterations", "inference iteration",
        "mean |dL/d mean|", list(series.values())))
    return ws.finish()


# -- ablate ----------------------------------------------------------------------------

ABLATE_HEADER = ("variant", "T", "K", "seed", "validation_elbo")


def _ablation_runs(cfg: ExperimentConfig):
    for variant in cfg.ablate_variants:
        name, _, enc = variant.partition(":")
        if name == "standard":
            yield variant, "standard", None, 1, cfg.K
            continue
        if name != "iterative":
            raise ConfigError(f"unknown ablation variant {variant!r}")
        encoding = tuple(enc.split("+")) if enc else None
        for T in cfg.ablate_T:
            yield variant, "iterative", encoding, T, cfg.K
        for K in cfg.ablate_K:
            yield variant, "iterative", encoding, cfg.T, K


def run_ablate(cfg: ExperimentConfig, out, seed: int) -> list:
    ws = Workspace(out)
    rows = []
    for s in cfg.ablate_seeds:
        run_seed = seed + s
        train_ds, val_ds = load_data(cfg, run_seed)
        seen = set()
        for variant, kind, enc, T, K in _ablation_runs(cfg):
            if (variant, T, K) in seen:
                continue
            seen.add((variant, T, K))
            rng = make_rng(run_seed, _INIT)
            model = build_model(cfg, train_ds.n_x, rng)
            strategy = build_strategy(cfg, model, rng, kind, enc)
            _, _, report = train(model, strategy, train_ds, train_config(cfg, run_seed, T=T, K=K), val_ds)
            rows.append((variant, T, K, s, report.final("validation").elbo))
            ws.timing[f"{variant}_T{T}_K{K}_seed{s}_seconds"] = round(sum(r.seconds for r in report.records), 3)
    ws.write_rows("ablate.csv", ABLATE_HEADER, rows)

    series = {}
    for r in read_rows(ws.out / "ablate.csv", ABLATE_HEADER):
        vary_k = r["variant"] != "standard" and int(r["K"]) != cfg.K
        label = f"{r['variant']} (vary {'K' if vary_k else 'T'})"
        s = series.setdefault(label, Series(label, [], []))
        s.x.append(int(r["K"] if vary_k else r["T"]))
        s.y.append(float(r["validation_elbo"]))
    write_svg(ws.path("ablate.svg"), PlotSpec(
        "scatter", "Final validation ELBO", "inference iterations T (or samples K)", "ELBO (nats)",
        list(series.values())))
    return ws.finish()


# -- eval -------------------------------------------------------------------------------

EVAL_HEADER = ("example_id", "elbo", "iw_ll", "gap")
SUMMARY_HEADER = ("strategy", "metric", "mean", "stderr", "n")


def run_eval(cfg: ExperimentConfig, out, seed: int) -> list:
    ws = Workspace(out)
    model, strategies, _, val_ds = prepare(cfg, ws, seed, ("standard", "iterative"))
    x = _val_inputs(model, val_ds, cfg.eval_examples, seed)
    B = x.shape[0]
    summary = []
    for k, (name, s) in enumerate(sorted(strategies.items())):
        if isinstance(s, StandardEncoder):
            lam = standard_infer(s, x)
        else:
            lam = iterative_infer(s, model, x, cfg.T, cfg.K, make_rng(seed, _GAP, k)).final
        noises = draw_noises(model, B, cfg.K, make_rng(seed, _GAP, 10 + k))
        _, best, start = refine(model, x, lam, noises, cfg.gap_T_opt, cfg.gap_lr_opt)
        gap = best - start
        if lam.point:
            iw = np.full(B, np.nan)
        else:
            iw, _ = iw_log_likelihood(model, lam, x, cfg.iw_samples, make_rng(seed, _IW, k))
        ws.write_rows(f"eval_{name}.csv", EVAL_HEADER,
                      [(i, float(start[i]), float(iw[i]), float(gap[i])) for i in range(B)])
        for metric, v in (("elbo", start), ("iw_ll", iw), ("gap", gap)):
            summary.append((name, metric, float(np.mean(v)),
                            float(np.std(v, ddof=1) / np.sqrt(B)) if B > 1 else 0.0, B))
    ws.write_rows("eval_summary.csv", SUMMARY_HEADER, summary)

    series = []
    for name in sorted(strategies):
        rows = read_rows(ws.out / f"eval_{name}.csv", EVAL_HEADER)
        series.append(Series(name, [int(r["example_id"]) for r in rows], [float(r["gap"]) for r in rows]))
    write_svg(ws.path("eval_gap.svg"), PlotSpec(
        "scatter", "Amortization gap per validation example", "example", "gap (nats)", series))
    return ws.finish()


COMMANDS = {"train": run_train, "surface": run_surface, "trace": run_trace,
            "compare-optimizers": run_compare_optimizers, "ablate": run_ablate, "eval": run_eval}
