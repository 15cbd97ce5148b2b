"""Frozen-feature probes, sweep drivers, and error aggregation.

The linear probe is multinomial logistic regression fit by deterministic
full-batch gradient descent with Armijo backtracking, so probe numbers are
exactly reproducible.  Errors are always 1 - accuracy.  Aggregation
normalizes each method's error by the matching baseline (beta = 0) error
in the same (dataset, seed) cell before averaging.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import featurestore, rng, trainer
from .autodiff import sigmoid
from .errors import AggregationError, ConfigError, InputError, UsageError
from .regularizers import MuWeights
from .trainer import TrainConfig

STL_METHOD = "stl"

# Holdout-tuned weight grids per method; betas for the kernel objective,
# wider ranges for the distillation baselines.
DEFAULT_BETA_GRIDS = {
    "aft": [3.0, 10.0, 30.0],
    "l2": [3.0, 10.0, 30.0],
    "kd": [0.1, 1.0, 10.0, 100.0],
    "rkd": [0.1, 1.0, 10.0, 100.0],
    "ft": [0.1, 1.0, 10.0, 100.0],
}


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    final_loss: float
    n_iterations: int

    @property
    def test_error(self) -> float:
        return 1.0 - self.test_accuracy


def _probe_loss_grad(w, b, x, y, y_onehot, l2_penalty):
    n = x.shape[0]
    z = x @ w.T + b
    z -= z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    sums = expz.sum(axis=1)
    probs = expz / sums[:, None]
    nll = (np.log(sums) - z[np.arange(n), y]).mean()
    loss = nll + 0.5 * l2_penalty * float((w * w).sum())
    d = (probs - y_onehot) / n
    gw = d.T @ x + l2_penalty * w
    gb = d.sum(axis=0, keepdims=True)
    return loss, gw, gb


def linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    splits: dict[str, list[int]],
    l2_penalty: float = 1e-4,
    max_iters: int = 5000,
    tol: float = 1e-7,
    init_seed: int | None = None,
) -> ProbeResult:
    """Multinomial logistic regression on frozen features.

    Fits on train + holdout, reports accuracy on that fit set and on test.
    Stops when the largest gradient entry is <= tol or after max_iters
    backtracking descent steps.
    """
    x = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("probe features contain non-finite values")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    fit_idx = list(splits.get("train", [])) + list(splits.get("holdout", []))
    test_idx = list(splits.get("test", []))
    if not fit_idx:
        raise InputError("probe needs a nonempty train split")
    x_fit, y_fit = x[fit_idx], y[fit_idx]
    k = int(y.max()) + 1 if y.size else 2
    y_onehot = np.zeros((len(fit_idx), k))
    y_onehot[np.arange(len(fit_idx)), y_fit] = 1.0

    if init_seed is None:
        w = np.zeros((k, x.shape[1]))
    else:
        w = rng.stream(init_seed, rng.STREAM_PARAM_INIT).normal_matrix(k, x.shape[1]) * 0.01
    b = np.zeros((1, k))

    loss, gw, gb = _probe_loss_grad(w, b, x_fit, y_fit, y_onehot, l2_penalty)
    step_size = 1.0
    iters = 0
    while iters < max_iters and max(np.abs(gw).max(), np.abs(gb).max()) > tol:
        gnorm2 = float((gw * gw).sum() + (gb * gb).sum())
        # Armijo backtracking on the full-batch objective
        t = step_size
        for _ in range(60):
            new_loss, new_gw, new_gb = _probe_loss_grad(
                w - t * gw, b - t * gb, x_fit, y_fit, y_onehot, l2_penalty
            )
            if new_loss <= loss - 1e-4 * t * gnorm2:
                break
            t *= 0.5
        w -= t * gw
        b -= t * gb
        loss, gw, gb = new_loss, new_gw, new_gb
        step_size = min(t * 2.0, 1e4)
        iters += 1

    def acc(idx):
        if not idx:
            return float("nan")
        pred = (x[idx] @ w.T + b).argmax(axis=1)
        return float((pred == y[idx]).mean())

    return ProbeResult(
        train_accuracy=acc(fit_idx),
        test_accuracy=acc(test_idx),
        final_loss=float(loss),
        n_iterations=iters,
    )


def weighted_probe_comparison(
    psi: np.ndarray,
    labels: np.ndarray,
    mu: MuWeights,
    splits: dict[str, list[int]],
    **probe_kwargs,
) -> tuple[float, float]:
    """Probe test errors on raw features and on mu-weighted features."""
    raw = linear_probe(psi, labels, splits, **probe_kwargs)
    weighted = linear_probe(mu.apply(psi), labels, splits, **probe_kwargs)
    return raw.test_error, weighted.test_error


@dataclass
class GroupStats:
    mean: float
    median: float
    q25: float
    q75: float


def mu_distribution_report(
    mu: MuWeights, signal_dims: list[int], noise_dims: list[int]
) -> dict[str, GroupStats]:
    """Quartile summary of the learned per-feature weights, by dim group."""
    if mu.mode != "diagonal":
        raise UsageError("weight distribution report requires diagonal feature weights")
    w = sigmoid(mu.s).reshape(-1)

    def stats(dims):
        vals = w[np.asarray(dims, dtype=np.int64)]
        return GroupStats(
            mean=float(vals.mean()),
            median=float(np.median(vals)),
            q25=float(np.percentile(vals, 25)),
            q75=float(np.percentile(vals, 75)),
        )

    return {"signal": stats(signal_dims), "noise": stats(noise_dims)}


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class RunCell:
    method: str
    dataset: str
    seed: int
    error: float


@dataclass
class AggregateReport:
    rows: list[dict]
    summary: list[dict]


def aggregate_normalized_error(records: list[RunCell]) -> AggregateReport:
    """Normalize each error by the baseline error of its (dataset, seed) cell.

    Every cell must contain a beta = 0 ("stl") record with positive error;
    the summary reports, per method, the mean normalized error and the
    standard error across cells.
    """
    baseline: dict[tuple[str, int], float] = {}
    for rec in records:
        if rec.method == STL_METHOD:
            baseline[(rec.dataset, rec.seed)] = rec.error
    rows = []
    for rec in records:
        cell = (rec.dataset, rec.seed)
        if cell not in baseline:
            raise AggregationError(f"no stl record for cell (dataset={cell[0]}, seed={cell[1]})")
        if not baseline[cell] > 0:
            raise AggregationError(
                f"stl error must be > 0 in cell (dataset={cell[0]}, seed={cell[1]})"
            )
        rows.append(
            {
                "method": rec.method,
                "dataset": rec.dataset,
                "seed": rec.seed,
                "error": rec.error,
                "normalized_error": rec.error / baseline[cell],
            }
        )
    summary = []
    for method in sorted({r["method"] for r in rows}):
        vals = np.array([r["normalized_error"] for r in rows if r["method"] == method])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        summary.append(
            {
                "method": method,
                "mean_normalized_error": float(vals.mean()),
                "standard_error": se,
                "n_cells": int(len(vals)),
            }
        )
    return AggregateReport(rows=rows, summary=summary)


def write_report(report: AggregateReport, path: str | os.PathLike) -> None:
    """One tab-separated row per cell, then a summary block."""
    with open(path, "w") as fh:
        fh.write("method\tdataset\tseed\terror\tnormalized_error\n")
        for r in report.rows:
            fh.write(
                f"{r['method']}\t{r['dataset']}\t{r['seed']}\t"
                f"{r['error']:.6f}\t{r['normalized_error']:.6f}\n"
            )
        fh.write("\n# summary\n")
        fh.write("method\tmean_normalized_error\tstandard_error\tn_cells\n")
        for s in report.summary:
            fh.write(
                f"{s['method']}\t{s['mean_normalized_error']:.6f}\t"
                f"{s['standard_error']:.6f}\t{s['n_cells']}\n"
            )


def records_from_run_dir(run_dir: str | os.PathLike) -> list[RunCell]:
    cells = []
    for name in sorted(os.listdir(run_dir)):
        if not name.endswith(".metrics"):
            continue
        rec = trainer.read_metrics(os.path.join(run_dir, name))
        if not rec.final or "test_error" not in rec.final:
            continue
        cells.append(
            RunCell(
                method=rec.header.get("method", "unknown"),
                dataset=rec.header.get("dataset", "dataset"),
                seed=int(rec.header.get("seed", 0)),
                error=float(rec.final["test_error"]),
            )
        )
    return cells


# ---------------------------------------------------------------------------
# noise robustness sweep


def noise_robustness_sweep(
    base_manifest: str | os.PathLike,
    d_noise_list: list[int],
    methods: list[str],
    config: TrainConfig,
    seeds: list[int],
    out_dir: str | os.PathLike,
    beta_grids: dict[str, list[float]] | None = None,
    noise_seed: int = 0,
    threads: int = 1,
) -> AggregateReport:
    """Append noise columns to the pretrained features and re-run methods.

    For each noise width, writes an augmented dataset next to the runs,
    trains every (method, seed) cell (grid-tuned unless the method is
    stl), and aggregates normalized test errors.
    """
    if not d_noise_list or sorted(d_noise_list) != list(d_noise_list) or d_noise_list[0] != 0:
        raise ConfigError("d_noise_list must be ascending and start at 0")
    for m in methods:
        if m != STL_METHOD and m not in DEFAULT_BETA_GRIDS:
            raise ConfigError(f"unknown method {m!r}")
    beta_grids = {**DEFAULT_BETA_GRIDS, **(beta_grids or {})}
    base = featurestore.load_dataset(base_manifest)
    os.makedirs(out_dir, exist_ok=True)

    cells: list[RunCell] = []
    mu_checkpoints: dict[tuple[int, int], str] = {}
    for d_noise in d_noise_list:
        psi = featurestore.append_noise_features(base.psi, d_noise, noise_seed)
        dataset = replace(base, psi=psi)
        label = f"{config.dataset_label}+noise{d_noise}"
        for method in methods:
            for seed in seeds:
                run_id = f"{method}_n{d_noise}_s{seed}"
                cfg = replace(config, seed=seed, dataset_label=label)
                if method == STL_METHOD:
                    cfg = cfg.with_beta(0.0)
                    rec = trainer.execute(cfg, dataset, run_id=run_id, out_dir=out_dir)
                else:
                    cfg = replace(
                        cfg, regularizer=replace(cfg.regularizer, kind=method, beta=1.0)
                    )
                    rec = trainer.execute(
                        cfg,
                        dataset,
                        beta_grid=beta_grids[method],
                        run_id=run_id,
                        out_dir=out_dir,
                        threads=threads,
                    )
                cells.append(
                    RunCell(method=method, dataset=label, seed=seed, error=rec.final["test_error"])
                )
                if method == "aft":
                    mu_checkpoints[(d_noise, seed)] = os.path.join(out_dir, f"{run_id}.ckpt")
    report = aggregate_normalized_error(cells)
    write_report(report, os.path.join(out_dir, "sweep.report"))
    with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
        json.dump(
            {
                "d_noise_list": d_noise_list,
                "methods": methods,
                "seeds": seeds,
                "mu_checkpoints": {f"{k[0]}:{k[1]}": v for k, v in mu_checkpoints.items()},
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return report
