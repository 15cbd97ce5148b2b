"""Joint training of the downstream model and the feature weights.

Each step computes the task loss and, when beta > 0, the transfer
regularizer on the same tape.  Model parameters descend the composite
objective (task loss + beta * regularizer) while the regularizer-side
parameters (feature weights, distillation map, translator) descend the
regularizer alone, each with their own Adam state and learning rate.
Setting beta = 0 skips the regularizer machinery entirely, so such a run
is bit-identical to a plain supervised loop.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import models, optim, rng
from .autodiff import Tape
from .errors import BatchSizeError, ConfigError, NonFiniteError, TrainingAborted
from .featurestore import Dataset
from .models import ExtractorSpec
from .regularizers import (
    FtNets,
    KdTransform,
    MuWeights,
    RegularizerSpec,
    aft_node,
    ft_node,
    kd_node,
    l2_node,
    pretrain_paraphraser,
    rkd_node,
)

SCHEDULES = ("cosine_to_zero", "constant")


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    lr_theta: float = 1e-3
    lr_mu: float = 1e-2
    schedule: str = "cosine_to_zero"
    bilevel_inner_steps: int = 0
    seed: int = 0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    eval_every: int = 0  # 0 = evaluate at the final step only
    dataset_label: str = "dataset"
    init_checkpoint: str | None = None

    @property
    def beta(self) -> float:
        return self.regularizer.beta

    def with_beta(self, beta: float) -> "TrainConfig":
        return replace(self, regularizer=replace(self.regularizer, beta=float(beta)))

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (centering needs two rows)")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr_theta < 0 or self.lr_mu < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}, expected one of {SCHEDULES}")
        if self.bilevel_inner_steps < 0:
            raise ConfigError("bilevel_inner_steps must be >= 0")
        self.regularizer.validate()
        self.extractor.validate()
        return self


def method_label(config: TrainConfig) -> str:
    return "stl" if config.beta == 0 else config.regularizer.kind


def cosine_multiplier(step: int, total_steps: int, schedule: str = "cosine_to_zero") -> float:
    """Learning-rate multiplier: 1 at step 0, decaying to 0 at the last step."""
    if schedule == "constant":
        return 1.0
    if total_steps <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


@dataclass
class TrainState:
    config: TrainConfig
    theta: dict[str, np.ndarray]
    aux: dict[str, np.ndarray]
    mu: MuWeights | None
    kd: KdTransform | None
    ft: FtNets | None
    slots: dict[str, optim.AdamSlot]
    n_classes: int
    step: int = 0

    def all_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.theta)
        out.update(self.aux)
        if self.ft is not None:
            out.update(
                {
                    "ft.enc_w": self.ft.enc_w,
                    "ft.enc_b": self.ft.enc_b,
                    "ft.dec_w": self.ft.dec_w,
                    "ft.dec_b": self.ft.dec_b,
                }
            )
        return out


def init_state(
    config: TrainConfig, d_in: int, d_psi: int, n_classes: int
) -> TrainState:
    config.validate()
    theta = models.init_extractor_params(config.extractor, d_in, config.seed)
    theta.update(models.init_head_params(n_classes, config.extractor.d_phi, config.seed))
    if config.init_checkpoint:
        loaded = models.load_checkpoint(config.init_checkpoint)
        for name, value in loaded.items():
            if name.startswith("extractor.") and name in theta:
                if theta[name].shape != value.shape:
                    raise ConfigError(
                        f"checkpoint tensor {name!r} has shape {value.shape}, "
                        f"model expects {theta[name].shape}"
                    )
                theta[name] = value

    spec = config.regularizer
    aux: dict[str, np.ndarray] = {}
    mu = kd = ft = None
    if config.beta > 0:
        if spec.kind == "aft":
            if spec.mu_mode == "diagonal":
                mu = MuWeights.diagonal(d_psi)
                aux["mu.s"] = mu.s
            elif spec.mu_mode == "dense":
                mu = MuWeights.dense_init(d_psi, d_psi)
                aux["mu.dense"] = mu.dense
            else:
                mu = MuWeights.identity()
        elif spec.kind == "l2":
            mu = MuWeights.dense_init(config.extractor.d_phi, d_psi)
            aux["mu.dense"] = mu.dense
        elif spec.kind == "kd":
            kd = KdTransform.init(config.extractor.d_phi, d_psi, config.seed)
            aux["kd.v"] = kd.v
        elif spec.kind == "ft":
            ft = FtNets.init(config.extractor.d_phi, d_psi, config.seed)
            aux["ft.tr_w"] = ft.tr_w
            aux["ft.tr_b"] = ft.tr_b

    slots = {name: optim.AdamSlot.like(value) for name, value in {**theta, **aux}.items()}
    return TrainState(
        config=config,
        theta=theta,
        aux=aux,
        mu=mu,
        kd=kd,
        ft=ft,
        slots=slots,
        n_classes=n_classes,
    )


def _regularizer_node(state: TrainState, tape: Tape, phi, psi_batch, aux_nodes):
    spec = state.config.regularizer
    if spec.kind == "aft":
        return aft_node(
            tape,
            phi,
            tape.constant(psi_batch),
            state.mu,
            aux_nodes,
            kernel=spec.kernel,
            eps_norm=spec.eps_norm,
            eps_sqrt=spec.eps_sqrt,
        )
    if spec.kind == "l2":
        return l2_node(tape, phi, tape.constant(psi_batch), aux_nodes["mu.dense"])
    if spec.kind == "kd":
        return kd_node(tape, phi, tape.constant(psi_batch), aux_nodes["kd.v"])
    if spec.kind == "rkd":
        return rkd_node(tape, phi, psi_batch, spec.huber_delta, spec.eps_norm)
    return ft_node(tape, phi, psi_batch, state.ft, aux_nodes, spec.eps_norm)


def _build_losses(state: TrainState, x_batch, y_batch, psi_batch, aux_trainable: bool):
    """One tape holding task loss, regularizer (or None), and composite."""
    cfg = state.config
    tape = Tape()
    theta_nodes = {name: tape.param(name, value) for name, value in state.theta.items()}
    aux_nodes = {}
    if cfg.beta > 0:
        for name, value in state.aux.items():
            aux_nodes[name] = tape.param(name, value) if aux_trainable else tape.constant(value)
    x = tape.constant(x_batch)
    phi, logits = models.forward(tape, cfg.extractor, theta_nodes, x)
    task_loss = tape.cross_entropy(logits, y_batch)
    reg = None
    composite = task_loss
    if cfg.beta > 0:
        reg = _regularizer_node(state, tape, phi, psi_batch, aux_nodes)
        composite = tape.add(task_loss, tape.scale(reg, cfg.beta))
    return tape, task_loss, reg, composite


def train_step(
    state: TrainState,
    x_batch: np.ndarray,
    y_batch: np.ndarray,
    psi_batch: np.ndarray | None,
    lr_scale: float = 1.0,
) -> tuple[float, float]:
    """One optimization step; returns (task loss, regularizer value)."""
    cfg = state.config
    if x_batch.shape[0] < 2:
        raise BatchSizeError(f"batch of {x_batch.shape[0]} rows; need >= 2")
    lr_theta = cfg.lr_theta * lr_scale
    lr_mu = cfg.lr_mu * lr_scale

    if cfg.beta > 0 and cfg.bilevel_inner_steps > 0 and state.aux:
        # inner weight updates on the same batch precede the model update
        for _ in range(cfg.bilevel_inner_steps):
            tape = Tape()
            aux_nodes = {name: tape.param(name, value) for name, value in state.aux.items()}
            theta_nodes = {name: tape.constant(value) for name, value in state.theta.items()}
            phi, _ = models.forward(tape, cfg.extractor, theta_nodes, tape.constant(x_batch))
            reg = _regularizer_node(state, tape, phi, psi_batch, aux_nodes)
            grads = tape.gradients(reg)
            for name in state.aux:
                optim.adam_update(state.aux[name], grads[name], state.slots[name], lr_mu)
        tape, task_loss, reg, composite = _build_losses(
            state, x_batch, y_batch, psi_batch, aux_trainable=False
        )
        theta_grads = tape.gradients(composite)
        for name in state.theta:
            optim.adam_update(state.theta[name], theta_grads[name], state.slots[name], lr_theta)
        state.step += 1
        return task_loss.item(), reg.item()

    tape, task_loss, reg, composite = _build_losses(
        state, x_batch, y_batch, psi_batch, aux_trainable=True
    )
    theta_grads = tape.gradients(composite)
    aux_grads = tape.gradients(reg) if (reg is not None and state.aux) else {}
    for name in state.theta:
        optim.adam_update(state.theta[name], theta_grads[name], state.slots[name], lr_theta)
    for name in state.aux:
        optim.adam_update(state.aux[name], aux_grads[name], state.slots[name], lr_mu)
    state.step += 1
    return task_loss.item(), (reg.item() if reg is not None else 0.0)


def batch_plan(n_train: int, batch_size: int, seed: int, steps: int):
    """Yield per-step index arrays into the train list.

    Each epoch is a fresh seeded shuffle; a trailing partial batch is kept
    when it has at least two rows and dropped otherwise.
    """
    if n_train < 2:
        raise BatchSizeError(f"training split has {n_train} rows; need >= 2")
    order_stream = rng.stream(seed, rng.STREAM_BATCH_ORDER)
    produced = 0
    epoch = 0
    while produced < steps:
        perm = order_stream.child(epoch).permutation(n_train)
        pos = 0
        while pos < n_train and produced < steps:
            batch = perm[pos : pos + batch_size]
            pos += batch_size
            if batch.shape[0] < 2:
                break
            produced += 1
            yield batch
        epoch += 1


@dataclass
class RunRecord:
    header: dict
    steps: list[dict]
    evals: list[dict]
    final: dict
    state: TrainState | None = None


def _config_doc(config: TrainConfig) -> dict:
    doc = asdict(config)
    doc["extractor"]["hidden"] = list(doc["extractor"]["hidden"])
    return doc


def write_metrics(record: RunRecord, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "header", **record.header}, sort_keys=True) + "\n")
        for row in record.steps:
            fh.write(json.dumps({"type": "step", **row}, sort_keys=True) + "\n")
        for row in record.evals:
            fh.write(json.dumps({"type": "eval", **row}, sort_keys=True) + "\n")
        if record.final:
            fh.write(json.dumps({"type": "final", **record.final}, sort_keys=True) + "\n")


def read_metrics(path: str | os.PathLike) -> RunRecord:
    header, steps, evals, final = {}, [], [], {}
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            kind = row.pop("type")
            if kind == "header":
                header = row
            elif kind == "step":
                steps.append(row)
            elif kind == "eval":
                evals.append(row)
            elif kind == "final":
                final = row
    return RunRecord(header=header, steps=steps, evals=evals, final=final)


def _evaluate(state: TrainState, dataset: Dataset, split: str) -> float:
    idx = dataset.splits.get(split, [])
    if not idx:
        return float("nan")
    return models.accuracy(
        state.config.extractor, state.theta, dataset.x[idx], dataset.labels[idx]
    )


def run_training(
    config: TrainConfig,
    dataset: Dataset,
    train_indices: list[int] | None = None,
    run_id: str = "run",
    out_dir: str | os.PathLike | None = None,
    extra_header: dict | None = None,
) -> RunRecord:
    """Train for config.steps mini-batch steps; deterministic given config."""
    config.validate()
    train_idx = np.asarray(
        train_indices if train_indices is not None else dataset.splits["train"],
        dtype=np.int64,
    )
    if train_idx.size == 0:
        raise ConfigError("training split is empty")
    state = init_state(config, dataset.x.shape[1], dataset.psi.shape[1], dataset.n_classes)
    if config.regularizer.kind == "ft" and config.beta > 0:
        pretrain_paraphraser(
            dataset.psi[train_idx],
            state.ft,
            config.regularizer.ft_pretrain_steps,
            config.regularizer.ft_pretrain_lr,
        )

    header = {
        "run_id": run_id,
        "method": method_label(config),
        "dataset": config.dataset_label,
        "seed": config.seed,
        "beta": config.beta,
        "config": _config_doc(config),
    }
    if extra_header:
        header.update(extra_header)
    record = RunRecord(header=header, steps=[], evals=[], final={}, state=state)

    needs_psi = config.beta > 0
    for step, batch in enumerate(batch_plan(train_idx.size, config.batch_size, config.seed, config.steps)):
        rows = train_idx[batch]
        scale = cosine_multiplier(step, config.steps, config.schedule)
        try:
            task_loss, reg = train_step(
                state,
                dataset.x[rows],
                dataset.labels[rows],
                dataset.psi[rows] if needs_psi else None,
                lr_scale=scale,
            )
        except NonFiniteError as exc:
            record.final = {"aborted_step": step, "message": str(exc)}
            if out_dir is not None:
                os.makedirs(out_dir, exist_ok=True)
                write_metrics(record, os.path.join(out_dir, f"{run_id}.metrics"))
            raise TrainingAborted(str(exc), step=step) from exc
        record.steps.append(
            {
                "step": step,
                "task_loss": task_loss,
                "reg": reg,
                "lr_theta": config.lr_theta * scale,
                "lr_mu": config.lr_mu * scale,
            }
        )
        if config.eval_every and (step + 1) % config.eval_every == 0 and step + 1 < config.steps:
            record.evals.append(
                {
                    "step": step,
                    "holdout_accuracy": _evaluate(state, dataset, "holdout"),
                    "test_accuracy": _evaluate(state, dataset, "test"),
                }
            )

    holdout_acc = _evaluate(state, dataset, "holdout")
    test_acc = _evaluate(state, dataset, "test")
    record.evals.append(
        {"step": config.steps - 1, "holdout_accuracy": holdout_acc, "test_accuracy": test_acc}
    )
    record.final = {
        "holdout_accuracy": holdout_acc,
        "test_accuracy": test_acc,
        "test_error": (1.0 - test_acc) if not math.isnan(test_acc) else float("nan"),
        "checkpoint": f"{run_id}.ckpt" if out_dir is not None else None,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        models.save_checkpoint(os.path.join(out_dir, f"{run_id}.ckpt"), state.all_tensors())
        write_metrics(record, os.path.join(out_dir, f"{run_id}.metrics"))
    return record


def select_beta(
    config: TrainConfig,
    dataset: Dataset,
    beta_grid: list[float],
    run_id: str = "run",
    out_dir: str | os.PathLike | None = None,
    threads: int = 1,
) -> RunRecord:
    """Tune beta on the holdout split, then retrain on train + holdout.

    Each grid point trains on the train split alone and is scored by
    holdout accuracy; ties prefer the smaller beta.  The returned record is
    the final full-training-set run, with the grid results in its header.
    """
    if not beta_grid:
        raise ConfigError("beta grid is empty")
    if not dataset.splits.get("holdout"):
        raise ConfigError("beta selection needs a holdout split")
    grid = sorted(float(b) for b in beta_grid)

    def grid_run(beta: float) -> RunRecord:
        return run_training(
            config.with_beta(beta),
            dataset,
            train_indices=dataset.splits["train"],
            run_id=f"{run_id}.beta{beta:g}",
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            grid_records = list(pool.map(grid_run, grid))
    else:
        grid_records = [grid_run(b) for b in grid]

    results = [
        {"beta": beta, "holdout_accuracy": rec.final["holdout_accuracy"]}
        for beta, rec in zip(grid, grid_records)
    ]
    best = max(range(len(grid)), key=lambda i: (results[i]["holdout_accuracy"], -grid[i]))
    beta_star = grid[best]

    full_train = list(dataset.splits["train"]) + list(dataset.splits["holdout"])
    return run_training(
        config.with_beta(beta_star),
        dataset,
        train_indices=full_train,
        run_id=run_id,
        out_dir=out_dir,
        extra_header={"beta_star": beta_star, "beta_grid": grid, "beta_grid_results": results},
    )


def execute(
    config: TrainConfig,
    dataset: Dataset,
    beta_grid: list[float] | None = None,
    run_id: str = "run",
    out_dir: str | os.PathLike | None = None,
    threads: int = 1,
) -> RunRecord:
    """Grid-tuned training when a grid is given, one full run otherwise."""
    if beta_grid:
        return select_beta(config, dataset, beta_grid, run_id=run_id, out_dir=out_dir, threads=threads)
    full_train = list(dataset.splits["train"]) + list(dataset.splits.get("holdout", []))
    return run_training(config, dataset, train_indices=full_train, run_id=run_id, out_dir=out_dir)
