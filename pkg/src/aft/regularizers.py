"""Transfer regularizers: kernel-distance objective plus baselines.

Each regularizer exposes two layers: a tape-level builder returning a
differentiable scalar node (used by the training loop) and a plain value
function matching the batch-in / scalar-out contract (used by tests and
reference pipelines).  The kernel objective scales pretrained features by
the learned weights, centers both batches at their mini-batch mean,
row-normalizes, forms the two B x B Gram matrices, and returns
sqrt-of-sum-of-squared-differences divided by B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import optim, rng
from .autodiff import Node, Tape, as_matrix, sigmoid
from .errors import BatchSizeError, ConfigError, DimensionError, StateError

KINDS = ("aft", "l2", "kd", "rkd", "ft")
KERNELS = ("linear", "rbf")
MU_MODES = ("diagonal", "dense", "identity")


@dataclass
class RegularizerSpec:
    """Which transfer objective to apply and how it is parameterized."""

    kind: str = "aft"
    kernel: str = "linear"  # only meaningful for kind="aft"
    mu_mode: str = "diagonal"  # only meaningful for kind="aft"
    beta: float = 0.0
    eps_norm: float = 1e-12
    eps_sqrt: float = 1e-12
    huber_delta: float = 1.0
    ft_pretrain_steps: int = 1000
    ft_pretrain_lr: float = 1e-3

    def validate(self) -> "RegularizerSpec":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown regularizer kind {self.kind!r}, expected one of {KINDS}")
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}, expected one of {KERNELS}")
        if self.mu_mode not in MU_MODES:
            raise ConfigError(f"unknown mu_mode {self.mu_mode!r}, expected one of {MU_MODES}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.eps_norm <= 0 or self.eps_sqrt < 0:
            raise ConfigError("eps_norm must be > 0 and eps_sqrt >= 0")
        return self


# ---------------------------------------------------------------------------
# weight parameterizations


@dataclass
class MuWeights:
    """Feature weights applied to pretrained features.

    diagonal: per-column weight sigmoid(s_i) in (0, 1).
    dense:    an explicit (out_dim x d_psi) matrix.
    identity: fixed, nothing trainable.
    """

    mode: str
    s: np.ndarray | None = None
    dense: np.ndarray | None = None

    @classmethod
    def diagonal(cls, d_psi: int) -> "MuWeights":
        return cls(mode="diagonal", s=np.zeros((1, d_psi)))

    @classmethod
    def identity(cls) -> "MuWeights":
        return cls(mode="identity")

    @classmethod
    def dense_init(cls, out_dim: int, d_psi: int) -> "MuWeights":
        dense = np.zeros((out_dim, d_psi))
        np.fill_diagonal(dense, 1.0)
        return cls(mode="dense", dense=dense)

    def diagonal_weights(self) -> np.ndarray:
        if self.mode == "diagonal":
            return sigmoid(self.s).reshape(-1)
        raise ConfigError(f"diagonal_weights undefined for mode {self.mode!r}")

    def apply(self, psi: np.ndarray) -> np.ndarray:
        if self.mode == "identity":
            return psi
        if self.mode == "diagonal":
            return psi * sigmoid(self.s)
        return psi @ self.dense.T


def apply_mu_node(tape: Tape, psi: Node, mu: MuWeights, nodes: dict[str, Node]) -> Node:
    """Scale a pretrained batch by mu on the tape (trainable when registered)."""
    if mu.mode == "identity":
        return psi
    if mu.mode == "diagonal":
        return tape.mul(psi, tape.sigmoid(nodes["mu.s"]))
    return tape.matmul(psi, tape.transpose(nodes["mu.dense"]))


@dataclass
class KdTransform:
    """Learned map from downstream to pretrained feature space."""

    v: np.ndarray

    @classmethod
    def init(cls, d_phi: int, d_psi: int, seed: int) -> "KdTransform":
        s = rng.stream(seed, rng.STREAM_PARAM_INIT).child(101)
        return cls(v=s.normal_matrix(d_psi, d_phi) / math.sqrt(d_phi))


@dataclass
class FtNets:
    """Paraphraser (autoencoder on teacher features) and translator MLPs."""

    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray
    tr_w: np.ndarray
    tr_b: np.ndarray
    pretrained: bool = False

    @classmethod
    def init(cls, d_phi: int, d_psi: int, seed: int) -> "FtNets":
        h = (d_psi + 1) // 2
        s = rng.stream(seed, rng.STREAM_PARAM_INIT).child(202)
        return cls(
            enc_w=s.normal_matrix(h, d_psi) / math.sqrt(d_psi),
            enc_b=np.zeros((1, h)),
            dec_w=s.normal_matrix(d_psi, h) / math.sqrt(h),
            dec_b=np.zeros((1, d_psi)),
            tr_w=s.normal_matrix(h, d_phi) / math.sqrt(d_phi),
            tr_b=np.zeros((1, h)),
        )

    def encode(self, psi: np.ndarray) -> np.ndarray:
        return np.maximum(psi @ self.enc_w.T + self.enc_b, 0.0)

    def decode(self, factor: np.ndarray) -> np.ndarray:
        return factor @ self.dec_w.T + self.dec_b


# ---------------------------------------------------------------------------
# tape-level builders


def aft_node(
    tape: Tape,
    phi: Node,
    psi: Node,
    mu: MuWeights,
    mu_nodes: dict[str, Node],
    kernel: str = "linear",
    eps_norm: float = 1e-12,
    eps_sqrt: float = 1e-12,
) -> Node:
    b = phi.shape[0]
    if b < 2:
        raise BatchSizeError(f"kernel distance needs a batch of >= 2 rows, got {b}")
    if psi.shape[0] != b:
        raise DimensionError(f"batch sizes differ: {phi.shape} vs {psi.shape}")
    scaled = apply_mu_node(tape, psi, mu, mu_nodes)
    phi_n = tape.normalize_rows(tape.center_rows(phi), eps_norm)
    psi_n = tape.normalize_rows(tape.center_rows(scaled), eps_norm)
    make_kernel = tape.rbf_gram if kernel == "rbf" else tape.gram
    return tape.frob_distance(make_kernel(phi_n), make_kernel(psi_n), scale=b, eps=eps_sqrt)


def l2_node(tape: Tape, phi: Node, psi: Node, mu_dense: Node) -> Node:
    b, d_phi = phi.shape
    if mu_dense.shape != (d_phi, psi.shape[1]):
        raise DimensionError(
            f"dense mu must be {d_phi} x {psi.shape[1]}, got {mu_dense.shape}"
        )
    phi_c = tape.center_rows(phi)
    psi_c = tape.center_rows(psi)
    resid = tape.sub(phi_c, tape.matmul(psi_c, tape.transpose(mu_dense)))
    return tape.scale(tape.sumsq(resid), 1.0 / b)


def kd_node(tape: Tape, phi: Node, psi: Node, v: Node) -> Node:
    b, d_phi = phi.shape
    if v.shape != (psi.shape[1], d_phi):
        raise DimensionError(f"v must be {psi.shape[1]} x {d_phi}, got {v.shape}")
    phi_c = tape.center_rows(phi)
    psi_c = tape.center_rows(psi)
    resid = tape.sub(tape.matmul(phi_c, tape.transpose(v)), psi_c)
    return tape.scale(tape.sumsq(resid), 1.0 / b)


def _pair_indices(b: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(b, k=1)
    return i.astype(np.int64), j.astype(np.int64)


def _triple_indices(b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Triples (i, j, k) with center j, i < k, and all three distinct."""
    out_i, out_j, out_k = [], [], []
    for j in range(b):
        for i in range(b):
            if i == j:
                continue
            for k in range(i + 1, b):
                if k == j:
                    continue
                out_i.append(i)
                out_j.append(j)
                out_k.append(k)
    return (
        np.asarray(out_i, dtype=np.int64),
        np.asarray(out_j, dtype=np.int64),
        np.asarray(out_k, dtype=np.int64),
    )


def _rkd_teacher_stats(psi: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized pairwise distances and triple-angle cosines of the teacher."""
    b = psi.shape[0]
    pi, pj = _pair_indices(b)
    diffs = psi[pi] - psi[pj]
    dist = np.sqrt((diffs * diffs).sum(axis=1, keepdims=True) + 1e-24)
    dist_n = dist / dist.mean()
    ti, tj, tk = _triple_indices(b)
    e1 = psi[ti] - psi[tj]
    e2 = psi[tk] - psi[tj]
    n1 = np.sqrt((e1 * e1).sum(axis=1, keepdims=True))
    n2 = np.sqrt((e2 * e2).sum(axis=1, keepdims=True))
    e1 = np.where(n1 > eps, e1 / np.where(n1 > eps, n1, 1.0), 0.0)
    e2 = np.where(n2 > eps, e2 / np.where(n2 > eps, n2, 1.0), 0.0)
    cos = (e1 * e2).sum(axis=1, keepdims=True)
    return dist_n, cos


def rkd_node(
    tape: Tape,
    phi: Node,
    psi_value: np.ndarray,
    huber_delta: float = 1.0,
    eps_norm: float = 1e-12,
) -> Node:
    b = phi.shape[0]
    if b < 3:
        raise BatchSizeError(f"relational objective needs a batch of >= 3 rows, got {b}")
    if psi_value.shape[0] != b:
        raise DimensionError(f"batch sizes differ: {phi.shape} vs {psi_value.shape}")
    t_dist, t_cos = _rkd_teacher_stats(psi_value, eps_norm)

    pi, pj = _pair_indices(b)
    s_diff = tape.rows_diff(phi, pi, pj)
    s_dist = tape.row_norms(s_diff)
    s_dist_n = tape.div(s_dist, tape.mean_all(s_dist))
    dist_loss = tape.mean_all(tape.huber(tape.sub(s_dist_n, tape.constant(t_dist)), huber_delta))

    ti, tj, tk = _triple_indices(b)
    e1 = tape.normalize_rows(tape.rows_diff(phi, ti, tj), eps_norm)
    e2 = tape.normalize_rows(tape.rows_diff(phi, tk, tj), eps_norm)
    s_cos = tape.row_dot(e1, e2)
    angle_loss = tape.mean_all(tape.huber(tape.sub(s_cos, tape.constant(t_cos)), huber_delta))

    # angle term weighted 2x relative to the distance term
    return tape.add(dist_loss, tape.scale(angle_loss, 2.0))


def ft_node(
    tape: Tape,
    phi: Node,
    psi_value: np.ndarray,
    nets: FtNets,
    tr_nodes: dict[str, Node],
    eps_norm: float = 1e-12,
) -> Node:
    if not nets.pretrained:
        raise StateError("paraphraser must be pretrained before the factor objective is used")
    b = phi.shape[0]
    factor_t = tape.normalize_rows(
        tape.relu(tape.affine(phi, tr_nodes["ft.tr_w"], tr_nodes["ft.tr_b"])), eps_norm
    )
    target = nets.encode(psi_value)
    norms = np.sqrt((target * target).sum(axis=1, keepdims=True))
    live = norms > eps_norm
    target = np.where(live, target / np.where(live, norms, 1.0), 0.0)
    resid = tape.sub(factor_t, tape.constant(target))
    return tape.scale(tape.sumsq(resid), 1.0 / b)


def pretrain_paraphraser(
    psi_train: np.ndarray, nets: FtNets, steps: int = 1000, lr: float = 1e-3
) -> float:
    """Fit the autoencoder on teacher features; freezes the encoder after.

    Full-batch Adam on mean squared reconstruction error; returns the final
    reconstruction MSE.
    """
    if steps < 1:
        raise ConfigError("pretraining needs steps >= 1")
    psi_train = as_matrix(psi_train)
    n = psi_train.shape[0]
    names = ("ft.enc_w", "ft.enc_b", "ft.dec_w", "ft.dec_b")
    values = {
        "ft.enc_w": nets.enc_w,
        "ft.enc_b": nets.enc_b,
        "ft.dec_w": nets.dec_w,
        "ft.dec_b": nets.dec_b,
    }
    slots = {name: optim.AdamSlot.like(values[name]) for name in names}
    loss_value = float("nan")
    for _ in range(steps):
        tape = Tape()
        nodes = {name: tape.param(name, values[name]) for name in names}
        psi = tape.constant(psi_train)
        factor = tape.relu(tape.affine(psi, nodes["ft.enc_w"], nodes["ft.enc_b"]))
        recon = tape.affine(factor, nodes["ft.dec_w"], nodes["ft.dec_b"])
        loss = tape.scale(tape.sumsq(tape.sub(recon, psi)), 1.0 / n)
        grads = tape.gradients(loss)
        loss_value = loss.item()
        for name in names:
            optim.adam_update(values[name], grads[name], slots[name], lr)
    nets.pretrained = True
    return loss_value


# ---------------------------------------------------------------------------
# value-level entry points (build a throwaway tape)


def aft_regularizer(
    phi: np.ndarray,
    psi: np.ndarray,
    mu: MuWeights,
    kernel: str = "linear",
    eps_norm: float = 1e-12,
    eps_sqrt: float = 1e-12,
) -> float:
    tape = Tape()
    nodes = {}
    if mu.mode == "diagonal":
        nodes["mu.s"] = tape.constant(mu.s)
    elif mu.mode == "dense":
        nodes["mu.dense"] = tape.constant(mu.dense)
    return aft_node(
        tape,
        tape.constant(as_matrix(phi)),
        tape.constant(as_matrix(psi)),
        mu,
        nodes,
        kernel=kernel,
        eps_norm=eps_norm,
        eps_sqrt=eps_sqrt,
    ).item()


def l2_regularizer(phi: np.ndarray, psi: np.ndarray, mu: MuWeights) -> float:
    if mu.mode != "dense":
        raise ConfigError("the no-kernel objective requires a dense mu")
    tape = Tape()
    return l2_node(
        tape,
        tape.constant(as_matrix(phi)),
        tape.constant(as_matrix(psi)),
        tape.constant(mu.dense),
    ).item()


def kd_regularizer(phi: np.ndarray, psi: np.ndarray, v: KdTransform) -> float:
    tape = Tape()
    return kd_node(
        tape,
        tape.constant(as_matrix(phi)),
        tape.constant(as_matrix(psi)),
        tape.constant(v.v),
    ).item()


def rkd_regularizer(phi: np.ndarray, psi: np.ndarray, huber_delta: float = 1.0) -> float:
    tape = Tape()
    return rkd_node(tape, tape.constant(as_matrix(phi)), as_matrix(psi), huber_delta).item()


def ft_regularizer(
    phi: np.ndarray, psi: np.ndarray, nets: FtNets, eps_norm: float = 1e-12
) -> float:
    tape = Tape()
    tr_nodes = {
        "ft.tr_w": tape.constant(nets.tr_w),
        "ft.tr_b": tape.constant(nets.tr_b),
    }
    return ft_node(
        tape, tape.constant(as_matrix(phi)), as_matrix(psi), nets, tr_nodes, eps_norm
    ).item()
