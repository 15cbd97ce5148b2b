"""Transfer objectives: values against loop-level references, gradients,
fixed points, invariances, and the span-vs-compression separation."""

import numpy as np
import pytest

from aft.autodiff import Tape, sigmoid
from aft.errors import BatchSizeError, ConfigError, StateError
from aft.regularizers import (
    FtNets,
    KdTransform,
    MuWeights,
    aft_node,
    aft_regularizer,
    ft_node,
    ft_regularizer,
    kd_node,
    kd_regularizer,
    l2_node,
    l2_regularizer,
    pretrain_paraphraser,
    rkd_node,
    rkd_regularizer,
)
from gradcheck import assert_gradients_match


def _center(x):
    return x - x.mean(axis=0, keepdims=True)


def _normalize(x):
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return np.where(norms > 1e-12, x / np.where(norms > 1e-12, norms, 1.0), 0.0)


# ---------------------------------------------------------------------------
# kernel objective


def test_aft_self_transfer_is_zero():
    gen = np.random.default_rng(0)
    phi = gen.normal(size=(6, 4))
    assert aft_regularizer(phi, phi, MuWeights.identity(), eps_sqrt=0.0) == 0.0
    assert aft_regularizer(phi, phi, MuWeights.identity()) <= 1e-6


def test_aft_orthogonal_invariance_fixed_point():
    gen = np.random.default_rng(1)
    psi = gen.normal(size=(8, 5))
    mu = MuWeights.diagonal(5)
    mu.s[:] = gen.normal(size=(1, 5))
    # downstream features equal to the weighted pretrained batch rotated in
    # feature space: every pipeline stage commutes with the rotation, so
    # the two kernels coincide
    q, _ = np.linalg.qr(gen.normal(size=(5, 5)))
    assert aft_regularizer((psi * sigmoid(mu.s)) @ q, psi, mu, eps_sqrt=0.0) <= 1e-8


def test_aft_rotating_downstream_features_leaves_value_unchanged():
    gen = np.random.default_rng(2)
    phi = gen.normal(size=(7, 4))
    psi = gen.normal(size=(7, 6))
    mu = MuWeights.diagonal(6)
    base = aft_regularizer(phi, psi, mu)
    for seed in range(5):
        q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(4, 4)))
        assert abs(aft_regularizer(phi @ q, psi, mu) - base) <= 1e-8


def _aft_loop_reference(phi, psi, s, batch):
    """Step-by-step pipeline with explicit loops, no shared code."""
    weights = 1.0 / (1.0 + np.exp(-s.reshape(-1)))
    scaled = np.zeros_like(psi)
    for i in range(psi.shape[0]):
        for j in range(psi.shape[1]):
            scaled[i, j] = psi[i, j] * weights[j]

    def center(m):
        out = m.copy()
        for j in range(m.shape[1]):
            col_mean = sum(m[i, j] for i in range(m.shape[0])) / m.shape[0]
            for i in range(m.shape[0]):
                out[i, j] = m[i, j] - col_mean
        return out

    def normalize(m):
        out = m.copy()
        for i in range(m.shape[0]):
            norm = np.sqrt(sum(m[i, j] ** 2 for j in range(m.shape[1])))
            if norm > 1e-12:
                for j in range(m.shape[1]):
                    out[i, j] = m[i, j] / norm
            else:
                out[i, :] = 0.0
        return out

    def kernel(m):
        k = np.zeros((m.shape[0], m.shape[0]))
        for i in range(m.shape[0]):
            for j in range(m.shape[0]):
                k[i, j] = sum(m[i, c] * m[j, c] for c in range(m.shape[1]))
        return k

    k_phi = kernel(normalize(center(phi)))
    k_psi = kernel(normalize(center(scaled)))
    total = 0.0
    for i in range(batch):
        for j in range(batch):
            total += (k_phi[i, j] - k_psi[i, j]) ** 2
    return np.sqrt(total + 1e-12) / batch


def test_aft_matches_loop_reference():
    gen = np.random.default_rng(3)
    phi = gen.normal(size=(4, 3))
    psi = gen.normal(size=(4, 5))
    mu = MuWeights.diagonal(5)  # s = 0, all weights 0.5
    got = aft_regularizer(phi, psi, mu)
    want = _aft_loop_reference(phi, psi, mu.s, batch=4)
    assert abs(got - want) <= 1e-12


def test_aft_rejects_tiny_batches():
    with pytest.raises(BatchSizeError):
        aft_regularizer(np.ones((1, 2)), np.ones((1, 2)), MuWeights.identity())


def test_aft_nonnegative_and_rbf_variant():
    gen = np.random.default_rng(4)
    phi = gen.normal(size=(5, 3))
    psi = gen.normal(size=(5, 4))
    mu = MuWeights.diagonal(4)
    assert aft_regularizer(phi, psi, mu) >= 0.0
    assert aft_regularizer(phi, psi, mu, kernel="rbf") >= 0.0
    assert aft_regularizer(phi, phi, MuWeights.identity(), kernel="rbf") <= 1e-6


def test_aft_dense_mu_rescaling_bijection():
    # Rescaling pretrained columns by an invertible diagonal is absorbed by
    # the matching dense-mu change of variables, so the dense-mu minimum is
    # unchanged: the map mu -> mu @ inv(D) transports objective values 1:1.
    gen = np.random.default_rng(5)
    phi = gen.normal(size=(6, 3))
    psi = gen.normal(size=(6, 4))
    dense = gen.normal(size=(4, 4))
    d = np.diag(gen.uniform(0.5, 3.0, size=4))
    lhs = aft_regularizer(phi, psi @ d, MuWeights(mode="dense", dense=dense @ np.linalg.inv(d)))
    rhs = aft_regularizer(phi, psi, MuWeights(mode="dense", dense=dense))
    assert abs(lhs - rhs) <= 1e-10


# ---------------------------------------------------------------------------
# no-kernel objective


def test_l2_exact_fit_is_zero():
    gen = np.random.default_rng(6)
    psi = gen.normal(size=(5, 4))
    dense = gen.normal(size=(3, 4))
    phi = psi @ dense.T
    assert l2_regularizer(phi, psi, MuWeights(mode="dense", dense=dense)) <= 1e-24


def test_l2_zero_mu_gives_mean_squared_centered_rows():
    gen = np.random.default_rng(7)
    phi = gen.normal(size=(6, 3))
    psi = gen.normal(size=(6, 4))
    mu = MuWeights(mode="dense", dense=np.zeros((3, 4)))
    want = (_center(phi) ** 2).sum() / 6
    assert abs(l2_regularizer(phi, psi, mu) - want) <= 1e-12


def test_l2_at_least_squares_optimum_matches_normal_equations():
    gen = np.random.default_rng(8)
    phi = gen.normal(size=(4, 3))
    psi = gen.normal(size=(4, 2))
    phi_c, psi_c = _center(phi), _center(psi)
    mu_star = np.linalg.solve(psi_c.T @ psi_c, psi_c.T @ phi_c).T
    resid = phi_c - psi_c @ mu_star.T
    want = float((resid * resid).sum() / 4)
    got = l2_regularizer(phi, psi, MuWeights(mode="dense", dense=mu_star))
    assert abs(got - want) <= 1e-8


def test_l2_requires_dense_mu():
    with pytest.raises(ConfigError):
        l2_regularizer(np.ones((3, 2)), np.ones((3, 2)), MuWeights.identity())


def test_l2_and_kd_shape_mismatch_raise_dimension_errors():
    from aft.errors import DimensionError

    with pytest.raises(DimensionError):
        l2_regularizer(
            np.ones((3, 2)), np.ones((3, 4)), MuWeights(mode="dense", dense=np.ones((2, 3)))
        )
    with pytest.raises(DimensionError):
        kd_regularizer(np.ones((3, 2)), np.ones((3, 4)), KdTransform(v=np.ones((4, 5))))


# ---------------------------------------------------------------------------
# distillation objective


def test_kd_exact_fit_is_zero():
    gen = np.random.default_rng(9)
    phi = gen.normal(size=(5, 3))
    v = gen.normal(size=(4, 3))
    psi = phi @ v.T
    assert kd_regularizer(phi, psi, KdTransform(v=v)) <= 1e-24


def test_kd_rank_obstruction_floor_is_positive():
    gen = np.random.default_rng(10)
    phi = gen.normal(size=(8, 1))
    psi = gen.normal(size=(8, 2))
    phi_c, psi_c = _center(phi), _center(psi)
    v_star = np.linalg.solve(phi_c.T @ phi_c, phi_c.T @ psi_c).T
    resid = psi_c - phi_c @ v_star.T
    oracle_min = float((resid * resid).sum() / 8)
    assert oracle_min > 0.01
    assert kd_regularizer(phi, psi, KdTransform(v=v_star)) >= oracle_min - 1e-12


def test_kd_at_least_squares_optimum_matches_normal_equations():
    gen = np.random.default_rng(11)
    phi = gen.normal(size=(6, 3))
    psi = gen.normal(size=(6, 4))
    phi_c, psi_c = _center(phi), _center(psi)
    v_star = np.linalg.solve(phi_c.T @ phi_c, phi_c.T @ psi_c).T
    resid = psi_c - phi_c @ v_star.T
    want = float((resid * resid).sum() / 6)
    got = kd_regularizer(phi, psi, KdTransform(v=v_star))
    assert abs(got - want) <= 1e-8


# ---------------------------------------------------------------------------
# relational objective


def _huber(x, delta=1.0):
    ax = abs(x)
    return 0.5 * x * x if ax <= delta else delta * (ax - 0.5 * delta)


def _rkd_loop_reference(phi, psi):
    b = phi.shape[0]

    def pair_stats(m):
        dists = []
        for i in range(b):
            for j in range(i + 1, b):
                dists.append(np.sqrt(((m[i] - m[j]) ** 2).sum() + 1e-24))
        mean = sum(dists) / len(dists)
        return [d / mean for d in dists]

    s_d, t_d = pair_stats(phi), pair_stats(psi)
    dist_loss = sum(_huber(s - t) for s, t in zip(s_d, t_d)) / len(s_d)

    def angles(m):
        cos = []
        for j in range(b):
            for i in range(b):
                if i == j:
                    continue
                for k in range(i + 1, b):
                    if k == j:
                        continue
                    e1 = m[i] - m[j]
                    e2 = m[k] - m[j]
                    e1 = e1 / np.sqrt((e1 * e1).sum())
                    e2 = e2 / np.sqrt((e2 * e2).sum())
                    cos.append(float((e1 * e2).sum()))
        return cos

    s_a, t_a = angles(phi), angles(psi)
    angle_loss = sum(_huber(s - t) for s, t in zip(s_a, t_a)) / len(s_a)
    return dist_loss + 2.0 * angle_loss


def test_rkd_self_transfer_is_zero():
    gen = np.random.default_rng(12)
    phi = gen.normal(size=(5, 3))
    assert rkd_regularizer(phi, phi) <= 1e-24


def test_rkd_scale_and_shift_invariance():
    gen = np.random.default_rng(13)
    psi = gen.normal(size=(6, 4))
    phi = 3.7 * psi + gen.normal(size=(1, 4))
    assert rkd_regularizer(phi, psi) <= 1e-8


def test_rkd_matches_loop_reference():
    gen = np.random.default_rng(14)
    phi = gen.normal(size=(4, 3))
    psi = gen.normal(size=(4, 3))
    got = rkd_regularizer(phi, psi)
    want = _rkd_loop_reference(phi, psi)
    assert abs(got - want) <= 1e-10


def test_rkd_needs_three_rows():
    with pytest.raises(BatchSizeError):
        rkd_regularizer(np.ones((2, 2)), np.ones((2, 2)))


# ---------------------------------------------------------------------------
# factor-transfer objective


def _pretrained_nets(d_phi, d_psi, seed=0):
    nets = FtNets.init(d_phi, d_psi, seed)
    nets.pretrained = True
    return nets


def test_ft_translator_matching_encoder_is_zero():
    gen = np.random.default_rng(15)
    d = 4
    nets = _pretrained_nets(d, d, seed=3)
    nets.tr_w = nets.enc_w.copy()
    nets.tr_b = nets.enc_b.copy()
    psi = gen.normal(size=(6, d))
    assert ft_regularizer(psi, psi, nets) <= 1e-24


def test_ft_not_invariant_to_feature_rotation():
    gen = np.random.default_rng(16)
    phi = gen.normal(size=(6, 3))
    psi = gen.normal(size=(6, 5))
    nets = _pretrained_nets(3, 5, seed=4)
    q, _ = np.linalg.qr(gen.normal(size=(3, 3)))
    base = ft_regularizer(phi, psi, nets)
    rotated = ft_regularizer(phi @ q, psi, nets)
    assert abs(base - rotated) > 1e-6  # contrast with the kernel objective


def test_ft_matches_reference_forward():
    gen = np.random.default_rng(17)
    phi = gen.normal(size=(4, 3))
    psi = gen.normal(size=(4, 5))
    nets = _pretrained_nets(3, 5, seed=5)
    t = _normalize(np.maximum(phi @ nets.tr_w.T + nets.tr_b, 0.0))
    e = _normalize(np.maximum(psi @ nets.enc_w.T + nets.enc_b, 0.0))
    want = float(((t - e) ** 2).sum() / 4)
    assert abs(ft_regularizer(phi, psi, nets) - want) <= 1e-12


def test_ft_requires_pretrained_paraphraser():
    nets = FtNets.init(3, 5, seed=6)
    with pytest.raises(StateError):
        ft_regularizer(np.ones((4, 3)), np.ones((4, 5)), nets)


def test_pretrain_reduces_reconstruction_error():
    gen = np.random.default_rng(18)
    psi = gen.normal(size=(30, 2))
    nets = FtNets.init(2, 2, seed=7)
    initial = float(((nets.decode(nets.encode(psi)) - psi) ** 2).sum() / 30)
    final = pretrain_paraphraser(psi, nets, steps=200, lr=1e-2)
    assert nets.pretrained
    assert final < initial


def test_pretrain_rank_one_reaches_pca_floor():
    gen = np.random.default_rng(19)
    coeffs = gen.uniform(0.5, 2.0, size=(40, 1))
    direction = np.array([[0.8, 0.6]])
    psi = coeffs @ direction  # rank-1, positive cone
    nets = FtNets.init(2, 2, seed=8)
    nets.enc_w = np.abs(nets.enc_w)  # keep the encoder in its linear regime
    final = pretrain_paraphraser(psi, nets, steps=3000, lr=1e-2)
    centered = psi - psi.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    pca_floor = float((svals[1:] ** 2).sum() / 40)  # = 0 for rank-1 data
    assert final <= pca_floor + 1e-4


def test_pretrain_deterministic():
    gen = np.random.default_rng(20)
    psi = gen.normal(size=(20, 3))
    nets1 = FtNets.init(2, 3, seed=9)
    nets2 = FtNets.init(2, 3, seed=9)
    pretrain_paraphraser(psi, nets1, steps=50, lr=1e-3)
    pretrain_paraphraser(psi, nets2, steps=50, lr=1e-3)
    assert np.array_equal(nets1.enc_w, nets2.enc_w)
    assert np.array_equal(nets1.dec_w, nets2.dec_w)


# ---------------------------------------------------------------------------
# span-vs-compression separation


def _span_instance(b=64, d_s=4, d_n=4, seed=21):
    gen = np.random.default_rng(seed)
    signal = gen.normal(size=(b, d_s))
    noise = gen.normal(size=(b, d_n))
    psi = np.hstack([signal, noise])
    return signal, noise, psi


def minimize_l2_dense(phi, psi, iters=2000):
    """Plain gradient descent with a Lipschitz step on the dense-mu objective."""
    b = phi.shape[0]
    phi_c, psi_c = _center(phi), _center(psi)
    lip = 2.0 * np.linalg.eigvalsh(psi_c.T @ psi_c).max() / b
    mu = np.zeros((phi.shape[1], psi.shape[1]))
    for _ in range(iters):
        resid = phi_c - psi_c @ mu.T
        grad = -2.0 / b * resid.T @ psi_c
        mu -= grad / lip
    return MuWeights(mode="dense", dense=mu)


def test_span_objective_reaches_zero_but_compression_cannot():
    signal, noise, psi = _span_instance()
    phi = signal
    b = phi.shape[0]

    mu = minimize_l2_dense(phi, psi)
    assert l2_regularizer(phi, psi, mu) <= 1e-6

    phi_c, psi_c = _center(phi), _center(psi)
    v_star = np.linalg.solve(phi_c.T @ phi_c, phi_c.T @ psi_c).T
    resid = psi_c - phi_c @ v_star.T
    oracle_min = float((resid * resid).sum() / b)
    noise_c = _center(noise)
    noise_var = float((noise_c * noise_c).sum() / b)
    assert oracle_min >= 0.5 * noise_var
    assert oracle_min > 0.0


def test_diagonal_mu_drives_kernel_distance_down_on_axis_aligned_signal():
    signal, _, psi = _span_instance(seed=22)
    phi = signal
    s = np.zeros((1, psi.shape[1]))

    from aft import optim

    slot = optim.AdamSlot.like(s)
    mu = MuWeights(mode="diagonal", s=s)
    for _ in range(800):
        tape = Tape()
        s_node = tape.param("mu.s", s)
        node = aft_node(
            tape, tape.constant(phi), tape.constant(psi), mu, {"mu.s": s_node}
        )
        grads = tape.gradients(node)
        optim.adam_update(s, grads["mu.s"], slot, 0.05)
    assert aft_regularizer(phi, psi, mu) <= 1e-3


# ---------------------------------------------------------------------------
# gradients of every trainable input


def test_aft_gradients_diagonal_mu(rng_matrix):
    phi = rng_matrix(4, 3, seed=30)
    psi = rng_matrix(4, 5, seed=31)
    params = {"phi": phi, "mu.s": rng_matrix(1, 5, seed=32)}

    def value(p):
        tape = Tape()
        mu = MuWeights(mode="diagonal", s=p["mu.s"])
        return aft_node(
            tape,
            tape.param("phi", p["phi"]),
            tape.constant(psi),
            mu,
            {"mu.s": tape.param("mu.s", p["mu.s"])},
        ).item()

    tape = Tape()
    mu = MuWeights(mode="diagonal", s=params["mu.s"])
    node = aft_node(
        tape,
        tape.param("phi", params["phi"]),
        tape.constant(psi),
        mu,
        {"mu.s": tape.param("mu.s", params["mu.s"])},
    )
    assert_gradients_match(value, params, tape.gradients(node))


def test_aft_gradients_rbf_and_dense(rng_matrix):
    phi = rng_matrix(5, 3, seed=33)
    psi = rng_matrix(5, 4, seed=34)
    params = {"phi": phi, "mu.dense": rng_matrix(4, 4, seed=35)}

    def value(p):
        tape = Tape()
        mu = MuWeights(mode="dense", dense=p["mu.dense"])
        return aft_node(
            tape,
            tape.param("phi", p["phi"]),
            tape.constant(psi),
            mu,
            {"mu.dense": tape.param("mu.dense", p["mu.dense"])},
            kernel="rbf",
        ).item()

    tape = Tape()
    mu = MuWeights(mode="dense", dense=params["mu.dense"])
    node = aft_node(
        tape,
        tape.param("phi", params["phi"]),
        tape.constant(psi),
        mu,
        {"mu.dense": tape.param("mu.dense", params["mu.dense"])},
        kernel="rbf",
    )
    assert_gradients_match(value, params, tape.gradients(node))


def test_l2_and_kd_gradients(rng_matrix):
    phi = rng_matrix(4, 3, seed=36)
    psi = rng_matrix(4, 2, seed=37)

    params = {"phi": phi, "mu.dense": rng_matrix(3, 2, seed=38)}

    def l2_value(p):
        tape = Tape()
        return l2_node(
            tape,
            tape.param("phi", p["phi"]),
            tape.constant(psi),
            tape.param("mu.dense", p["mu.dense"]),
        ).item()

    tape = Tape()
    node = l2_node(
        tape,
        tape.param("phi", params["phi"]),
        tape.constant(psi),
        tape.param("mu.dense", params["mu.dense"]),
    )
    assert_gradients_match(l2_value, params, tape.gradients(node))

    params = {"phi": phi, "kd.v": rng_matrix(2, 3, seed=39)}

    def kd_value(p):
        tape = Tape()
        return kd_node(
            tape,
            tape.param("phi", p["phi"]),
            tape.constant(psi),
            tape.param("kd.v", p["kd.v"]),
        ).item()

    tape = Tape()
    node = kd_node(
        tape,
        tape.param("phi", params["phi"]),
        tape.constant(psi),
        tape.param("kd.v", params["kd.v"]),
    )
    assert_gradients_match(kd_value, params, tape.gradients(node))


def test_rkd_gradient(rng_matrix):
    phi = rng_matrix(4, 3, seed=40)
    psi = rng_matrix(4, 3, seed=41)

    def value(p):
        tape = Tape()
        return rkd_node(tape, tape.param("phi", p["phi"]), psi).item()

    tape = Tape()
    node = rkd_node(tape, tape.param("phi", phi), psi)
    assert_gradients_match(value, {"phi": phi}, tape.gradients(node))


def test_ft_gradient(rng_matrix):
    phi = rng_matrix(4, 3, seed=42)
    psi = rng_matrix(4, 5, seed=43)
    nets = _pretrained_nets(3, 5, seed=44)
    params = {"phi": phi, "ft.tr_w": nets.tr_w.copy(), "ft.tr_b": rng_matrix(1, 3, seed=45)}

    def value(p):
        tape = Tape()
        return ft_node(
            tape,
            tape.param("phi", p["phi"]),
            psi,
            nets,
            {
                "ft.tr_w": tape.param("ft.tr_w", p["ft.tr_w"]),
                "ft.tr_b": tape.param("ft.tr_b", p["ft.tr_b"]),
            },
        ).item()

    tape = Tape()
    node = ft_node(
        tape,
        tape.param("phi", params["phi"]),
        psi,
        nets,
        {
            "ft.tr_w": tape.param("ft.tr_w", params["ft.tr_w"]),
            "ft.tr_b": tape.param("ft.tr_b", params["ft.tr_b"]),
        },
    )
    assert_gradients_match(value, params, tape.gradients(node))
