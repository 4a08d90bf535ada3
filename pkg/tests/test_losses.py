import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fnac import ndtensor as nd
from fnac.losses import (HyperParams, adjacency, fns_loss, l1_mean, nce_loss, sim_matrix,
                         tne_loss, total_loss)
from fnac.ndtensor import Tape, Tensor, backward


def unit_rows(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# --- brute-force references, written loop-by-loop from the formulas ---------


def naive_nce(s, tau):
    b = len(s)
    total = 0.0
    for i in range(b):
        row = sum(math.exp(s[i][j] / tau) for j in range(b))
        col = sum(math.exp(s[j][i] / tau) for j in range(b))
        total += -math.log(math.exp(s[i][i] / tau) / row) - math.log(math.exp(s[i][i] / tau) / col)
    return total / b


def naive_softmax_rows(m, tau):
    out = []
    for row in m:
        e = [math.exp(v / tau) for v in row]
        z = sum(e)
        out.append([v / z for v in e])
    return out


def naive_l1(p, q):
    b = len(p)
    return sum(abs(p[i][j] - q[i][j]) for i in range(b) for j in range(b)) / (b * b)


def naive_gram(z):
    return [[sum(x * y for x, y in zip(zi, zj)) for zj in z] for zi in z]


def naive_fns(s, za, zv, tau, tau_adj):
    b = len(s)
    p_a = naive_softmax_rows(s, tau)
    p_v = naive_softmax_rows([[s[j][i] for j in range(b)] for i in range(b)], tau)
    s_a = naive_softmax_rows(naive_gram(za), tau_adj)
    s_v = naive_softmax_rows(naive_gram(zv), tau_adj)
    return ((naive_l1(p_a, s_a) + naive_l1(p_v, s_a)) / 2,
            (naive_l1(p_a, s_v) + naive_l1(p_v, s_v)) / 2)


def naive_tne(za, zs, tau_adj):
    return naive_l1(naive_softmax_rows(naive_gram(za), tau_adj),
                    naive_softmax_rows(naive_gram(zs), tau_adj))


# --- sim_matrix ---------------------------------------------------------------


def test_sim_matrix_orthonormal_is_identity():
    eye = np.eye(3, 5)
    np.testing.assert_array_equal(sim_matrix(Tensor(eye), Tensor(eye)).data, np.eye(3))


def test_sim_matrix_self_similarity_diagonal_and_symmetry():
    z = unit_rows(np.random.default_rng(0), 6, 4)
    s = sim_matrix(Tensor(z), Tensor(z)).data
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)
    np.testing.assert_allclose(s, s.T, atol=1e-12)
    assert (np.abs(s) <= 1 + 1e-12).all()


# --- nce ----------------------------------------------------------------------


def test_nce_single_sample_is_zero():
    assert nce_loss(Tensor([[0.37]]), 0.07).item() == 0.0


def test_nce_two_sample_identity_case():
    value = nce_loss(Tensor(np.eye(2)), 1.0).item()
    assert value == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-10)
    assert value == pytest.approx(0.6265, abs=1e-4)


def test_nce_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = rng.uniform(-1, 1, (3, 3))
        assert nce_loss(Tensor(s), 0.2).item() == pytest.approx(naive_nce(s.tolist(), 0.2), abs=1e-10)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(0, 4), st.floats(0.01, 0.5))
def test_nce_strictly_decreases_with_positive_similarity(seed, i, delta):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, (5, 5))
    bumped = s.copy()
    bumped[i, i] += delta
    assert nce_loss(Tensor(bumped), 0.1).item() < nce_loss(Tensor(s), 0.1).item()


# --- adjacency ---------------------------------------------------------------


def test_adjacency_single_row():
    assert adjacency(Tensor([[0.6, 0.8]]), 0.03).data.tolist() == [[1.0]]


def test_adjacency_identical_rows_uniform():
    z = np.tile([[0.6, 0.8]], (4, 1))
    np.testing.assert_allclose(adjacency(Tensor(z), 0.03).data, 0.25, atol=1e-15)


def test_adjacency_two_classes():
    z = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    s = adjacency(Tensor(z), 1.0).data
    e = math.e
    within, cross = e / (2 * e + 2), 1 / (2 * e + 2)
    expected = np.array([[within, within, cross, cross]] * 2 + [[cross, cross, within, within]] * 2)
    np.testing.assert_allclose(s, expected, rtol=1e-14)


# --- fns / tne ---------------------------------------------------------------


def test_fns_zero_for_aligned_modalities():
    z = Tensor(unit_rows(np.random.default_rng(2), 5, 4))
    s_a = adjacency(z, 0.1)
    f1, f2 = fns_loss(sim_matrix(z, z), s_a, s_a, 0.1)
    assert f1.item() == pytest.approx(0, abs=1e-15) and f2.item() == pytest.approx(0, abs=1e-15)


def test_l1_distance_identity_vs_uniform():
    assert l1_mean(Tensor(np.eye(2)), Tensor(np.full((2, 2), 0.5))).item() == 0.5


def test_fns_limit_of_sharp_identity():
    # sims/tau very sharp -> softmax is the identity in both directions
    f1, f2 = fns_loss(Tensor(np.eye(2)), Tensor(np.full((2, 2), 0.5)), Tensor(np.full((2, 2), 0.5)), 1e-3)
    assert f1.item() == pytest.approx(0.5, abs=1e-12)
    assert f2.item() == pytest.approx(0.5, abs=1e-12)


def test_fns_and_tne_match_naive_loops():
    rng = np.random.default_rng(3)
    for _ in range(100):
        b = int(rng.integers(2, 6))
        za, zv, zs = (unit_rows(rng, b, 4) for _ in range(3))
        tau, tau_adj = rng.uniform(0.05, 1.0, 2)
        s = sim_matrix(Tensor(za), Tensor(zv))
        s_a, s_v = adjacency(Tensor(za), tau_adj), adjacency(Tensor(zv), tau_adj)
        f1, f2 = fns_loss(s, s_a, s_v, tau)
        n1, n2 = naive_fns(s.data.tolist(), za.tolist(), zv.tolist(), tau, tau_adj)
        assert f1.item() == pytest.approx(n1, abs=1e-10)
        assert f2.item() == pytest.approx(n2, abs=1e-10)
        t = tne_loss(s_a, Tensor(zs), tau_adj)
        assert t.item() == pytest.approx(naive_tne(za.tolist(), zs.tolist(), tau_adj), abs=1e-10)


def test_tne_zero_cases():
    z = unit_rows(np.random.default_rng(4), 4, 3)
    assert tne_loss(adjacency(Tensor(z), 0.1), Tensor(z), 0.1).item() == 0.0
    one = Tensor([[1.0, 0.0]])
    assert tne_loss(adjacency(one, 0.1), Tensor([[0.0, 1.0]]), 0.1).item() == 0.0


# --- total ---------------------------------------------------------------------


def test_total_with_zero_weights_is_contrast():
    parts = [Tensor(v) for v in (2.5, 0.3, 0.2, 0.1)]
    out = total_loss(*parts, HyperParams(alpha=0, beta=0, gamma=0))
    assert out.total.item() == 2.5


def test_total_unit_case():
    parts = [Tensor(1.0) for _ in range(4)]
    assert total_loss(*parts, HyperParams(alpha=1, beta=1, gamma=1)).total.item() == 4.0


def test_total_linear_combination():
    rng = np.random.default_rng(5)
    for _ in range(50):
        c, f1, f2, t = rng.uniform(0, 3, 4)
        a, b, g = rng.uniform(0, 10, 3)
        out = total_loss(Tensor(c), Tensor(f1), Tensor(f2), Tensor(t), HyperParams(alpha=a, beta=b, gamma=g))
        assert out.total.item() == pytest.approx(c + a * f1 + b * f2 + g * t, abs=1e-12)


@pytest.mark.parametrize("kw", [dict(tau=0), dict(tau_adj=-1), dict(alpha=-0.1), dict(gamma=-1)])
def test_hyperparams_validation(kw):
    with pytest.raises(ValueError):
        HyperParams(**kw)


# --- invariants ------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7))
def test_losses_nonnegative_and_permutation_invariant(seed, b):
    rng = np.random.default_rng(seed)
    za, zv, zs = (unit_rows(rng, b, 5) for _ in range(3))
    perm = rng.permutation(b)

    def losses(za, zv, zs):
        s = sim_matrix(Tensor(za), Tensor(zv))
        s_a, s_v = adjacency(Tensor(za), 0.1), adjacency(Tensor(zv), 0.1)
        f1, f2 = fns_loss(s, s_a, s_v, 0.1)
        return [nce_loss(s, 0.1).item(), f1.item(), f2.item(), tne_loss(s_a, Tensor(zs), 0.1).item()]

    ref = losses(za, zv, zs)
    assert all(v >= 0 for v in ref)
    np.testing.assert_allclose(losses(za[perm], zv[perm], zs[perm]), ref, rtol=0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adjacency_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    z = unit_rows(rng, int(rng.integers(1, 9)), 4)
    s = adjacency(Tensor(z), float(rng.uniform(0.01, 2))).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_detached_adjacency_blocks_gradient():
    rng = np.random.default_rng(6)
    raw = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    zv = Tensor(unit_rows(rng, 4, 5))
    zs = Tensor(unit_rows(rng, 4, 5))
    with Tape() as tape:
        za = nd.l2_normalize(raw)
        s_a = adjacency(za, 0.1, detach=True)
        # the adjacency path is the only route from raw into these losses
        f1, _ = fns_loss(sim_matrix(Tensor(za.data), zv), s_a, s_a, 0.1)
        loss = nd.add(f1, tne_loss(s_a, zs, 0.1))
    backward(loss, tape)
    assert raw.grad is None or not raw.grad.any()

    raw.grad = None
    with Tape() as tape:
        za = nd.l2_normalize(raw)
        loss = tne_loss(adjacency(za, 0.1, detach=False), zs, 0.1)
    backward(loss, tape)
    assert np.abs(raw.grad).max() > 0


def test_scaling_audio_before_normalization_leaves_losses_unchanged():
    rng = np.random.default_rng(7)
    raw = rng.standard_normal((5, 4))
    zv = Tensor(unit_rows(rng, 5, 4))
    zs = Tensor(unit_rows(rng, 5, 4))

    def losses(x):
        za = nd.l2_normalize(Tensor(x))
        s = sim_matrix(za, zv)
        s_a = adjacency(za, 0.1)
        return [nce_loss(s, 0.1).item(), *(v.item() for v in fns_loss(s, s_a, adjacency(zv, 0.1), 0.1)),
                tne_loss(s_a, zs, 0.1).item()]

    np.testing.assert_allclose(losses(raw * 7.3), losses(raw), rtol=0, atol=1e-12)
