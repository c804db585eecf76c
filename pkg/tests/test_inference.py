import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import brute_binary, brute_perms, make_model
from scipy.optimize import linear_sum_assignment, minimize

from jointebm.errors import NotNSD, SolverFailure
from jointebm.inference import (
    ModeSolverConfig,
    check_nsd,
    coordinate_ascent,
    hungarian,
    marginals_unary,
    mode_birkhoff,
    mode_pairwise,
    mode_permutahedron,
    mode_unary,
    predict,
    project_permutahedron,
    relaxed_argmax,
    relaxed_value,
)
from jointebm.spaces import binary_vectors, contains, perm_vector_to_matrix, permutation_matrices, permutation_vectors

finite = st.floats(-10, 10, allow_nan=False)


def _quad(u, U, mu):
    return u @ mu + 0.5 * mu @ U @ mu


def _random_nsd(rng, k, scale=1.0):
    A = rng.normal(scale=scale, size=(k, k))
    return -A @ A.T


def test_config_validation():
    with pytest.raises(ValueError):
        ModeSolverConfig(max_sweeps=0)
    with pytest.raises(ValueError):
        ModeSolverConfig(tol=-1.0)
    with pytest.raises(ValueError):
        ModeSolverConfig(rounding_threshold=1.0)


# --------------------------------------------------------------------------
# unary


def test_mode_unary_examples():
    assert np.array_equal(mode_unary([0.5, -0.5]), [1.0, 0.0])
    assert np.array_equal(mode_unary(np.zeros(4)), np.ones(4))


def test_mode_unary_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = rng.integers(1, 5)
        theta = rng.normal(size=k)
        ys = brute_binary(k)
        assert np.array_equal(mode_unary(theta), ys[np.argmax(ys @ theta)])


def test_marginals_unary():
    assert np.array_equal(marginals_unary(np.zeros(3)), np.full(3, 0.5))
    assert marginals_unary([40.0])[0] == pytest.approx(1.0)
    rng = np.random.default_rng(1)
    theta = rng.normal(size=3)
    ys = brute_binary(3)
    p = np.exp(ys @ theta)
    p /= p.sum()
    assert np.allclose(marginals_unary(theta), p @ ys, atol=1e-12, rtol=0)


# --------------------------------------------------------------------------
# pairwise


def test_pairwise_zero_interaction_is_unary():
    rng = np.random.default_rng(2)
    for _ in range(50):
        u = rng.normal(size=5)
        u[rng.integers(5)] = 0.0
        mu, sweeps = coordinate_ascent(u, np.zeros((5, 5)), ModeSolverConfig(max_sweeps=1))
        assert sweeps == 1
        assert np.array_equal(mu, mode_unary(u))


def test_pairwise_interior_stationary_point():
    mu, y = mode_pairwise(np.array([1.0, 1.0]), -np.eye(2))
    assert np.allclose(mu, [1.0, 1.0])
    assert np.array_equal(y, [1.0, 1.0])


def _box_max(u, U, rng):
    """Global box maximum by multi-start L-BFGS-B (the problem is concave)."""
    best = -np.inf
    for start in [np.full(len(u), 0.5)] + list(rng.random((10, len(u)))):
        r = minimize(lambda m: -_quad(u, U, m), start, jac=lambda m: -(u + U @ m),
                     bounds=[(0, 1)] * len(u), method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12})
        best = max(best, -r.fun)
    return best


def test_pairwise_against_box_oracle_and_vertices():
    rng = np.random.default_rng(3)
    cfg = ModeSolverConfig(max_sweeps=10_000, tol=1e-14)
    beats_random_vertex = 0
    for _ in range(100):
        k = int(rng.integers(1, 5))
        u = rng.normal(scale=2.0, size=k)
        U = _random_nsd(rng, k)
        mu, y = mode_pairwise(u, U, cfg)
        assert np.all((mu >= 0) & (mu <= 1))
        assert _quad(u, U, mu) >= _box_max(u, U, rng) - 1e-6
        v = rng.integers(0, 2, size=k).astype(float)
        beats_random_vertex += _quad(u, U, y) >= _quad(u, U, v)
    assert beats_random_vertex >= 95


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_coordinate_ascent_monotone_per_update(k, seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(scale=3.0, size=k)
    U = _random_nsd(rng, k)
    trace = []
    mu0 = rng.random(k)
    coordinate_ascent(u, U, ModeSolverConfig(max_sweeps=20, tol=0.0), mu0=mu0, trace=trace)
    values = np.r_[_quad(u, U, mu0), trace]
    assert np.all(np.diff(values) >= -1e-12 * (1 + np.abs(values[:-1])))


def test_nsd_errors():
    with pytest.raises(NotNSD):
        check_nsd(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(NotNSD):
        check_nsd(np.eye(2))
    with pytest.raises(NotNSD):
        coordinate_ascent(np.zeros(2), np.array([[-1.0, 2.0], [2.0, -1.0]]))
    with pytest.raises(NotNSD):
        check_nsd(np.zeros((2, 3)))
    check_nsd(-np.eye(3))
    check_nsd(np.zeros((3, 3)))


def test_rounding_threshold():
    mu, y = mode_pairwise(np.array([0.3]), -np.eye(1), ModeSolverConfig(rounding_threshold=0.25))
    assert mu[0] == pytest.approx(0.3) and y[0] == 1.0
    _, y = mode_pairwise(np.array([0.3]), -np.eye(1))
    assert y[0] == 0.0


# --------------------------------------------------------------------------
# permutahedron


def test_mode_permutahedron_examples():
    assert np.array_equal(mode_permutahedron([0.3, -1.2, 2.0]), [2.0, 1.0, 3.0])
    assert np.array_equal(mode_permutahedron(np.full(4, 0.7)), [4.0, 3.0, 2.0, 1.0])


def test_mode_permutahedron_matches_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(100):
        k = int(rng.integers(1, 7))
        theta = rng.normal(size=k)
        perms = brute_perms(k)
        y = mode_permutahedron(theta)
        assert contains(permutation_vectors(k), y[None])[0]
        assert theta @ y == pytest.approx(np.max(perms @ theta), abs=1e-12)


def test_mode_permutahedron_batched():
    rng = np.random.default_rng(5)
    theta = rng.normal(size=(6, 4))
    assert np.array_equal(mode_permutahedron(theta), np.stack([mode_permutahedron(t) for t in theta]))


# --------------------------------------------------------------------------
# Birkhoff / Hungarian


def test_mode_birkhoff_examples():
    P = mode_birkhoff(np.array([[1.0, 2.0], [3.0, 1.0]])).reshape(2, 2)
    assert np.array_equal(P, [[0, 1], [1, 0]])
    assert np.sum(P * [[1, 2], [3, 1]]) == 5
    assert np.array_equal(mode_birkhoff(np.eye(4)).reshape(4, 4), np.eye(4))


def test_hungarian_matches_enumeration_and_scipy():
    rng = np.random.default_rng(6)
    for _ in range(100):
        k = int(rng.integers(1, 7))
        cost = rng.normal(size=(k, k))
        assignment, total = hungarian(cost)
        assert sorted(assignment) == list(range(k))
        brute = min(cost[np.arange(k), list(p)].sum() for p in itertools.permutations(range(k)))
        assert total == pytest.approx(brute, abs=1e-12)
        rows, cols = linear_sum_assignment(cost)
        assert total == pytest.approx(cost[rows, cols].sum(), abs=1e-12)


def test_mode_birkhoff_matches_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(100):
        k = int(rng.integers(1, 7))
        theta = rng.normal(size=(k, k))
        P = mode_birkhoff(theta)
        assert contains(permutation_matrices(k), P[None])[0]
        vals = [theta.ravel() @ perm_vector_to_matrix(p) for p in brute_perms(k)]
        assert theta.ravel() @ P == pytest.approx(max(vals), abs=1e-12)


def test_hungarian_integer_ties_and_errors():
    assignment, total = hungarian(np.ones((5, 5)))
    assert total == 5.0 and sorted(assignment) == list(range(5))
    with pytest.raises(ValueError):
        hungarian(np.ones((2, 3)))
    with pytest.raises(SolverFailure):
        hungarian(np.array([[np.inf, 0.0], [0.0, 1.0]]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=finite), st.floats(0.01, 100))
def test_modes_scale_invariant(theta, c):
    assert np.array_equal(mode_unary(c * theta), mode_unary(theta))
    # positive scaling can merge nearly tied scores through rounding; skip those
    gaps = np.abs(theta[:, None] - theta[None, :])[np.triu_indices(4, 1)]
    if np.all((gaps == 0) | (gaps > 1e-6 * (1 + np.abs(theta).max()))):
        assert np.array_equal(mode_permutahedron(c * theta), mode_permutahedron(theta))
        M = theta.reshape(2, 2)
        if abs(np.trace(M) - np.trace(M[::-1])) > 1e-6 * (1 + np.abs(theta).max()):
            assert np.array_equal(mode_birkhoff(c * M), mode_birkhoff(M))


# --------------------------------------------------------------------------
# projection and relaxed maximization


def test_project_permutahedron_fixed_points_and_oracle():
    rng = np.random.default_rng(8)
    assert np.allclose(project_permutahedron(np.array([3.0, 1.0, 2.0])), [3.0, 1.0, 2.0])
    assert np.allclose(project_permutahedron(np.zeros(3)), [2.0, 2.0, 2.0])
    for _ in range(50):
        k = int(rng.integers(2, 5))
        z = rng.normal(scale=3.0, size=k)
        p = project_permutahedron(z)
        verts = brute_perms(k)
        # optimality: <z - p, v - p> <= 0 for every vertex
        assert np.max((verts - p) @ (z - p)) <= 1e-9
        assert p.sum() == pytest.approx(k * (k + 1) / 2)


def test_project_permutahedron_tiny_omega_reaches_vertex():
    theta = np.array([0.3, -1.2, 2.0])
    assert np.allclose(project_permutahedron(theta, 1e-300), mode_permutahedron(theta))


def test_relaxed_argmax_omega_zero_is_mode():
    rng = np.random.default_rng(9)
    for space in (binary_vectors(4), permutation_vectors(4), permutation_matrices(3)):
        g = make_model(space, rng=rng)
        xs = rng.normal(size=(3, 3))
        theta, _ = g.logits(xs)
        assert np.array_equal(relaxed_argmax(g, theta, 0.0), predict(g, xs))


def test_relaxed_argmax_binary_is_box_maximum():
    rng = np.random.default_rng(10)
    g = make_model(binary_vectors(3), coupling="linear_quadratic", rng=rng, scale=2)
    theta, _ = g.logits(rng.normal(size=(4, 3)))
    cfg = ModeSolverConfig(max_sweeps=10_000, tol=1e-15)
    mu = relaxed_argmax(g, theta, 0.7, cfg)
    for i in range(4):
        best = max(relaxed_value(g, theta[i], m, 0.7) for m in rng.random((2000, 3)))
        assert relaxed_value(g, theta[i], mu[i], 0.7) >= best - 1e-12


def test_relaxed_argmax_errors():
    rng = np.random.default_rng(11)
    g = make_model(permutation_matrices(3), rng=rng)
    theta, _ = g.logits(rng.normal(size=(1, 3)))
    with pytest.raises(SolverFailure):
        relaxed_argmax(g, theta, 1.0)
    with pytest.raises(ValueError):
        relaxed_argmax(g, theta, -1.0)


def test_predict_pairwise_uses_rounding():
    rng = np.random.default_rng(12)
    g = make_model(binary_vectors(4), coupling="linear_quadratic", rng=rng, scale=2)
    xs = rng.normal(size=(5, 3))
    out = predict(g, xs)
    assert out.shape == (5, 4) and np.all((out == 0) | (out == 1))
