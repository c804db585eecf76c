"""Mode prediction and marginals for the supported output spaces."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.special import expit

from .energy import BILINEAR, EnergyModel, interaction_matrix, phi
from .errors import NotNSD, SolverFailure
from .spaces import BINARY, BIRKHOFF, PERMUTAHEDRON, perm_vector_to_matrix

NSD_TOL = 1e-8


@dataclass(frozen=True)
class ModeSolverConfig:
    max_sweeps: int = 100
    tol: float = 1e-9
    rounding_threshold: float = 0.5

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if not 0.0 < self.rounding_threshold < 1.0:
            raise ValueError("rounding_threshold must lie in (0, 1)")


def mode_unary(theta) -> np.ndarray:
    """Label ``j`` is on iff ``theta_j >= 0``."""
    return (np.asarray(theta) >= 0).astype(np.float64)


def marginals_unary(theta) -> np.ndarray:
    return expit(np.asarray(theta, dtype=np.float64))


def _quadratic_value(u, U, mu):
    return float(u @ mu + 0.5 * mu @ U @ mu)


def check_nsd(U, tol=NSD_TOL):
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise NotNSD(f"interaction matrix must be square, got {U.shape}")
    if not np.allclose(U, U.T, atol=tol, rtol=0.0):
        raise NotNSD("interaction matrix is not symmetric")
    top = np.linalg.eigvalsh(0.5 * (U + U.T))[-1] if U.size else 0.0
    if top > tol:
        raise NotNSD(f"interaction matrix has a positive eigenvalue {top:.3g}")


def coordinate_ascent(u, U, cfg: ModeSolverConfig = ModeSolverConfig(), mu0=None, trace=None):
    """Maximize ``<u, mu> + 1/2 mu^T U mu`` over the box ``[0, 1]^k``.

    Cyclic exact coordinate maximization; ``U`` must be symmetric NSD so every
    one-dimensional subproblem is concave. If ``trace`` is a list, the
    objective after every single coordinate update is appended to it.
    Returns ``(mu, n_sweeps)``.
    """
    u = np.asarray(u, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    check_nsd(U)
    k = u.shape[0]
    mu = expit(u) if mu0 is None else np.array(mu0, dtype=np.float64)
    value = _quadratic_value(u, U, mu)
    sweeps = 0
    for sweeps in range(1, cfg.max_sweeps + 1):
        before = value
        for j in range(k):
            slope = u[j] + U[j] @ mu - U[j, j] * mu[j]
            if U[j, j] < 0:
                mu[j] = min(max(slope / -U[j, j], 0.0), 1.0)
            else:
                # linear in mu_j; ties go to 1 like the unary threshold rule
                mu[j] = 1.0 if slope >= 0 else 0.0
            if trace is not None:
                trace.append(_quadratic_value(u, U, mu))
        value = _quadratic_value(u, U, mu)
        if value - before < cfg.tol:
            break
    return mu, sweeps


def mode_pairwise(u, U, cfg: ModeSolverConfig = ModeSolverConfig()):
    """Relaxed maximizer over ``[0,1]^k`` and its rounding to ``{0,1}^k``."""
    mu, _ = coordinate_ascent(u, U, cfg)
    return mu, (mu >= cfg.rounding_threshold).astype(np.float64)


def mode_permutahedron(theta) -> np.ndarray:
    """Rank ``k`` to the largest score; equal scores favour the lower index."""
    theta = np.asarray(theta, dtype=np.float64)
    k = theta.shape[-1]
    # stable ascending sort on -theta puts the largest first, lower index first on ties
    order = np.argsort(-theta, axis=-1, kind="stable")
    ranks = np.empty_like(theta)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(k, 0, -1, dtype=np.float64), theta.shape), axis=-1)
    return ranks


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect assignment of a square matrix, O(n^3).

    Shortest augmenting path with row/column potentials. Returns
    ``(assignment, total)`` with ``assignment[i]`` the column of row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise SolverFailure("cost matrix has non-finite entries")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row assigned to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    assignment[match[1:] - 1] = np.arange(n)
    return assignment, float(cost[np.arange(n), assignment].sum())


def mode_birkhoff(theta) -> np.ndarray:
    """Permutation matrix maximizing ``<theta, P>``, flattened row-major."""
    theta = np.asarray(theta, dtype=np.float64)
    k = int(round(np.sqrt(theta.size)))
    theta = theta.reshape(k, k)
    assignment, _ = hungarian(-theta)
    return perm_vector_to_matrix(assignment + 1.0)


def project_permutahedron(z, omega=1.0) -> np.ndarray:
    """Euclidean projection of ``z / omega`` onto the convex hull of permutations of ``(1..k)``.

    Isotonic regression is positively homogeneous, so the division by
    ``omega`` is applied to the residual only. This keeps tiny ``omega``
    from swamping the ``(1..k)`` offsets.
    """
    z = np.asarray(z, dtype=np.float64)
    if omega <= 0:
        raise ValueError("omega must be positive")
    k = z.shape[0]
    order = np.argsort(-z, kind="stable")
    w = np.arange(k, 0, -1, dtype=np.float64)
    r = z[order] - omega * w
    resid = (r - isotonic_regression(r, increasing=False).x) / omega
    out = np.empty(k)
    out[order] = w + resid
    return out


def predict(model: EnergyModel, xs, cfg: ModeSolverConfig = ModeSolverConfig()) -> np.ndarray:
    """Mode predictions for a batch of inputs, one encoded output per row."""
    theta, _ = model.logits(np.atleast_2d(xs))
    space = model.space
    if space.kind == BINARY:
        if model.coupling.kind == BILINEAR:
            return mode_unary(theta)
        u, _ = model.coupling.split(theta)
        U = interaction_matrix(model.coupling, theta)
        return np.stack([mode_pairwise(u[i], U[i], cfg)[1] for i in range(len(theta))])
    if space.kind == PERMUTAHEDRON:
        return mode_permutahedron(theta)
    if space.kind == BIRKHOFF:
        return np.stack([mode_birkhoff(t) for t in theta])
    raise SolverFailure(f"no mode solver for {space}")


def relaxed_argmax(model: EnergyModel, theta, omega=0.0, cfg: ModeSolverConfig = ModeSolverConfig()):
    """``argmax_{mu in conv(Y)} Phi(theta, mu) - omega/2 |mu|^2`` for each row of ``theta``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    space, coupling = model.space, model.coupling
    if omega < 0:
        raise ValueError("omega must be nonnegative")
    if space.kind == BINARY and coupling.kind == BILINEAR:
        if omega == 0:
            return mode_unary(theta)
        with np.errstate(over="ignore"):
            return np.clip(theta / omega, 0.0, 1.0)
    if space.kind == BINARY:
        u, _ = coupling.split(theta)
        U = interaction_matrix(coupling, theta) - omega * np.eye(space.k)
        return np.stack([coordinate_ascent(u[i], U[i], cfg)[0] for i in range(len(theta))])
    if space.kind == PERMUTAHEDRON:
        if omega == 0:
            return mode_permutahedron(theta)
        return np.stack([project_permutahedron(t, omega) for t in theta])
    if omega == 0:
        return np.stack([mode_birkhoff(t) for t in theta])
    raise SolverFailure("quadratically regularized maximization over the Birkhoff polytope is not supported")


def relaxed_value(model: EnergyModel, theta, mu, omega=0.0):
    return phi(model.coupling, theta, mu) - 0.5 * omega * np.sum(np.asarray(mu) ** 2, axis=-1)
