"""Couplings ``Phi(theta, y)`` and energies ``g(x, y) = Phi(h(x), y)``.

``bilinear``           ``<theta, y>`` with ``theta`` the size of the encoding.
``linear_quadratic``   ``<u, y> + 1/2 y^T U y`` with ``U = -A A^T``; ``theta``
                       packs ``u`` (length ``k``) followed by ``A`` (``k x r``,
                       row-major). The factorization keeps ``U`` negative
                       semidefinite without a projection step.

All coupling functions broadcast: ``theta`` has shape ``(..., P)`` and ``mu``
shape ``(..., D)``; leading axes broadcast against each other. As a special
case a ``(B, P)`` ``theta`` with a ``(B, M, D)`` ``mu`` pairs ``theta[b]`` with
every ``mu[b, m]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .errors import ShapeMismatch
from .spaces import BINARY, OutputSpace

BILINEAR = "bilinear"
LINEAR_QUADRATIC = "linear_quadratic"


@dataclass(frozen=True)
class Coupling:
    kind: str
    k: int
    encoding_dim: int
    rank: int = 0

    def __post_init__(self):
        if self.kind not in (BILINEAR, LINEAR_QUADRATIC):
            raise ValueError(f"unknown coupling {self.kind!r}")
        if self.kind == LINEAR_QUADRATIC:
            if self.encoding_dim != self.k:
                raise ValueError("linear_quadratic coupling needs vector encodings of length k")
            if self.rank < 1:
                object.__setattr__(self, "rank", self.k)

    @property
    def theta_dim(self) -> int:
        if self.kind == BILINEAR:
            return self.encoding_dim
        return self.k + self.k * self.rank

    def split(self, theta):
        """``(u, A)`` views for the linear-quadratic layout."""
        theta = np.asarray(theta)
        u = theta[..., : self.k]
        A = theta[..., self.k:].reshape(theta.shape[:-1] + (self.k, self.rank))
        return u, A

    def to_dict(self):
        return {"kind": self.kind, "k": self.k, "encoding_dim": self.encoding_dim, "rank": self.rank}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def coupling_for(space: OutputSpace, kind: str = BILINEAR, rank: int = 0) -> Coupling:
    return Coupling(kind, space.k, space.encoding_dim, rank)


def interaction_matrix(coupling: Coupling, theta) -> np.ndarray:
    """The pairwise matrix ``U = -A A^T`` (zero for bilinear couplings)."""
    theta = np.asarray(theta, dtype=np.float64)
    if coupling.kind == BILINEAR:
        return np.zeros(theta.shape[:-1] + (coupling.k, coupling.k))
    _, A = coupling.split(theta)
    return -A @ np.swapaxes(A, -1, -2)


def _check(coupling, theta, mu):
    if theta.shape[-1] != coupling.theta_dim:
        raise ShapeMismatch(f"theta has width {theta.shape[-1]}, coupling expects {coupling.theta_dim}")
    if mu.shape[-1] != coupling.encoding_dim:
        raise ShapeMismatch(f"mu has width {mu.shape[-1]}, coupling expects {coupling.encoding_dim}")


def phi(coupling: Coupling, theta, mu) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    _check(coupling, theta, mu)
    if coupling.kind == BILINEAR:
        if theta.ndim == 2 and mu.ndim == 3:
            return np.matmul(mu, theta[:, :, None])[..., 0]
        return np.sum(theta * mu, axis=-1)
    u, A = coupling.split(theta)
    if theta.ndim == 2 and mu.ndim == 3:
        lin = np.matmul(mu, u[:, :, None])[..., 0]
        proj = np.matmul(mu, A)
    else:
        lin = np.sum(u * mu, axis=-1)
        proj = np.sum(mu[..., :, None] * A, axis=-2)
    return lin - 0.5 * np.sum(proj * proj, axis=-1)


def phi_grad(coupling: Coupling, theta, mu, weights=None) -> np.ndarray:
    """Weighted sum of ``dPhi(theta_b, mu_bm)/dtheta_b`` over the sample axis.

    ``theta`` is ``(B, P)``; ``mu`` is ``(B, M, D)`` or a shared ``(M, D)``;
    ``weights`` is ``(B, M)`` (defaults to ones). Returns ``(B, P)``. A 2-d
    ``mu`` of shape ``(B, D)`` with ``weights`` of shape ``(B,)`` is also
    accepted (one output per example).
    """
    theta = np.asarray(theta, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    B = theta.shape[0]
    if weights is not None and np.ndim(weights) == 1:
        mu = mu[:, None, :]
        weights = np.asarray(weights, dtype=np.float64)[:, None]
    if mu.ndim == 2:
        mu = np.broadcast_to(mu, (B,) + mu.shape)
    if weights is None:
        weights = np.ones(mu.shape[:2])
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), mu.shape[:2])
    _check(coupling, theta, mu)
    wy = np.matmul(weights[:, None, :], mu)[:, 0]
    if coupling.kind == BILINEAR:
        return wy
    _, A = coupling.split(theta)
    proj = np.matmul(mu, A)
    # d/dA of -1/2 |A^T y|^2 is -y (A^T y)^T
    dA = -np.matmul(np.swapaxes(mu * weights[..., None], 1, 2), proj)
    return np.concatenate([wy, dA.reshape(B, -1)], axis=1)


@dataclass
class EnergyModel:
    h_spec: nets.NetSpec
    h_params: np.ndarray
    coupling: Coupling
    space: OutputSpace

    def __post_init__(self):
        if self.h_spec.output_dim != self.coupling.theta_dim:
            raise ShapeMismatch(
                f"logit network emits {self.h_spec.output_dim} values, "
                f"coupling expects {self.coupling.theta_dim}"
            )

    @property
    def is_unary(self) -> bool:
        return self.coupling.kind == BILINEAR and self.space.kind == BINARY

    def logits(self, x):
        return nets.forward(self.h_spec, self.h_params, x)

    def with_params(self, params):
        return EnergyModel(self.h_spec, params, self.coupling, self.space)


@dataclass
class EnergyTape:
    h_tape: nets.EvalTape
    theta: np.ndarray
    y: np.ndarray


def energy(model: EnergyModel, x, y) -> tuple[np.ndarray, EnergyTape]:
    """``g(x, y)`` for a batch of inputs paired with a batch of outputs."""
    theta, h_tape = model.logits(x)
    y = np.asarray(y, dtype=np.float64)
    return phi(model.coupling, theta, y), EnergyTape(h_tape, theta, y)


def grad_energy(model: EnergyModel, tape: EnergyTape, scale=1.0) -> np.ndarray:
    """``scale * d/dw sum_b g(x_b, y_b)`` (``scale`` may be per example)."""
    theta = np.atleast_2d(tape.theta)
    y = np.atleast_2d(tape.y)
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), theta.shape[:1])
    dtheta = phi_grad(model.coupling, theta, y, scale)
    if tape.h_tape.squeeze:
        dtheta = dtheta[0]
    return nets.backward(model.h_spec, model.h_params, tape.h_tape, dtheta)
