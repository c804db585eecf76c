"""Training objectives: the min-min objective, exact oracles and baselines.

The min-min objective for one example ``(x, y)`` is::

    tau(x) + E_{y'~q}[ f*(g(x, y') - tau(x)) ] - g(x, y)

where ``f*`` is the conjugate of an f-divergence generator restricted to the
nonnegative reals. With the KL generator ``f*(v) = exp(v) - 1`` and the
minimizing ``tau`` is the log-partition ``log E_q exp g``; with the chi-square
generator (sparsemax) ``tau`` is the threshold of a sparse density
``q(y) [g(x, y) - tau(x)]_+``.

Every function returns *exact* gradients of the value it reports; sampled
objectives are exact gradients of the sampled value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from . import nets
from .energy import EnergyModel, phi, phi_grad
from .errors import CapExceeded
from .inference import ModeSolverConfig, relaxed_argmax, relaxed_value
from .spaces import (
    BINARY,
    BIRKHOFF,
    DEFAULT_CAP,
    OutputSpace,
    enumerate_space,
    is_enumerable,
    perm_vector_to_matrix,
    sample_uniform,
    uniform_mass,
)


@dataclass(frozen=True)
class FGenerator:
    """Conjugate ``f*`` of a generator restricted to ``R_+`` and its derivative.

    For chi-square the constant ``1/2`` of the true conjugate is dropped, so
    values match ``tau + 1/2 E_q [g - tau]_+^2``; gradients are unaffected.
    """

    kind: str

    def conjugate(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "kl":
            return np.expm1(v)
        return 0.5 * np.maximum(v, 0.0) ** 2

    def conjugate_deriv(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "kl":
            return np.exp(v)
        return np.maximum(v, 0.0)


KL = FGenerator("kl")
CHI_SQUARE = FGenerator("chi_square")
GENERATORS = {"kl": KL, "chi_square": CHI_SQUARE, "logistic": KL, "sparsemax": CHI_SQUARE}


def get_generator(name) -> FGenerator:
    if isinstance(name, FGenerator):
        return name
    try:
        return GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown f-divergence generator {name!r}") from None


@dataclass
class Batch:
    xs: np.ndarray
    ys: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        self.ys = np.atleast_2d(np.asarray(self.ys, dtype=np.float64))
        self.ids = np.atleast_1d(np.asarray(self.ids, dtype=np.int64))
        if not len(self.xs) == len(self.ys) == len(self.ids):
            raise ValueError("batch arrays disagree on the number of examples")

    def __len__(self):
        return len(self.xs)


@dataclass
class LossValueAndGrads:
    value: float
    grad_g: np.ndarray
    grad_tau: np.ndarray
    per_example: np.ndarray | None = None


def tau_inputs(tau: nets.Network, batch: Batch):
    return batch.ids if tau.spec.kind == "table" else batch.xs


def _fy_terms(g, tau, f, batch, samples, weights):
    """Shared value/gradient computation given prior samples and their weights.

    ``samples`` is ``(B, M, D)`` or a shared ``(M, D)``; ``weights`` is
    broadcastable to ``(B, M)``.
    """
    B = len(batch)
    theta, h_tape = g.logits(batch.xs)
    t_out, t_tape = tau.forward(tau_inputs(tau, batch))
    t = t_out[:, 0]
    if samples.ndim == 2:
        energies = phi(g.coupling, theta[:, None, :], samples)
    else:
        energies = phi(g.coupling, theta, samples)
    g_data = phi(g.coupling, theta, batch.ys)
    delta = energies - t[:, None]
    weights = np.broadcast_to(weights, energies.shape)
    per_example = t + np.sum(weights * f.conjugate(delta), axis=1) - g_data
    slope = weights * f.conjugate_deriv(delta)
    dtheta = (phi_grad(g.coupling, theta, samples, slope) - phi_grad(g.coupling, theta, batch.ys, np.ones(B))) / B
    dt = (1.0 - slope.sum(axis=1)) / B
    grad_g = nets.backward(g.h_spec, g.h_params, h_tape, dtheta)
    grad_tau = tau.backward(t_tape, dt[:, None])
    return LossValueAndGrads(float(per_example.mean()), grad_g, grad_tau, per_example)


def minmin_objective(g: EnergyModel, tau: nets.Network, f, batch: Batch, Bprime: int = 1, rng=None, samples=None):
    """Doubly stochastic min-min objective and its exact gradients.

    Draws ``Bprime`` i.i.d. uniform outputs per example, unless ``samples``
    (``(M, D)`` shared or ``(B, M, D)`` per example) is given, in which case
    those are averaged with equal weights.
    """
    f = get_generator(f)
    if samples is None:
        if Bprime < 1:
            raise ValueError("Bprime must be >= 1")
        samples = sample_uniform(g.space, rng, (len(batch), Bprime))
    samples = np.asarray(samples, dtype=np.float64)
    M = samples.shape[-2]
    return _fy_terms(g, tau, f, batch, samples, np.full((1, M), 1.0 / M))


def _unary_kl_exact(g, tau, batch):
    """Closed form for the KL objective with a unary model.

    ``E_q exp(<theta, y> - t) = exp(sum_j softplus(theta_j) - k log 2 - t)``.
    """
    B = len(batch)
    theta, h_tape = g.logits(batch.xs)
    t_out, t_tape = tau.forward(tau_inputs(tau, batch))
    t = t_out[:, 0]
    lse = unary_log_partition(theta)
    ratio = np.exp(lse - t)
    g_data = np.sum(theta * batch.ys, axis=1)
    per_example = t + ratio - 1.0 - g_data
    dtheta = (ratio[:, None] * expit(theta) - batch.ys) / B
    dt = (1.0 - ratio) / B
    grad_g = nets.backward(g.h_spec, g.h_params, h_tape, dtheta)
    grad_tau = tau.backward(t_tape, dt[:, None])
    return LossValueAndGrads(float(per_example.mean()), grad_g, grad_tau, per_example)


def exact_objective(g: EnergyModel, tau: nets.Network, f, batch: Batch, cap: int = DEFAULT_CAP, closed_form=True):
    """The min-min objective with the expectation over ``q`` computed exactly.

    Enumerates the space and weights every output by ``uniform_mass``; for
    the KL generator on a unary model a closed form is used instead (also
    valid for spaces too large to enumerate).
    """
    f = get_generator(f)
    if closed_form and f.kind == "kl" and g.is_unary:
        return _unary_kl_exact(g, tau, batch)
    if not is_enumerable(g.space, cap):
        raise CapExceeded(f"{g.space} cannot be enumerated under cap {cap}")
    ys_all = enumerate_space(g.space, cap)
    weights = np.full((1, len(ys_all)), uniform_mass(g.space))
    return _fy_terms(g, tau, f, batch, ys_all, weights)


def unary_log_partition(theta) -> np.ndarray:
    """``log E_q exp(<theta, y>)`` over ``{0,1}^k`` with uniform ``q``."""
    theta = np.asarray(theta, dtype=np.float64)
    return np.sum(np.logaddexp(0.0, theta), axis=-1) - theta.shape[-1] * math.log(2.0)


def log_partition(g: EnergyModel, xs, cap: int = DEFAULT_CAP, closed_form=True) -> np.ndarray:
    """Exact ``LSE_g(x) = log E_{y~q} exp g(x, y)`` for each row of ``xs``."""
    theta, _ = g.logits(np.atleast_2d(xs))
    if closed_form and g.is_unary:
        return unary_log_partition(theta)
    ys_all = enumerate_space(g.space, cap)
    energies = phi(g.coupling, theta[:, None, :], ys_all)
    return logsumexp(energies, axis=1) - g.space.log_cardinality


def exact_mle_objective(g: EnergyModel, batch: Batch, cap: int = DEFAULT_CAP, closed_form=True):
    """Mean negative log-likelihood ``LSE_g(x) - g(x, y)`` (uniform ``q``).

    Uses the softplus closed form for unary models, enumeration otherwise.
    ``grad_tau`` is an empty vector.
    """
    B = len(batch)
    theta, h_tape = g.logits(batch.xs)
    g_data = phi(g.coupling, theta, batch.ys)
    if closed_form and g.is_unary:
        lse = unary_log_partition(theta)
        dtheta = expit(theta) - batch.ys
    else:
        if not is_enumerable(g.space, cap):
            raise CapExceeded(f"{g.space} cannot be enumerated under cap {cap} and has no closed form")
        ys_all = enumerate_space(g.space, cap)
        energies = phi(g.coupling, theta[:, None, :], ys_all)
        lse = logsumexp(energies, axis=1) - g.space.log_cardinality
        probs = np.exp(energies - logsumexp(energies, axis=1, keepdims=True))
        dtheta = phi_grad(g.coupling, theta, ys_all, probs) - phi_grad(g.coupling, theta, batch.ys, np.ones(B))
    per_example = lse - g_data
    grad_g = nets.backward(g.h_spec, g.h_params, h_tape, dtheta / B)
    return LossValueAndGrads(float(per_example.mean()), grad_g, np.zeros(0), per_example)


def exact_mle_available(g: EnergyModel, cap: int = DEFAULT_CAP) -> bool:
    return g.is_unary or is_enumerable(g.space, cap)


BISECTION_TOL = 1e-10
BISECTION_MAX_ITER = 200


def _chi_square_threshold(energies, q):
    """Root of ``sum_y q [energies - tau]_+ = 1`` by bisection."""
    lo = energies.min() - 1.0 / q
    hi = energies.max()
    mid = hi
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        resid = q * np.maximum(energies - mid, 0.0).sum() - 1.0
        if abs(resid) <= BISECTION_TOL:
            break
        if resid > 0:
            lo = mid
        else:
            hi = mid
    return mid


def tau_optimal(g: EnergyModel, xs, f, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Minimizing ``tau`` for each row of ``xs`` (enumeration based)."""
    f = get_generator(f)
    if f.kind == "kl":
        return log_partition(g, xs, cap, closed_form=False)
    theta, _ = g.logits(np.atleast_2d(xs))
    ys_all = enumerate_space(g.space, cap)
    energies = phi(g.coupling, theta[:, None, :], ys_all)
    q = uniform_mass(g.space)
    return np.array([_chi_square_threshold(e, q) for e in energies])


def tau_optimal_per_example(g: EnergyModel, x, f, cap: int = DEFAULT_CAP) -> float:
    return float(tau_optimal(g, np.atleast_2d(x), f, cap)[0])


def recovered_density(g: EnergyModel, tau_values, xs, f, cap: int = DEFAULT_CAP) -> np.ndarray:
    """``q(y) (f*)'(g(x, y) - tau(x))`` over the enumerated space, ``(B, |Y|)``."""
    f = get_generator(f)
    theta, _ = g.logits(np.atleast_2d(xs))
    ys_all = enumerate_space(g.space, cap)
    energies = phi(g.coupling, theta[:, None, :], ys_all)
    tau_values = np.asarray(tau_values, dtype=np.float64).reshape(-1, 1)
    return uniform_mass(g.space) * f.conjugate_deriv(energies - tau_values)


# --------------------------------------------------------------------------
# MCMC baseline


def metropolis_hastings(g: EnergyModel, xs, n_steps: int, rng, init=None, theta=None):
    """Independent Metropolis-Hastings chains with uniform proposals.

    One chain per row of ``xs``; a proposal ``y'`` replaces the current state
    with probability ``min(1, exp(g(x, y') - g(x, y)))``. Chains start from a
    uniform draw unless ``init`` is given. Returns ``(states, accept_rate)``.
    """
    if theta is None:
        theta, _ = g.logits(np.atleast_2d(xs))
    B = len(theta)
    state = sample_uniform(g.space, rng, B) if init is None else np.array(init, dtype=np.float64)
    current = phi(g.coupling, theta, state)
    accepted = 0
    for _ in range(n_steps):
        proposal = sample_uniform(g.space, rng, B)
        proposed = phi(g.coupling, theta, proposal)
        accept = rng.random(B) < np.exp(np.minimum(proposed - current, 0.0))
        state[accept] = proposal[accept]
        current = np.where(accept, proposed, current)
        accepted += int(accept.sum())
    return state, accepted / max(n_steps * B, 1)


def mcmc_terms(g: EnergyModel, batch: Batch, chain_len: int, rng):
    """Surrogate value ``mean g(x, y_chain) - g(x, y)`` and its gradient."""
    if chain_len < 1:
        raise ValueError("chain_len must be >= 1")
    B = len(batch)
    theta, h_tape = g.logits(batch.xs)
    chain, _ = metropolis_hastings(g, None, chain_len, rng, theta=theta)
    ones = np.ones(B)
    dtheta = (phi_grad(g.coupling, theta, chain, ones) - phi_grad(g.coupling, theta, batch.ys, ones)) / B
    value = float(np.mean(phi(g.coupling, theta, chain) - phi(g.coupling, theta, batch.ys)))
    return value, nets.backward(g.h_spec, g.h_params, h_tape, dtheta)


def mcmc_mle_grad(g: EnergyModel, batch: Batch, chain_len: int, rng) -> np.ndarray:
    """Single-sample MCMC estimate of the negative log-likelihood gradient.

    The model expectation is replaced by the final state of a Metropolis-
    Hastings chain of length ``chain_len`` started from a uniform draw.
    """
    return mcmc_terms(g, batch, chain_len, rng)[1]


# --------------------------------------------------------------------------
# min-max baseline


class Bernoulli:
    """Factorized Bernoulli over ``{0,1}^k`` parameterized by logits."""

    @staticmethod
    def sample(logits, rng, m):
        logits = np.asarray(logits)
        probs = expit(logits)
        return (rng.random((logits.shape[0], m, logits.shape[1])) < probs[:, None, :]).astype(np.float64)

    @staticmethod
    def log_prob(logits, ys):
        logits = np.asarray(logits)[:, None, :]
        return np.sum(ys * log_expit(logits) + (1 - ys) * log_expit(-logits), axis=-1)

    @staticmethod
    def score(logits, ys):
        """Gradient of ``log p(y)`` with respect to the logits, ``(B, M, k)``."""
        return ys - expit(np.asarray(logits))[:, None, :]

    @staticmethod
    def kl_to_uniform(logits):
        p = expit(logits)
        return np.sum(p * log_expit(logits) + (1 - p) * log_expit(-logits), axis=-1) + logits.shape[-1] * math.log(2.0)

    @staticmethod
    def kl_to_uniform_grad(logits):
        p = expit(logits)
        return logits * p * (1 - p)


class PlackettLuce:
    """Plackett-Luce distribution over rankings; item scores are the logits.

    Outputs use the rank-vector encoding (rank ``k`` = first pick); sampling
    uses the Gumbel-max construction.
    """

    @staticmethod
    def sample(logits, rng, m):
        logits = np.asarray(logits)
        B, k = logits.shape
        perturbed = logits[:, None, :] + rng.gumbel(size=(B, m, k))
        order = np.argsort(-perturbed, axis=-1)
        ranks = np.empty((B, m, k))
        np.put_along_axis(ranks, order, np.broadcast_to(np.arange(k, 0, -1, dtype=np.float64), (B, m, k)), axis=-1)
        return ranks

    @staticmethod
    def _ordered(logits, ranks):
        order = np.argsort(-ranks, axis=-1)
        s = np.take_along_axis(np.broadcast_to(np.asarray(logits)[:, None, :], ranks.shape), order, axis=-1)
        return order, s

    @classmethod
    def log_prob(cls, logits, ranks):
        _, s = cls._ordered(logits, ranks)
        tails = np.logaddexp.accumulate(s[..., ::-1], axis=-1)[..., ::-1]
        return np.sum(s - tails, axis=-1)

    @classmethod
    def score(cls, logits, ranks):
        order, s = cls._ordered(logits, ranks)
        tails = np.logaddexp.accumulate(s[..., ::-1], axis=-1)[..., ::-1]
        k = s.shape[-1]
        # probs[u, t] = softmax weight of position t among positions >= u
        probs = np.exp(s[..., None, :] - tails[..., :, None]) * np.triu(np.ones((k, k)))
        grad_sorted = 1.0 - probs.sum(axis=-2)
        grad = np.empty_like(grad_sorted)
        np.put_along_axis(grad, order, grad_sorted, axis=-1)
        return grad


def generator_distribution(space: OutputSpace):
    return Bernoulli if space.kind == BINARY else PlackettLuce


@dataclass
class MinMaxStep:
    value: float
    grad_g: np.ndarray
    grad_generator: np.ndarray
    baseline: float


def minmax_reinforce_step(g: EnergyModel, generator: nets.Network, batch: Batch, Bprime: int, rng,
                          baseline=None, decay: float = 0.99) -> MinMaxStep:
    """One stochastic gradient evaluation of the min-max baseline.

    The generator network maps ``x`` to logits of a tractable distribution
    ``p`` (factorized Bernoulli or Plackett-Luce). ``g`` descends
    ``E_p[g(x, y')] - g(x, y)``; the generator ascends
    ``E_p[g(x, y')] - KL(p, q)`` through the score-function estimator with an
    exponential-moving-average baseline. Both gradients are returned in
    descent convention.
    """
    if Bprime < 1:
        raise ValueError("Bprime must be >= 1")
    dist = generator_distribution(g.space)
    B = len(batch)
    theta, h_tape = g.logits(batch.xs)
    logits, gen_tape = generator.forward(batch.xs)
    samples = dist.sample(logits, rng, Bprime)
    encoded = perm_vector_to_matrix(samples) if g.space.kind == BIRKHOFF else samples
    energies = phi(g.coupling, theta, encoded)
    g_data = phi(g.coupling, theta, batch.ys)

    if dist is Bernoulli:
        reward = energies
        kl = Bernoulli.kl_to_uniform(logits)
        kl_grad = Bernoulli.kl_to_uniform_grad(logits)
    else:
        # KL to uniform handled inside the reward: E_p[-log p] + const
        reward = energies - dist.log_prob(logits, samples)
        kl = -reward.mean(axis=1) + energies.mean(axis=1) - g.space.log_cardinality
        kl_grad = np.zeros_like(logits)
    b = float(reward.mean()) if baseline is None else float(baseline)
    score = dist.score(logits, samples)
    ascent = np.einsum("bm,bmk->bk", reward - b, score) / Bprime - kl_grad
    grad_generator = generator.backward(gen_tape, -ascent / B)

    dtheta = (phi_grad(g.coupling, theta, encoded, np.full((B, Bprime), 1.0 / Bprime))
              - phi_grad(g.coupling, theta, batch.ys, np.ones(B))) / B
    grad_g = nets.backward(g.h_spec, g.h_params, h_tape, dtheta)
    value = float(np.mean(energies.mean(axis=1) - kl - g_data))
    new_baseline = decay * b + (1.0 - decay) * float(reward.mean())
    return MinMaxStep(value, grad_g, grad_generator, new_baseline)


# --------------------------------------------------------------------------
# generalized Fenchel-Young baseline


def gfy_objective(g: EnergyModel, batch: Batch, omega: float = 1.0, cfg: ModeSolverConfig = ModeSolverConfig()):
    """Generalized Fenchel-Young loss with quadratic regularization ``omega/2 |mu|^2``.

    ``max_{mu in conv(Y)} [Phi(theta, mu) - omega/2 |mu|^2] - Phi(theta, y) + omega/2 |y|^2``;
    the gradient follows from the envelope theorem.
    """
    B = len(batch)
    theta, h_tape = g.logits(batch.xs)
    mu = relaxed_argmax(g, theta, omega, cfg)
    per_example = relaxed_value(g, theta, mu, omega) - relaxed_value(g, theta, batch.ys, omega)
    ones = np.ones(B)
    dtheta = (phi_grad(g.coupling, theta, mu, ones) - phi_grad(g.coupling, theta, batch.ys, ones)) / B
    grad_g = nets.backward(g.h_spec, g.h_params, h_tape, dtheta)
    return LossValueAndGrads(float(per_example.mean()), grad_g, np.zeros(0), per_example)
