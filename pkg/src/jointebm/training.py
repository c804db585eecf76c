"""Adam, the training loop and validation-set grid search."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import losses, nets
from .data import Dataset, Split
from .energy import BILINEAR, LINEAR_QUADRATIC, EnergyModel, coupling_for
from .errors import ConfigError, DivergenceError, ShapeMismatch
from .evaluation import score_dataset
from .losses import Batch
from .spaces import DEFAULT_CAP, is_enumerable

LOSSES = ("minmin_kl", "minmin_sparsemax", "exact_mle", "mcmc", "minmax", "gfy")
EXHAUSTIVE = "exhaustive"
LOG_COLUMNS = ("step", "loss", "exact_loss", "grad_norm", "eval_metric", "wall_ms")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    step: int
    m: np.ndarray
    u: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    prev_grad: np.ndarray | None = None
    optimistic: bool = False


def adam_init(n, lr=1e-4, weight_decay=0.0, optimistic=False, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimState:
    return OptimState(0, np.zeros(n), np.zeros(n), lr, beta1, beta2, eps, weight_decay, None, optimistic)


def adam_step(state: OptimState, params, grad):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``.

    ``weight_decay`` shrinks the parameters by ``lr * weight_decay`` outside the
    adaptive scaling. In optimistic mode the moments see
    ``grad_t + (grad_t - grad_{t-1})``.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ShapeMismatch(f"params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    g = grad
    if state.optimistic and state.prev_grad is not None:
        g = 2.0 * grad - state.prev_grad
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    u = state.beta2 * state.u + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    u_hat = u / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(u_hat) + state.eps)
    if state.weight_decay:
        new = new - state.lr * state.weight_decay * params
    prev = grad.copy() if state.optimistic else None
    return replace(state, step=t, m=m, u=u, prev_grad=prev), new


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "minmin_kl"
    g_kind: str = "linear"
    g_hidden: tuple = (128,)
    g_activation: str = "relu"
    tau_kind: str = "table"
    tau_hidden: tuple = (128,)
    tau_activation: str = "relu"
    coupling: str = BILINEAR
    rank: int = 0
    B: int = 1 << 30
    Bprime: int | str = 1
    steps: int = 5000
    lr_g: float = 1e-4
    lr_tau: float = 1e-4
    l2: float = 0.0
    seed: int = 0
    eval_every: int = 100
    chain_len: int = 20
    omega: float = 1.0
    generator_kind: str = "linear"
    lr_generator: float = 1e-4
    optimistic: bool = True
    ema_decay: float = 0.99
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        object.__setattr__(self, "g_hidden", tuple(int(h) for h in self.g_hidden))
        object.__setattr__(self, "tau_hidden", tuple(int(h) for h in self.tau_hidden))
        if self.loss not in LOSSES:
            raise ConfigError(f"loss: unknown kind {self.loss!r}, expected one of {LOSSES}")
        if self.g_kind not in nets.KINDS or self.g_kind == "table":
            raise ConfigError(f"g_kind: {self.g_kind!r} is not a feature network kind")
        if self.tau_kind not in nets.KINDS:
            raise ConfigError(f"tau_kind: unknown kind {self.tau_kind!r}")
        if self.coupling not in (BILINEAR, LINEAR_QUADRATIC):
            raise ConfigError(f"coupling: unknown kind {self.coupling!r}")
        for name in ("B", "steps", "eval_every", "chain_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < (0 if name == "steps" else 1):
                raise ConfigError(f"{name}: must be a positive integer, got {v!r}")
        if self.Bprime != EXHAUSTIVE and not (isinstance(self.Bprime, (int, np.integer)) and self.Bprime >= 1):
            raise ConfigError(f"Bprime: must be a positive integer or {EXHAUSTIVE!r}, got {self.Bprime!r}")
        for name in ("lr_g", "lr_tau", "lr_generator", "l2", "omega"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name}: must be a finite nonnegative number, got {v!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay: must lie in [0, 1)")

    @property
    def uses_tau(self) -> bool:
        return self.loss.startswith("minmin")

    def to_dict(self):
        d = asdict(self)
        d["g_hidden"] = list(self.g_hidden)
        d["tau_hidden"] = list(self.tau_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"train: unknown field(s) {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from None


def _g_spec(config: TrainConfig, d, theta_dim):
    hidden = config.g_hidden if config.g_kind != "linear" else ()
    return nets.NetSpec(config.g_kind, d, theta_dim, hidden, config.g_activation)


def _tau_spec(config: TrainConfig, d, n):
    if config.tau_kind == "table":
        return nets.NetSpec("table", 1, 1, table_size=n)
    hidden = config.tau_hidden if config.tau_kind != "linear" else ()
    return nets.NetSpec(config.tau_kind, d, 1, hidden, config.tau_activation)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: EnergyModel
    tau: nets.Network | None
    generator: nets.Network | None
    log: list = field(default_factory=list)
    config: TrainConfig | None = None

    def log_array(self, column):
        return np.array([np.nan if r[column] is None else r[column] for r in self.log], dtype=np.float64)


def exact_loss(config: TrainConfig, model: EnergyModel, tau, batch: Batch):
    """Exact objective for logging: the min-min objective with ``q`` enumerated
    (min-min losses) or the exact negative log-likelihood; ``None`` if
    neither is computable."""
    cap = config.cap
    if config.uses_tau:
        f = "kl" if config.loss == "minmin_kl" else "chi_square"
        if (f == "kl" and model.is_unary) or is_enumerable(model.space, cap):
            return losses.exact_objective(model, tau, f, batch, cap).value
        return None
    if losses.exact_mle_available(model, cap):
        return losses.exact_mle_objective(model, batch, cap).value
    return None


def _check_finite(step, **arrays):
    for name, a in arrays.items():
        if a is not None and not np.all(np.isfinite(a)):
            raise DivergenceError(f"non-finite {name} at step {step}")


def init_models(config: TrainConfig, dataset: Dataset, rng):
    space = dataset.space
    coupling = coupling_for(space, config.coupling, config.rank)
    g_spec = _g_spec(config, dataset.n_features, coupling.theta_dim)
    model = EnergyModel(g_spec, nets.init(g_spec, rng), coupling, space)
    tau = generator = None
    if config.uses_tau:
        t_spec = _tau_spec(config, dataset.n_features, len(dataset))
        tau = nets.Network(t_spec, nets.init(t_spec, rng))
    if config.loss == "minmax":
        hidden = config.g_hidden if config.generator_kind != "linear" else ()
        gen_spec = nets.NetSpec(config.generator_kind, dataset.n_features, space.k, hidden, config.g_activation)
        generator = nets.Network(gen_spec, nets.init(gen_spec, rng))
    return model, tau, generator


def _loss_step(config, model, tau, generator, batch, rng, baseline):
    """Returns ``(value, grad_g, grad_tau, grad_generator, baseline)``."""
    loss = config.loss
    if loss in ("minmin_kl", "minmin_sparsemax"):
        f = "kl" if loss == "minmin_kl" else "chi_square"
        if config.Bprime == EXHAUSTIVE:
            r = losses.exact_objective(model, tau, f, batch, config.cap)
        else:
            r = losses.minmin_objective(model, tau, f, batch, config.Bprime, rng)
        return r.value, r.grad_g, r.grad_tau, None, baseline
    if loss == "exact_mle":
        r = losses.exact_mle_objective(model, batch, config.cap)
        return r.value, r.grad_g, None, None, baseline
    if loss == "mcmc":
        value, grad = losses.mcmc_terms(model, batch, config.chain_len, rng)
        return value, grad, None, None, baseline
    if loss == "minmax":
        bp = 1 if config.Bprime == EXHAUSTIVE else config.Bprime
        r = losses.minmax_reinforce_step(model, generator, batch, bp, rng, baseline, config.ema_decay)
        return r.value, r.grad_g, None, r.grad_generator, r.baseline
    r = losses.gfy_objective(model, batch, config.omega)
    return r.value, r.grad_g, None, None, baseline


def train(config: TrainConfig, dataset: Dataset, eval_set: Dataset | None = None, metric="auto") -> TrainResult:
    """Run ``config.steps`` optimizer steps on ``dataset``.

    Batches are the full dataset when ``B >= n``, else ``B`` indices drawn
    without replacement each step. Every ``eval_every`` steps (and at the
    last step) a log row is appended; ``loss`` and ``exact_loss`` refer to the
    parameters at the start of that step. Raises :class:`DivergenceError` as
    soon as a loss, gradient or parameter becomes non-finite.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset: empty")
    rng = np.random.default_rng(config.seed)
    model, tau, generator = init_models(config, dataset, rng)
    result = TrainResult(model, tau, generator, [], config)
    if config.steps == 0:
        return result

    n = len(dataset)
    ids_all = np.arange(n)
    full = Batch(dataset.xs, dataset.ys, ids_all)
    opt_g = adam_init(len(model.h_params), config.lr_g, config.l2,
                      config.optimistic and config.loss == "minmax")
    opt_tau = adam_init(len(tau.params), config.lr_tau) if tau is not None else None
    opt_gen = (adam_init(len(generator.params), config.lr_generator, 0.0, config.optimistic)
               if generator is not None else None)
    baseline = None
    start = time.perf_counter()
    for step in range(1, config.steps + 1):
        if config.B >= n:
            batch = full
        else:
            idx = np.sort(rng.choice(n, config.B, replace=False))
            batch = Batch(dataset.xs[idx], dataset.ys[idx], idx)
        log_now = step % config.eval_every == 0 or step == config.steps
        ex = exact_loss(config, model, tau, batch if batch is full else full) if log_now else None

        value, grad_g, grad_tau, grad_gen, baseline = _loss_step(config, model, tau, generator, batch, rng, baseline)
        _check_finite(step, loss=np.float64(value), grad_g=grad_g, grad_tau=grad_tau, grad_generator=grad_gen)

        opt_g, new_g = adam_step(opt_g, model.h_params, grad_g)
        if model.h_spec.kind == "icnn":
            new_g = nets.project_icnn(model.h_spec, new_g)
        model = model.with_params(new_g)
        if tau is not None:
            opt_tau, new_t = adam_step(opt_tau, tau.params, grad_tau)
            if tau.spec.kind == "icnn":
                new_t = nets.project_icnn(tau.spec, new_t)
            tau = tau.with_params(new_t)
        if generator is not None:
            opt_gen, new_gen = adam_step(opt_gen, generator.params, grad_gen)
            generator = generator.with_params(new_gen)
        _check_finite(step, g_params=model.h_params, tau_params=None if tau is None else tau.params,
                      generator_params=None if generator is None else generator.params)

        if log_now:
            parts = [grad_g] + [a for a in (grad_tau, grad_gen) if a is not None]
            grad_norm = float(np.sqrt(sum(float(p @ p) for p in parts)))
            metric_value = None
            if eval_set is not None and len(eval_set):
                metric_value = score_dataset(model, eval_set, metric).value
            result.log.append({
                "step": step,
                "loss": float(value),
                "exact_loss": None if ex is None else float(ex),
                "grad_norm": grad_norm,
                "eval_metric": metric_value,
                "wall_ms": (time.perf_counter() - start) * 1e3,
            })
    result.model, result.tau, result.generator = model, tau, generator
    return result


def final_exact_loss(result: TrainResult, dataset: Dataset):
    """Exact objective of the trained parameters on the whole of ``dataset``."""
    full = Batch(dataset.xs, dataset.ys, np.arange(len(dataset)))
    return exact_loss(result.config, result.model, result.tau, full)


def write_log_csv(path, log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow(["" if row[c] is None else (row[c] if c == "step" else repr(float(row[c])))
                        for c in LOG_COLUMNS])


# --------------------------------------------------------------------------
# model selection


@dataclass
class GridResult:
    best: TrainConfig
    scores: list
    refit: TrainResult


def default_grid(base: TrainConfig, lrs=(1e-2, 1e-3, 1e-4), l2s=(0.0, 1e-4, 1e-2)) -> list:
    return [replace(base, lr_g=lr, lr_tau=lr, l2=l2) for lr in lrs for l2 in l2s]


def grid_search(configs, dataset: Dataset, split: Split, metric="auto") -> GridResult:
    """Pick the config with the best validation metric, then refit on train + val.

    Every config is trained on the train rows and scored on the validation
    rows; ties go to the earliest config.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("grid_search needs at least one config")
    train_set = dataset.subset(split.train_idx)
    val_set = dataset.subset(split.val_idx)
    scores = []
    best, best_score = configs[0], -np.inf
    for cfg in configs:
        if len(configs) == 1:
            scores.append(float("nan"))
            break
        try:
            res = train(cfg, train_set)
            s = score_dataset(res.model, val_set, metric).value
        except DivergenceError:
            s = -np.inf
        s = -np.inf if not np.isfinite(s) else s
        scores.append(float(s))
        if s > best_score:
            best, best_score = cfg, s
    refit_set = dataset.subset(np.concatenate([split.train_idx, split.val_idx]))
    return GridResult(best, scores, train(best, refit_set))
