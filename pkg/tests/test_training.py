import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointebm import nets
from jointebm.cli import reference_mle
from jointebm.data import split, synth_label_ranking, synth_multilabel
from jointebm.errors import ConfigError, DivergenceError, ShapeMismatch
from jointebm.losses import log_partition
from jointebm.spaces import BIRKHOFF
from jointebm.training import (
    LOG_COLUMNS,
    TrainConfig,
    adam_init,
    adam_step,
    default_grid,
    final_exact_loss,
    grid_search,
    train,
    write_log_csv,
)


def _reference_adam(params, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam written out step by step."""
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    p = params.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


# --------------------------------------------------------------------------
# optimizer


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0, 3.0])
    state, new = adam_step(adam_init(3, lr=0.1), p, np.zeros(3))
    assert np.array_equal(new, p) and state.step == 1


def test_adam_first_step_sign():
    g0 = np.array([3.0, -0.5, 1e-3])
    _, new = adam_step(adam_init(3, lr=0.01), np.zeros(3), g0)
    assert np.allclose(new, -0.01 * np.sign(g0), rtol=1e-4)


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=5)
    grads = rng.normal(size=(7, 5))
    state, p = adam_init(5, lr=0.03), p0
    for g in grads:
        state, p = adam_step(state, p, g)
    assert np.allclose(p, _reference_adam(p0, grads, 0.03), atol=1e-15, rtol=1e-13)


def test_adam_weight_decay_decoupled():
    p = np.array([2.0, -4.0])
    _, new = adam_step(adam_init(2, lr=0.1, weight_decay=0.5), p, np.zeros(2))
    assert np.allclose(new, p * (1 - 0.05))


def test_adam_optimistic_direction():
    rng = np.random.default_rng(1)
    g1, g2 = rng.normal(size=(2, 4))
    p0 = rng.normal(size=4)
    s, p = adam_step(adam_init(4, lr=0.01, optimistic=True), p0, g1)
    _, plain_first = adam_step(adam_init(4, lr=0.01), p0, g1)
    assert np.array_equal(p, plain_first)
    _, p = adam_step(s, p, g2)
    assert np.allclose(p, _reference_adam(p0, [g1, 2 * g2 - g1], 0.01), atol=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step(adam_init(3), np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        adam_step(adam_init(2), np.zeros(3), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), st.integers(1, 5))
def test_adam_deterministic(grad, n):
    a = b = (adam_init(6, lr=1e-2, optimistic=True), np.ones(6))
    for _ in range(n):
        a = adam_step(*a, grad)
        b = adam_step(*b, grad)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0].m, b[0].m)


# --------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize("field,value", [
    ("loss", "hinge"),
    ("g_kind", "table"),
    ("tau_kind", "tree"),
    ("coupling", "cubic"),
    ("B", 0),
    ("Bprime", 0),
    ("Bprime", "all"),
    ("steps", -1),
    ("eval_every", 0),
    ("lr_g", -1e-3),
    ("l2", float("nan")),
    ("ema_decay", 1.0),
])
def test_config_errors_name_the_field(field, value):
    with pytest.raises(ConfigError, match=field):
        TrainConfig(**{field: value})


def test_config_dict_roundtrip():
    cfg = TrainConfig(loss="gfy", g_kind="mlp", g_hidden=(4, 3), Bprime="exhaustive", omega=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr_g, cfg.lr_tau, cfg.steps, cfg.Bprime) == (1e-4, 1e-4, 5000, 1)


# --------------------------------------------------------------------------
# training loop


def test_zero_steps_returns_initial_models():
    ds = synth_multilabel(20, 3, 4, seed=0)
    cfg = TrainConfig(steps=0, seed=3)
    r = train(cfg, ds)
    assert r.log == []
    rng = np.random.default_rng(3)
    init = nets.init(r.model.h_spec, rng)
    assert np.array_equal(r.model.h_params, init)


def _strip_wall(log):
    return [{k: v for k, v in row.items() if k != "wall_ms"} for row in log]


@pytest.mark.parametrize("loss", ["minmin_kl", "minmin_sparsemax", "exact_mle", "mcmc", "minmax", "gfy"])
def test_training_deterministic(loss):
    ds = synth_multilabel(30, 3, 4, noise=1.0, seed=1)
    cfg = TrainConfig(loss=loss, steps=40, B=8, Bprime=3, lr_g=1e-2, lr_tau=1e-2, eval_every=10, seed=5)
    a, b = train(cfg, ds, eval_set=ds), train(cfg, ds, eval_set=ds)
    assert _strip_wall(a.log) == _strip_wall(b.log)
    assert np.array_equal(a.model.h_params, b.model.h_params)
    assert [r["step"] for r in a.log] == [10, 20, 30, 40]
    assert all(np.isfinite(r["loss"]) and r["eval_metric"] is not None for r in a.log)
    c = train(replace(cfg, seed=6), ds)
    assert not np.array_equal(a.model.h_params, c.model.h_params)


def test_log_rows_at_last_step():
    ds = synth_multilabel(10, 3, 2, seed=0)
    r = train(TrainConfig(steps=25, eval_every=10), ds)
    assert [row["step"] for row in r.log] == [10, 20, 25]
    assert set(r.log[0]) == set(LOG_COLUMNS)


@pytest.mark.parametrize("space_kind", ["permutahedron", BIRKHOFF])
@pytest.mark.parametrize("loss", ["minmin_kl", "minmin_sparsemax", "exact_mle", "minmax", "mcmc"])
def test_ranking_losses_run(space_kind, loss):
    ds = synth_label_ranking(20, 3, 3, noise=0.5, seed=2, representation=space_kind)
    r = train(TrainConfig(loss=loss, steps=20, Bprime=4, lr_g=1e-2, eval_every=5), ds, eval_set=ds)
    assert len(r.log) == 4
    assert r.log[-1]["exact_loss"] is not None


def test_gfy_permutahedron_and_pairwise_run():
    ds = synth_label_ranking(20, 3, 4, seed=3)
    train(TrainConfig(loss="gfy", steps=10, eval_every=5), ds)
    ds = synth_multilabel(20, 3, 4, seed=3)
    r = train(TrainConfig(loss="gfy", coupling="linear_quadratic", rank=2, steps=10, eval_every=5), ds)
    assert r.model.coupling.rank == 2


def test_icnn_energy_stays_convex():
    ds = synth_multilabel(20, 3, 3, noise=1.0, seed=4)
    cfg = TrainConfig(loss="minmin_kl", g_kind="icnn", g_hidden=(5, 5), tau_kind="icnn", tau_hidden=(4,),
                      steps=30, lr_g=0.05, lr_tau=0.05, eval_every=30)
    r = train(cfg, ds)
    for net_spec, params in ((r.model.h_spec, r.model.h_params), (r.tau.spec, r.tau.params)):
        assert np.array_equal(nets.project_icnn(net_spec, params), params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard():
    ds = synth_multilabel(10, 3, 3, seed=0)
    with pytest.raises(DivergenceError, match="step"):
        train(TrainConfig(loss="exact_mle", steps=5, lr_g=1e308), ds)


def test_empty_dataset_rejected():
    ds = synth_multilabel(0, 3, 3, seed=0)
    with pytest.raises(ConfigError):
        train(TrainConfig(steps=1), ds)


def test_exact_mle_objective_non_increasing():
    monotone = 0
    for seed in range(20):
        ds = synth_multilabel(100, 5, 4, noise=1.0, seed=seed)
        r = train(TrainConfig(loss="exact_mle", steps=500, lr_g=1e-2, seed=seed, eval_every=1), ds)
        monotone += np.all(np.diff(r.log_array("exact_loss")[50:]) <= 0)
    assert monotone >= 19


def test_minmin_table_matches_exact_mle_minimum():
    ds = synth_multilabel(40, 4, 3, noise=1.0, seed=0)
    cfg = TrainConfig(loss="minmin_kl", Bprime="exhaustive", steps=5000, lr_g=1e-2, lr_tau=1e-2, eval_every=5000)
    r = train(cfg, ds)
    assert abs(final_exact_loss(r, ds) - reference_mle(cfg, ds)) <= 1e-4
    assert np.max(np.abs(r.tau.params - log_partition(r.model, ds.xs))) <= 1e-2


def test_write_log_csv(tmp_path):
    ds = synth_label_ranking(10, 3, 3, seed=0)
    r = train(TrainConfig(loss="gfy", steps=4, eval_every=2), ds)
    write_log_csv(tmp_path / "log.csv", r.log)
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 3
    assert rows[1][0] == "2" and rows[1][4] == ""
    assert float(rows[1][1]) == r.log[0]["loss"]


# --------------------------------------------------------------------------
# model selection


def _grid_data():
    ds = synth_multilabel(60, 4, 3, noise=0.0, seed=7)
    return ds, split(ds, (0.5, 0.5, 0.0), seed=0)


def test_grid_single_config_unchanged():
    ds, sp = _grid_data()
    cfg = TrainConfig(steps=5, eval_every=5)
    g = grid_search([cfg], ds, sp)
    assert g.best is cfg
    assert len(g.refit.log) == 1


def test_grid_learning_beats_frozen():
    ds, sp = _grid_data()
    frozen = TrainConfig(loss="exact_mle", steps=200, lr_g=0.0, eval_every=200)
    learning = replace(frozen, lr_g=5e-2)
    assert grid_search([frozen, learning], ds, sp).best == learning
    assert grid_search([learning, frozen], ds, sp).best == learning


def test_grid_duplicates_first_wins():
    ds, sp = _grid_data()
    a = TrainConfig(loss="exact_mle", steps=20, lr_g=1e-2, eval_every=20)
    b = replace(a)
    g = grid_search([a, b], ds, sp)
    assert g.best is a and g.scores[0] == g.scores[1]


def test_grid_refit_uses_train_and_val():
    ds, sp = _grid_data()
    cfg = TrainConfig(loss="minmin_kl", steps=3, eval_every=3)
    g = grid_search([cfg, replace(cfg, lr_g=1e-3)], ds, sp)
    assert g.refit.tau.params.size == len(sp.train_idx) + len(sp.val_idx)


def test_default_grid():
    grid = default_grid(TrainConfig())
    assert len(grid) == 9
    assert {(c.lr_g, c.l2) for c in grid} == {(lr, l2) for lr in (1e-2, 1e-3, 1e-4) for l2 in (0.0, 1e-4, 1e-2)}
    assert all(c.lr_tau == c.lr_g for c in grid)
