from dataclasses import replace

import numpy as np
import pytest

from app.services.closedloop import (
    ClosedLoopRecord, DisturbanceGenerator, SweepRow, compute_metrics, format_violation_table, gamma_sweep,
    one_step_deviations, simulate, value_decrease_margins,
)
from app.services.dynamics import SystemModel, integrate_step, linear_model
from app.services.ocp import SolveStatus, Variant, ZmpcConfig, solve_zmpc
from app.services.sets import BoxSet, ZoneCostSpec
from app.utils.errors import AbortedRun
from app.utils.experiment_config import ExperimentConfig

TARGET = BoxSet([0.0], [1.0])


def _record(states):
    states = np.asarray(states, dtype=float).reshape(-1, 1)
    steps = len(states) - 1
    return ClosedLoopRecord(
        sample_time=1.0,
        states=states,
        inputs=np.zeros((steps, 1)),
        disturbances=np.zeros((steps, 1)),
        predicted_next=states[1:].copy(),
        zone_cost_actual=TARGET.residual(states).sum(axis=-1),
        zone_cost_modified=np.zeros(steps + 1),
        economic_cost=states[:, 0].copy(),
        value=np.zeros(steps),
        status=["optimal"] * steps,
    )


def _disturbed_integrator():
    return linear_model([[1.0]], [[1.0]], [[1.0]], name="disturbed")


def _config(terminal, horizon=3, target=BoxSet([-1.0], [1.0]), U=BoxSet([-0.5], [0.5])):
    return ZmpcConfig(
        horizon=horizon,
        zone_cost=ZoneCostSpec(1.0, 1.0, target),
        state_bounds=BoxSet([-5.0], [5.0]),
        input_bounds=U,
        terminal_set=terminal,
        variant=Variant.NOMINAL,
    )


# ---------- metrics ----------

def test_hand_built_violation_count():
    record = _record([1.5, 0.5, 0.5, 1.2, 0.5, 1.4])
    m = compute_metrics(record, TARGET, BoxSet([-1.0], [1.3]))
    assert m.first_entry_step == 1
    assert m.violations_after_entry == 2
    assert m.avg_violation_magnitude == pytest.approx(0.3)
    assert m.state_constraint_violations == 2
    assert m.steps == 5


def test_trajectory_inside_target_has_no_violations():
    record = _record([0.2, 0.4, 0.6])
    m = compute_metrics(record, TARGET, BoxSet([-1.0], [2.0]))
    assert m.first_entry_step == 0
    assert m.violations_after_entry == 0
    assert m.avg_violation_magnitude is None
    assert m.accumulated_zone_cost_actual == 0.0
    assert m.accumulated_economic_cost == pytest.approx(1.2)


def test_never_entering_reports_no_entry():
    m = compute_metrics(_record([2.0, 1.8, 1.6]), TARGET, BoxSet([-5.0], [5.0]))
    assert m.first_entry_step is None
    assert m.violations_after_entry == 0


# ---------- disturbance ----------

def test_generator_reproducible_and_bounded():
    W = BoxSet([-0.1, -2.0], [0.1, 2.0])
    a = DisturbanceGenerator(W, seed=4).sequence(200)
    b = DisturbanceGenerator(W, seed=4).sequence(200)
    assert np.array_equal(a, b)
    assert np.all(W.contains(a))
    assert not np.array_equal(a, DisturbanceGenerator(W, seed=5).sequence(200))
    assert np.all(DisturbanceGenerator(W, seed=4, mode="zero").sequence(10) == 0.0)
    with pytest.raises(ValueError):
        DisturbanceGenerator(W, mode="gaussian")


# ---------- simulate ----------

def test_zero_disturbance_run_stays_in_terminal_box(integrator):
    terminal = BoxSet([-0.5], [0.5])
    cfg = _config(terminal)
    gen = DisturbanceGenerator(BoxSet([0.0], [0.0]), mode="zero")
    record = simulate(integrator, cfg, [0.3], 8, gen)
    assert np.all(terminal.contains(record.states, tol=1e-6))
    assert np.all(one_step_deviations(record) == 0.0)
    assert record.times[-1] == pytest.approx(8.0)


def test_plant_consistency_and_deviation_bound():
    model = _disturbed_integrator()
    W = BoxSet([-0.05], [0.05])
    record = simulate(model, _config(BoxSet([-1.0], [1.0])), [2.0], 12, DisturbanceGenerator(W, seed=1))
    for n in range(record.steps):
        step = integrate_step(model, record.states[n], record.inputs[n], record.disturbances[n])
        np.testing.assert_array_equal(step, record.states[n + 1])
    dev = one_step_deviations(record)
    np.testing.assert_allclose(dev[:, 0], np.abs(record.disturbances[:, 0]), atol=1e-12)
    m = compute_metrics(record, BoxSet([-1.0], [1.0]), BoxSet([-5.0], [5.0]))
    assert m.max_one_step_deviation <= 0.05 + 1e-12
    assert m.first_entry_step is not None


def test_runs_are_reproducible():
    model = _disturbed_integrator()
    gen = DisturbanceGenerator(BoxSet([-0.05], [0.05]), seed=3)
    a = simulate(model, _config(BoxSet([-1.0], [1.0])), [2.0], 6, gen)
    b = simulate(model, _config(BoxSet([-1.0], [1.0])), [2.0], 6, gen)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.inputs, b.inputs)
    assert a.status == b.status


def test_consecutive_infeasible_steps_abort():
    # 可行之后被恒定扰动推离, 输入范围不足以拉回
    point = BoxSet.point([0.0])
    cfg = _config(point, horizon=1, target=point)
    gen = DisturbanceGenerator(BoxSet([1.0], [1.0]), seed=0)
    with pytest.raises(AbortedRun) as info:
        simulate(_disturbed_integrator(), cfg, [0.0], 10, gen, max_consecutive_failures=1)
    assert info.value.step == 2
    assert info.value.code == 5


def test_infeasible_start_steers_inward_without_abort(integrator):
    cfg = _config(BoxSet([-0.2], [0.2]), horizon=1)
    gen = DisturbanceGenerator(BoxSet([0.0], [0.0]), mode="zero")
    record = simulate(integrator, cfg, [2.0], 6, gen, max_consecutive_failures=0)
    assert record.steps == 6
    assert record.status[:3] == ["infeasible"] * 3
    assert "infeasible" not in record.status[3:]
    np.testing.assert_allclose(record.states[:4, 0], [2.0, 1.5, 1.0, 0.5], atol=1e-6)
    assert abs(record.states[-1, 0]) <= 0.2 + 1e-6


def _runaway(x, u, w, p):
    return x + np.exp(800.0 * u)


def test_diverging_plant_aborts_run():
    model = SystemModel(1, 1, 1, rhs=_runaway, sample_time=1.0, integrator_substeps=1, kind="discrete")
    cfg = _config(None, horizon=1, U=BoxSet([1.0], [2.0]))
    gen = DisturbanceGenerator(BoxSet([0.0], [0.0]), mode="zero")
    with pytest.raises(AbortedRun) as info:
        simulate(model, cfg, [0.0], 5, gen)
    assert info.value.step == 0
    assert "发散" in info.value.detail


# ---------- report ----------

def test_violation_table_prints_dash_without_violations():
    rows = [
        SweepRow(gamma=0.3, mean_violations=2.0, mean_avg_violation=0.3, mean_settled_violations=1.0),
        SweepRow(gamma=1.0, mean_violations=0.0, mean_settled_violations=0.0),
        SweepRow(gamma=10.0, flag="EmptyModifiedSet"),
    ]
    lines = format_violation_table(rows).splitlines()
    assert len(lines) == 4
    assert lines[1].split() == ["0.3", "2", "0.3000", "1"]
    assert lines[2].split() == ["1", "0", "-", "0"]
    assert "EmptyModifiedSet" in lines[3]


# ---------- CSTR closed-loop properties (slow) ----------

X0_HOT = [0.12, 355.0]
X0_RICH = [0.9, 345.0]
SEEDS = list(range(20))


@pytest.mark.slow
def test_cstr_deviation_estimate_and_modified_target(cstr_design):
    est = cstr_design.deviation_estimate()
    assert est.norm == pytest.approx(0.5351, rel=2e-2)
    np.testing.assert_allclose(est.x, [0.7625, 352.0], atol=1e-9)
    np.testing.assert_allclose(est.u, [315.0])
    np.testing.assert_allclose(est.w, [0.1, 2.0])

    mod = cstr_design.modified_target(1.0)
    np.testing.assert_allclose(mod.lb, [0.0, 348.0 + est.norm], atol=1e-9)
    np.testing.assert_allclose(mod.ub, [1.0, 352.0 - est.norm], atol=1e-9)


@pytest.mark.slow
def test_cstr_default_gamma_grid_has_nonempty_sets(cstr_design):
    for gamma in ExperimentConfig().run.gammas:
        cfg = cstr_design.build(Variant.PROPOSED, gamma)
        assert cfg.terminal_set.is_subset_of(cfg.zone_cost.target, tol=1e-9)


@pytest.mark.slow
@pytest.mark.parametrize("x0", [[0.45, 353.0], [0.6, 347.0]])
def test_cstr_modified_terminal_alone_keeps_first_input(cstr_design, x0):
    nominal = cstr_design.build(Variant.NOMINAL, 1.0)
    mixed = cstr_design.build(Variant.ORIGINAL_ZONE_MODIFIED_TERMINAL, 1.0)
    a = solve_zmpc(x0, cstr_design.model, nominal)
    b = solve_zmpc(x0, cstr_design.model, mixed)
    assert a.status != SolveStatus.INFEASIBLE
    assert abs(b.inputs[0, 0] - a.inputs[0, 0]) <= 10 * nominal.solver.stationarity_tolerance


@pytest.mark.slow
def test_cstr_value_function_decreases(cstr_design):
    cfg = replace(cstr_design.build(Variant.NOMINAL, 1.0), economic_weight=0.0)
    tol = 2 * cfg.solver.stationarity_tolerance * (cfg.zone_cost.c1 + cfg.zone_cost.c2)
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(20):
        T = rng.choice([rng.uniform(346.8, 347.8), rng.uniform(352.2, 353.5)])
        x0 = [rng.uniform(0.4, 0.6), T]
        if solve_zmpc(x0, cstr_design.model, cfg).status == SolveStatus.INFEASIBLE:
            continue
        margins = value_decrease_margins(cstr_design.model, cfg, x0, steps=10)
        assert len(margins) >= 1
        assert np.all(margins <= tol), (x0, margins)
        checked += 1
    assert checked >= 10


def _sweep_metrics(design, variant, x0, gammas=(1.0,), seeds=SEEDS):
    rows = gamma_sweep(design, list(gammas), x0, 100, seeds, variant=variant, n_jobs=-1)
    for row in rows:
        assert row.flag == "ok" and row.aborted == 0
    return rows


@pytest.mark.slow
@pytest.mark.parametrize("x0", [X0_HOT, X0_RICH])
def test_cstr_proposed_holds_zone_after_settling(cstr_design, x0):
    (proposed,) = _sweep_metrics(cstr_design, Variant.PROPOSED, x0)
    bound = 1.5 * cstr_design.deviation_estimate().norm
    assert all(m.first_entry_step is not None and m.settled_step is not None for m in proposed.metrics)
    assert sum(m.violations_after_settling == 0 for m in proposed.metrics) >= 19
    assert all(m.max_one_step_deviation_after_settling <= bound for m in proposed.metrics)

    (nominal,) = _sweep_metrics(cstr_design, Variant.NOMINAL, x0)
    assert all(m.settled_step is not None for m in nominal.metrics)
    assert sum(m.violations_after_settling >= 1 for m in nominal.metrics) >= 10


@pytest.mark.slow
def test_cstr_gamma_sweep_trend(cstr_design):
    gammas = ExperimentConfig().run.gammas
    rows = _sweep_metrics(cstr_design, Variant.PROPOSED, X0_HOT, gammas=gammas, seeds=list(range(10)))
    settled = [r.mean_settled_violations for r in rows]
    # 相邻 gamma 之间允许平均 1 次的种子噪声
    assert all(later <= earlier + 1.0 for earlier, later in zip(settled, settled[1:]))
    assert settled[-1] == 0.0 and settled[-2] == 0.0

    econ = [r.mean_economic_cost for r in rows]
    drops = [(a, b) for a, b in zip(econ, econ[1:]) if b < a]
    assert len(drops) <= 1
    assert all(b >= 0.99 * a for a, b in drops)


@pytest.mark.slow
def test_cstr_short_horizon_variants(cstr_design):
    design = replace(cstr_design, horizon=3)
    (proposed,) = _sweep_metrics(design, Variant.PROPOSED, X0_HOT, seeds=[0])
    (free,) = _sweep_metrics(design, Variant.NO_TERMINAL, X0_HOT, seeds=[0])
    assert proposed.metrics[0].violations_after_settling == 0
    assert free.metrics[0].first_entry_step is not None
