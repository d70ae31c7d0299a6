"""
闭环滚动时域仿真 + 指标统计

每一步从真实状态求解 ZMPC (控制器只用 w = 0 的名义模型), 首个输入作用于
带真实扰动的对象。gamma 扫描中各 (gamma, seed) 仿真相互独立, 用 joblib 并行,
结果按提交顺序汇总。
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from app.services.dynamics import SystemModel, integrate_step
from app.services.ocp import SolveStatus, Variant, ZmpcConfig, evaluate_value_function, solve_zmpc
from app.services.sets import BoxSet, ZoneCostSpec, zone_cost
from app.utils.errors import AbortedRun, EmptyInvariantSet, EmptyModifiedSet, NonFiniteState

logger = logging.getLogger(__name__)

# 判定 "在集合内" 的残差容差
VIOLATION_TOL = 1e-9


# ======================== Disturbance ========================

@dataclass(frozen=True)
class DisturbanceGenerator:
    W: BoxSet
    seed: int = 0
    mode: str = "uniform_iid"

    def __post_init__(self):
        if self.mode not in ("uniform_iid", "zero"):
            raise ValueError(f"未知扰动模式: {self.mode}")
        self.W.validate("W")

    def sequence(self, steps: int) -> np.ndarray:
        """(steps, n_w), 同种子同序列"""
        if self.mode == "zero":
            return np.zeros((steps, self.W.dim))
        rng = np.random.default_rng(self.seed)
        return rng.uniform(self.W.lb, self.W.ub, size=(steps, self.W.dim))


# ======================== Record / metrics ========================

@dataclass
class ClosedLoopRecord:
    """S 步闭环记录; 状态与代价含末状态 x(S), 共 S+1 行"""
    sample_time: float
    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    predicted_next: np.ndarray          # x̃(n+1|n)
    zone_cost_actual: np.ndarray
    zone_cost_modified: np.ndarray
    economic_cost: np.ndarray
    value: np.ndarray                   # V_N^0(x(n))
    status: List[str]
    state_names: tuple = ()
    input_names: tuple = ()
    disturbance_names: tuple = ()

    @property
    def steps(self) -> int:
        return len(self.inputs)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.sample_time


@dataclass
class RunMetrics:
    accumulated_zone_cost_actual: float
    accumulated_economic_cost: float
    first_entry_step: Optional[int]
    violations_after_entry: int
    avg_violation_magnitude: Optional[float]
    state_constraint_violations: int
    max_one_step_deviation: float = 0.0
    settled_step: Optional[int] = None
    violations_after_settling: int = 0
    avg_violation_after_settling: Optional[float] = None
    max_one_step_deviation_after_settling: Optional[float] = None
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def one_step_deviations(record: ClosedLoopRecord) -> np.ndarray:
    """|x(n+1) - x̃(n+1|n)|, 形状 (S, n_x)"""
    return np.abs(record.states[1:] - record.predicted_next)


def settle_region(config: ZmpcConfig) -> BoxSet:
    """控制器的收敛区域: 有终端集时为终端集, 否则为跟踪目标集"""
    return config.terminal_set if config.terminal_set is not None else config.zone_cost.target


def _violations_after(residual: np.ndarray, start: Optional[int]):
    if start is None:
        return 0, None
    after = residual[start + 1:]
    bad = after[after > VIOLATION_TOL]
    return int(bad.size), (float(bad.mean()) if bad.size else None)


def compute_metrics(record: ClosedLoopRecord, actual_target: BoxSet, state_bounds: BoxSet,
                    settle_set: Optional[BoxSet] = None) -> RunMetrics:
    """
    闭环指标

    违反次数从首次进入 actual_target 之后算起; 给出 settle_set 时另统计首次进入
    settle_set (控制器的终端集) 之后的违反次数与单步偏差。
    """
    if len(record.states) == 0:
        raise ValueError("空记录")
    residual = actual_target.residual(record.states).sum(axis=-1)
    inside = residual <= VIOLATION_TOL
    entry = int(np.argmax(inside)) if inside.any() else None
    violations, avg = _violations_after(residual, entry)

    deviations = np.linalg.norm(one_step_deviations(record), axis=-1)
    settled, settled_violations, settled_avg, settled_dev = None, 0, None, None
    if settle_set is not None:
        in_settle = settle_set.residual(record.states).sum(axis=-1) <= VIOLATION_TOL
        settled = int(np.argmax(in_settle)) if in_settle.any() else None
        settled_violations, settled_avg = _violations_after(residual, settled)
        if settled is not None and settled < len(deviations):
            settled_dev = float(deviations[settled:].max())

    state_res = state_bounds.residual(record.states).sum(axis=-1)
    return RunMetrics(
        accumulated_zone_cost_actual=float(np.sum(record.zone_cost_actual)),
        accumulated_economic_cost=float(np.sum(record.economic_cost)),
        first_entry_step=entry,
        violations_after_entry=violations,
        avg_violation_magnitude=avg,
        state_constraint_violations=int(np.sum(state_res > VIOLATION_TOL)),
        max_one_step_deviation=float(deviations.max()) if len(deviations) else 0.0,
        settled_step=settled,
        violations_after_settling=settled_violations,
        avg_violation_after_settling=settled_avg,
        max_one_step_deviation_after_settling=settled_dev,
        steps=record.steps,
    )


# ======================== Simulation ========================

def simulate(model: SystemModel, config: ZmpcConfig, x0, steps: int, disturbance: DisturbanceGenerator,
             actual_target: Optional[BoxSet] = None, max_consecutive_failures: int = 3) -> ClosedLoopRecord:
    """
    滚动时域闭环仿真

    热启动为上一步最优序列左移一位并重复末输入。
    初始状态可能不在可行域内, 首次可行之前的不可行步只记录状态照常施加输入;
    首次可行之后连续不可行步数超过 max_consecutive_failures 时抛 AbortedRun。
    对象状态发散 (NaN/Inf) 时同样抛 AbortedRun。
    """
    if steps < 1:
        raise ValueError(f"steps 必须 >= 1, 当前 {steps}")
    if actual_target is None:
        actual_target = config.zone_cost.target
    actual_spec = ZoneCostSpec(config.zone_cost.c1, config.zone_cost.c2, actual_target)
    w_seq = disturbance.sequence(steps)

    x = np.asarray(x0, dtype=float)
    states, inputs, preds, values, status = [x], [], [], [], []
    warm, failures, reached = None, 0, False
    for n in range(steps):
        sol = solve_zmpc(x, model, config, warm_start=warm)
        if sol.status == SolveStatus.INFEASIBLE:
            if not reached:
                logger.warning(f"第 {n} 步不可行 (违反 {sol.max_constraint_violation:.3g}), 尚未进入可行域")
            else:
                failures += 1
                logger.warning(f"第 {n} 步不可行 (违反 {sol.max_constraint_violation:.3g}), 连续 {failures} 次")
                if failures > max_consecutive_failures:
                    logger.error(f"连续 {failures} 步不可行, 仿真终止于第 {n} 步")
                    raise AbortedRun(f"连续 {failures} 步不可行", step=n)
        else:
            reached, failures = True, 0

        u = sol.inputs[0]
        try:
            x = integrate_step(model, x, u, w_seq[n])
        except NonFiniteState as e:
            logger.error(f"第 {n} 步对象状态发散 (输入 {u}), 仿真终止")
            raise AbortedRun(f"对象状态发散: {e.detail}", step=n) from e
        states.append(x)
        inputs.append(u)
        preds.append(sol.predicted_states[1])
        values.append(sol.objective_value)
        status.append(sol.status.value)
        warm = np.vstack([sol.inputs[1:], sol.inputs[-1:]])

    states = np.asarray(states)
    record = ClosedLoopRecord(
        sample_time=model.sample_time,
        states=states,
        inputs=np.asarray(inputs),
        disturbances=w_seq,
        predicted_next=np.asarray(preds),
        zone_cost_actual=np.asarray(zone_cost(states, actual_spec)),
        zone_cost_modified=np.asarray(zone_cost(states, config.zone_cost)),
        economic_cost=states[:, config.economic_index].copy(),
        value=np.asarray(values),
        status=status,
        state_names=model.state_names,
        input_names=model.input_names,
        disturbance_names=model.disturbance_names,
    )
    metrics = compute_metrics(record, actual_target, config.state_bounds, settle_region(config))
    logger.info(
        f"闭环仿真完成: {steps} 步, 首次进入 {metrics.first_entry_step}, "
        f"进入后违反 {metrics.violations_after_entry}, 收敛 (进入终端集) {metrics.settled_step}, "
        f"收敛后违反 {metrics.violations_after_settling}, 累计区域代价 {metrics.accumulated_zone_cost_actual:.4g}"
    )
    return record


def value_decrease_margins(model: SystemModel, config: ZmpcConfig, x0, steps: int,
                           multistart_count: int = 6) -> np.ndarray:
    """
    名义闭环 (w = 0) 上的 V(x(n+1)) - V(x(n)) + ℓ̃_z(x(n)), 直到进入目标区域

    值函数下降性质要求每个元素 <= 0 (加求解容差)。
    """
    x = np.asarray(x0, dtype=float)
    zero_w = np.zeros(model.disturbance_dim)
    v = evaluate_value_function(x, model, config, multistart_count)
    margins = []
    for _ in range(steps):
        stage = zone_cost(x, config.zone_cost)
        if stage <= 0.0:
            break
        sol = solve_zmpc(x, model, config)
        x = integrate_step(model, x, sol.inputs[0], zero_w)
        v_next = evaluate_value_function(x, model, config, multistart_count)
        margins.append(v_next - v + stage)
        v = v_next
    return np.asarray(margins)


# ======================== Gamma sweep ========================

@dataclass
class SweepRow:
    gamma: float
    flag: str = "ok"                    # ok / EmptyModifiedSet / EmptyInvariantSet
    modified_target: Optional[BoxSet] = None
    runs: int = 0
    aborted: int = 0
    mean_violations: Optional[float] = None
    mean_avg_violation: Optional[float] = None
    mean_zone_cost: Optional[float] = None
    mean_economic_cost: Optional[float] = None
    mean_first_entry: Optional[float] = None
    mean_state_violations: Optional[float] = None
    mean_settled_violations: Optional[float] = None
    metrics: List[RunMetrics] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        box = self.modified_target
        return {
            "gamma": self.gamma,
            "flag": self.flag,
            "modified_lb": box.lb.tolist() if box is not None else None,
            "modified_ub": box.ub.tolist() if box is not None else None,
            "runs": self.runs,
            "aborted": self.aborted,
            "mean_violations": self.mean_violations,
            "mean_avg_violation": self.mean_avg_violation,
            "mean_zone_cost": self.mean_zone_cost,
            "mean_economic_cost": self.mean_economic_cost,
            "mean_first_entry": self.mean_first_entry,
            "mean_state_violations": self.mean_state_violations,
            "mean_settled_violations": self.mean_settled_violations,
        }


def _run_one(model: SystemModel, config: ZmpcConfig, x0, steps: int, W: BoxSet, seed: int, mode: str,
             actual_target: BoxSet, max_consecutive_failures: int) -> Optional[RunMetrics]:
    try:
        record = simulate(model, config, x0, steps, DisturbanceGenerator(W, seed, mode),
                          actual_target=actual_target, max_consecutive_failures=max_consecutive_failures)
    except AbortedRun as e:
        logger.warning(f"种子 {seed} 仿真中止: {e.message}")
        return None
    return compute_metrics(record, actual_target, config.state_bounds, settle_region(config))


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _aggregate(row: SweepRow, results: List[Optional[RunMetrics]]) -> SweepRow:
    done = [m for m in results if m is not None]
    row.runs = len(results)
    row.aborted = len(results) - len(done)
    row.metrics = done
    if done:
        row.mean_violations = _mean([m.violations_after_entry for m in done])
        row.mean_avg_violation = _mean([m.avg_violation_magnitude for m in done])
        row.mean_zone_cost = _mean([m.accumulated_zone_cost_actual for m in done])
        row.mean_economic_cost = _mean([m.accumulated_economic_cost for m in done])
        row.mean_first_entry = _mean([m.first_entry_step for m in done])
        row.mean_state_violations = _mean([m.state_constraint_violations for m in done])
        row.mean_settled_violations = _mean([m.violations_after_settling for m in done])
    return row


def gamma_sweep(design, gammas: Sequence[float], x0, steps: int, seeds: Sequence[int],
                variant: Variant = Variant.PROPOSED, disturbance_mode: str = "uniform_iid",
                max_consecutive_failures: int = 3, n_jobs: int = 1) -> List[SweepRow]:
    """
    对每个 gamma 重新收缩目标集 / 计算终端 CIS, 跑全部种子并取平均

    design 为 ControllerDesign; 收缩后为空或 CIS 为空的 gamma 行只打标记。
    """
    rows, tasks = [], []
    for gamma in gammas:
        row = SweepRow(gamma=float(gamma))
        try:
            cfg = design.build(variant, gamma)
            row.modified_target = cfg.zone_cost.target
            for seed in seeds:
                tasks.append((len(rows), cfg, seed))
        except EmptyModifiedSet as e:
            logger.warning(f"gamma={gamma}: 修正目标集为空 ({e.detail})")
            row.flag = "EmptyModifiedSet"
        except EmptyInvariantSet as e:
            logger.warning(f"gamma={gamma}: 终端 CIS 为空 ({e.detail})")
            row.flag = "EmptyInvariantSet"
        rows.append(row)

    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_one)(design.model, cfg, x0, steps, design.disturbance_bounds, seed, disturbance_mode,
                          design.target, max_consecutive_failures)
        for _, cfg, seed in tasks
    )
    per_row: List[List[Optional[RunMetrics]]] = [[] for _ in rows]
    for (i, _, _), metrics in zip(tasks, results):
        per_row[i].append(metrics)
    for row, res in zip(rows, per_row):
        if row.flag == "ok":
            _aggregate(row, res)
    return rows


def format_violation_table(rows: Sequence[SweepRow]) -> str:
    """gamma / 违反次数 / 平均违反量 / 收敛后违反次数, 无违反时平均值打印 "-" """
    lines = [f"{'gamma':>8}  {'violations':>10}  {'avg violation':>13}  {'after settling':>14}"]
    for row in rows:
        if row.flag != "ok":
            lines.append(f"{row.gamma:>8g}  {row.flag:>10}  {'':>13}  {'':>14}")
            continue
        count = "-" if row.mean_violations is None else f"{row.mean_violations:g}"
        avg = "-" if not row.mean_violations or row.mean_avg_violation is None else f"{row.mean_avg_violation:.4f}"
        settled = "-" if row.mean_settled_violations is None else f"{row.mean_settled_violations:g}"
        lines.append(f"{row.gamma:>8g}  {count:>10}  {avg:>13}  {settled:>14}")
    return "\n".join(lines)
