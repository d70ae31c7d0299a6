"""
区域跟踪 MPC 有限时域优化问题

单步打靶 + 罚函数: 输入做硬边界 (L-BFGS-B 盒约束), 状态约束与终端约束
以越界量平方和乘罚因子加入目标, 罚因子逐轮放大直到最大违反量 <= constraint_tolerance。
梯度用批量中心差分 (一次批量前推算出全部扰动方向)。
前推发散的点给有限大罚值, 不中断求解; 等代价解之间用向目标中心的弱二次项取舍。
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from app.services.dynamics import SystemModel, integrate_step
from app.services.sets import BoxSet, ZoneCostSpec, zone_cost

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    NOMINAL = "nominal"
    PROPOSED = "proposed"
    ORIGINAL_ZONE_MODIFIED_TERMINAL = "original-zone-modified-terminal"
    NO_TERMINAL = "no-terminal"


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    FEASIBLE_SUBOPTIMAL = "feasible_suboptimal"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 100
    constraint_tolerance: float = 1e-6
    stationarity_tolerance: float = 1e-6
    penalty_initial: float = 1e4
    penalty_growth: float = 10.0
    penalty_max: float = 1e10
    multistart_count: int = 2
    seed: int = 0
    fd_step: float = 1e-7               # 归一化输入空间 [0, 1] 中的差分步长
    centering_weight: float = 1e-3      # 预测状态向目标中心的弱拉力, 只用于在等代价解中取唯一解

    def __post_init__(self):
        if self.max_iterations < 1 or self.multistart_count < 1:
            raise ValueError("max_iterations / multistart_count 必须 >= 1")
        if min(self.constraint_tolerance, self.stationarity_tolerance, self.fd_step) <= 0:
            raise ValueError("容差与差分步长必须为正")
        if self.centering_weight < 0:
            raise ValueError(f"centering_weight 不能为负: {self.centering_weight}")
        if not self.penalty_growth > 1:
            raise ValueError(f"penalty_growth 必须 > 1, 当前 {self.penalty_growth}")
        if not 0 < self.penalty_initial <= self.penalty_max:
            raise ValueError("需要 0 < penalty_initial <= penalty_max")

    @property
    def max_penalty_rounds(self) -> int:
        ratio = self.penalty_max / self.penalty_initial
        return max(1, math.ceil(math.log(ratio) / math.log(self.penalty_growth) - 1e-12))


@dataclass(frozen=True)
class ZmpcConfig:
    horizon: int
    zone_cost: ZoneCostSpec
    state_bounds: BoxSet
    input_bounds: BoxSet
    terminal_set: Optional[BoxSet] = None
    economic_weight: float = 0.0
    variant: Variant = Variant.PROPOSED
    solver: SolverSettings = field(default_factory=SolverSettings)
    economic_index: int = 0             # ℓ_e = x[economic_index], CSTR 为 C_A

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon 必须 >= 1, 当前 {self.horizon}")
        if self.economic_weight < 0:
            raise ValueError(f"economic_weight 不能为负: {self.economic_weight}")
        object.__setattr__(self, "variant", Variant(self.variant))
        self.state_bounds.validate("state_bounds")
        self.input_bounds.validate("input_bounds")
        if (self.terminal_set is not None and self.variant == Variant.PROPOSED
                and not self.terminal_set.is_subset_of(self.zone_cost.target, tol=1e-9)):
            raise ValueError(f"终端集 {self.terminal_set} 不在跟踪目标集 {self.zone_cost.target} 内")


@dataclass
class OcpSolution:
    inputs: np.ndarray                  # (N, n_u)
    predicted_states: np.ndarray        # (N+1, n_x)
    objective_value: float
    max_constraint_violation: float
    status: SolveStatus
    iterations: int = 0
    penalty_rounds: int = 0
    starts_evaluated: int = 0


# ======================== Costs ========================

def economic_cost(x, u, config: ZmpcConfig):
    return np.asarray(x, dtype=float)[..., config.economic_index]


def stage_cost(x, u, config: ZmpcConfig):
    """ℓ̃_z(x) + economic_weight·ℓ_e(x, u)"""
    cost = zone_cost(x, config.zone_cost)
    if config.economic_weight:
        cost = cost + config.economic_weight * economic_cost(x, u, config)
    return float(cost) if np.ndim(cost) == 0 else cost


def rollout(model: SystemModel, x0, inputs: np.ndarray, strict: bool = False) -> np.ndarray:
    """名义前推 (w = 0): inputs (..., N, n_u) -> states (..., N+1, n_x)"""
    inputs = np.asarray(inputs, dtype=float)
    zero_w = np.zeros(model.disturbance_dim)
    x = np.broadcast_to(np.asarray(x0, dtype=float), inputs.shape[:-2] + (model.state_dim,))
    states = [x]
    for i in range(inputs.shape[-2]):
        x = integrate_step(model, x, inputs[..., i, :], zero_w, strict=strict)
        states.append(x)
    return np.stack(states, axis=-2)


# ======================== Problem ========================

# 前推发散 (NaN/Inf) 时代替目标值的有限大罚值
NONFINITE_PENALTY = 1e20


@dataclass
class _Candidate:
    v: np.ndarray
    objective: float                    # 纯阶段代价和 (不含居中项)
    score: float                        # 含居中项, 用于多起点比较
    violation: float
    converged: bool
    iterations: int
    rounds: int


class _ZmpcProblem:
    """
    归一化决策变量 v ∈ [0,1]^(N·n_u), u = lb + v·(ub - lb)

    with_terminal=False 时忽略终端约束 (先解松弛问题)。
    """

    def __init__(self, model: SystemModel, config: ZmpcConfig, x0, with_terminal: bool = True):
        self.model = model
        self.config = config
        self.x0 = np.asarray(x0, dtype=float)
        self.N = config.horizon
        self.n_u = model.input_dim
        self.lb = np.tile(config.input_bounds.lb, self.N)
        self.span = np.tile(config.input_bounds.width, self.N)
        self.terminal = config.terminal_set if with_terminal else None
        half = 0.5 * config.state_bounds.width
        self._center = config.zone_cost.target.center
        self._scale = np.where(half > 0, half, 1.0)

    @property
    def size(self) -> int:
        return self.N * self.n_u

    def to_inputs(self, v) -> np.ndarray:
        u = self.lb + np.asarray(v, dtype=float) * self.span
        return u.reshape(u.shape[:-1] + (self.N, self.n_u))

    def to_v(self, inputs) -> np.ndarray:
        flat = np.asarray(inputs, dtype=float).reshape(-1)
        safe = np.where(self.span > 0, self.span, 1.0)
        return np.clip(np.where(self.span > 0, (flat - self.lb) / safe, 0.0), 0.0, 1.0)

    def evaluate(self, V: np.ndarray):
        """批量评估: 目标 / 含居中项目标 / 违反量平方和 / 最大违反量; 发散的行全部记为 inf"""
        inputs = self.to_inputs(V)
        states = rollout(self.model, self.x0, inputs)
        with np.errstate(invalid="ignore", over="ignore"):
            return self._costs(states, inputs)

    def _costs(self, states: np.ndarray, inputs: np.ndarray):
        cfg = self.config
        objective = np.sum(stage_cost(states[..., :-1, :], inputs, cfg), axis=-1)

        res = cfg.state_bounds.residual(states[..., 1:, :])
        vsq = np.sum(res * res, axis=(-1, -2))
        vmax = res.max(axis=(-1, -2))
        if self.terminal is not None:
            term = self.terminal.residual(states[..., -1, :])
            vsq = vsq + np.sum(term * term, axis=-1)
            vmax = np.maximum(vmax, term.max(axis=-1))

        score = objective
        weight = cfg.solver.centering_weight
        if weight:
            offset = (states[..., 1:, :] - self._center) / self._scale
            score = objective + weight * np.sum(offset * offset, axis=(-1, -2))

        bad = ~(np.isfinite(score) & np.isfinite(vsq) & np.isfinite(vmax))
        if bad.any():
            objective, score, vsq, vmax = (np.where(bad, np.inf, a) for a in (objective, score, vsq, vmax))
        return objective, score, vsq, vmax

    def penalized(self, v: np.ndarray, rho: float):
        h = self.config.solver.fd_step
        eye = np.eye(self.size) * h
        V = np.vstack([v[None, :], v + eye, v - eye])
        _, score, vsq, _ = self.evaluate(V)
        with np.errstate(invalid="ignore"):
            f = score + rho * vsq
        ok = np.isfinite(f)
        if not ok[0]:
            return NONFINITE_PENALTY, np.zeros(self.size)

        # 一侧发散时退化为单侧差分, 两侧都发散时该分量记 0
        fp, fm = f[1:self.size + 1], f[self.size + 1:]
        okp, okm = ok[1:self.size + 1], ok[self.size + 1:]
        fp_safe, fm_safe = np.where(okp, fp, f[0]), np.where(okm, fm, f[0])
        central = (fp_safe - fm_safe) / (2.0 * h)
        one_sided = (fp_safe - fm_safe) / h
        grad = np.where(okp & okm, central, np.where(okp | okm, one_sided, 0.0))
        return float(f[0]), grad


def _solve_from(problem: _ZmpcProblem, v0: np.ndarray, settings: SolverSettings) -> _Candidate:
    v = np.clip(v0, 0.0, 1.0)
    rho = settings.penalty_initial
    iterations, converged, rounds = 0, False, 0
    obj, score, viol = np.inf, np.inf, np.inf
    for rounds in range(1, settings.max_penalty_rounds + 1):
        res = minimize(
            problem.penalized, v, args=(rho,), jac=True, method="L-BFGS-B",
            bounds=[(0.0, 1.0)] * problem.size,
            options={"maxiter": settings.max_iterations, "gtol": settings.stationarity_tolerance, "ftol": 1e-12},
        )
        v = np.clip(res.x, 0.0, 1.0)
        iterations += int(res.nit)
        converged = bool(res.success)
        o, sc, _, vm = problem.evaluate(v[None, :])
        obj, score, viol = float(o[0]), float(sc[0]), float(vm[0])
        if viol <= settings.constraint_tolerance or not math.isfinite(viol):
            break
        rho = min(rho * settings.penalty_growth, settings.penalty_max)
    return _Candidate(v=v, objective=obj, score=score, violation=viol, converged=converged,
                      iterations=iterations, rounds=rounds)


def _initial_guesses(problem: _ZmpcProblem, warm_start, settings: SolverSettings) -> List[np.ndarray]:
    """热启动 / 中点 / 随机点凑满 multistart_count, 另加全下界与全上界两个确定起点"""
    starts = []
    if warm_start is not None:
        starts.append(problem.to_v(warm_start))
    if len(starts) < settings.multistart_count:
        starts.append(np.full(problem.size, 0.5))
    rng = np.random.default_rng(settings.seed)
    while len(starts) < settings.multistart_count:
        starts.append(rng.uniform(0.0, 1.0, problem.size))
    starts.append(np.zeros(problem.size))
    starts.append(np.ones(problem.size))
    return starts


def _input_norm(problem: _ZmpcProblem, c: _Candidate) -> float:
    return float(np.linalg.norm(problem.to_inputs(c.v)))


def _pick(problem: _ZmpcProblem, candidates: List[_Candidate], tol: float):
    """可行解取 (含居中项目标, ‖u‖) 最小者; 全不可行时取违反量最小者"""
    feasible = [c for c in candidates if c.violation <= tol]
    if feasible:
        return min(feasible, key=lambda c: (c.score, _input_norm(problem, c))), True
    return min(candidates, key=lambda c: (c.violation, c.score)), False


def _run_starts(problem: _ZmpcProblem, starts: List[np.ndarray], settings: SolverSettings) -> List[_Candidate]:
    candidates = []
    for k, v0 in enumerate(starts):
        c = _solve_from(problem, v0, settings)
        if not math.isfinite(c.violation):
            logger.debug(f"起点 {k}: 前推发散, 记为不可行")
        candidates.append(c)
    return candidates


def solve_zmpc(x0, model: SystemModel, config: ZmpcConfig, warm_start=None) -> OcpSolution:
    """
    求解 N 步区域跟踪 MPC, 返回多起点中的最优解

    有终端约束时先解去掉终端约束的松弛问题; 若其解已落在终端集内即为原问题最优,
    直接返回, 否则以它为首个起点求解完整问题。返回的输入序列总是求解器评估过的点。
    """
    settings = config.solver
    tol = settings.constraint_tolerance
    full = _ZmpcProblem(model, config, x0)
    starts = _initial_guesses(full, warm_start, settings)

    candidates: List[_Candidate] = []
    best = None
    if config.terminal_set is not None:
        relaxed = _ZmpcProblem(model, config, x0, with_terminal=False)
        relaxed_candidates = _run_starts(relaxed, starts, settings)
        candidates.extend(relaxed_candidates)
        first, _ = _pick(relaxed, relaxed_candidates, tol)
        _, _, _, vm = full.evaluate(first.v[None, :])
        if float(vm[0]) <= tol:
            best = replace(first, violation=float(vm[0]))
        else:
            starts = [first.v] + starts

    if best is None:
        full_candidates = _run_starts(full, starts, settings)
        candidates.extend(full_candidates)
        best, _ = _pick(full, full_candidates, tol)

    if best.violation <= tol:
        status = SolveStatus.OPTIMAL if best.converged else SolveStatus.FEASIBLE_SUBOPTIMAL
    else:
        status = SolveStatus.INFEASIBLE

    inputs = full.to_inputs(best.v)
    states = rollout(model, x0, inputs)
    solution = OcpSolution(
        inputs=inputs, predicted_states=states,
        objective_value=best.objective, max_constraint_violation=best.violation, status=status,
        iterations=sum(c.iterations for c in candidates),
        penalty_rounds=max(c.rounds for c in candidates),
        starts_evaluated=len(candidates),
    )
    logger.debug(
        f"ZMPC 求解: 起点 {len(candidates)}, 罚轮数 {solution.penalty_rounds}, 迭代 {solution.iterations}, "
        f"目标 {solution.objective_value:.6g}, 违反 {solution.max_constraint_violation:.3g}, {status.value}"
    )
    return solution


def evaluate_value_function(x0, model: SystemModel, config: ZmpcConfig, multistart_count: int = 6) -> float:
    """V_N^0(x0): 不加居中项, 多起点数提高以减小局部解影响"""
    count = max(multistart_count, config.solver.multistart_count)
    solver = replace(config.solver, multistart_count=count, centering_weight=0.0)
    return solve_zmpc(x0, model, replace(config, solver=solver)).objective_value
