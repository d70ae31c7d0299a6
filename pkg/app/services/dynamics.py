"""
过程模型模块

连续时间 ODE 右端 + 定步长 RK4 离散化 (零阶保持), 以及状态对扰动的灵敏度矩阵。
所有函数支持前置批量维度: x (..., n_x), u (..., n_u), w (..., n_w)。
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, is_dataclass
from typing import Any, Callable, Optional, Sequence, Tuple

import numpy as np

from app.utils.errors import NonFiniteInput, NonFiniteState

logger = logging.getLogger(__name__)

Rhs = Callable[[np.ndarray, np.ndarray, np.ndarray, Any], np.ndarray]


# ======================== CSTR ========================

@dataclass(frozen=True)
class CstrParameters:
    """放热 CSTR 参数 (单位: L, min, g, J, K, mol)"""
    q: float = 100.0            # L/min
    V: float = 100.0            # L
    rho: float = 1000.0         # g/L
    Cp: float = 0.239           # J/(g·K)
    dH: float = -5.0e4          # J/mol, 放热为负
    UA: float = 5.0e4           # J/(min·K)
    k0: float = 7.2e10          # 1/min
    E_over_R: float = 8750.0    # K
    CAf_nominal: float = 1.0    # mol/L
    Tf_nominal: float = 350.0   # K

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "dH":
                if not value < 0:
                    raise ValueError(f"dH 必须为负 (放热反应), 当前 {value}")
            elif not value > 0:
                raise ValueError(f"参数 {name} 必须为正, 当前 {value}")


def cstr_rhs(x, u, w, p: CstrParameters) -> np.ndarray:
    """CSTR 右端: x = [C_A, T], u = [T_c], w = [ΔC_Af, ΔT_f]"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if not (np.isfinite(x).all() and np.isfinite(u).all() and np.isfinite(w).all()):
        raise NonFiniteInput("cstr_rhs 收到 NaN/Inf")

    ca, temp = x[..., 0], x[..., 1]
    tc = u[..., 0]
    caf = p.CAf_nominal + w[..., 0]
    tf = p.Tf_nominal + w[..., 1]

    rate = p.k0 * np.exp(-p.E_over_R / temp) * ca
    dca = p.q / p.V * (caf - ca) - rate
    dtemp = (p.q / p.V * (tf - temp)
             + p.UA / (p.V * p.rho * p.Cp) * (tc - temp)
             + (-p.dH) / (p.rho * p.Cp) * rate)
    return np.stack(np.broadcast_arrays(dca, dtemp), axis=-1)


# ======================== System model ========================

@dataclass(frozen=True, eq=False)
class SystemModel:
    """
    过程模型 (构造后不可变)

    kind="continuous": rhs 为 dx/dt, 一步映射由 RK4 在 sample_time 上积分得到;
    kind="discrete":   rhs 直接就是 x(n+1) = f(x, u, w)。
    """
    state_dim: int
    input_dim: int
    disturbance_dim: int
    rhs: Rhs
    parameters: Any = None
    sample_time: float = 0.1            # min
    integrator_substeps: int = 8
    kind: str = "continuous"
    name: str = "model"
    state_names: Tuple[str, ...] = field(default=())
    input_names: Tuple[str, ...] = field(default=())
    disturbance_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if min(self.state_dim, self.input_dim, self.disturbance_dim) < 1:
            raise ValueError("状态/输入/扰动维数必须为正整数")
        if not self.sample_time > 0:
            raise ValueError(f"sample_time 必须为正, 当前 {self.sample_time}")
        if self.integrator_substeps < 1:
            raise ValueError("integrator_substeps 必须 >= 1")
        if self.kind not in ("continuous", "discrete"):
            raise ValueError(f"未知模型类型: {self.kind}")
        # 缺省变量名
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"x{i}" for i in range(self.state_dim)))
        if not self.input_names:
            object.__setattr__(self, "input_names", tuple(f"u{i}" for i in range(self.input_dim)))
        if not self.disturbance_names:
            object.__setattr__(self, "disturbance_names", tuple(f"w{i}" for i in range(self.disturbance_dim)))

    def step(self, x, u, w, strict: bool = True) -> np.ndarray:
        return integrate_step(self, x, u, w, strict=strict)

    def fingerprint(self) -> str:
        """模型哈希 (CIS 缓存键的一部分)"""
        payload = {
            "name": self.name,
            "kind": self.kind,
            "rhs": getattr(self.rhs, "__qualname__", repr(self.rhs)),
            "dims": [self.state_dim, self.input_dim, self.disturbance_dim],
            "parameters": _parameters_payload(self.parameters),
            "sample_time": self.sample_time,
            "integrator_substeps": self.integrator_substeps,
        }
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _parameters_payload(parameters: Any):
    if parameters is None:
        return None
    if is_dataclass(parameters):
        return asdict(parameters)
    if isinstance(parameters, dict):
        return {k: np.asarray(v, dtype=float).tolist() for k, v in parameters.items()}
    return repr(parameters)


def build_cstr_model(params: Optional[CstrParameters] = None, sample_time: float = 0.08,
                     integrator_substeps: int = 8) -> SystemModel:
    """内置 CSTR 基准模型"""
    return SystemModel(
        state_dim=2, input_dim=1, disturbance_dim=2,
        rhs=cstr_rhs, parameters=params or CstrParameters(),
        sample_time=sample_time, integrator_substeps=integrator_substeps,
        name="cstr",
        state_names=("C_A", "T"), input_names=("T_c",), disturbance_names=("w_CAf", "w_Tf"),
    )


def _linear_map(x, u, w, p):
    return x @ p["A"].T + u @ p["B"].T + w @ p["E"].T


def linear_model(A, B, E, name: str = "linear") -> SystemModel:
    """离散线性模型 x+ = Ax + Bu + Ew"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    E = np.atleast_2d(np.asarray(E, dtype=float))
    if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0] or E.shape[0] != A.shape[0]:
        raise ValueError(f"矩阵维数不一致: A{A.shape} B{B.shape} E{E.shape}")
    return SystemModel(
        state_dim=A.shape[0], input_dim=B.shape[1], disturbance_dim=E.shape[1],
        rhs=_linear_map, parameters={"A": A, "B": B, "E": E},
        sample_time=1.0, integrator_substeps=1, kind="discrete", name=name,
    )


# ======================== Integration ========================

def _stage(model: SystemModel, x, u, w, strict: bool) -> np.ndarray:
    if strict and not np.isfinite(x).all():
        raise NonFiniteState("RK4 中间状态出现 NaN/Inf")
    return model.rhs(x, u, w, model.parameters)


def _rhs_unchecked(model: SystemModel, x, u, w) -> np.ndarray:
    # 非严格模式: 非有限行原样传播为 NaN, 不抛异常
    bad = ~np.isfinite(x).all(axis=-1)
    if not bad.any():
        return model.rhs(x, u, w, model.parameters)
    x_safe = np.where(bad[..., None], 1.0, x)
    out = model.rhs(x_safe, u, w, model.parameters)
    return np.where(bad[..., None], np.nan, out)


def integrate_step(model: SystemModel, x, u, w, strict: bool = True) -> np.ndarray:
    """
    一步离散映射 x(n+1) = f(x(n), u(n), w(n))

    连续模型: 经典 RK4, sample_time 等分为 integrator_substeps 段, u/w 零阶保持。
    strict=False 时非有限结果以 NaN 返回 (批量求解器用), 否则抛 NonFiniteState。
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], w.shape[:-1])
    x = np.broadcast_to(x, shape + x.shape[-1:])
    u = np.broadcast_to(u, shape + u.shape[-1:])
    w = np.broadcast_to(w, shape + w.shape[-1:])

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if model.kind == "discrete":
            if strict:
                x_next = np.asarray(model.rhs(x, u, w, model.parameters), dtype=float)
            else:
                x_next = np.asarray(_rhs_unchecked(model, x, u, w), dtype=float)
        else:
            h = model.sample_time / model.integrator_substeps
            f = (lambda z: _stage(model, z, u, w, True)) if strict else (lambda z: _rhs_unchecked(model, z, u, w))
            x_next = x
            for _ in range(model.integrator_substeps):
                k1 = f(x_next)
                k2 = f(x_next + 0.5 * h * k1)
                k3 = f(x_next + 0.5 * h * k2)
                k4 = f(x_next + h * k3)
                x_next = x_next + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    finite = np.isfinite(x_next).all(axis=-1)
    if not finite.all():
        if strict:
            raise NonFiniteState("积分结果出现 NaN/Inf")
        x_next = np.where(finite[..., None], x_next, np.nan)
    return x_next


# ======================== Sensitivity ========================

def fd_steps(disturbance_dim: int, w_range: Optional[Sequence[float]] = None) -> np.ndarray:
    """每维差分步长 h = max(1e-5, 1e-5·|w_range|)"""
    if w_range is None:
        return np.full(disturbance_dim, 1e-5)
    return np.maximum(1e-5, 1e-5 * np.abs(np.asarray(w_range, dtype=float)))


def disturbance_sensitivity(model: SystemModel, x, u, w, w_range: Optional[Sequence[float]] = None,
                            step: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    ∂x(n+1)/∂w (中心差分), 返回 (..., n_x, n_w)

    w_range: 扰动盒宽度, 用于缩放差分步长; step 直接指定步长 (覆盖 w_range)。
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    n_w = model.disturbance_dim
    h = np.asarray(step, dtype=float) if step is not None else fd_steps(n_w, w_range)
    h = np.broadcast_to(h, (n_w,))

    # 扰动方向: (2 n_w, n_w), 前 n_w 行 +h, 后 n_w 行 -h
    delta = np.concatenate([np.diag(h), -np.diag(h)], axis=0)
    w_pert = w[..., None, :] + delta
    x_next = integrate_step(model, x[..., None, :], u[..., None, :], w_pert)

    plus, minus = x_next[..., :n_w, :], x_next[..., n_w:, :]
    jac_t = (plus - minus) / (2.0 * h[:, None])     # (..., n_w, n_x)
    return np.swapaxes(jac_t, -1, -2)
