"""
盒集合运算 / 区域跟踪代价 / 目标集收缩

区域代价的松弛变量在盒约束下可闭式消去: 最优 z_z 就是 x 在盒上的逐维投影。
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from app.services.dynamics import SystemModel, disturbance_sensitivity
from app.utils.errors import EmptyModifiedSet, EmptySet

logger = logging.getLogger(__name__)


# ======================== BoxSet ========================

@dataclass(frozen=True, eq=False)
class BoxSet:
    """轴对齐盒 {x | lb <= x <= ub}"""
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        lb = np.atleast_1d(np.asarray(self.lb, dtype=float)).copy()
        ub = np.atleast_1d(np.asarray(self.ub, dtype=float)).copy()
        if lb.shape != ub.shape or lb.ndim != 1:
            raise ValueError(f"lb/ub 维数不一致: {lb.shape} vs {ub.shape}")
        lb.setflags(write=False)
        ub.setflags(write=False)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @classmethod
    def point(cls, x) -> "BoxSet":
        return cls(x, x)

    @property
    def dim(self) -> int:
        return self.lb.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.ub - self.lb

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lb + self.ub)

    def is_valid(self) -> bool:
        return bool(np.all(self.lb <= self.ub))

    def validate(self, what: str = "box") -> "BoxSet":
        if not self.is_valid():
            raise EmptySet(f"{what}: lb={self.lb.tolist()} ub={self.ub.tolist()}")
        return self

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lb - tol) & (x <= self.ub + tol), axis=-1)

    def project(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lb, self.ub)

    def residual(self, x) -> np.ndarray:
        """逐维越界量 max(0, x-ub) + max(0, lb-x)"""
        x = np.asarray(x, dtype=float)
        return np.maximum(0.0, x - self.ub) + np.maximum(0.0, self.lb - x)

    def signed_margin(self, x) -> np.ndarray:
        """到盒边界的有符号距离 (内部为正), 取各维最小"""
        x = np.asarray(x, dtype=float)
        return np.min(np.minimum(x - self.lb, self.ub - x), axis=-1)

    def is_subset_of(self, other: "BoxSet", tol: float = 1e-12) -> bool:
        return bool(np.all(self.lb >= other.lb - tol) and np.all(self.ub <= other.ub + tol))

    def corners(self) -> np.ndarray:
        """2^n 个顶点, 按字典序 (第 0 维变化最慢, 0 = lb, 1 = ub)"""
        bounds = np.stack([self.lb, self.ub], axis=0)
        idx = np.array(list(itertools.product((0, 1), repeat=self.dim)), dtype=int)
        return bounds[idx, np.arange(self.dim)]

    def product(self, other: "BoxSet") -> "BoxSet":
        return BoxSet(np.concatenate([self.lb, other.lb]), np.concatenate([self.ub, other.ub]))

    def to_dict(self) -> dict:
        return {"lb": self.lb.tolist(), "ub": self.ub.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "BoxSet":
        return cls(data["lb"], data["ub"])

    def __eq__(self, other) -> bool:
        if not isinstance(other, BoxSet):
            return NotImplemented
        return bool(np.array_equal(self.lb, other.lb) and np.array_equal(self.ub, other.ub))

    def __repr__(self) -> str:
        return f"BoxSet(lb={self.lb.tolist()}, ub={self.ub.tolist()})"


# ======================== Zone cost ========================

@dataclass(frozen=True)
class ZoneCostSpec:
    """ℓ_z 权重: c1 (1-范数) / c2 (2-范数平方)"""
    c1: float
    c2: float
    target: BoxSet

    def __post_init__(self):
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError(f"c1/c2 不能为负: c1={self.c1}, c2={self.c2}")
        if not self.c1 + self.c2 > 0:
            raise ValueError("c1 + c2 必须大于 0")


def zone_cost(x, spec: ZoneCostSpec):
    """min_{z_z ∈ target} c1·|x - z_z|_1 + c2·|x - z_z|_2^2, 批量输入返回数组"""
    spec.target.validate("zone target")
    r = spec.target.residual(x)
    cost = spec.c1 * np.sum(r, axis=-1) + spec.c2 * np.sum(r * r, axis=-1)
    return float(cost) if np.ndim(cost) == 0 else cost


# ======================== Shrinkage ========================

@dataclass(frozen=True)
class ShrinkageSpec:
    """
    收缩量 s = gamma·|xd_max|·I_t

    lower_mask / upper_mask 控制收缩哪一侧边界 (最优点已知在某条边上时可单侧收缩)。
    """
    gamma: float
    tracked_mask: Tuple[int, ...]
    xd_max: Tuple[float, ...]
    lower_mask: Optional[Tuple[int, ...]] = None
    upper_mask: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma 不能为负: {self.gamma}")
        if len(self.tracked_mask) != len(self.xd_max):
            raise ValueError("tracked_mask 与 xd_max 维数不一致")
        if any(m not in (0, 1) for m in self.tracked_mask):
            raise ValueError(f"tracked_mask 只能为 0/1: {self.tracked_mask}")

    @property
    def s(self) -> np.ndarray:
        mask = np.asarray(self.tracked_mask, dtype=float)
        return self.gamma * np.abs(np.asarray(self.xd_max, dtype=float)) * mask


def shrink_target(target: BoxSet, spec: ShrinkageSpec) -> BoxSet:
    """修正目标集 x_lb + s <= x <= x_ub - s"""
    target.validate("target")
    s = spec.s
    if s.shape != target.lb.shape:
        raise ValueError(f"收缩量维数 {s.shape} 与目标集 {target.lb.shape} 不一致")
    lower = np.ones_like(s) if spec.lower_mask is None else np.asarray(spec.lower_mask, dtype=float)
    upper = np.ones_like(s) if spec.upper_mask is None else np.asarray(spec.upper_mask, dtype=float)
    lb = target.lb + s * lower
    ub = target.ub - s * upper
    if np.any(lb > ub):
        raise EmptyModifiedSet(
            f"gamma={spec.gamma} 时收缩量 {s.tolist()} 超过区域半宽 {(0.5 * target.width).tolist()}"
        )
    return BoxSet(lb, ub)


@dataclass(frozen=True)
class DeviationEstimate:
    """x^d_max 估计结果及取得最大值的顶点"""
    xd_max: np.ndarray
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    corner_index: int

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.xd_max))

    def to_dict(self) -> dict:
        return {
            "xd_max": self.xd_max.tolist(),
            "argmax_x": self.x.tolist(),
            "argmax_u": self.u.tolist(),
            "argmax_w": self.w.tolist(),
            "corner_index": self.corner_index,
        }


def _masked_effects(model: SystemModel, x, u, w, W: BoxSet, tracked_mask) -> np.ndarray:
    sens = disturbance_sensitivity(model, x, u, w, w_range=W.width)
    effects = np.einsum("...ij,...j->...i", sens, w)
    return effects * np.asarray(tracked_mask, dtype=float)


def estimate_xd_max(model: SystemModel, cis_box: BoxSet, U: BoxSet, W: BoxSet,
                    tracked_mask: Sequence[int]) -> DeviationEstimate:
    """
    扰动单步最大影响估计

    在 cis_box × U × W 的全部 2^(n_z+n_w) 个顶点上计算 (∂x/∂w · w) ⊙ I_t,
    取欧氏范数最大者; 并列时取顶点序号最小者。
    """
    for name, box in (("cis_box", cis_box), ("U", U), ("W", W)):
        box.validate(name)
    joint = cis_box.product(U).product(W)
    corners = joint.corners()
    n_x, n_u = model.state_dim, model.input_dim
    x, u, w = corners[:, :n_x], corners[:, n_x:n_x + n_u], corners[:, n_x + n_u:]

    effects = _masked_effects(model, x, u, w, W, tracked_mask)
    norms = np.linalg.norm(effects, axis=-1)
    k = int(np.argmax(norms))
    logger.info(f"x^d_max 估计: {len(corners)} 个顶点, 最大范数 {norms[k]:.6g} (顶点 {k})")
    return DeviationEstimate(xd_max=effects[k], x=x[k], u=u[k], w=w[k], corner_index=k)


def estimate_xd_max_at_point(model: SystemModel, x, u, W: BoxSet,
                             tracked_mask: Sequence[int]) -> DeviationEstimate:
    """只在已知工作点 (x, u) 处枚举扰动顶点的简化估计"""
    W.validate("W")
    w = W.corners()
    x = np.broadcast_to(np.asarray(x, dtype=float), (len(w), model.state_dim))
    u = np.broadcast_to(np.atleast_1d(np.asarray(u, dtype=float)), (len(w), model.input_dim))
    effects = _masked_effects(model, x, u, w, W, tracked_mask)
    norms = np.linalg.norm(effects, axis=-1)
    k = int(np.argmax(norms))
    return DeviationEstimate(xd_max=effects[k], x=x[k].copy(), u=u[k].copy(), w=w[k], corner_index=k)

