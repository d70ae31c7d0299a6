"""
控制不变集 (CIS) 模块

网格生存核不动点: 所有网格单元初始为成员, 反复删除"在输入格点上找不到
把单元中心 (w = 0) 送进当前成员集的输入"的单元, 直到一轮不再删除。
后继点须带一个单元大小的邻域整体落在成员单元内 (邻域角点距后继点半个对角线)。
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from app.services.dynamics import SystemModel, integrate_step
from app.services.sets import BoxSet
from app.utils.errors import EmptyInvariantSet

logger = logging.getLogger(__name__)

# 网格索引取整容差 (后继恰好落在单元边界上时不误判为跨格)
INDEX_EPS = 1e-9
# verify_invariance 的最差裕度容差
MARGIN_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GriddedInvariantSet:
    """网格 CIS 内近似"""
    region: BoxSet
    cells_per_axis: Tuple[int, ...]
    membership: np.ndarray              # bool, 形状 cells_per_axis, 行主序
    witness_inputs: np.ndarray          # (*cells_per_axis, n_u), 非成员为 NaN
    input_bounds: BoxSet
    inputs_per_axis: Tuple[int, ...]
    iterations: int = 0
    model_hash: str = ""

    @property
    def cell_width(self) -> np.ndarray:
        return self.region.width / np.asarray(self.cells_per_axis, dtype=float)

    @property
    def member_count(self) -> int:
        return int(self.membership.sum())

    @property
    def member_fraction(self) -> float:
        return self.member_count / self.membership.size

    def cell_box(self, lo: Sequence[int], hi: Sequence[int]) -> BoxSet:
        """单元索引范围 [lo, hi] (含) 对应的盒; 顶到区域边界时直接用区域边界"""
        lo = np.asarray(lo)
        hi = np.asarray(hi)
        cw = self.cell_width
        cells = np.asarray(self.cells_per_axis)
        lb = np.where(lo == 0, self.region.lb, self.region.lb + lo * cw)
        ub = np.where(hi + 1 == cells, self.region.ub, self.region.lb + (hi + 1) * cw)
        return BoxSet(lb, ub)

    def member_bounding_box(self) -> BoxSet:
        if not self.membership.any():
            raise EmptyInvariantSet("成员集为空")
        idx = np.argwhere(self.membership)
        return self.cell_box(idx.min(axis=0), idx.max(axis=0))


def cell_centers(region: BoxSet, cells_per_axis: Sequence[int]) -> np.ndarray:
    """单元中心, 形状 (*cells_per_axis, n_x)"""
    axes = [region.lb[i] + (np.arange(n) + 0.5) * region.width[i] / n
            for i, n in enumerate(cells_per_axis)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack(grids, axis=-1)


def input_lattice(U: BoxSet, inputs_per_axis: Sequence[int]) -> np.ndarray:
    """输入格点 (K, n_u), 零宽维度去重"""
    axes = [np.unique(np.linspace(U.lb[i], U.ub[i], n)) for i, n in enumerate(inputs_per_axis)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _cover_indices(points: np.ndarray, region: BoxSet, cells: np.ndarray):
    """
    点的单元邻域 [p - cw/2, p + cw/2] 覆盖到的单元

    返回 (flat_idx (..., 2^n), valid (...)), valid=False 表示邻域越出区域。
    """
    cw = region.width / cells
    finite = np.isfinite(points).all(axis=-1)
    points = np.where(finite[..., None], points, region.lb)
    rel = (points - region.lb) / cw
    lo = np.floor(rel - 0.5 + INDEX_EPS).astype(np.int64)
    hi = np.ceil(rel + 0.5 - INDEX_EPS).astype(np.int64) - 1
    hi = np.maximum(hi, lo)
    valid = finite & np.all((lo >= 0) & (hi <= cells - 1), axis=-1)
    lo = np.clip(lo, 0, cells - 1)
    hi = np.clip(hi, 0, cells - 1)

    n = len(cells)
    strides = np.array([int(np.prod(cells[i + 1:])) for i in range(n)], dtype=np.int64)
    combos = np.array(list(itertools.product((0, 1), repeat=n)), dtype=bool)   # (2^n, n)
    picked = np.where(combos, hi[..., None, :], lo[..., None, :])              # (..., 2^n, n)
    flat = picked @ strides
    return flat, valid


def compute_cis(model: SystemModel, region: BoxSet, U: BoxSet, cells_per_axis: Sequence[int],
                inputs_per_axis: Sequence[int]) -> GriddedInvariantSet:
    """网格生存核不动点, 返回控制不变集的内近似"""
    region.validate("CIS region")
    U.validate("U")
    cells = np.asarray(cells_per_axis, dtype=np.int64)
    if len(cells) != model.state_dim or np.any(cells < 1):
        raise ValueError(f"cells_per_axis 非法: {list(cells_per_axis)}")
    if len(inputs_per_axis) != model.input_dim or min(inputs_per_axis) < 1:
        raise ValueError(f"inputs_per_axis 非法: {list(inputs_per_axis)}")

    centers = cell_centers(region, cells).reshape(-1, model.state_dim)          # (M, n_x)
    inputs = input_lattice(U, inputs_per_axis)                                  # (K, n_u)
    zero_w = np.zeros(model.disturbance_dim)
    successors = integrate_step(model, centers[:, None, :], inputs[None, :, :], zero_w, strict=False)
    cover, valid = _cover_indices(successors, region, cells)                    # (M, K, 2^n), (M, K)

    member = np.ones(len(centers), dtype=bool)
    iterations = 0
    while True:
        iterations += 1
        ok = valid & member[cover].all(axis=-1)                                 # (M, K)
        keep = member & ok.any(axis=-1)
        removed = int(member.sum() - keep.sum())
        member = keep
        if removed == 0 or not member.any():
            break
    logger.info(
        f"CIS 计算完成: 区域 {region.to_dict()}, 网格 {cells.tolist()}, 输入格点 {len(inputs)}, "
        f"迭代 {iterations} 轮, 成员比例 {member.mean():.3f}"
    )
    if not member.any():
        raise EmptyInvariantSet(f"区域 {region.to_dict()} 在当前分辨率下所有单元被删除")

    witness_k = np.argmax(ok, axis=-1)
    witness = np.where(member[:, None], inputs[witness_k], np.nan)
    shape = tuple(int(c) for c in cells)
    return GriddedInvariantSet(
        region=region,
        cells_per_axis=shape,
        membership=member.reshape(shape),
        witness_inputs=witness.reshape(shape + (model.input_dim,)),
        input_bounds=U,
        inputs_per_axis=tuple(int(k) for k in inputs_per_axis),
        iterations=iterations,
        model_hash=model.fingerprint(),
    )


# ======================== Verification ========================

@dataclass(frozen=True)
class InvarianceReport:
    passed: bool
    worst_margin: float
    counterexample: Optional[np.ndarray] = None


def _sample_points(candidate: BoxSet, samples: int, seed: int) -> np.ndarray:
    """顶点 + Halton 低差异序列"""
    pts = [candidate.corners()]
    if samples > 0:
        unit = qmc.Halton(d=candidate.dim, scramble=True, seed=seed).random(samples)
        pts.append(candidate.lb + unit * candidate.width)
    return np.concatenate(pts, axis=0)


def _best_margins(model: SystemModel, candidate: BoxSet, points: np.ndarray, inputs: np.ndarray):
    zero_w = np.zeros(model.disturbance_dim)
    succ = integrate_step(model, points[:, None, :], inputs, zero_w, strict=False)
    margin = candidate.signed_margin(succ)
    margin = np.where(np.isfinite(margin), margin, -np.inf)
    k = np.argmax(margin, axis=-1)
    rows = np.arange(len(points))
    return margin[rows, k], inputs[rows, k] if inputs.ndim == 3 else inputs[k]


def verify_invariance(model: SystemModel, candidate: BoxSet, U: BoxSet, samples: int = 500, seed: int = 0,
                      inputs_per_axis: Optional[Sequence[int]] = None, refinements: int = 3) -> InvarianceReport:
    """
    抽样验证盒的控制不变性

    对每个样本点在输入格点上找使后继 (w = 0) 留在盒内裕度最大的 u,
    再围绕最优格点逐轮细化。全部点裕度 >= -MARGIN_TOL 即通过。
    """
    if inputs_per_axis is None:
        inputs_per_axis = (61,) * model.input_dim
    points = _sample_points(candidate, samples, seed)
    lattice = input_lattice(U, inputs_per_axis)
    best, best_u = _best_margins(model, candidate, points, lattice)

    spacing = U.width / np.maximum(np.asarray(inputs_per_axis, dtype=float) - 1, 1)
    offsets = np.array(list(itertools.product(np.linspace(-1.0, 1.0, 5), repeat=model.input_dim)))
    for _ in range(refinements):
        local = np.clip(best_u[:, None, :] + offsets[None, :, :] * spacing, U.lb, U.ub)   # (P, L, n_u)
        margin, u_ref = _best_margins(model, candidate, points, local)
        better = margin > best
        best = np.where(better, margin, best)
        best_u = np.where(better[:, None], u_ref, best_u)
        spacing = spacing / 2.0

    i = int(np.argmin(best))
    worst = float(best[i])
    passed = worst >= -MARGIN_TOL
    return InvarianceReport(passed=passed, worst_margin=worst,
                            counterexample=None if passed else points[i].copy())


# ======================== Inner box ========================

def _max_box_containing(membership: np.ndarray, seed: Tuple[int, ...]):
    """包含 seed 单元、全为成员的最大体积轴对齐单元盒 (穷举前 n-1 维, 最后一维取最长连续段)"""
    n = membership.ndim
    shape = membership.shape
    best, best_vol = None, 0
    ranges = [[(lo, hi) for lo in range(seed[d] + 1) for hi in range(seed[d], shape[d])]
              for d in range(n - 1)]
    for combo in itertools.product(*ranges):
        sl = tuple(slice(lo, hi + 1) for lo, hi in combo)
        block = membership[sl]
        line = block.reshape(-1, shape[-1]).all(axis=0) if n > 1 else block
        s = seed[-1]
        if not line[s]:
            continue
        lo = s
        while lo > 0 and line[lo - 1]:
            lo -= 1
        hi = s
        while hi < shape[-1] - 1 and line[hi + 1]:
            hi += 1
        vol = int(np.prod([h - l + 1 for l, h in combo])) * (hi - lo + 1)
        if vol > best_vol:
            best_vol = vol
            best = ([c[0] for c in combo] + [lo], [c[1] for c in combo] + [hi])
    return best


def inner_box(cis: GriddedInvariantSet, model: Optional[SystemModel] = None, samples: int = 500,
              seed: int = 0) -> BoxSet:
    """
    从网格 CIS 提取终端盒

    从最接近区域中心的成员单元出发穷举最大成员盒; 给定 model 时再做不变性验证,
    失败则把离反例最近的面内缩一个单元, 直到通过。
    """
    if not cis.membership.any():
        raise EmptyInvariantSet("成员集为空, 无法提取内盒")
    idx = np.argwhere(cis.membership)
    rel_center = (np.asarray(cis.cells_per_axis) - 1) / 2.0
    start = tuple(int(v) for v in idx[np.argmin(np.linalg.norm(idx - rel_center, axis=1))])
    lo, hi = _max_box_containing(cis.membership, start)
    lo, hi = np.array(lo), np.array(hi)
    box = cis.cell_box(lo, hi)
    if model is None:
        return box

    cw = cis.cell_width
    for _ in range(int(np.sum(cis.cells_per_axis))):
        report = verify_invariance(model, box, cis.input_bounds, samples=samples, seed=seed,
                                   inputs_per_axis=cis.inputs_per_axis)
        if report.passed:
            logger.info(f"终端盒验证通过: {box}, 最差裕度 {report.worst_margin:.3g}")
            return box
        # 反例到各面的距离 (以单元数计), 内缩最近的面
        c = report.counterexample
        dist_lo = np.where(hi > lo, (c - box.lb) / cw, np.inf)
        dist_hi = np.where(hi > lo, (box.ub - c) / cw, np.inf)
        if not np.isfinite(np.concatenate([dist_lo, dist_hi])).any():
            break
        if dist_lo.min() <= dist_hi.min():
            lo[int(np.argmin(dist_lo))] += 1
        else:
            hi[int(np.argmin(dist_hi))] -= 1
        box = cis.cell_box(lo, hi)
        logger.info(f"终端盒验证失败 (裕度 {report.worst_margin:.3g}), 内缩为 {box}")
    raise EmptyInvariantSet("找不到可验证的终端盒")
