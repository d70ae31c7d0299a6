"""
控制器设计: 目标集收缩 + 终端 CIS, 按变体组装 ZmpcConfig

  nominal                          区域 X_t,  终端 box(CIS(X_t))
  proposed                         区域 X̃_t, 终端 box(CIS(X̃_t))
  original-zone-modified-terminal  区域 X_t,  终端 box(CIS(X̃_t))
  no-terminal                      区域 X̃_t, 无终端约束
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from app.database.cis_store import CisStore
from app.services.cis import GriddedInvariantSet, compute_cis, inner_box
from app.services.dynamics import SystemModel
from app.services.ocp import SolverSettings, Variant, ZmpcConfig
from app.services.sets import (
    BoxSet, DeviationEstimate, ShrinkageSpec, ZoneCostSpec, estimate_xd_max, estimate_xd_max_at_point,
    shrink_target,
)

logger = logging.getLogger(__name__)


def _region_key(region: BoxSet) -> Tuple[float, ...]:
    return tuple(region.lb.tolist()) + tuple(region.ub.tolist())


@dataclass
class ControllerDesign:
    model: SystemModel
    state_bounds: BoxSet
    input_bounds: BoxSet
    disturbance_bounds: BoxSet
    target: BoxSet
    horizon: int = 5
    c1: float = 1e4
    c2: float = 1e4
    economic_weight: float = 1.0
    economic_index: int = 0
    tracked_mask: Tuple[int, ...] = (0, 1)
    shrink_lower: Optional[Tuple[int, ...]] = None
    shrink_upper: Optional[Tuple[int, ...]] = None
    solver: SolverSettings = field(default_factory=SolverSettings)
    cells_per_axis: Tuple[int, ...] = (80, 80)
    inputs_per_axis: Tuple[int, ...] = (61,)
    verify_samples: int = 500
    verify_seed: int = 0
    store: Optional[CisStore] = None

    _sets: Dict[tuple, GriddedInvariantSet] = field(default_factory=dict, repr=False)
    _boxes: Dict[tuple, BoxSet] = field(default_factory=dict, repr=False)
    _deviation: Optional[DeviationEstimate] = field(default=None, repr=False)

    @classmethod
    def from_experiment(cls, cfg, store: Optional[CisStore] = None) -> "ControllerDesign":
        """由 ExperimentConfig 构造"""
        b, c = cfg.bounds, cfg.controller
        return cls(
            model=cfg.model.build(),
            state_bounds=b.state.to_box(),
            input_bounds=b.input.to_box(),
            disturbance_bounds=b.disturbance.to_box(),
            target=b.target.to_box(),
            horizon=c.horizon,
            c1=c.c1,
            c2=c.c2,
            economic_weight=c.economic_weight,
            economic_index=c.economic_state_index,
            tracked_mask=tuple(c.tracked_mask),
            shrink_lower=tuple(c.shrink_lower),
            shrink_upper=tuple(c.shrink_upper),
            solver=c.solver.to_settings(),
            cells_per_axis=tuple(cfg.cis.cells_per_axis),
            inputs_per_axis=tuple(cfg.cis.inputs_per_axis),
            verify_samples=cfg.cis.verify_samples,
            verify_seed=cfg.cis.seed,
            store=store,
        )

    # ---------- CIS ----------

    def invariant_set(self, region: BoxSet) -> GriddedInvariantSet:
        key = _region_key(region)
        if key not in self._sets:
            if self.store is not None:
                cis = self.store.get_or_compute(self.model, region, self.input_bounds,
                                                self.cells_per_axis, self.inputs_per_axis)
            else:
                cis = compute_cis(self.model, region, self.input_bounds, self.cells_per_axis, self.inputs_per_axis)
            self._sets[key] = cis
        return self._sets[key]

    def terminal_box(self, region: BoxSet) -> BoxSet:
        key = _region_key(region)
        if key not in self._boxes:
            self._boxes[key] = inner_box(self.invariant_set(region), self.model,
                                         samples=self.verify_samples, seed=self.verify_seed)
        return self._boxes[key]

    # ---------- Shrinkage ----------

    def deviation_estimate(self) -> DeviationEstimate:
        """在 CIS(X_t) 外包盒顶点上估计 x^d_max"""
        if self._deviation is None:
            cis_box = self.invariant_set(self.target).member_bounding_box()
            self._deviation = estimate_xd_max(self.model, cis_box, self.input_bounds,
                                              self.disturbance_bounds, self.tracked_mask)
        return self._deviation

    def operating_point_estimate(self) -> DeviationEstimate:
        """只枚举扰动顶点的简化估计: 工作点取目标集中心与输入范围中点"""
        return estimate_xd_max_at_point(self.model, self.target.center, self.input_bounds.center,
                                        self.disturbance_bounds, self.tracked_mask)

    def shrinkage(self, gamma: float) -> ShrinkageSpec:
        return ShrinkageSpec(
            gamma=gamma,
            tracked_mask=tuple(self.tracked_mask),
            xd_max=tuple(float(v) for v in self.deviation_estimate().xd_max),
            lower_mask=self.shrink_lower,
            upper_mask=self.shrink_upper,
        )

    def modified_target(self, gamma: float) -> BoxSet:
        if gamma == 0:
            return self.target
        return shrink_target(self.target, self.shrinkage(gamma))

    # ---------- Variants ----------

    def build(self, variant: Variant, gamma: float) -> ZmpcConfig:
        variant = Variant(variant)
        needs_modified = variant != Variant.NOMINAL
        modified = self.modified_target(gamma) if needs_modified else self.target

        if variant == Variant.NOMINAL:
            zone, terminal = self.target, self.terminal_box(self.target)
        elif variant == Variant.PROPOSED:
            zone, terminal = modified, self.terminal_box(modified)
        elif variant == Variant.ORIGINAL_ZONE_MODIFIED_TERMINAL:
            zone, terminal = self.target, self.terminal_box(modified)
        else:
            zone, terminal = modified, None

        logger.info(f"控制器 {variant.value} (gamma={gamma}): 跟踪区域 {zone}, 终端集 {terminal}")
        return ZmpcConfig(
            horizon=self.horizon,
            zone_cost=ZoneCostSpec(self.c1, self.c2, zone),
            state_bounds=self.state_bounds,
            input_bounds=self.input_bounds,
            terminal_set=terminal,
            economic_weight=self.economic_weight,
            variant=variant,
            solver=self.solver,
            economic_index=self.economic_index,
        )
