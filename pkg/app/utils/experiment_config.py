"""
实验配置文件 (JSON, pydantic v2 校验)

五个段落: model / bounds / controller / cis / run。
默认值即 CSTR 基准设置, `print-default-config` 原样输出。
"""
import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.services.dynamics import CstrParameters, SystemModel, build_cstr_model
from app.services.ocp import SolverSettings, Variant
from app.services.sets import BoxSet
from app.utils.errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BoxModel(_Section):
    lb: List[float] = Field(..., description="下界向量")
    ub: List[float] = Field(..., description="上界向量 (与 lb 同维, 逐维 lb <= ub)")

    @model_validator(mode="after")
    def _check(self):
        if len(self.lb) != len(self.ub) or not self.lb:
            raise ValueError(f"lb/ub 维数不一致: {len(self.lb)} vs {len(self.ub)}")
        if any(lo > hi for lo, hi in zip(self.lb, self.ub)):
            raise ValueError(f"lb > ub: {self.lb} / {self.ub}")
        return self

    def to_box(self) -> BoxSet:
        return BoxSet(self.lb, self.ub)


class ModelSection(_Section):
    name: Literal["cstr"] = Field(default="cstr", description="内置过程模型")
    q: float = Field(default=100.0, gt=0, description="体积流量 L/min")
    V: float = Field(default=100.0, gt=0, description="反应器体积 L")
    rho: float = Field(default=1000.0, gt=0, description="密度 g/L")
    Cp: float = Field(default=0.239, gt=0, description="比热 J/(g·K)")
    dH: float = Field(default=-5.0e4, lt=0, description="反应热 J/mol (放热为负)")
    UA: float = Field(default=5.0e4, gt=0, description="传热系数 J/(min·K)")
    k0: float = Field(default=7.2e10, gt=0, description="指前因子 1/min")
    E_over_R: float = Field(default=8750.0, gt=0, description="活化能/气体常数 K")
    CAf_nominal: float = Field(default=1.0, gt=0, description="名义进料浓度 mol/L")
    Tf_nominal: float = Field(default=350.0, gt=0, description="名义进料温度 K")
    sample_time: float = Field(default=0.08, gt=0, description="采样时间 min")
    integrator_substeps: int = Field(default=8, ge=1, description="每个采样周期的 RK4 子步数")

    def parameters(self) -> CstrParameters:
        return CstrParameters(
            q=self.q, V=self.V, rho=self.rho, Cp=self.Cp, dH=self.dH, UA=self.UA,
            k0=self.k0, E_over_R=self.E_over_R,
            CAf_nominal=self.CAf_nominal, Tf_nominal=self.Tf_nominal,
        )

    def build(self) -> SystemModel:
        return build_cstr_model(self.parameters(), self.sample_time, self.integrator_substeps)


class BoundsSection(_Section):
    state: BoxModel = Field(default=BoxModel(lb=[0.0, 345.0], ub=[1.0, 355.0]), description="状态约束 X")
    input: BoxModel = Field(default=BoxModel(lb=[285.0], ub=[315.0]), description="输入约束 U")
    disturbance: BoxModel = Field(default=BoxModel(lb=[-0.1, -2.0], ub=[0.1, 2.0]), description="扰动范围 W")
    target: BoxModel = Field(default=BoxModel(lb=[0.0, 348.0], ub=[1.0, 352.0]), description="实际目标区域 X_t")


class SolverSection(_Section):
    max_iterations: int = Field(default=100, ge=1, description="每轮 L-BFGS-B 最大迭代数")
    constraint_tolerance: float = Field(default=1e-6, gt=0, description="约束违反容差")
    stationarity_tolerance: float = Field(default=1e-6, gt=0, description="投影梯度容差")
    penalty_initial: float = Field(default=1e4, gt=0, description="初始罚因子")
    penalty_growth: float = Field(default=10.0, gt=1, description="罚因子放大倍数")
    penalty_max: float = Field(default=1e10, gt=0, description="罚因子上限")
    multistart_count: int = Field(default=2, ge=1, description="多起点数 (含热启动)")
    seed: int = Field(default=0, description="随机起点种子")
    fd_step: float = Field(default=1e-7, gt=0, description="归一化输入空间差分步长")
    centering_weight: float = Field(default=1e-3, ge=0, description="向目标中心的弱拉力 (等代价解取舍, 0 = 关闭)")

    def to_settings(self) -> SolverSettings:
        return SolverSettings(**self.model_dump())


class ControllerSection(_Section):
    variant: Variant = Field(default=Variant.PROPOSED, description="控制器变体")
    horizon: int = Field(default=5, ge=1, description="预测时域 N")
    c1: float = Field(default=1e4, ge=0, description="区域代价 1-范数权重")
    c2: float = Field(default=1e4, ge=0, description="区域代价 2-范数平方权重")
    economic_weight: float = Field(default=1.0, ge=0, description="经济代价权重 (0 = 纯区域跟踪)")
    economic_state_index: int = Field(default=0, ge=0, description="经济代价取的状态分量 (0 = C_A)")
    gamma: float = Field(default=1.0, ge=0, description="风险因子 γ")
    tracked_mask: List[int] = Field(default=[0, 1], description="I_t, 1 = 该维参与收缩")
    shrink_lower: List[int] = Field(default=[1, 1], description="是否收缩下界 (单侧收缩)")
    shrink_upper: List[int] = Field(default=[1, 1], description="是否收缩上界 (单侧收缩)")
    solver: SolverSection = Field(default_factory=SolverSection, description="求解器设置")

    @field_validator("tracked_mask", "shrink_lower", "shrink_upper")
    @classmethod
    def _binary(cls, v: List[int]) -> List[int]:
        if any(m not in (0, 1) for m in v):
            raise ValueError(f"掩码只能为 0/1: {v}")
        return v


class CisSection(_Section):
    cells_per_axis: List[int] = Field(default=[80, 80], description="每个状态维的网格数")
    inputs_per_axis: List[int] = Field(default=[61], description="每个输入维的格点数")
    verify_samples: int = Field(default=500, ge=0, description="不变性验证样本数")
    seed: int = Field(default=0, description="验证抽样种子")
    cache_dir: Optional[str] = Field(default=None, description="CIS 缓存目录 (空 = ZMPC_CIS_CACHE_DIR)")

    @field_validator("cells_per_axis", "inputs_per_axis")
    @classmethod
    def _positive(cls, v: List[int]) -> List[int]:
        if not v or min(v) < 1:
            raise ValueError(f"网格数必须为正: {v}")
        return v


class RunSection(_Section):
    x0: List[float] = Field(default=[0.12, 355.0], description="初始状态")
    steps: int = Field(default=100, ge=1, description="闭环仿真步数")
    seeds: List[int] = Field(default=[0], description="扰动种子列表")
    gammas: List[float] = Field(default=[0.3, 0.5, 0.6, 0.7, 1.0, 3.0], description="gamma 扫描网格")
    disturbance_mode: Literal["uniform_iid", "zero"] = Field(default="uniform_iid", description="扰动生成方式")
    max_consecutive_failures: int = Field(default=3, ge=0, description="允许连续不可行的步数")
    output_dir: Optional[str] = Field(default=None, description="输出目录 (空 = ZMPC_OUTPUT_DIR)")

    @field_validator("gammas")
    @classmethod
    def _non_negative(cls, v: List[float]) -> List[float]:
        if any(g < 0 for g in v):
            raise ValueError(f"gamma 不能为负: {v}")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds_non_negative(cls, v: List[int]) -> List[int]:
        if any(s < 0 for s in v):
            raise ValueError(f"种子不能为负: {v}")
        return v


class ExperimentConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection, description="过程模型")
    bounds: BoundsSection = Field(default_factory=BoundsSection, description="约束与目标区域")
    controller: ControllerSection = Field(default_factory=ControllerSection, description="控制器")
    cis: CisSection = Field(default_factory=CisSection, description="控制不变集")
    run: RunSection = Field(default_factory=RunSection, description="闭环仿真")

    @model_validator(mode="after")
    def _check_dims(self):
        n_x, n_u, n_w = 2, 1, 2
        b = self.bounds
        for name, box, n in (("state", b.state, n_x), ("input", b.input, n_u),
                             ("disturbance", b.disturbance, n_w), ("target", b.target, n_x)):
            if len(box.lb) != n:
                raise ValueError(f"bounds.{name} 维数应为 {n}, 实际 {len(box.lb)}")
        c = self.controller
        for name, mask in (("tracked_mask", c.tracked_mask), ("shrink_lower", c.shrink_lower),
                           ("shrink_upper", c.shrink_upper)):
            if len(mask) != n_x:
                raise ValueError(f"controller.{name} 维数应为 {n_x}")
        if c.economic_state_index >= n_x:
            raise ValueError(f"economic_state_index 越界: {c.economic_state_index}")
        if len(self.cis.cells_per_axis) != n_x or len(self.cis.inputs_per_axis) != n_u:
            raise ValueError("cis 网格维数与模型不一致")
        if len(self.run.x0) != n_x:
            raise ValueError(f"run.x0 维数应为 {n_x}")
        return self


def dump_config(config: ExperimentConfig) -> str:
    return config.model_dump_json(indent=2)


def default_config_text() -> str:
    return dump_config(ExperimentConfig())


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """读取配置文件; path 为空返回内置默认配置"""
    if not path:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"无法读取配置 {path}: {e}") from e
    return parse_config(text)


def config_hash(config: ExperimentConfig) -> str:
    """配置内容哈希 (输出目录命名)"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
