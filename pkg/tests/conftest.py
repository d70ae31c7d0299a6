import numpy as np
import pytest

from app.database.cis_store import CisStore
from app.services.design import ControllerDesign
from app.services.dynamics import SystemModel, build_cstr_model, linear_model
from app.services.sets import BoxSet
from app.utils.experiment_config import ExperimentConfig


@pytest.fixture
def cstr():
    return build_cstr_model()


@pytest.fixture
def integrator():
    """x+ = x + u, 扰动不进入"""
    return linear_model([[1.0]], [[1.0]], [[0.0]], name="integrator")


@pytest.fixture
def unstable():
    """x+ = 2x + u"""
    return linear_model([[2.0]], [[1.0]], [[0.0]], name="unstable")


def _zero_rhs(x, u, w, p):
    return np.zeros_like(x)


@pytest.fixture
def stationary():
    return SystemModel(state_dim=1, input_dim=1, disturbance_dim=1, rhs=_zero_rhs, name="stationary")


@pytest.fixture
def unit_box():
    return BoxSet([-1.0], [1.0])


@pytest.fixture
def small_experiment(tmp_path):
    """粗网格 / 短仿真的 CSTR 配置, 供 CLI 与存储测试用"""
    cfg = ExperimentConfig()
    data = cfg.model_dump(mode="json")
    data["cis"].update(cells_per_axis=[20, 20], inputs_per_axis=[31], verify_samples=50,
                       cache_dir=str(tmp_path / "cache"))
    data["run"].update(steps=3, seeds=[0], gammas=[0.0, 100.0], output_dir=str(tmp_path / "runs"))
    data["controller"]["solver"]["multistart_count"] = 1
    return ExperimentConfig.model_validate(data)


@pytest.fixture(scope="session")
def cstr_design(tmp_path_factory):
    """默认配置下的 CSTR 控制器设计 (CIS 缓存在会话临时目录, 慢测试共用)"""
    store = CisStore(str(tmp_path_factory.mktemp("cis_cache")))
    return ControllerDesign.from_experiment(ExperimentConfig(), store=store)
