"""
区域跟踪 MPC 实验工具 - 命令行入口

流程:
1. cis      计算目标区域 (及修正区域) 的网格控制不变集, 写缓存
2. shrink   在 CIS 外包盒上估计扰动单步影响, 输出修正目标集
3. run      按变体做闭环仿真, 输出轨迹 CSV + 指标 JSON
4. sweep    gamma 扫描, 输出扫描 CSV + 违反统计表
"""
import logging
import os
from typing import Callable, Optional

import numpy as np
import typer
from pydantic import ValidationError

from app.config import LOG_LEVEL, ZMPC_CIS_CACHE_DIR, ZMPC_CONFIG, ZMPC_N_JOBS, ZMPC_OUTPUT_DIR
from app.database.cis_store import CisStore, encode_gridset
from app.database.run_store import RunStore
from app.services.closedloop import (
    DisturbanceGenerator, compute_metrics, format_violation_table, gamma_sweep, settle_region, simulate,
)
from app.services.design import ControllerDesign
from app.utils.errors import AbortedRun, ConfigError, ZmpcError
from app.utils.experiment_config import ExperimentConfig, default_config_text, load_config

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger("zmpc")

app = typer.Typer(help="鲁棒区域跟踪 MPC 实验工具", add_completion=False)

ConfigOpt = typer.Option(None, "--config", help="实验配置 JSON (缺省读 ZMPC_CONFIG 或内置默认)")
OutOpt = typer.Option(None, "--out", help="输出目录 (覆盖配置与 ZMPC_OUTPUT_DIR)")
SeedOpt = typer.Option(None, "--seed", help="扰动种子 (覆盖 run.seeds)")
GammaOpt = typer.Option(None, "--gamma", help="风险因子 (覆盖 controller.gamma)")
VariantOpt = typer.Option(None, "--variant", help="控制器变体 (覆盖 controller.variant)")


def _load(config: Optional[str], gamma: Optional[float] = None, variant: Optional[str] = None,
          seed: Optional[int] = None) -> ExperimentConfig:
    """读配置并应用命令行覆盖, 覆盖后重新校验"""
    cfg = load_config(config or ZMPC_CONFIG)
    data = cfg.model_dump(mode="json")
    if gamma is not None:
        data["controller"]["gamma"] = gamma
    if variant is not None:
        data["controller"]["variant"] = variant
    if seed is not None:
        data["run"]["seeds"] = [seed]
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _design(cfg: ExperimentConfig) -> ControllerDesign:
    store = CisStore(cfg.cis.cache_dir or ZMPC_CIS_CACHE_DIR)
    return ControllerDesign.from_experiment(cfg, store=store)


def _store(cfg: ExperimentConfig, out: Optional[str]) -> RunStore:
    return RunStore(out or cfg.run.output_dir or ZMPC_OUTPUT_DIR)


def _execute(name: str, body: Callable[[], None]):
    """执行子命令, 错误码映射为退出码"""
    logger.info(f"[{name}] 开始")
    try:
        body()
    except AbortedRun as e:
        logger.error(f"[{name}] {e} (第 {e.step} 步)")
        typer.echo(f"错误: {e} (第 {e.step} 步)", err=True)
        raise typer.Exit(code=e.code)
    except ZmpcError as e:
        logger.error(f"[{name}] {e}")
        typer.echo(f"错误: {e}", err=True)
        raise typer.Exit(code=e.code)
    except Exception as e:
        logger.error(f"[{name}] 未预期异常: {e}", exc_info=True)
        typer.echo(f"错误: {e}", err=True)
        raise typer.Exit(code=1)
    logger.info(f"[{name}] 完成")


@app.command("print-default-config")
def print_default_config():
    """输出内置默认配置 (CSTR 基准设置)"""
    typer.echo(default_config_text())


@app.command("cis")
def cmd_cis(config: Optional[str] = ConfigOpt, out: Optional[str] = OutOpt, gamma: Optional[float] = GammaOpt):
    """计算目标区域 (gamma > 0 时还有修正区域) 的控制不变集"""
    def body():
        cfg = _load(config, gamma=gamma)
        design = _design(cfg)
        run_dir = _store(cfg, out).run_dir("cis", cfg)
        regions = [("actual", design.target)]
        if cfg.controller.gamma > 0:
            regions.append(("modified", design.modified_target(cfg.controller.gamma)))
        for name, region in regions:
            cis = design.invariant_set(region)
            box = design.terminal_box(region)
            path = os.path.join(run_dir, f"cis_{name}.json")
            with open(path, "w", encoding="utf-8") as f:
                f.write(encode_gridset(cis))
            typer.echo(f"{name}: 区域 {region}, 成员比例 {cis.member_fraction:.4f}, 终端盒 {box}")
            logger.info(f"网格集已写入: {path}")

    _execute("cis", body)


@app.command("shrink")
def cmd_shrink(config: Optional[str] = ConfigOpt, out: Optional[str] = OutOpt, gamma: Optional[float] = GammaOpt):
    """估计 x^d_max 并输出修正目标集"""
    def body():
        cfg = _load(config, gamma=gamma)
        design = _design(cfg)
        store = _store(cfg, out)
        run_dir = store.run_dir("shrink", cfg)
        g = cfg.controller.gamma
        estimate = design.deviation_estimate()
        payload = estimate.to_dict()
        payload["gamma"] = g
        payload["s"] = design.shrinkage(g).s.tolist()
        payload["modified_target"] = design.modified_target(g).to_dict()
        point = design.operating_point_estimate()
        payload["operating_point_estimate"] = {"xd_max": point.xd_max.tolist(), "x": point.x.tolist(),
                                               "u": point.u.tolist(), "w": point.w.tolist()}
        path = store.save_shrink(run_dir, payload)
        typer.echo(f"xd_max = {payload['xd_max']}, s = {payload['s']}, 修正目标集 {payload['modified_target']}")
        logger.info(f"收缩结果已写入: {path}")

    _execute("shrink", body)


@app.command("run")
def cmd_run(config: Optional[str] = ConfigOpt, out: Optional[str] = OutOpt, seed: Optional[int] = SeedOpt,
            gamma: Optional[float] = GammaOpt, variant: Optional[str] = VariantOpt):
    """单个控制器变体的闭环仿真"""
    def body():
        cfg = _load(config, gamma=gamma, variant=variant, seed=seed)
        design = _design(cfg)
        store = _store(cfg, out)
        run_dir = store.run_dir(f"run_{cfg.controller.variant.value}", cfg)
        controller = design.build(cfg.controller.variant, cfg.controller.gamma)
        x0 = np.asarray(cfg.run.x0)
        runs = []
        for s in cfg.run.seeds:
            record = simulate(
                design.model, controller, x0, cfg.run.steps,
                DisturbanceGenerator(design.disturbance_bounds, s, cfg.run.disturbance_mode),
                actual_target=design.target, max_consecutive_failures=cfg.run.max_consecutive_failures,
            )
            store.save_trajectory(run_dir, record, s)
            metrics = compute_metrics(record, design.target, design.state_bounds, settle_region(controller))
            runs.append({"seed": s, **metrics.to_dict()})
            typer.echo(f"seed {s}: 首次进入 {metrics.first_entry_step}, 进入后违反 {metrics.violations_after_entry}, "
                       f"收敛于 {metrics.settled_step}, 收敛后违反 {metrics.violations_after_settling}")
        payload = {
            "variant": cfg.controller.variant.value,
            "gamma": cfg.controller.gamma,
            "zone_target": controller.zone_cost.target.to_dict(),
            "terminal_set": controller.terminal_set.to_dict() if controller.terminal_set is not None else None,
            "runs": runs,
        }
        path = store.save_metrics(run_dir, payload)
        logger.info(f"指标已写入: {path}")

    _execute("run", body)


@app.command("sweep")
def cmd_sweep(config: Optional[str] = ConfigOpt, out: Optional[str] = OutOpt, variant: Optional[str] = VariantOpt,
              seed: Optional[int] = SeedOpt):
    """gamma 扫描 (run.gammas × run.seeds)"""
    def body():
        cfg = _load(config, variant=variant, seed=seed)
        design = _design(cfg)
        store = _store(cfg, out)
        run_dir = store.run_dir("sweep", cfg)
        rows = gamma_sweep(
            design, cfg.run.gammas, np.asarray(cfg.run.x0), cfg.run.steps, cfg.run.seeds,
            variant=cfg.controller.variant, disturbance_mode=cfg.run.disturbance_mode,
            max_consecutive_failures=cfg.run.max_consecutive_failures, n_jobs=ZMPC_N_JOBS,
        )
        store.save_sweep(run_dir, rows)
        typer.echo(format_violation_table(rows))

    _execute("sweep", body)


if __name__ == "__main__":
    app()
