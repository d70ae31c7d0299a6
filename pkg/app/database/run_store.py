"""
运行产物存储: 配置副本 / 轨迹 CSV / 指标 JSON / 扫描 CSV / 收缩 JSON

输出目录按 "<名称>_<配置哈希>" 命名, 同一配置重复运行写到同一目录。
"""
import csv
import json
import logging
import math
import os
from typing import List, Sequence

import numpy as np

from app.config import ZMPC_OUTPUT_DIR
from app.services.closedloop import ClosedLoopRecord, SweepRow
from app.utils.experiment_config import ExperimentConfig, config_hash, dump_config

logger = logging.getLogger(__name__)


def _cell(value) -> str:
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def _float(text: str) -> float:
    return float(text) if text != "" else float("nan")


def trajectory_header(record: ClosedLoopRecord) -> List[str]:
    return (
        ["step", "time_min"]
        + list(record.state_names) + list(record.input_names) + list(record.disturbance_names)
        + ["zone_cost_actual", "zone_cost_modified", "econ_cost", "V_N0", "solver_status"]
        + [f"pred_{name}" for name in record.state_names]
    )


def write_trajectory_csv(record: ClosedLoopRecord, path: str) -> str:
    """每步一行 (共 S+1 行), 末行只有状态与代价"""
    n_x, n_u, n_w = record.states.shape[1], record.inputs.shape[1], record.disturbances.shape[1]
    times = record.times
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(trajectory_header(record))
        for n in range(record.steps + 1):
            last = n == record.steps
            u = [float("nan")] * n_u if last else record.inputs[n]
            w = [float("nan")] * n_w if last else record.disturbances[n]
            pred = [float("nan")] * n_x if last else record.predicted_next[n]
            row = [str(n), _cell(times[n])]
            row += [_cell(v) for v in record.states[n]]
            row += [_cell(v) for v in u] + [_cell(v) for v in w]
            row += [_cell(record.zone_cost_actual[n]), _cell(record.zone_cost_modified[n]),
                    _cell(record.economic_cost[n])]
            row += ["" if last else _cell(record.value[n]), "" if last else record.status[n]]
            row += [_cell(v) for v in pred]
            writer.writerow(row)
    return path


def read_trajectory_csv(path: str, input_dim: int = 1) -> ClosedLoopRecord:
    """读回轨迹 CSV; input_dim 用于切分输入列与扰动列"""
    with open(path, "r", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    preds = [h for h in header if h.startswith("pred_")]
    n_x = len(preds)
    first_cost = header.index("zone_cost_actual")
    var_cols = header[2:first_cost]
    state_names = tuple(var_cols[:n_x])
    input_names = tuple(var_cols[n_x:n_x + input_dim])
    disturbance_names = tuple(var_cols[n_x + input_dim:])
    n_w = len(disturbance_names)

    table = np.array([[_float(v) for v in r[:first_cost + 4]] for r in body])
    pred_table = np.array([[_float(v) for v in r[-n_x:]] for r in body])
    steps = len(body) - 1
    c = 2
    states = table[:, c:c + n_x]
    inputs = table[:steps, c + n_x:c + n_x + input_dim]
    dist = table[:steps, c + n_x + input_dim:c + n_x + input_dim + n_w]
    sample_time = float(table[1, 1]) if steps else 0.0
    return ClosedLoopRecord(
        sample_time=sample_time,
        states=states,
        inputs=inputs,
        disturbances=dist,
        predicted_next=pred_table[:steps],
        zone_cost_actual=table[:, first_cost],
        zone_cost_modified=table[:, first_cost + 1],
        economic_cost=table[:, first_cost + 2],
        value=table[:steps, first_cost + 3],
        status=[r[first_cost + 4] for r in body[:steps]],
        state_names=state_names,
        input_names=input_names,
        disturbance_names=disturbance_names,
    )


SWEEP_COLUMNS = [
    "gamma", "flag", "modified_lb", "modified_ub", "runs", "aborted", "mean_violations",
    "mean_avg_violation", "mean_zone_cost", "mean_economic_cost", "mean_first_entry", "mean_state_violations",
    "mean_settled_violations",
]


def write_sweep_csv(rows: Sequence[SweepRow], path: str) -> str:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            data = row.to_dict()
            for key in ("modified_lb", "modified_ub"):
                if data[key] is not None:
                    data[key] = " ".join(repr(v) for v in data[key])
            writer.writerow({k: "" if v is None else v for k, v in data.items()})
    return path


def write_json(payload: dict, path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)
    return path


class RunStore:
    """输出目录管理器"""

    def __init__(self, output_dir: str = ZMPC_OUTPUT_DIR):
        self.output_dir = output_dir
        os.makedirs(output_dir, exist_ok=True)

    def run_dir(self, name: str, config: ExperimentConfig) -> str:
        path = os.path.join(self.output_dir, f"{name}_{config_hash(config)}")
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as f:
            f.write(dump_config(config))
        return path

    def save_trajectory(self, run_dir: str, record: ClosedLoopRecord, seed: int) -> str:
        path = write_trajectory_csv(record, os.path.join(run_dir, f"trajectory_seed{seed}.csv"))
        logger.info(f"轨迹已保存: {path}")
        return path

    def save_metrics(self, run_dir: str, payload: dict) -> str:
        return write_json(payload, os.path.join(run_dir, "metrics.json"))

    def save_sweep(self, run_dir: str, rows: Sequence[SweepRow]) -> str:
        path = write_sweep_csv(rows, os.path.join(run_dir, "sweep.csv"))
        logger.info(f"gamma 扫描表已保存: {path}")
        return path

    def save_shrink(self, run_dir: str, payload: dict) -> str:
        return write_json(payload, os.path.join(run_dir, "shrink.json"))
