"""网格 CIS 文件格式 + 磁盘缓存 (JSON 头 + base64 位图 + 见证输入)"""
import base64
import hashlib
import json
import logging
import os
from typing import Optional

import numpy as np

from app.config import ZMPC_CIS_CACHE_DIR
from app.services.cis import GriddedInvariantSet, compute_cis
from app.services.dynamics import SystemModel
from app.services.sets import BoxSet

logger = logging.getLogger(__name__)

GRIDSET_FORMAT = "zmpc-gridset/1"


def encode_gridset(cis: GriddedInvariantSet) -> str:
    """序列化为确定性 JSON 文本 (键排序, 同输入同字节)"""
    flat = cis.membership.ravel()
    bitmap = base64.b64encode(np.packbits(flat).tobytes()).decode("ascii")
    witness = cis.witness_inputs.reshape(flat.size, -1)[flat]
    payload = {
        "format": GRIDSET_FORMAT,
        "region": cis.region.to_dict(),
        "cells_per_axis": list(cis.cells_per_axis),
        "model_hash": cis.model_hash,
        "input_grid": {"bounds": cis.input_bounds.to_dict(), "inputs_per_axis": list(cis.inputs_per_axis)},
        "iterations": cis.iterations,
        "membership": bitmap,
        "witness_inputs": witness.tolist(),
    }
    return json.dumps(payload, sort_keys=True, indent=1)


def decode_gridset(text: str) -> GriddedInvariantSet:
    data = json.loads(text)
    if data.get("format") != GRIDSET_FORMAT:
        raise ValueError(f"未知网格集格式: {data.get('format')}")
    shape = tuple(int(c) for c in data["cells_per_axis"])
    size = int(np.prod(shape))
    bits = np.frombuffer(base64.b64decode(data["membership"]), dtype=np.uint8)
    flat = np.unpackbits(bits)[:size].astype(bool)

    bounds = BoxSet.from_dict(data["input_grid"]["bounds"])
    n_u = bounds.dim
    witness = np.full((size, n_u), np.nan)
    members = np.asarray(data["witness_inputs"], dtype=float).reshape(-1, n_u)
    witness[flat] = members
    return GriddedInvariantSet(
        region=BoxSet.from_dict(data["region"]),
        cells_per_axis=shape,
        membership=flat.reshape(shape),
        witness_inputs=witness.reshape(shape + (n_u,)),
        input_bounds=bounds,
        inputs_per_axis=tuple(int(k) for k in data["input_grid"]["inputs_per_axis"]),
        iterations=int(data["iterations"]),
        model_hash=data["model_hash"],
    )


def cache_key(model: SystemModel, region: BoxSet, U: BoxSet, cells_per_axis, inputs_per_axis) -> str:
    payload = {
        "model": model.fingerprint(),
        "region": region.to_dict(),
        "U": U.to_dict(),
        "cells": [int(c) for c in cells_per_axis],
        "inputs": [int(k) for k in inputs_per_axis],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


class CisStore:
    """CIS 缓存管理器 (按模型哈希 + 区域 + 网格命名)"""

    def __init__(self, cache_dir: str = ZMPC_CIS_CACHE_DIR):
        self.cache_dir = cache_dir
        os.makedirs(cache_dir, exist_ok=True)

    def path_for(self, key: str) -> str:
        return os.path.join(self.cache_dir, f"cis_{key}.json")

    def save(self, key: str, cis: GriddedInvariantSet) -> str:
        path = self.path_for(key)
        with open(path, "w", encoding="utf-8") as f:
            f.write(encode_gridset(cis))
        logger.info(f"CIS 已写入缓存: {path}")
        return path

    def load(self, key: str) -> Optional[GriddedInvariantSet]:
        path = self.path_for(key)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                cis = decode_gridset(f.read())
        except (ValueError, KeyError) as e:
            logger.warning(f"CIS 缓存损坏, 忽略: {path} ({e})")
            return None
        logger.info(f"CIS 缓存命中: {path}")
        return cis

    def get_or_compute(self, model: SystemModel, region: BoxSet, U: BoxSet, cells_per_axis,
                       inputs_per_axis) -> GriddedInvariantSet:
        key = cache_key(model, region, U, cells_per_axis, inputs_per_axis)
        cached = self.load(key)
        if cached is not None and cached.model_hash == model.fingerprint():
            return cached
        cis = compute_cis(model, region, U, cells_per_axis, inputs_per_axis)
        self.save(key, cis)
        return cis
