# -*- coding: utf-8 -*-
"""
common.py
---------
全專案共用的小工具：log、錯誤類別、種子推導、JSONL 讀寫、設定檔載入。

✔ 所有模組都從這裡拿 log()，輸出格式與下載器時代一致
✔ 錯誤類別自帶 exit_code，main.py 直接拿來當結束碼
"""

import os, json, hashlib, copy, logging
import numpy as np
import pandas as pd
import yaml

# ========== 1. 全域常數 ==========
HORIZON_BINS = 64          # 6.4 s / 0.1 s
HISTORY_STEPS = 16         # 1.6 s 歷史
DT = 0.1                   # 10 Hz
ROUTE_POINTS = 20
ROUTE_SPACING = 4.0
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_CONFIG_PATH = os.path.join(BASE_DIR, "config.yaml")

logging.getLogger("urllib3").setLevel(logging.CRITICAL)

_QUIET = False


def set_quiet(flag: bool):
    global _QUIET
    _QUIET = bool(flag)


def is_quiet() -> bool:
    return _QUIET


def log(msg: str):
    if _QUIET:
        return
    print(f"{pd.Timestamp.now():%H:%M:%S}: {msg}", flush=True)


# ========== 2. 錯誤類別 ==========
class CurationError(Exception):
    """所有可預期錯誤的基底，exit_code 對應 CLI 結束碼"""
    exit_code = 2


class DataError(CurationError):
    exit_code = 2


class ServiceError(CurationError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, line_no: int, reason: str, source: str = ""):
        self.line_no = line_no
        self.reason = reason
        self.source = source
        where = f"{source}:{line_no}" if source else f"line {line_no}"
        super().__init__(f"{where}: {reason}")


class IdMismatch(DataError):
    pass


# ========== 3. 種子與數值 ==========
def derive_seed(*parts) -> int:
    """由 (全域種子, 場景 id, ...) 推導出穩定的子種子，與執行順序無關"""
    key = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def sig6(value):
    """數值欄位統一保留 6 位有效數字 (純量或巢狀 list/ndarray)"""
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        return [sig6(v) for v in value]
    v = float(f"{float(value):.6g}")
    return 0.0 if v == 0 else v


def sig6_array(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    return np.array(sig6(arr), dtype=float).reshape(arr.shape)


# ========== 4. JSONL 讀寫 ==========
def iter_jsonl(path: str):
    """逐行讀取，回傳 (行號, dict)；空行略過，壞行丟 ParseError"""
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"invalid JSON ({e.msg})", os.path.basename(path))


def write_jsonl(rows, path: str) -> int:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


# ========== 5. 設定檔 ==========
DEFAULT_CONFIG = {
    "seed": 7,
    "parallelism": 1,
    "output_dir": "runs",
    "ego_footprint": {"length": 4.6, "width": 1.8},
    "rollout": {"k": 6, "temperature": 0.8, "strength": 0.3, "noise": 0.0, "think_mode": "adaptive"},
    "filter": {"epsilon": 0.5, "mode": "filtered"},
    "labeler": {
        "accel_threshold": 0.5,
        "wait_speed": 0.3,
        "reverse_speed": 0.1,
        "turn_threshold": 0.15,
        "turn_window": 1.0,
        "lane_shift": 1.75,
        "lane_motion": 0.1,
        "smoothing_window": 0.5,
        "min_segment": 0.5,
    },
    "loss": {"preset": "1:10:10", "w_act": None, "w_meta": None, "w_cf": None, "mask_first_meta_on_cf": True},
    "mix": {"datasets": {"traj": 1, "meta": 1, "cf_round_1": 1}, "seed": 7, "shuffle_window": 0},
    "eval": {"bands": [0.0, 0.5, 1.0, 2.0]},
    "clients": {
        "policy": {"kind": "mock", "endpoint": "", "api_key_env": "POLICY_API_KEY",
                   "timeout": 60, "retries": 3, "backoff": 1.0, "max_in_flight": 4},
        "teacher": {"kind": "stub", "endpoint": "", "model": "", "api_key_env": "TEACHER_API_KEY",
                    "timeout": 120, "retries": 3, "backoff": 1.0, "max_in_flight": 4},
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str = None) -> dict:
    """讀 config.yaml 並疊在內建預設值上；檔案不存在就用預設值"""
    path = path or DEFAULT_CONFIG_PATH
    if not os.path.exists(path):
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path, "r", encoding="utf-8") as f:
        loaded = yaml.safe_load(f) or {}
    if not isinstance(loaded, dict):
        raise DataError(f"config {path} must be a mapping")
    return _deep_merge(DEFAULT_CONFIG, loaded)


def merge_overrides(cfg: dict, overrides: dict) -> dict:
    """旗標覆寫：值為 None 的鍵代表沒給，保留檔案值"""
    def _strip(d):
        return {k: (_strip(v) if isinstance(v, dict) else v) for k, v in d.items()
                if v is not None and not (isinstance(v, dict) and not _strip(v))}
    return _deep_merge(cfg, _strip(overrides))
