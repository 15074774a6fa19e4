"""全域設定與環境初始化

包含：
- 環境變數（預設 worker 數、除錯模式）
- 共用常數（各演算法預設值、數值容忍度）
- key-value 設定檔解析
- 日誌系統設定
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

from errors import ConfigurationError, ParseError

logger = logging.getLogger(__name__)

# ====================================================================
# 環境變數
# ====================================================================
WORKERS_ENV: str = "TENSORCOMM_WORKERS"
DEBUG_ENV: str = "TENSORCOMM_DEBUG"


def default_workers() -> int:
    """讀取環境變數中的預設 worker 數，未設定時為 1。"""
    raw = os.environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return 1
    try:
        workers = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"{WORKERS_ENV} 必須為整數: {raw!r}") from e
    if workers < 1:
        raise ConfigurationError(f"{WORKERS_ENV} 必須 >= 1: {workers}")
    return workers


# ====================================================================
# 資料載入
# ====================================================================
MIN_DOC_LENGTH: int = 3
DEFAULT_PARTITION_FRACTIONS: tuple[float, float, float, float] = (
    0.25, 0.25, 0.25, 0.25,
)

# ====================================================================
# 動差與白化
# ====================================================================
DEFAULT_RANK_TOL: float = 1e-8
PROJECTION_FACTOR: int = 2          # k̃ = 2k
DEFAULT_POWER_ITERS: int = 1
EXACT_WHITEN_MAX_DIM: int = 2000
DEBUG_DUMP_MAX_DIM: int = 200
EIG_CLAMP_REL: float = 1e-10
LANCZOS_RESIDUAL_REL: float = 1e-6
LANCZOS_MAX_ITER: int = 5000

# ====================================================================
# STGD
# ====================================================================
DEFAULT_THETA: float = 1.0
DEFAULT_MAX_EPOCHS: int = 200
DEFAULT_TOL: float = 1e-6
DEFAULT_DECAY_SAMPLES: float = 10.0   # mini-batch：decay_tau = 10 · n_X
DEFAULT_LR_SCALE: float = 0.01        # mini-batch：learn_rate_0 = 0.01 / s
FULL_BATCH_LR_SCALE: float = 0.1      # 全批次：learn_rate_0 = 0.1 / s，s 為曲率尺度
CONTRACTION_CANDIDATES: int = 8       # 初始化時嘗試的隨機收縮方向數
BACKTRACK_LIMIT: int = 30             # 單一 epoch 內步長減半的上限
MIN_INIT_EIGEN_REL: float = 0.1       # 初始特徵值下限（相對最大值）

# ====================================================================
# 後處理與驗證
# ====================================================================
DEFAULT_THRESHOLD: float = 0.05
DEFAULT_P_THRESHOLD: float = 0.01

# ====================================================================
# 輸出檔名
# ====================================================================
MANIFEST_NAME: str = "manifest.txt"
REMAP_NAME: str = "remap.txt"
PI_HAT_NAME: str = "pi_hat.txt"
MU_HAT_NAME: str = "mu_hat.txt"
ALPHA_HAT_NAME: str = "alpha_hat.txt"
TRACE_NAME: str = "stgd_trace.csv"
REPORT_NAME: str = "report.txt"
PVALUES_NAME: str = "pvalues.csv"
BRIDGENESS_NAME: str = "bridgeness.csv"
SWEEP_NAME: str = "threshold_sweep.csv"
RAW_PI_NAME: str = "pi_raw.txt"
GRAPH_NAME: str = "graph.txt"
CORPUS_NAME: str = "corpus.txt"
PI_TRUE_NAME: str = "pi_true.txt"
P_TRUE_NAME: str = "P_true.txt"
MU_TRUE_NAME: str = "mu_true.txt"
ALPHA_TRUE_NAME: str = "alpha_true.txt"


# ====================================================================
# 設定檔
# ====================================================================
def parse_key_value_file(path: str | Path) -> dict[str, str]:
    """解析 `key = value` 格式的設定檔。

    空行與 `#` 開頭的行略過；值前後空白會被去除。

    Args:
        path: 設定檔路徑

    Returns:
        {鍵: 原始字串值}

    Raises:
        ParseError: 某行缺少 `=` 或鍵為空
    """
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"缺少 '=': {line!r}", line_no)
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError("鍵不可為空", line_no)
            values[key] = value.strip()
    logger.debug("設定檔 %s 載入 %d 個鍵", path, len(values))
    return values


# ====================================================================
# 日誌系統
# ====================================================================
def setup_logging(verbose: bool = False) -> None:
    """設定日誌系統。預設 INFO 等級，verbose 或除錯環境變數時使用 DEBUG。"""
    debug = verbose or os.environ.get(DEBUG_ENV, "") == "1"
    level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
