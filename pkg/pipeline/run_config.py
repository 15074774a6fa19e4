"""執行設定

RunConfig 由 `key = value` 設定檔載入，再以 CLI 旗標覆寫（旗標優先）。
`stgd.` 前綴的鍵對應 StgdConfig；manifest 中的 `timing.`、`result.`
鍵在載入時略過，因此 manifest 可直接當作設定檔重現同一次執行。
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from config import (
    DEFAULT_P_THRESHOLD,
    DEFAULT_PARTITION_FRACTIONS,
    DEFAULT_POWER_ITERS,
    DEFAULT_RANK_TOL,
    DEFAULT_THRESHOLD,
    default_workers,
    parse_key_value_file,
)
from datasets.synthgen import EdgeModel
from errors import ConfigurationError
from spectral.moments import PINV_METHODS
from spectral.stgd import SHIFT_FORMS, StgdConfig
from spectral.whitening import WHITEN_METHODS

logger = logging.getLogger(__name__)

MODES: tuple[str, ...] = ("community", "topic")
_IGNORED_PREFIXES: tuple[str, ...] = ("timing.", "result.")


# ====================================================================
# 字串轉換
# ====================================================================

def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"無法解析布林值: {raw!r}")


def _parse_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in raw.replace(",", " ").split())


def _parse_optional_float(raw: str) -> float | None:
    return None if raw.strip().lower() in ("", "none") else float(raw)


def _parse_optional_bool(raw: str) -> bool | None:
    return None if raw.strip().lower() in ("", "none", "auto") else _parse_bool(raw)


def _parse_optional_int(raw: str) -> int | None:
    return None if raw.strip().lower() in ("", "none", "full") else int(raw)


def _format(value: object) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_RUN_PARSERS: dict[str, Callable[[str], object]] = {
    "mode": str,
    "k": int,
    "alpha0": float,
    "model": str,
    "directed": _parse_bool,
    "weighted": _parse_bool,
    "bipartite": _parse_bool,
    "partition": _parse_floats,
    "pinv_method": str,
    "whiten_method": str,
    "power_iters": int,
    "rank_tol": float,
    "threshold": float,
    "threshold_sweep": _parse_floats,
    "p_threshold": float,
    "fdr_q": _parse_optional_float,
    "seed": int,
    "workers": int,
    "input": str,
    "output": str,
    "truth": str,
    "trace": str,
    "n_nodes": int,
    "p_in": float,
    "p_out": float,
    "n_docs": int,
    "doc_length": int,
    "vocab_size": int,
    "topic_concentration": float,
    "normalize_docs": _parse_bool,
}

_STGD_PARSERS: dict[str, Callable[[str], object]] = {
    "theta": float,
    "learn_rate_0": _parse_optional_float,
    "decay_tau": _parse_optional_float,
    "max_epochs": int,
    "batch": _parse_optional_int,
    "tol": float,
    "seed": int,
    "shifted": _parse_optional_bool,
    "shift_form": str,
    "init": str,
}


# ====================================================================
# RunConfig
# ====================================================================

@dataclass(frozen=True)
class RunConfig:
    """一次 generate / fit / validate 執行的完整設定。"""

    mode: str = "community"
    k: int = 2
    alpha0: float = 0.0
    model: str = EdgeModel.BERNOULLI.value
    directed: bool = False
    weighted: bool = False
    bipartite: bool = False
    partition: tuple[float, ...] = DEFAULT_PARTITION_FRACTIONS
    pinv_method: str = "randomized"
    whiten_method: str = "tall-thin-svd"
    power_iters: int = DEFAULT_POWER_ITERS
    rank_tol: float = DEFAULT_RANK_TOL
    threshold: float = DEFAULT_THRESHOLD
    threshold_sweep: tuple[float, ...] = ()
    p_threshold: float = DEFAULT_P_THRESHOLD
    fdr_q: float | None = None
    seed: int = 0
    workers: int = field(default_factory=default_workers)
    input: str = ""
    output: str = ""
    truth: str = ""
    trace: str = ""
    # 合成資料參數
    n_nodes: int = 1000
    p_in: float = 0.5
    p_out: float = 0.05
    n_docs: int = 1000
    doc_length: int = 50
    vocab_size: int = 100
    topic_concentration: float = 0.1
    # 主題動差依文件長度正規化
    normalize_docs: bool = True
    stgd: StgdConfig = field(default_factory=StgdConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode 必須為 {MODES} 之一: {self.mode!r}")
        if self.k < 1:
            raise ConfigurationError(f"k 必須 >= 1: {self.k}")
        if self.mode == "community" and self.k < 2:
            raise ConfigurationError("社群模式需要 k >= 2（橋接度在 k=1 時無定義）")
        if self.alpha0 < 0:
            raise ConfigurationError(f"alpha0 必須 >= 0: {self.alpha0}")
        if self.model not in {m.value for m in EdgeModel}:
            raise ConfigurationError(f"未知的邊模型: {self.model!r}")
        if len(self.partition) != 4 or any(f <= 0 for f in self.partition):
            raise ConfigurationError(f"partition 需要 4 個正比例: {self.partition}")
        if sum(self.partition) > 1 + 1e-12:
            raise ConfigurationError(f"partition 總和必須 ≤ 1: {sum(self.partition)}")
        if self.pinv_method not in PINV_METHODS:
            raise ConfigurationError(f"pinv_method 必須為 {PINV_METHODS} 之一")
        if self.whiten_method not in WHITEN_METHODS:
            raise ConfigurationError(f"whiten_method 必須為 {WHITEN_METHODS} 之一")
        if self.power_iters < 0:
            raise ConfigurationError(f"power_iters 必須 >= 0: {self.power_iters}")
        if not 0 < self.rank_tol < 1:
            raise ConfigurationError(f"rank_tol 必須介於 (0, 1): {self.rank_tol}")
        for t in (self.threshold, *self.threshold_sweep):
            if not 0 <= t <= 1:
                raise ConfigurationError(f"門檻必須介於 [0, 1]: {t}")
        if not 0 < self.p_threshold < 1:
            raise ConfigurationError(f"p_threshold 必須介於 (0, 1): {self.p_threshold}")
        if self.fdr_q is not None and not 0 < self.fdr_q < 1:
            raise ConfigurationError(f"fdr_q 必須介於 (0, 1): {self.fdr_q}")
        if self.workers < 1:
            raise ConfigurationError(f"workers 必須 >= 1: {self.workers}")
        if self.stgd.shift_form not in SHIFT_FORMS:
            raise ConfigurationError(f"stgd.shift_form 必須為 {SHIFT_FORMS} 之一")
        paths = [p for p in (self.input, self.output, self.truth, self.trace) if p]
        resolved = [str(Path(p).resolve()) for p in paths]
        if len(set(resolved)) != len(resolved):
            raise ConfigurationError(f"input/output/truth/trace 路徑不可重複: {paths}")

    @property
    def shifted(self) -> bool:
        return self.stgd.shifted if self.stgd.shifted is not None else self.alpha0 > 0

    def with_overrides(self, overrides: Mapping[str, str]) -> RunConfig:
        """以字串形式的鍵值覆寫（旗標優先於設定檔）。"""
        run_kwargs: dict[str, object] = {}
        stgd_kwargs: dict[str, object] = {}
        for key, raw in overrides.items():
            if key.startswith(_IGNORED_PREFIXES):
                continue
            if key.startswith("stgd."):
                name = key[len("stgd."):]
                parser = _STGD_PARSERS.get(name)
                target = stgd_kwargs
            else:
                name = key
                parser = _RUN_PARSERS.get(name)
                target = run_kwargs
            if parser is None:
                raise ConfigurationError(f"未知的設定鍵: {key!r}")
            try:
                target[name] = parser(raw)
            except ValueError as e:
                raise ConfigurationError(f"設定 {key} 的值無法解析: {raw!r}") from e
        stgd = replace(self.stgd, **stgd_kwargs) if stgd_kwargs else self.stgd
        return replace(self, stgd=stgd, **run_kwargs)

    @classmethod
    def load(
        cls, path: str | Path | None = None, overrides: Mapping[str, str] | None = None
    ) -> RunConfig:
        """讀取設定檔（可省略），再套用覆寫。"""
        values: dict[str, str] = {}
        if path is not None:
            values.update(parse_key_value_file(path))
        if overrides:
            values.update(overrides)
        cfg = cls().with_overrides(values)
        logger.debug("設定載入完成: %s", cfg.resolved())
        return cfg

    def stgd_config(self, trace_path: Path | None = None) -> StgdConfig:
        return replace(self.stgd, trace_path=trace_path)

    def resolved(self) -> dict[str, str]:
        """扁平化的完整設定，寫入 manifest 用。"""
        out: dict[str, str] = {}
        for f in fields(self):
            if f.name == "stgd":
                continue
            out[f.name] = _format(getattr(self, f.name))
        for f in fields(self.stgd):
            if f.name == "trace_path":
                continue
            out[f"stgd.{f.name}"] = _format(getattr(self.stgd, f.name))
        return out

    def subset(self, keys: tuple[str, ...]) -> dict[str, str]:
        full = self.resolved()
        return {key: full[key] for key in keys}
