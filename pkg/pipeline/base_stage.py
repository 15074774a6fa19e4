"""管線共用基底類別"""
from __future__ import annotations

import hashlib
import logging
import time
from collections.abc import Iterator
from contextlib import contextmanager
from functools import cached_property
from pathlib import Path

from cache.stage_cache import StageCache, fingerprint
from errors import StageError, TensorCommError
from pipeline.run_config import RunConfig

logger = logging.getLogger(__name__)

# 各階段名稱，與 manifest 的 timing.* 鍵一致
STAGES: tuple[str, ...] = ("loading", "preprocessing", "stgd", "postprocessing")


class BaseStage:
    """社群／主題管線的共用基底類別。

    提供階段計時、錯誤包裝與快取指紋。
    """

    # 子類別應覆寫此屬性作為日誌標籤
    LABEL: str = "BaseStage"

    # 影響白化階段的設定鍵
    WHITENING_KEYS: tuple[str, ...] = (
        "mode", "k", "alpha0", "directed", "weighted", "bipartite", "partition",
        "pinv_method", "whiten_method", "power_iters", "rank_tol", "seed", "input",
        "normalize_docs",
    )

    def __init__(self, cfg: RunConfig, cache: StageCache | None = None) -> None:
        self.cfg = cfg
        self.cache = cache
        self.timings: dict[str, float] = {name: 0.0 for name in STAGES}
        self.results: dict[str, object] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """計時一個階段；任何本專案錯誤都包裝成帶階段名稱的 StageError。"""
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (TensorCommError, ArithmeticError, ValueError) as e:
            logger.error("[%s] 階段 %s 失敗: %s", self.LABEL, name, e)
            raise StageError(name, e) from e
        finally:
            elapsed = time.perf_counter() - start
            self.timings[name] = self.timings.get(name, 0.0) + elapsed
            logger.info("[%s] %s 耗時 %.2f 秒", self.LABEL, name, elapsed)

    @cached_property
    def input_signature(self) -> str:
        path = Path(self.cfg.input) if self.cfg.input else None
        if path is None or not path.exists():
            return "none"
        digest = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
        return digest.hexdigest()

    def whitening_fingerprint(self, pass_name: str) -> str:
        values: dict[str, object] = dict(self.cfg.subset(self.WHITENING_KEYS))
        values["pass"] = pass_name
        values["input_sha256"] = self.input_signature
        return fingerprint(values)

    def eigen_fingerprint(self, pass_name: str) -> str:
        values: dict[str, object] = {
            key: value for key, value in self.cfg.resolved().items()
            if key.startswith("stgd.")
        }
        values["whitening"] = self.whitening_fingerprint(pass_name)
        return fingerprint(values)
