"""階段快取

將白化結果與 STGD 特徵估計存入輸出目錄，`fit --resume` 時若設定
指紋相符即直接載入，跳過該階段。

快取策略：
- 白化：W（`rows k` 檔頭的稠密文字）＋ 特徵值與投影資訊
- STGD：Φ（稠密文字）＋ 疊代次數、最終損失與是否收斂
- 指紋為影響該階段的設定鍵（含輸入檔內容雜湊）的 SHA-256
"""
from __future__ import annotations

import hashlib
import logging
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from errors import TensorCommError
from spectral.stgd import EigenEstimate
from spectral.whitening import WhiteningContext
from utils.text_io import read_dense, read_key_values, write_dense, write_key_values

logger = logging.getLogger(__name__)

CACHE_DIRNAME: str = "stage_cache"


def fingerprint(values: Mapping[str, object]) -> str:
    """依鍵排序後的 `key=value` 行計算 SHA-256。"""
    text = "\n".join(f"{key}={values[key]}" for key in sorted(values))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class StageCache:
    """單一輸出目錄下的階段快取。"""

    def __init__(self, output_dir: str | Path, resume: bool = False) -> None:
        self.directory = Path(output_dir) / CACHE_DIRNAME
        self.resume = resume

    def _paths(self, name: str) -> tuple[Path, Path]:
        return self.directory / f"{name}.txt", self.directory / f"{name}.meta"

    def _load_meta(self, name: str, fp: str) -> tuple[np.ndarray, dict[str, str]] | None:
        if not self.resume:
            return None
        data_path, meta_path = self._paths(name)
        if not (data_path.exists() and meta_path.exists()):
            return None
        try:
            meta = read_key_values(meta_path)
            if meta.get("fingerprint") != fp:
                logger.info("[快取] %s 指紋不符，重新計算", name)
                return None
            return read_dense(data_path), meta
        except (TensorCommError, OSError, ValueError) as e:
            logger.warning("[快取] %s 讀取失敗，重新計算: %s", name, e)
            return None

    def _save(self, name: str, matrix: np.ndarray, meta: Mapping[str, object]) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        data_path, meta_path = self._paths(name)
        write_dense(data_path, matrix)
        write_key_values(meta_path, meta)

    # ================================================================
    # 白化
    # ================================================================

    def load_whitening(self, name: str, fp: str) -> WhiteningContext | None:
        loaded = self._load_meta(name, fp)
        if loaded is None:
            return None
        W, meta = loaded
        logger.info("[快取] 載入白化結果 %s", name)
        return WhiteningContext(
            W=W,
            singular_values=np.array([float(v) for v in meta["singular_values"].split()]),
            method=meta["method"],
            projection_seed=int(meta["projection_seed"]),
            projection_width=int(meta["projection_width"]),
        )

    def save_whitening(self, name: str, fp: str, ctx: WhiteningContext) -> None:
        self._save(name, ctx.W, {
            "fingerprint": fp,
            "method": ctx.method,
            "projection_seed": ctx.projection_seed,
            "projection_width": ctx.projection_width,
            "singular_values": " ".join(repr(float(v)) for v in ctx.singular_values),
        })

    # ================================================================
    # STGD
    # ================================================================

    def load_eigen(self, name: str, fp: str) -> EigenEstimate | None:
        loaded = self._load_meta(name, fp)
        if loaded is None:
            return None
        Phi, meta = loaded
        logger.info("[快取] 載入特徵估計 %s", name)
        return EigenEstimate.from_phi(
            Phi,
            iterations_run=int(meta["iterations_run"]),
            final_loss=float(meta["final_loss"]),
            converged=meta.get("converged", "True") == "True",
        )

    def save_eigen(self, name: str, fp: str, est: EigenEstimate) -> None:
        self._save(name, est.Phi, {
            "fingerprint": fp,
            "iterations_run": est.iterations_run,
            "final_loss": repr(float(est.final_loss)),
            "converged": est.converged,
        })
