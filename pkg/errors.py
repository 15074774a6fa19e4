"""例外階層

所有模組拋出的錯誤皆繼承 TensorCommError，CLI 於最外層統一捕捉。
"""
from __future__ import annotations


class TensorCommError(Exception):
    """本專案所有錯誤的共用基底類別。"""


class ValidationError(TensorCommError, ValueError):
    """輸入資料或參數違反前置條件。"""


class ParseError(ValidationError):
    """文字格式解析失敗，帶行號。"""

    def __init__(self, message: str, line_no: int | None = None) -> None:
        self.line_no = line_no
        if line_no is not None:
            message = f"第 {line_no} 行: {message}"
        super().__init__(message)


class FormatError(ValidationError):
    """檔頭宣告與內容不一致。"""


class ConfigurationError(TensorCommError, ValueError):
    """設定值不合法（例如分割集合小於 k）。"""


class DegenerateMomentError(TensorCommError, ArithmeticError):
    """動差矩陣的數值秩不足 k。"""

    def __init__(self, matrix_name: str, numerical_rank: int, k: int) -> None:
        self.matrix_name = matrix_name
        self.numerical_rank = numerical_rank
        self.k = k
        super().__init__(
            f"{matrix_name} 數值秩為 {numerical_rank}，小於所需的 k={k}"
        )


class DegenerateComponentError(TensorCommError, ArithmeticError):
    """特徵值為 0 的成分無法後處理。"""

    def __init__(self, indices: list[int]) -> None:
        self.indices = list(indices)
        super().__init__(f"特徵值為 0 的成分: {self.indices}")


class ConvergenceError(TensorCommError, ArithmeticError):
    """疊代法在最大次數內未收斂。"""

    def __init__(self, message: str, residual: float) -> None:
        self.residual = residual
        super().__init__(f"{message}（殘差 {residual:.3e}）")


class DivergenceError(TensorCommError, ArithmeticError):
    """STGD 更新出現非有限值。"""

    def __init__(self, iteration: int) -> None:
        self.iteration = iteration
        super().__init__(
            f"第 {iteration} 次更新出現非有限值，請調小 learn_rate_0"
        )


class StageError(TensorCommError):
    """管線某階段失敗，包裝原始例外並標示階段名稱。"""

    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
