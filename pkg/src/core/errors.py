"""例外定義"""
from typing import Optional


class TwinError(Exception):
    """フレームワーク共通の基底例外"""


class InvalidInputError(TwinError, ValueError):
    """事前条件・スキーマ違反"""


class DivergenceError(TwinError, ArithmeticError):
    """数値発散（非有限値）"""

    def __init__(self, message: str, step: Optional[int] = None, field: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.field = field
