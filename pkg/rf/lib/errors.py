from typing import Iterable, List, Optional


class RfError(Exception):
    """rf 全体で使う例外の基底クラス。"""


class InvalidBoxError(RfError):
    """寸法が正でない、または値が有限でない OBB。"""


class ShapeMismatchError(RfError):
    """予測マップとターゲットマップの形状が一致しない。"""


class EncodingError(RfError):
    """ターゲット生成に失敗したオブジェクトの一覧を保持する。"""
    def __init__(self, message: str, indices: Optional[Iterable[int]] = None):
        self.indices: List[int] = list(indices or [])
        if self.indices:
            message = f"{message} (indices: {', '.join(str(i) for i in self.indices)})"
        super().__init__(message)


class TensorFormatError(RfError):
    """ARPT テンソルファイルの形式エラー。"""
    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"{path}: {reason}")


class EvaluationError(RfError):
    """評価入力の不整合。"""
    def __init__(self, message: str, image_ids: Optional[Iterable[str]] = None):
        self.image_ids: List[str] = list(image_ids or [])
        if self.image_ids:
            message = f"{message}: {', '.join(self.image_ids)}"
        super().__init__(message)


class ConfigError(RfError):
    """設定値が不正、または実行不可能な構成。"""


class RecordFormatError(RfError):
    """JSONL アノテーション/検出ファイルの行が読めない。"""
    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")
