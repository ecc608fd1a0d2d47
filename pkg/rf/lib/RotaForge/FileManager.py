import csv
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO

import numpy as np
from PIL import Image

from ..codec import Detection
from ..errors import InvalidBoxError, RecordFormatError, TensorFormatError
from ..geometry import ObbBox
from .Log import Logger

ARPT_MAGIC = b"ARPT"
ARPT_VERSION = 1
BOX_FIELDS = ("cx", "cy", "w", "h", "theta")


# --- 1. レコード ---
@dataclass
class AnnotationRecord:
    """JSONL の 1 行 = 1 画像。scores があれば検出ファイルとして扱う。"""
    image_id: str
    width: int
    height: int
    boxes: List[ObbBox] = field(default_factory=list)
    scores: Optional[List[float]] = None

    @classmethod
    def from_detections(cls, image_id: str, width: int, height: int,
                        detections: Sequence[Detection]) -> "AnnotationRecord":
        return cls(image_id, width, height, [d.box for d in detections], [d.score for d in detections])

    def detections(self) -> List[Detection]:
        scores = self.scores if self.scores is not None else [1.0] * len(self.boxes)
        return [Detection(box, score) for box, score in zip(self.boxes, scores)]

    def to_json(self) -> Dict[str, Any]:
        boxes = []
        for i, box in enumerate(self.boxes):
            entry = dict(zip(BOX_FIELDS, box.as_tuple()))
            if self.scores is not None:
                entry["score"] = self.scores[i]
            boxes.append(entry)
        return {"image_id": self.image_id, "width": self.width, "height": self.height, "boxes": boxes}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "AnnotationRecord":
        entries = data["boxes"]
        boxes = [ObbBox(*(float(entry[k]) for k in BOX_FIELDS)) for entry in entries]
        scored = sum("score" in entry for entry in entries)
        if 0 < scored < len(entries):
            raise ValueError(f"score given on {scored} of {len(entries)} boxes")
        scores = [float(entry["score"]) for entry in entries] if entries and scored else None
        return cls(str(data["image_id"]), int(data["width"]), int(data["height"]), boxes, scores)


# --- 2. FileManager クラス ---
class FileManager:
    """ファイルシステムの読み書き操作をすべて担当するクラス。

    失敗はログに残してから呼び出し元へ再送出する。
    """
    def __init__(self, logger: Logger):
        self.logger = logger

    def ensure_directory(self, dir_path: str):
        try:
            os.makedirs(dir_path, exist_ok=True)
            self.logger.debug(f"ディレクトリ '{dir_path}' の準備ができました。")
        except OSError as e:
            self.logger.error(f"ディレクトリ作成中にエラーが発生しました: {e}")
            raise

    def _ensure_parent(self, file_path: str):
        parent = os.path.dirname(file_path)
        if parent:
            self.ensure_directory(parent)

    # --- JSONL ---
    def read_records(self, file_path: str, ground_truth: bool = False) -> List[AnnotationRecord]:
        """1 ファイル内で image_id は一意。ground_truth ならボックスが正準形であることも確かめる。"""
        records = []
        seen: Dict[str, int] = {}
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                for line_number, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = AnnotationRecord.from_json(json.loads(line))
                    except (json.JSONDecodeError, KeyError, TypeError, ValueError, InvalidBoxError) as e:
                        raise RecordFormatError(file_path, line_number, str(e)) from e
                    if record.image_id in seen:
                        raise RecordFormatError(file_path, line_number, f"duplicate image_id '{record.image_id}' "
                                                                        f"(first on line {seen[record.image_id]})")
                    if ground_truth:
                        bad = [i for i, box in enumerate(record.boxes) if not box.is_canonical()]
                        if bad:
                            raise RecordFormatError(file_path, line_number,
                                                    f"ground truth box(es) {bad} not canonical "
                                                    "(need w <= h and -pi/2 <= theta < pi/2)")
                    seen[record.image_id] = line_number
                    records.append(record)
        except OSError as e:
            self.logger.error(f"JSONLファイルの読み込みに失敗しました ({file_path}): {e}")
            raise
        except RecordFormatError as e:
            self.logger.error(f"JSONLファイルの形式が正しくありません: {e}")
            raise
        self.logger.debug(f"{len(records)} 件のレコードを '{file_path}' から読み込みました。")
        return records

    def write_records(self, file_path: str, records: Iterable[AnnotationRecord]):
        self._ensure_parent(file_path)
        try:
            with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
                for record in records:
                    f.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
            self.logger.success(f"JSONLファイル '{file_path}' を保存しました。")
        except OSError as e:
            self.logger.error(f"JSONLファイルの書き込みに失敗しました ({file_path}): {e}")
            raise

    # --- JSON ---
    def read_json(self, file_path: str) -> Dict[str, Any]:
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            self.logger.error(f"JSONファイルの読み込みに失敗しました ({file_path}): {e}")
            raise

    def write_json(self, file_path: str, data: Any):
        self._ensure_parent(file_path)
        try:
            with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
                json.dump(data, f, indent=2, ensure_ascii=False)
                f.write("\n")
        except OSError as e:
            self.logger.error(f"JSONファイルの書き込みに失敗しました ({file_path}): {e}")
            raise

    # --- ARPT テンソル ---
    def write_tensor(self, file_path: str, array: np.ndarray):
        """'ARPT' + version + ndim + 各次元 (u32 LE) + float32 LE の行優先データ。"""
        array = np.ascontiguousarray(array, dtype='<f4')
        if array.ndim > 255:
            raise ValueError(f"too many dimensions for ARPT: {array.ndim}")
        header = ARPT_MAGIC + bytes([ARPT_VERSION, array.ndim]) + np.asarray(array.shape, dtype='<u4').tobytes()
        self._ensure_parent(file_path)
        try:
            with open(file_path, 'wb') as f:
                f.write(header)
                f.write(array.tobytes())
        except OSError as e:
            self.logger.error(f"テンソルファイルの書き込みに失敗しました ({file_path}): {e}")
            raise

    def read_tensor(self, file_path: str) -> np.ndarray:
        try:
            with open(file_path, 'rb') as f:
                data = f.read()
        except OSError as e:
            self.logger.error(f"テンソルファイルの読み込みに失敗しました ({file_path}): {e}")
            raise
        try:
            return self._parse_tensor(file_path, data)
        except TensorFormatError as e:
            self.logger.error(f"テンソルファイルの形式が正しくありません: {e}")
            raise

    @staticmethod
    def _parse_tensor(file_path: str, data: bytes) -> np.ndarray:
        if len(data) < 6 or data[:4] != ARPT_MAGIC:
            raise TensorFormatError(file_path, "bad magic, not an ARPT tensor")
        if data[4] != ARPT_VERSION:
            raise TensorFormatError(file_path, f"unsupported version {data[4]}")
        ndim = data[5]
        header_size = 6 + 4 * ndim
        if len(data) < header_size:
            raise TensorFormatError(file_path, "truncated header")
        shape = tuple(int(d) for d in np.frombuffer(data, dtype='<u4', count=ndim, offset=6))
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        payload = len(data) - header_size
        if payload < expected:
            raise TensorFormatError(file_path, f"truncated payload: {payload} of {expected} bytes")
        if payload > expected:
            raise TensorFormatError(file_path, f"trailing bytes after payload: {payload} > {expected}")
        return np.frombuffer(data, dtype='<f4', offset=header_size).reshape(shape).astype(np.float64)

    # --- CSV / 画像 ---
    def write_csv(self, header: Sequence[str], rows: Iterable[Sequence[Any]],
                  file_path: Optional[str] = None, stream: Optional[TextIO] = None):
        """file_path がなければ stream (標準出力など) に書く。"""
        if file_path is None:
            writer = csv.writer(stream, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
            return
        self._ensure_parent(file_path)
        try:
            with open(file_path, 'w', encoding='utf-8', newline='') as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(header)
                writer.writerows(rows)
            self.logger.success(f"CSVファイル '{file_path}' を保存しました。")
        except OSError as e:
            self.logger.error(f"CSVファイルの書き込みに失敗しました ({file_path}): {e}")
            raise

    def save_image(self, file_path: str, image: Image.Image):
        self._ensure_parent(file_path)
        try:
            image.save(file_path, format="PNG")
            self.logger.debug(f"画像 '{file_path}' を保存しました。")
        except OSError as e:
            self.logger.error(f"画像の保存に失敗しました ({file_path}): {e}")
            raise
