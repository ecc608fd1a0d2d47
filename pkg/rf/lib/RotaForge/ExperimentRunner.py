import math
import os
import sys
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np

from ..codec import (DEFAULT_MIN_OVERLAP, DenseMaps, EncodedTargets, decode_detections, encode_targets,
                     heatmap_preview, to_prediction_maps)
from ..errors import ConfigError, EncodingError
from ..evaluation import report
from ..geometry import wrap_angle_delta
from ..gradcheck import gradcheck_suite
from ..losses import AngleLossKind, FocalParams, LossWeights, RangeMode, ablation_sweep, angle_loss_curve, fit_angle
from ..synth import PerturbConfig, SceneConfig, generate_scene, perturb, render_preview
from .FileManager import AnnotationRecord, FileManager
from .Log import Logger

MAP_NAMES = ("heatmap", "offset", "size", "orientation")
INDEX_FILE = "index.json"
CENTERS_FILE = "centers.json"


def _fmt(value: float) -> str:
    return f"{value:.10g}"


# --- 1. ExperimentRunner クラス (オーケストレーター) ---
class ExperimentRunner:
    """各モジュールを組み合わせ、コマンドごとのワークフローを実行する。

    戻り値はプロセスの終了コードに使う値 (0 成功, 1 失敗)。データは stdout、ログは Logger。
    """
    def __init__(self, file_manager: FileManager, logger: Logger, stdout: Optional[TextIO] = None):
        self.file_manager = file_manager
        self.logger = logger
        self.stdout = stdout if stdout is not None else sys.stdout

    def _emit_csv(self, header: Sequence[str], rows: List[Sequence[str]], out_path: Optional[str]):
        self.file_manager.write_csv(header, rows, file_path=out_path, stream=self.stdout)

    # --- 2. 合成データ ---
    def run_synth(self, out_dir: str, scene_cfg: SceneConfig, preview: bool = False) -> int:
        self.logger.start_section("合成シーンの生成")
        scene = generate_scene(scene_cfg)
        size = scene_cfg.image_size
        records = [AnnotationRecord(image_id, size, size, boxes) for image_id, boxes in scene.items()]
        self.file_manager.ensure_directory(out_dir)
        self.file_manager.write_records(os.path.join(out_dir, "gt.jsonl"), records)
        self.file_manager.write_json(os.path.join(out_dir, "config.json"), asdict(scene_cfg))
        if preview:
            for record in records:
                self.file_manager.save_image(os.path.join(out_dir, "previews", f"{record.image_id}.png"),
                                             render_preview(record.boxes, size))
        people = sum(len(r.boxes) for r in records)
        self.logger.success(f"{len(records)} 枚の画像に {people} 人を配置しました。")
        return 0

    def run_perturb(self, gt_path: str, out_path: str, perturb_cfg: PerturbConfig) -> int:
        self.logger.start_section("擬似検出の生成")
        records = self.file_manager.read_records(gt_path, ground_truth=True)
        gt = {r.image_id: r.boxes for r in records}
        sizes = {r.image_id: (r.width, r.height) for r in records}
        detections = perturb(gt, perturb_cfg, sizes)
        out = [AnnotationRecord.from_detections(r.image_id, r.width, r.height, detections[r.image_id])
               for r in records]
        self.file_manager.write_records(out_path, out)
        kept = sum(len(d) for d in detections.values())
        self.logger.info(f"正解 {sum(len(b) for b in gt.values())} 件から検出 {kept} 件を生成しました。")
        return 0

    # --- 3. エンコード / デコード ---
    def run_encode(self, gt_path: str, out_dir: str, stride: int, min_overlap: float = DEFAULT_MIN_OVERLAP,
                   as_prediction: bool = False, preview: bool = False) -> int:
        self.logger.start_section("ターゲットマップのエンコード")
        records = self.file_manager.read_records(gt_path, ground_truth=True)
        encoded: Dict[str, EncodedTargets] = {}
        failed = []
        for record in records:
            try:
                encoded[record.image_id] = encode_targets(record.boxes, record.width, record.height,
                                                          stride, min_overlap)
            except EncodingError as e:
                self.logger.error(f"{record.image_id}: {e}")
                failed.append(record.image_id)
        if failed:
            raise EncodingError(f"could not encode {len(failed)} image(s): {', '.join(failed)}")

        self.file_manager.ensure_directory(out_dir)
        for record in records:
            targets = encoded[record.image_id]
            maps = to_prediction_maps(targets) if as_prediction else targets.maps
            image_dir = os.path.join(out_dir, record.image_id)
            for name, array in maps.channels().items():
                self.file_manager.write_tensor(os.path.join(image_dir, f"{name}.arpt"), array)
            self.file_manager.write_json(os.path.join(image_dir, CENTERS_FILE), {
                "image_id": record.image_id, "width": record.width, "height": record.height,
                "stride": stride, "prediction": as_prediction,
                "centers": [list(c) for c in targets.centers],
            })
            if preview:
                self.file_manager.save_image(os.path.join(image_dir, "heatmap.png"), heatmap_preview(maps))
            self.logger.debug(f"{record.image_id}: {targets.object_count} 個の中心を書き出しました。")
        self.file_manager.write_json(os.path.join(out_dir, INDEX_FILE), {
            "stride": stride, "prediction": as_prediction, "images": [r.image_id for r in records],
        })
        self.logger.success(f"{len(records)} 枚分のマップを '{out_dir}' に保存しました。")
        return 0

    def _load_maps(self, maps_dir: str, image_id: str) -> tuple:
        image_dir = os.path.join(maps_dir, image_id)
        meta = self.file_manager.read_json(os.path.join(image_dir, CENTERS_FILE))
        arrays = {name: self.file_manager.read_tensor(os.path.join(image_dir, f"{name}.arpt")) for name in MAP_NAMES}
        height_out, width_out = arrays["heatmap"].shape[:2]
        maps = DenseMaps(width_out, height_out, int(meta["stride"]), **arrays)
        maps.check_shapes()
        return maps, meta

    def run_decode(self, maps_dir: str, out_path: str, conf_threshold: float, top_k: int) -> int:
        self.logger.start_section("検出のデコード")
        index = self.file_manager.read_json(os.path.join(maps_dir, INDEX_FILE))
        if not index.get("prediction", False):
            self.logger.warn("maps were encoded as targets; orientation will be read as raw network output")
        records = []
        for image_id in index["images"]:
            maps, meta = self._load_maps(maps_dir, image_id)
            detections = decode_detections(maps, conf_threshold, top_k)
            records.append(AnnotationRecord.from_detections(image_id, int(meta["width"]), int(meta["height"]),
                                                            detections))
        self.file_manager.write_records(out_path, records)
        self.logger.info(f"{sum(len(r.boxes) for r in records)} 件の検出を復号しました。")
        return 0

    # --- 4. 評価 ---
    def run_eval(self, gt_path: str, det_path: str, iou_threshold: float, conf_threshold: float,
                 report_path: str) -> int:
        self.logger.start_section("評価")
        gt = {r.image_id: r.boxes for r in self.file_manager.read_records(gt_path, ground_truth=True)}
        dets = {r.image_id: r.detections() for r in self.file_manager.read_records(det_path)}
        result = report(gt, dets, conf_threshold, iou_threshold)
        print(f"AP50 {result.ap50:.3f} P {result.precision:.3f} R {result.recall:.3f} F1 {result.f1:.3f}",
              file=self.stdout)
        self.file_manager.write_json(report_path, result.to_dict())
        self.logger.success(f"評価レポートを '{report_path}' に保存しました。")
        return 0

    # --- 5. 損失の検証と実験 ---
    def run_gradcheck(self, loss_name: str, samples: int, epsilon: float, tolerance: float, seed: int = 0,
                      weights: Optional[LossWeights] = None, focal_params: Optional[FocalParams] = None,
                      kind: AngleLossKind = AngleLossKind.SMOOTH_PERIODIC_L1) -> int:
        self.logger.start_section("勾配チェック")
        results = gradcheck_suite(loss_name, samples, epsilon, seed, self.logger, weights, focal_params, kind)
        print(f"{'loss':<28} {'samples':>7} {'max_rel_error':>14}  result", file=self.stdout)
        for result in results:
            verdict = "PASS" if result.passed(tolerance) else "FAIL"
            print(f"{result.name:<28} {result.samples:>7} {result.max_error:>14.3e}  {verdict}", file=self.stdout)
        failed = [r.name for r in results if not r.passed(tolerance)]
        if failed:
            self.logger.error(f"tolerance {tolerance:g} exceeded: {', '.join(failed)}")
            return 1
        self.logger.success(f"すべての損失が許容誤差 {tolerance:g} 以内でした。")
        return 0

    def run_angle_demo(self, target_deg: float, init_deg: float, range_mode: RangeMode, kind: AngleLossKind,
                       learning_rate: float, steps: int, out_path: Optional[str] = None) -> float:
        """1 物体の角度降下を記録する。戻り値は最終的な折り返し誤差 (度)。"""
        self.logger.start_section("角度降下デモ")
        try:
            t_init = range_mode.encode(math.radians(init_deg))
        except ValueError as e:
            raise ConfigError(f"initial angle {init_deg} deg cannot be represented: {e}") from e
        target = math.radians(target_deg)
        trajectory = fit_angle(target, t_init, range_mode, kind, learning_rate, steps)
        rows = [(s.step, _fmt(s.t), _fmt(math.degrees(s.theta_hat)), _fmt(s.loss)) for s in trajectory]
        self._emit_csv(("step", "t", "theta_deg", "loss"), rows, out_path)
        final = trajectory[-1]
        error_deg = math.degrees(abs(float(wrap_angle_delta(final.theta_hat - target))))
        self.logger.info(f"range={range_mode.value} loss={kind.value}: final theta_hat "
                         f"{math.degrees(final.theta_hat):.3f} deg, wrapped error {error_deg:.3f} deg")
        return error_deg

    def run_loss_curve(self, kinds: Sequence[AngleLossKind], min_deg: float, max_deg: float, points: int,
                       out_path: Optional[str] = None) -> int:
        self.logger.start_section("角度損失の曲線")
        deltas_deg = np.linspace(min_deg, max_deg, points)
        rows = []
        for kind in kinds:
            values, slopes = angle_loss_curve(kind, np.radians(deltas_deg))
            rows.extend((_fmt(d), kind.value, _fmt(v), _fmt(g)) for d, v, g in zip(deltas_deg, values, slopes))
        self._emit_csv(("delta_deg", "kind", "value", "derivative"), rows, out_path)
        return 0

    def run_ablation(self, targets_deg: Sequence[float], inits_deg: Sequence[float],
                     range_modes: Sequence[RangeMode], kinds: Sequence[AngleLossKind],
                     angle_weights: Sequence[float], learning_rate: float, steps: int,
                     out_path: Optional[str] = None) -> int:
        self.logger.start_section("角度表現のアブレーション")
        # halfpi では ±90° 以上の初期値を表現できないので、値域内に収まる初期値だけ使う
        inits = np.radians(np.asarray(inits_deg, dtype=float))
        rows = []
        for mode in range_modes:
            usable = inits[np.abs(inits) < mode.bound]
            if usable.size < inits.size:
                self.logger.warn(f"{mode.value}: {inits.size - usable.size} initial angle(s) outside the range skipped")
            if usable.size == 0:
                continue
            for row in ablation_sweep(np.radians(targets_deg), usable, [mode], kinds, angle_weights,
                                      learning_rate, steps):
                rows.append((row.range_mode.value, row.kind.value, _fmt(row.lambda_angle),
                             _fmt(row.converged), _fmt(math.degrees(row.mean_error))))
        self._emit_csv(("range", "loss", "lambda_angle", "converged", "mean_error_deg"), rows, out_path)
        return 0
