from lib.RotaForge.Log import Logger
from lib.RotaForge.FileManager import FileManager
from lib.RotaForge.ExperimentRunner import ExperimentRunner
from lib.errors import RfError
from lib.gradcheck import LOSS_NAMES
from lib.losses import AngleLossKind, FocalParams, LossWeights, RangeMode
from lib.synth import PerturbConfig, SceneConfig
from os import path
from typing import Any, Dict, List, Optional
import argparse
import json
import sys

DEFAULT_CONFIG_PATH = path.join(path.dirname(path.abspath(__file__)), "config.json")

# 設定ファイルにもフラグにも無いときの値
BUILTIN_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "codec": {"stride": 4, "conf_threshold": 0.3, "top_k": 100, "min_overlap": 0.7},
    "losses": {"lambda_off": 1.0, "lambda_size": 0.1, "lambda_angle": 0.1, "alpha": 2.0, "beta": 4.0,
               "angle_loss": "smooth-periodic-l1"},
    "eval": {"iou_threshold": 0.5, "conf_threshold": 0.3},
    "demo": {"learning_rate": 0.1, "steps": 500},
}

KIND_NAMES = [k.value for k in AngleLossKind]
RANGE_NAMES = [m.value for m in RangeMode]


# --- 1. 引数の型 ---
def people_range(text: str):
    try:
        low, high = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX, got '{text}'")
    if low < 0 or low > high:
        raise argparse.ArgumentTypeError(f"need 0 <= MIN <= MAX, got '{text}'")
    return (low, high)


def _int_at_least(text: str, minimum: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < minimum:
        raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {value}")
    return value


def positive_int(text: str) -> int:
    return _int_at_least(text, 1)


def non_negative_int(text: str) -> int:
    return _int_at_least(text, 0)


def positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got '{text}'")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


# argparse
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rf", description="回転矩形による人物検出の数理ツールキット。")
    parser.add_argument('-c', '--config', type=str, default=None,
                        help=f"設定ファイルのパス (省略時: {DEFAULT_CONFIG_PATH})")
    parser.add_argument('-v', '--verbose', action='store_true', help="デバッグログを表示する")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="合成シーンの正解 JSONL を生成する")
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--num-images', type=non_negative_int, default=10)
    p.add_argument('--image-size', type=positive_int, default=512)
    p.add_argument('--people', type=people_range, default=(2, 5), metavar="MIN:MAX")
    p.add_argument('--out', required=True, metavar="DIR")
    p.add_argument('--preview', action='store_true', help="確認用 PNG を previews/ に書き出す")

    p = sub.add_parser("perturb", help="正解から擬似検出 JSONL を作る")
    p.add_argument('--gt', required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--drop-rate', type=float, default=0.0)
    p.add_argument('--spurious-rate', type=float, default=0.0)
    p.add_argument('--center-sigma', type=float, default=0.0, help="中心のノイズ (px)")
    p.add_argument('--size-sigma', type=float, default=0.0, help="寸法の相対ノイズ")
    p.add_argument('--angle-sigma', type=float, default=0.0, help="角度のノイズ (rad)")
    p.add_argument('--score-min', type=float, default=0.5)
    p.add_argument('--score-max', type=float, default=1.0)
    p.add_argument('--out', required=True, metavar="FILE")

    p = sub.add_parser("encode", help="正解をターゲットマップ (ARPT) に変換する")
    p.add_argument('--gt', required=True)
    p.add_argument('--stride', type=positive_int, default=None)
    p.add_argument('--min-overlap', type=float, default=None)
    p.add_argument('--as-prediction', action='store_true', help="orientation を atanh(θ/π) で書き出す")
    p.add_argument('--preview', action='store_true', help="heatmap.png を書き出す")
    p.add_argument('--out', required=True, metavar="DIR")

    p = sub.add_parser("decode", help="マップから検出 JSONL を復号する")
    p.add_argument('--maps', required=True, metavar="DIR")
    p.add_argument('--conf', type=float, default=None)
    p.add_argument('--topk', type=positive_int, default=None)
    p.add_argument('--out', required=True, metavar="FILE")

    p = sub.add_parser("eval", help="AP50 / P / R / F1 を計算する")
    p.add_argument('--gt', required=True)
    p.add_argument('--det', required=True)
    p.add_argument('--iou', type=float, default=None)
    p.add_argument('--conf', type=float, default=None)
    p.add_argument('--report', default="report.json", metavar="FILE")

    p = sub.add_parser("gradcheck", help="解析勾配を有限差分で検証する")
    p.add_argument('--loss', choices=list(LOSS_NAMES) + ["all"], default="all")
    p.add_argument('--samples', type=positive_int, default=100)
    p.add_argument('--eps', type=positive_float, default=1e-5)
    p.add_argument('--tol', type=positive_float, default=1e-4)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser("angle-demo", help="1 物体の角度降下の軌跡を CSV で出力する")
    p.add_argument('--target-deg', type=float, default=80.0)
    p.add_argument('--init-deg', type=float, default=-80.0)
    p.add_argument('--range', choices=RANGE_NAMES, default="pi")
    p.add_argument('--loss', choices=KIND_NAMES, default=None)
    p.add_argument('--lr', type=positive_float, default=None)
    p.add_argument('--steps', type=positive_int, default=None)
    p.add_argument('--out', default=None, metavar="FILE", help="省略時は標準出力")

    p = sub.add_parser("loss-curve", help="角度損失と導関数を Δθ の格子で出力する")
    p.add_argument('--loss', choices=KIND_NAMES, nargs='+', default=KIND_NAMES)
    p.add_argument('--min-deg', type=float, default=-180.0)
    p.add_argument('--max-deg', type=float, default=180.0)
    p.add_argument('--points', type=positive_int, default=361)
    p.add_argument('--out', default=None, metavar="FILE")

    p = sub.add_parser("ablation", help="予測範囲・角度損失・λ_angle の組み合わせを比較する")
    p.add_argument('--targets-deg', type=float, nargs='+', default=[-80.0, -45.0, 0.0, 45.0, 80.0])
    p.add_argument('--inits-deg', type=float, nargs='+', default=[-85.0, -60.0, -30.0, 0.0, 30.0, 60.0, 85.0])
    p.add_argument('--ranges', choices=RANGE_NAMES, nargs='+', default=RANGE_NAMES)
    p.add_argument('--losses', choices=KIND_NAMES, nargs='+', default=KIND_NAMES)
    p.add_argument('--weights', type=positive_float, nargs='+', default=[1.0, 0.1, 0.01])
    p.add_argument('--lr', type=positive_float, default=None)
    p.add_argument('--steps', type=positive_int, default=None)
    p.add_argument('--out', default=None, metavar="FILE")
    return parser


# --- 2. 設定ファイル ---
def load_config(config_path: Optional[str], logger: Logger) -> Optional[Dict[str, Dict[str, Any]]]:
    """組み込み値に設定ファイルの値を重ねる。読めなければ None。"""
    config_path = config_path or DEFAULT_CONFIG_PATH
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            loaded = json.load(f)
    except FileNotFoundError:
        logger.error(f"設定ファイル '{config_path}' が見つかりません。")
        return None
    except json.JSONDecodeError:
        logger.error(f"設定ファイル '{config_path}' のJSON形式が正しくありません。")
        return None
    if not isinstance(loaded, dict):
        logger.error(f"設定ファイル '{config_path}' の最上位はオブジェクトである必要があります。")
        return None
    config = {section: dict(values) for section, values in BUILTIN_DEFAULTS.items()}
    for section, values in loaded.items():
        if isinstance(values, dict):
            config.setdefault(section, {}).update(values)
    logger.debug(f"設定ファイル '{config_path}' を読み込みました。")
    return config


def pick(flag: Any, config: Dict[str, Dict[str, Any]], section: str, key: str) -> Any:
    """フラグ > 設定ファイル > 組み込み値。"""
    return flag if flag is not None else config[section][key]


# --- 3. コマンドの振り分け ---
def dispatch(args: argparse.Namespace, config: Dict[str, Dict[str, Any]], runner: ExperimentRunner) -> int:
    losses = config["losses"]
    if args.command == "synth":
        scene = SceneConfig(seed=args.seed, image_size=args.image_size, n_images=args.num_images,
                            people_per_image=args.people)
        return runner.run_synth(args.out, scene, args.preview)
    if args.command == "perturb":
        cfg = PerturbConfig(seed=args.seed, center_noise_sigma=args.center_sigma, size_noise_sigma=args.size_sigma,
                            angle_noise_sigma=args.angle_sigma, drop_rate=args.drop_rate,
                            spurious_rate=args.spurious_rate, score_model=(args.score_min, args.score_max))
        return runner.run_perturb(args.gt, args.out, cfg)
    if args.command == "encode":
        return runner.run_encode(args.gt, args.out, int(pick(args.stride, config, "codec", "stride")),
                                 float(pick(args.min_overlap, config, "codec", "min_overlap")),
                                 args.as_prediction, args.preview)
    if args.command == "decode":
        return runner.run_decode(args.maps, args.out, float(pick(args.conf, config, "codec", "conf_threshold")),
                                 int(pick(args.topk, config, "codec", "top_k")))
    if args.command == "eval":
        return runner.run_eval(args.gt, args.det, float(pick(args.iou, config, "eval", "iou_threshold")),
                               float(pick(args.conf, config, "eval", "conf_threshold")), args.report)
    if args.command == "gradcheck":
        weights = LossWeights(lambda_size=losses["lambda_size"], lambda_off=losses["lambda_off"],
                              lambda_angle=losses["lambda_angle"])
        focal = FocalParams(alpha=losses["alpha"], beta=losses["beta"])
        return runner.run_gradcheck(args.loss, args.samples, args.eps, args.tol, args.seed,
                                    weights, focal, AngleLossKind(losses["angle_loss"]))
    if args.command == "angle-demo":
        runner.run_angle_demo(args.target_deg, args.init_deg, RangeMode(args.range),
                              AngleLossKind(pick(args.loss, config, "losses", "angle_loss")),
                              float(pick(args.lr, config, "demo", "learning_rate")),
                              int(pick(args.steps, config, "demo", "steps")), args.out)
        return 0
    if args.command == "loss-curve":
        if args.min_deg >= args.max_deg:
            raise RfError(f"--min-deg must be below --max-deg, got {args.min_deg} and {args.max_deg}")
        return runner.run_loss_curve([AngleLossKind(k) for k in args.loss], args.min_deg, args.max_deg,
                                     args.points, args.out)
    if args.command == "ablation":
        return runner.run_ablation(args.targets_deg, args.inits_deg, [RangeMode(r) for r in args.ranges],
                                   [AngleLossKind(k) for k in args.losses], args.weights,
                                   float(pick(args.lr, config, "demo", "learning_rate")),
                                   int(pick(args.steps, config, "demo", "steps")), args.out)
    raise RfError(f"unknown command: {args.command}")


# --- 4. メイン実行ブロック ---
def main(argv: Optional[List[str]] = None) -> int:
    """
    引数と設定ファイルを読み込み、依存関係を組み立ててコマンドを実行する。
    終了コードは 0 成功、1 実行時エラー、2 使い方の誤り。
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)

    # --- 依存関係の構築 (Dependency Injection) ---
    logger = Logger(verbose=args.verbose)
    config = load_config(args.config, logger)
    if config is None:
        return 1
    file_manager = FileManager(logger=logger)
    runner = ExperimentRunner(file_manager=file_manager, logger=logger)

    try:
        return dispatch(args, config, runner)
    except (RfError, ValueError) as e:
        logger.error(str(e))
        return 1
    except OSError as e:
        logger.error(f"ファイル操作に失敗しました: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
