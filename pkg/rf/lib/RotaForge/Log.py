import sys
from typing import TextIO


# --- 1. Logger クラス ---
class Logger:
    """コンソールへのログ出力を一元管理するクラス。

    標準出力は CSV などのデータ用に空けておき、ログはすべて標準エラーに書く。
    端末でないときは色を付けない。
    """
    COLORS = {
        "HEADER": '\033[95m', "BLUE": '\033[94m', "GREEN": '\033[92m',
        "YELLOW": '\033[93m', "RED": '\033[91m', "GRAY": '\033[90m',
        "ENDC": '\033[0m', "BOLD": '\033[1m',
    }

    def __init__(self, verbose: bool = False, stream: TextIO = None):
        self.verbose = verbose
        self.stream = stream if stream is not None else sys.stderr
        self.use_color = hasattr(self.stream, "isatty") and self.stream.isatty()

    def _paint(self, color: str, text: str) -> str:
        if not self.use_color:
            return text
        return f"{self.COLORS[color]}{self.COLORS['BOLD']}{text}{self.COLORS['ENDC']}"

    def _log(self, color: str, prefix: str, message: str):
        print(f"{self._paint(color, prefix)} {message}", file=self.stream)

    def info(self, message: str): self._log("BLUE", "[INFO]", message)
    def success(self, message: str): self._log("GREEN", "[SUCCESS]", message)
    def warn(self, message: str): self._log("YELLOW", "[WARNING]", message)
    def error(self, message: str): self._log("RED", "[ERROR]", message)

    def debug(self, message: str):
        if self.verbose:
            self._log("GRAY", "[DEBUG]", message)

    def start_section(self, title: str):
        print(f"\n{self._paint('HEADER', f'--- {title} ---')}", file=self.stream)
