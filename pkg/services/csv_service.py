"""
CSV出力サービス
損失履歴・収穫ダンプ・整列パス・キーポーズ・Tau・精度曲線・コスト表・埋め込みの書き出し
浮動小数点は有効数字9桁、改行はLFで固定（同じ入力なら同じバイト列）
"""
import csv
import json
import math
from io import StringIO
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from config.settings import FLOAT_FORMAT
from .alignment_service import AlignmentResult, EmbeddedSequence, KeyposeLabels
from .evaluation_service import AccuracyCurve, TauReport
from .training_service import HarvestRow

LOSS_HEADER = ['epoch', 'mean_loss']
HARVEST_HEADER = ['seq_a', 't_a', 'seq_b', 't_b', 'cost']
PATH_HEADER = ['i', 'j', 'cost', 'row_time', 'col_time']
KEYPOSE_HEADER = ['label', 'time_seconds']
TAU_HEADER = ['seq_a', 'seq_b', 'tau']
ACCURACY_HEADER = ['threshold', 'fraction']
COST_HEADER = ['name', 'mean_cost']


def format_float(value: float) -> str:
    return format(float(value), FLOAT_FORMAT)


def _round_json(value: Any) -> Any:
    """JSON用にfloatを有効数字9桁へ丸める"""
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return float(format_float(value))
    if isinstance(value, dict):
        return {str(k): _round_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_json(v) for v in value]
    if hasattr(value, 'item'):
        return _round_json(value.item())
    return value


class CsvService:
    """成果物（CSV・JSON）の出力サービス"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, filename) -> Path:
        """出力先パス（絶対パスならそのまま）"""
        path = self.output_dir / filename
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def _write_rows(self, filename, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        output_path = self._path(filename)
        with open(output_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
        return output_path

    def _rows_string(self, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        output = StringIO()
        writer = csv.writer(output, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
        return output.getvalue()

    # ====== 学習 ======

    def loss_rows(self, history: Sequence[Tuple[int, float]]) -> List[List[str]]:
        return [[str(epoch), format_float(loss)] for epoch, loss in history]

    def write_loss_history(self, history: Sequence[Tuple[int, float]], filename: str = 'loss_phase1.csv') -> Path:
        """
        エポックごとの平均損失

        Args:
            history: [(epoch, mean_loss), ...]
            filename: 出力ファイル名

        Returns:
            生成されたCSVファイルのパス
        """
        return self._write_rows(filename, LOSS_HEADER, self.loss_rows(history))

    def harvest_rows(self, rows: Sequence[HarvestRow]) -> List[List[str]]:
        return [
            [r.seq_a, format_float(r.t_a), r.seq_b, format_float(r.t_b), format_float(r.cost)]
            for r in rows
        ]

    def write_harvest(self, rows: Sequence[HarvestRow], filename: str = 'harvest.csv') -> Path:
        return self._write_rows(filename, HARVEST_HEADER, self.harvest_rows(rows))

    # ====== 整列 ======

    def path_rows(self, result: AlignmentResult) -> List[List[str]]:
        row_times, col_times = result.cost.row_times, result.cost.col_times
        return [
            [str(i), str(j), format_float(c), format_float(row_times[i]), format_float(col_times[j])]
            for (i, j), c in zip(result.path.cells, result.path.cell_costs)
        ]

    def write_path(self, result: AlignmentResult, filename: str = 'path.csv') -> Path:
        return self._write_rows(filename, PATH_HEADER, self.path_rows(result))

    def summary_string(self, summary: Dict[str, Any]) -> str:
        return json.dumps(_round_json(summary), ensure_ascii=False, indent=2, sort_keys=True) + '\n'

    def write_summary(self, summary: Dict[str, Any], filename: str = 'summary.json') -> Path:
        """JSONサマリー（キー順固定・有効数字9桁）"""
        output_path = self._path(filename)
        with open(output_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(self.summary_string(summary))
        return output_path

    # ====== キーポーズ ======

    def keypose_rows(self, labels: KeyposeLabels) -> List[List[str]]:
        return [[label, format_float(t)] for label, t in labels.entries]

    def write_keyposes(self, labels: KeyposeLabels, filename: str = 'keyposes.csv') -> Path:
        return self._write_rows(filename, KEYPOSE_HEADER, self.keypose_rows(labels))

    def keyposes_csv_string(self, labels: KeyposeLabels) -> str:
        return self._rows_string(KEYPOSE_HEADER, self.keypose_rows(labels))

    # ====== 評価 ======

    def write_tau(self, report: TauReport, filename: str = 'tau.csv') -> Path:
        rows = [[a, b, format_float(tau)] for a, b, tau in report.per_pair]
        return self._write_rows(filename, TAU_HEADER, rows)

    def write_accuracy(self, curve: AccuracyCurve, filename: str = 'accuracy.csv') -> Path:
        rows = [[format_float(t), format_float(f)] for t, f in curve.rows()]
        return self._write_rows(filename, ACCURACY_HEADER, rows)

    def cost_rows(self, costs: Sequence[Tuple[str, float]]) -> List[List[str]]:
        return [[name, format_float(cost)] for name, cost in costs]

    def write_costs(self, costs: Sequence[Tuple[str, float]], filename: str = 'costs.csv') -> Path:
        return self._write_rows(filename, COST_HEADER, self.cost_rows(costs))

    # ====== 埋め込み ======

    def write_embeddings(self, emb: EmbeddedSequence, filename: Optional[str] = None) -> Path:
        """窓中心時刻と埋め込みベクトル（time, e0, e1, ...）"""
        filename = filename or f'{emb.name}_embeddings.csv'
        header = ['time'] + [f'e{k}' for k in range(emb.vectors.shape[1])]
        rows = (
            [format_float(t)] + [format_float(v) for v in vec]
            for t, vec in zip(emb.times, emb.vectors)
        )
        return self._write_rows(filename, header, rows)
