"""
時間整列サービス
埋め込み間のコサイン距離コスト行列、DTW、線形時間伸縮（LTW）事前分布、
左右反転を考慮したペア整列、キーポーズラベルの転写
"""
import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .encoder_service import EncoderParams, check_layout, embed_windows
from .errors import DataError, FormatError, ShapeError, ZeroNormError
from .normalize_service import WindowSpec, extract_window, normalize_window, window_centers
from .pose_io_service import PoseSequence, mirror_lr, read_text

logger = logging.getLogger(__name__)

METRICS = ('cosine', 'euclidean')

# DTWのバックトラック方向（タイは diag → row → col の順で優先）
_DIAG, _ROW, _COL = 0, 1, 2


@dataclass(frozen=True, eq=False)
class EmbeddedSequence:
    """系列の窓ごとの埋め込み（n × D）と窓中心時刻"""
    name: str
    vectors: np.ndarray
    times: np.ndarray

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """n × m のペアワイズコスト"""
    values: np.ndarray
    row_times: np.ndarray
    col_times: np.ndarray
    metric: str = 'cosine'

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeError(f'コスト行列の形状が不正です: {values.shape}')
        if not np.all(np.isfinite(values)):
            raise DataError('コスト行列に非有限値があります')
        row_times = np.asarray(self.row_times, dtype=np.float64)
        col_times = np.asarray(self.col_times, dtype=np.float64)
        if row_times.shape != (values.shape[0],) or col_times.shape != (values.shape[1],):
            raise ShapeError('コスト行列と時刻列の長さが一致しません')
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'row_times', row_times)
        object.__setattr__(self, 'col_times', col_times)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> 'CostMatrix':
        return CostMatrix(values, self.row_times, self.col_times, self.metric)


@dataclass(frozen=True, eq=False)
class AlignmentPath:
    """(0,0) から (n-1,m-1) への単調な整列パス"""
    cells: Tuple[Tuple[int, int], ...]
    cell_costs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'cells', tuple((int(i), int(j)) for i, j in self.cells))
        object.__setattr__(self, 'cell_costs', np.asarray(self.cell_costs, dtype=np.float64))
        if len(self.cells) != len(self.cell_costs):
            raise ShapeError('パスのセル数とコスト数が一致しません')

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def total_cost(self) -> float:
        return float(self.cell_costs.sum())

    @property
    def mean_cost(self) -> float:
        return float(self.cell_costs.mean())

    def validate(self, n: int, m: int):
        """境界条件とステップ集合 {(1,0),(0,1),(1,1)} を確認"""
        if not self.cells or self.cells[0] != (0, 0) or self.cells[-1] != (n - 1, m - 1):
            raise DataError('パスの始点・終点が不正です')
        for (i0, j0), (i1, j1) in zip(self.cells, self.cells[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                raise DataError(f'不正なステップです: {(i0, j0)} -> {(i1, j1)}')


@dataclass(frozen=True)
class KeyposeLabels:
    """キーポーズ（ラベル, 時刻秒）のリスト"""
    entries: Tuple[Tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(label), float(t)) for label, t in self.entries)
        for label, t in entries:
            if not label:
                raise FormatError('キーポーズのラベルが空です')
            if not math.isfinite(t):
                raise FormatError(f'キーポーズ {label} の時刻が不正です')
        object.__setattr__(self, 'entries', entries)

    @property
    def labels(self) -> List[str]:
        return [label for label, _ in self.entries]

    @property
    def times(self) -> np.ndarray:
        return np.array([t for _, t in self.entries], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class AlignOptions:
    """ペア整列のオプション"""
    flip_lr: bool = False
    ltw_gamma: Optional[float] = None
    ltw_auto: bool = False
    metric: str = 'cosine'
    stride_seconds: Optional[float] = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise DataError(f'未知の距離関数です: {self.metric}（{", ".join(METRICS)}）')
        if self.ltw_gamma is not None and self.ltw_gamma < 0:
            raise DataError('ltw_gamma は0以上にしてください')
        if self.stride_seconds is not None and not self.stride_seconds > 0:
            raise DataError('stride_seconds は正の値にしてください')


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    """align_pair の結果"""
    path: AlignmentPath
    mean_cost: float
    flipped: bool
    cost: CostMatrix
    ltw_gamma: float = 0.0

    def summary(self) -> dict:
        n, m = self.cost.shape
        return {
            'mean_cost': self.mean_cost,
            'flipped': self.flipped,
            'n': n,
            'm': m,
            'path_length': len(self.path),
            'metric': self.cost.metric,
            'ltw_gamma': self.ltw_gamma,
        }


# ====== 埋め込み ======

def embed_sequence(
    params: EncoderParams,
    seq: PoseSequence,
    spec: WindowSpec,
    stride_seconds: Optional[float] = None
) -> EmbeddedSequence:
    """等間隔の正規化窓をすべて埋め込む"""
    check_layout(params, seq.layout.n_points, seq.layout.name)
    if params.config.n_frames != spec.n_frames:
        raise ShapeError(
            f'モデルと窓設定のフレーム数が一致しません（モデル: {params.config.n_frames}, 窓: {spec.n_frames}）'
        )
    if stride_seconds is not None:
        spec = WindowSpec(spec.length_seconds, spec.sample_rate, stride_seconds)
    centers = window_centers(seq, spec)
    windows = [normalize_window(extract_window(seq, t, spec), seq.layout) for t in centers]
    return EmbeddedSequence(seq.name, embed_windows(params, windows), centers)


def _unit_rows(vectors: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormError(f'{name}: ノルム0の埋め込みがあります（index={int(zero[0])}）')
    return vectors / norms[:, None]


# ====== コスト行列・DTW ======

def cost_matrix(emb_a: EmbeddedSequence, emb_b: EmbeddedSequence, metric: str = 'cosine') -> CostMatrix:
    """
    ペアワイズコスト行列
    cosine: 1 - C(a_i, b_j)（値域 [0, 2]）、euclidean: ||a_i - b_j||
    """
    if len(emb_a) == 0 or len(emb_b) == 0:
        raise DataError('埋め込みが空です')
    if metric == 'cosine':
        a = _unit_rows(emb_a.vectors, emb_a.name or 'A')
        b = _unit_rows(emb_b.vectors, emb_b.name or 'B')
        values = np.clip(1.0 - a @ b.T, 0.0, 2.0)
    elif metric == 'euclidean':
        diff = emb_a.vectors[:, None, :] - emb_b.vectors[None, :, :]
        values = np.sqrt(np.sum(diff * diff, axis=2))
    else:
        raise DataError(f'未知の距離関数です: {metric}')
    return CostMatrix(values, emb_a.times, emb_b.times, metric)


def dtw(cost: CostMatrix) -> AlignmentPath:
    """
    動的時間伸縮法
    ステップ {(1,1), (1,0), (0,1)}、重みなし。訪問セルのコスト和を最小化する
    """
    values = cost.values
    n, m = values.shape
    c = values.tolist()
    acc = [[0.0] * m for _ in range(n)]
    back = [[_DIAG] * m for _ in range(n)]

    acc[0][0] = c[0][0]
    for j in range(1, m):
        acc[0][j] = acc[0][j - 1] + c[0][j]
        back[0][j] = _COL
    for i in range(1, n):
        acc[i][0] = acc[i - 1][0] + c[i][0]
        back[i][0] = _ROW

    for i in range(1, n):
        prev = acc[i - 1]
        row = acc[i]
        row_back = back[i]
        row_cost = c[i]
        for j in range(1, m):
            diag = prev[j - 1]
            up = prev[j]
            left = row[j - 1]
            if diag <= up and diag <= left:
                best, move = diag, _DIAG
            elif up <= left:
                best, move = up, _ROW
            else:
                best, move = left, _COL
            row[j] = best + row_cost[j]
            row_back[j] = move

    cells = []
    i, j = n - 1, m - 1
    while True:
        cells.append((i, j))
        if i == 0 and j == 0:
            break
        move = back[i][j]
        if move == _DIAG:
            i, j = i - 1, j - 1
        elif move == _ROW:
            i -= 1
        else:
            j -= 1
    cells.reverse()
    cell_costs = values[tuple(np.array(cells).T)]
    return AlignmentPath(tuple(cells), cell_costs)


def default_ltw_gamma(cost: CostMatrix) -> float:
    """LTW事前分布の既定の強さ（コスト平均の半分）"""
    return 0.5 * float(cost.values.mean())


def ltw_penalized(cost: CostMatrix, gamma: float) -> CostMatrix:
    """
    対角線からのずれに比例するペナルティを加算
    values'[i][j] = values[i][j] + gamma * |i/(n-1) - j/(m-1)|
    """
    if gamma < 0:
        raise DataError('gamma は0以上にしてください')
    n, m = cost.shape
    rows = np.arange(n) / (n - 1) if n > 1 else np.zeros(1)
    cols = np.arange(m) / (m - 1) if m > 1 else np.zeros(1)
    penalty = gamma * np.abs(rows[:, None] - cols[None, :])
    return cost.with_values(cost.values + penalty)


def align_embedded(
    emb_a: EmbeddedSequence,
    emb_b: EmbeddedSequence,
    options: AlignOptions = AlignOptions(),
    flipped: bool = False
) -> AlignmentResult:
    """
    埋め込み済み系列同士の整列
    パスはLTWペナルティ込みの行列で求め、セルコストは元の距離で記録する
    """
    cost = cost_matrix(emb_a, emb_b, options.metric)
    gamma = 0.0
    if options.ltw_gamma is not None:
        gamma = float(options.ltw_gamma)
    elif options.ltw_auto:
        gamma = default_ltw_gamma(cost)

    search = ltw_penalized(cost, gamma) if gamma > 0 else cost
    path = dtw(search)
    if gamma > 0:
        path = AlignmentPath(path.cells, cost.values[tuple(np.array(path.cells).T)])
    return AlignmentResult(path=path, mean_cost=path.mean_cost, flipped=flipped, cost=cost, ltw_gamma=gamma)


def align_pair(
    params: EncoderParams,
    seq_a: PoseSequence,
    seq_b: PoseSequence,
    spec: WindowSpec,
    options: AlignOptions = AlignOptions()
) -> AlignmentResult:
    """
    2つの演技を整列
    flip_lr 指定時は左右反転したBとも整列し、パス上の平均コストが低い方を採用する
    """
    emb_a = embed_sequence(params, seq_a, spec, options.stride_seconds)
    emb_b = embed_sequence(params, seq_b, spec, options.stride_seconds)
    result = align_embedded(emb_a, emb_b, options)

    if options.flip_lr:
        emb_flip = embed_sequence(params, mirror_lr(seq_b), spec, options.stride_seconds)
        flipped = align_embedded(emb_a, emb_flip, options, flipped=True)
        logger.debug('反転比較 %s vs %s: 通常=%.6f 反転=%.6f',
                     seq_a.name, seq_b.name, result.mean_cost, flipped.mean_cost)
        if flipped.mean_cost < result.mean_cost:
            result = flipped

    logger.info('整列 %s vs %s: mean_cost=%.6f flipped=%s path=%d',
                seq_a.name, seq_b.name, result.mean_cost, result.flipped, len(result.path))
    return result


# ====== キーポーズ転写 ======

def transfer_keyposes(
    path: AlignmentPath,
    labels: KeyposeLabels,
    row_times: Sequence[float],
    col_times: Sequence[float]
) -> KeyposeLabels:
    """
    参照系列（行）のキーポーズ時刻を対象系列（列）へ転写
    最も近い行に対応するパス上の列範囲の中点を転写先の時刻とする
    """
    row_times = np.asarray(row_times, dtype=np.float64)
    col_times = np.asarray(col_times, dtype=np.float64)
    lo, hi = float(row_times[0]), float(row_times[-1])

    cols_by_row = {}
    for i, j in path.cells:
        cols_by_row.setdefault(i, []).append(j)

    out = []
    for label, t in labels.entries:
        if t < lo - 1e-9 or t > hi + 1e-9:
            raise DataError(f'キーポーズ {label} の時刻 {t:.3f}秒 が参照系列の範囲（{lo:.3f}〜{hi:.3f}秒）外です')
        row = int(np.argmin(np.abs(row_times - t)))
        cols = cols_by_row[row]
        out.append((label, 0.5 * (col_times[min(cols)] + col_times[max(cols)])))
    return KeyposeLabels(tuple(out))


def linear_transfer(
    labels: KeyposeLabels,
    ref_start: float,
    ref_end: float,
    target_start: float,
    target_end: float
) -> KeyposeLabels:
    """開始・終了時刻を結ぶ直線での転写（古典的な線形時間伸縮の比較用）"""
    if not ref_end > ref_start:
        raise DataError('参照の終了時刻は開始時刻より後にしてください')
    scale = (target_end - target_start) / (ref_end - ref_start)
    return KeyposeLabels(tuple(
        (label, target_start + (t - ref_start) * scale) for label, t in labels.entries
    ))


def load_keyposes(path: Path) -> KeyposeLabels:
    """キーポーズCSV（label,time_seconds）を読み込み"""
    path = Path(path)
    entries = []
    reader = csv.reader(io.StringIO(read_text(path, 'キーポーズCSV'), newline=''))
    for line_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if line_no == 1 and row[0].strip() == 'label':
            continue
        if len(row) < 2:
            raise FormatError(f'{path}:{line_no}: label,time_seconds の2列が必要です')
        try:
            entries.append((row[0].strip(), float(row[1])))
        except ValueError:
            raise FormatError(f'{path}:{line_no}: 時刻が数値ではありません: {row[1]!r}') from None
    return KeyposeLabels(tuple(entries))
