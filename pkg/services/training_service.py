"""
学習サービス
コサイン対照損失（λ = 1/(N-1)）とHadsellマージン損失、モメンタム付きSGD、
拡張ペアによるPhase 1学習、DTWで収穫したペアを加えるPhase 2学習
"""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import (
    BATCH_SIZE, EPOCHS_PHASE1, EPOCHS_PHASE2, HADSELL_GRAD_CLIP, HADSELL_MARGIN, LEARNING_RATE, MOMENTUM
)
from .alignment_service import EmbeddedSequence, cost_matrix, dtw, embed_sequence
from .encoder_service import EncoderParams, backward_batch, forward_batch
from .errors import ConfigError, DataError, ShapeError, ZeroNormError
from .normalize_service import (
    Window, WindowSpec, augment, extract_window, normalize_window, window_centers
)
from .pose_io_service import PoseSequence

logger = logging.getLogger(__name__)

PAIR_ORIGINS = ('augmented', 'harvested')
LOSS_KINDS = ('cosine_contrastive', 'hadsell_margin')


@dataclass(frozen=True, eq=False)
class TrainingPair:
    """正例ペア（どちらも未正規化の窓）"""
    a: Window
    b: Window
    origin: str = 'augmented'
    cost: float = 0.0

    def __post_init__(self):
        if self.origin not in PAIR_ORIGINS:
            raise DataError(f'未知のペア種別です: {self.origin}')
        if self.a.layout_name != self.b.layout_name or self.a.data.shape != self.b.data.shape:
            raise ShapeError(
                f'ペアの窓形状が一致しません（{self.a.layout_name} {self.a.data.shape}, '
                f'{self.b.layout_name} {self.b.data.shape}）'
            )


@dataclass(frozen=True)
class LossConfig:
    """損失関数の設定"""
    kind: str = 'cosine_contrastive'
    margin: float = HADSELL_MARGIN

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f'未知の損失関数です: {self.kind}（{", ".join(LOSS_KINDS)}）')
        if not self.margin > 0:
            raise ConfigError(f'margin は正の値にしてください: {self.margin}')

    @property
    def metric(self) -> str:
        """この損失で学習した埋め込みに対応する距離関数"""
        return 'cosine' if self.kind == 'cosine_contrastive' else 'euclidean'


@dataclass(frozen=True)
class TrainConfig:
    """SGD・エポック数などの学習設定"""
    batch_size: int = BATCH_SIZE
    lr: float = LEARNING_RATE
    momentum: float = MOMENTUM
    epochs_phase1: int = EPOCHS_PHASE1
    epochs_phase2: int = EPOCHS_PHASE2
    seed: int = 0
    two_augmented: bool = False
    max_pairs: Optional[int] = None
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f'batch_size は2以上にしてください: {self.batch_size}')
        if not self.lr > 0:
            raise ConfigError(f'lr は正の値にしてください: {self.lr}')
        if not 0 <= self.momentum < 1:
            raise ConfigError(f'momentum は0以上1未満にしてください: {self.momentum}')
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigError('エポック数は0以上にしてください')
        if self.max_pairs is not None and self.max_pairs < 1:
            raise ConfigError(f'max_pairs は1以上にしてください: {self.max_pairs}')
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f'grad_clip は正の値にしてください: {self.grad_clip}')

    def clip_for(self, loss_config: 'LossConfig') -> Optional[float]:
        """実際に使う勾配ノルムの上限（Hadsell損失は未指定でも打ち切る）"""
        if self.grad_clip is not None:
            return self.grad_clip
        return HADSELL_GRAD_CLIP if loss_config.kind == 'hadsell_margin' else None


@dataclass(eq=False)
class TrainingResult:
    """学習後のパラメータとエポックごとの平均損失"""
    params: EncoderParams
    loss_history: List[Tuple[int, float]] = field(default_factory=list)
    phase: int = 1

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1][1] if self.loss_history else float('nan')


@dataclass(frozen=True)
class HarvestRow:
    """収穫ペア1件のダンプ行"""
    seq_a: str
    t_a: float
    seq_b: str
    t_b: float
    cost: float


@dataclass(eq=False)
class HarvestResult:
    pairs: List[TrainingPair]
    rows: List[HarvestRow]
    n_alignments: int = 0

    def __len__(self) -> int:
        return len(self.pairs)


# ====== 損失関数 ======

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """C(a, b) = a·b / (|a||b|)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNormError('ノルム0のベクトルのコサイン類似度は定義できません')
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _check_pair_matrices(A: np.ndarray, B: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape != B.shape:
        raise ShapeError(f'埋め込み行列の形状が不正です（A: {A.shape}, B: {B.shape}）')
    if A.shape[1] < 2:
        raise DataError(f'バッチには2列以上必要です: N={A.shape[1]}')
    return A, B


def _column_norms(M: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(M, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroNormError(f'{name} の列 {int(zero[0])} のノルムが0です')
    return norms


def batch_loss(A: np.ndarray, B: np.ndarray, lam: Optional[float] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    コサイン対照損失
    L = Σ_i (C(a_i,b_i) - 1)² + λ Σ_i Σ_{j≠i} C(a_i,b_j)²

    Args:
        A, B: D × N（列が埋め込み、同じ列番号が正例ペア）
        lam: 省略時 1/(N-1)

    Returns:
        (損失, dL/dA, dL/dB)
    """
    A, B = _check_pair_matrices(A, B)
    n = A.shape[1]
    lam = 1.0 / (n - 1) if lam is None else float(lam)

    norm_a = _column_norms(A, 'A')
    norm_b = _column_norms(B, 'B')
    a_hat = A / norm_a
    b_hat = B / norm_b
    sim = a_hat.T @ b_hat

    diag = np.diagonal(sim)
    off = sim - np.diag(diag)
    loss = float(np.sum((diag - 1.0) ** 2) + lam * np.sum(off ** 2))

    g = 2.0 * lam * off + np.diag(2.0 * (diag - 1.0))
    d_a_hat = b_hat @ g.T
    d_b_hat = a_hat @ g

    # 列正規化の逆伝播
    dA = (d_a_hat - a_hat * np.sum(a_hat * d_a_hat, axis=0)) / norm_a
    dB = (d_b_hat - b_hat * np.sum(b_hat * d_b_hat, axis=0)) / norm_b
    return loss, dA, dB


def hadsell_loss(
    A: np.ndarray,
    B: np.ndarray,
    margin: float = HADSELL_MARGIN,
    lam: Optional[float] = None
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Hadsell型マージン損失（比較実験用）
    L = (1/N) [Σ_i |a_i - b_i|² + λ Σ_{i≠j} max(0, margin - |a_i - b_j|)²]
    負例はバッチ内の非対角ペア、重み λ は batch_loss と同じ
    損失と勾配はペア数 N で平均する
    """
    A, B = _check_pair_matrices(A, B)
    if not margin > 0:
        raise ConfigError(f'margin は正の値にしてください: {margin}')
    n = A.shape[1]
    lam = 1.0 / (n - 1) if lam is None else float(lam)

    pos = A - B
    diff = A[:, :, None] - B[:, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=0))
    off_mask = ~np.eye(n, dtype=bool)
    hinge = np.where(off_mask, np.maximum(0.0, margin - dist), 0.0)
    loss = float(np.sum(pos * pos) + lam * np.sum(hinge ** 2)) / n

    # 距離0では劣勾配0を採用
    safe = np.where(dist > 0, dist, 1.0)
    k = np.where((hinge > 0) & (dist > 0), -2.0 * lam * hinge / safe, 0.0)
    dA = 2.0 * pos + A * k.sum(axis=1) - B @ k.T
    dB = -2.0 * pos + B * k.sum(axis=0) - A @ k
    return loss, dA / n, dB / n


def compute_loss(loss_config: LossConfig, A: np.ndarray, B: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    if loss_config.kind == 'cosine_contrastive':
        return batch_loss(A, B)
    return hadsell_loss(A, B, loss_config.margin)


# ====== 最適化 ======

class SgdMomentum:
    """
    モメンタム付きSGD
    v ← m·v - lr·g, p ← p + v
    grad_clip を指定すると、全テンソルを合わせた勾配ノルムがこれを超えるとき g を縮める
    """

    def __init__(self, lr: float = LEARNING_RATE, momentum: float = MOMENTUM, grad_clip: Optional[float] = None):
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity: Dict[str, np.ndarray] = {}

    def _clip_scale(self, grads: Dict[str, np.ndarray]) -> float:
        if self.grad_clip is None:
            return 1.0
        total = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
        if not np.isfinite(total):
            raise DataError('勾配が非有限になりました')
        if total <= self.grad_clip:
            return 1.0
        return self.grad_clip / total

    def step(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        scale = self._clip_scale(grads)
        for name in sorted(grads):
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(tensors[name])
            v = self.momentum * v - self.lr * scale * grads[name]
            self.velocity[name] = v
            tensors[name] = tensors[name] + v


def train_step(
    params: EncoderParams,
    optimizer: SgdMomentum,
    batch_a: np.ndarray,
    batch_b: np.ndarray,
    loss_config: LossConfig
) -> float:
    """
    1ミニバッチの更新
    A側・B側を連結した 2B 窓を1回の順伝播で処理する
    """
    size = batch_a.shape[0]
    out, cache = forward_batch(params, np.concatenate([batch_a, batch_b], axis=0))
    loss, dA, dB = compute_loss(loss_config, out[:size].T, out[size:].T)
    grads, _ = backward_batch(params, cache, np.concatenate([dA.T, dB.T], axis=0))
    optimizer.step(params.tensors, grads)
    return loss


# ====== Phase 1 ======

def _window_samples(sequences: Sequence[PoseSequence], spec: WindowSpec) -> List[Tuple[int, float]]:
    samples = []
    for idx, seq in enumerate(sequences):
        samples.extend((idx, float(t)) for t in window_centers(seq, spec))
    return samples


def _augmented_pair(seq: PoseSequence, t: float, spec: WindowSpec,
                    rng: np.random.Generator, two_augmented: bool) -> Tuple[np.ndarray, np.ndarray]:
    if two_augmented:
        a = augment(seq, t, spec, rng)
    else:
        a = extract_window(seq, t, spec)
    b = augment(seq, t, spec, rng)
    return normalize_window(a, seq.layout).data, normalize_window(b, seq.layout).data


def _batches(n_items: int, batch_size: int) -> List[Tuple[int, int]]:
    """バッチ範囲（最後の端数は2件以上なら残す）"""
    bounds = []
    for start in range(0, n_items, batch_size):
        stop = min(start + batch_size, n_items)
        if stop - start >= 2:
            bounds.append((start, stop))
    return bounds


def _check_sequences(params: EncoderParams, sequences: Sequence[PoseSequence]):
    if not sequences:
        raise DataError('学習用の系列がありません')
    layouts = {seq.layout.name for seq in sequences}
    if len(layouts) != 1:
        raise DataError(f'学習系列のレイアウトが混在しています: {sorted(layouts)}')
    if sequences[0].layout.n_points != params.config.n_points:
        raise ShapeError(
            f'モデルとレイアウトの点数が一致しません（モデル: {params.config.n_points}点, '
            f'レイアウト {sequences[0].layout.name}: {sequences[0].layout.n_points}点）'
        )


def train_phase1(
    params: EncoderParams,
    sequences: Sequence[PoseSequence],
    spec: WindowSpec,
    train_config: TrainConfig = TrainConfig(),
    loss_config: LossConfig = LossConfig()
) -> TrainingResult:
    """
    Phase 1: 元の窓と時間拡張した窓を正例ペアとして学習
    エポックごとに窓の順序をシャッフルし、拡張もその都度サンプリングし直す
    """
    _check_sequences(params, sequences)
    samples = _window_samples(sequences, spec)
    if len(samples) < train_config.batch_size:
        raise DataError(
            f'1バッチ分の窓がありません（窓数: {len(samples)}, batch_size: {train_config.batch_size}）'
        )

    params = params.copy()
    optimizer = SgdMomentum(train_config.lr, train_config.momentum, train_config.clip_for(loss_config))
    rng = np.random.default_rng([train_config.seed, 1])
    history = []

    for epoch in range(1, train_config.epochs_phase1 + 1):
        order = rng.permutation(len(samples))
        losses = []
        for start, stop in _batches(len(order), train_config.batch_size):
            pairs = [
                _augmented_pair(sequences[samples[k][0]], samples[k][1], spec, rng, train_config.two_augmented)
                for k in order[start:stop]
            ]
            batch_a = np.stack([a for a, _ in pairs])
            batch_b = np.stack([b for _, b in pairs])
            losses.append(train_step(params, optimizer, batch_a, batch_b, loss_config))
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise DataError(f'Phase 1 epoch {epoch}: 損失が非有限になりました')
        history.append((epoch, mean_loss))
        logger.info('phase=1 epoch=%d/%d mean_loss=%.6f batches=%d',
                    epoch, train_config.epochs_phase1, mean_loss, len(losses))

    return TrainingResult(params=params, loss_history=history, phase=1)


# ====== 収穫 ======

def _check_unique_names(sequences: Sequence[PoseSequence]):
    names = [seq.name for seq in sequences]
    duplicated = sorted({n for n in names if names.count(n) > 1})
    if duplicated:
        raise DataError(f'系列名が重複しています: {", ".join(duplicated)}')


def _subsample(items: list, limit: Optional[int]) -> list:
    """等間隔に間引いて limit 件以下にする（乱数を使わない）"""
    if limit is None or len(items) <= limit:
        return items
    keep = np.unique(np.linspace(0, len(items) - 1, limit).round().astype(int))
    return [items[k] for k in keep]


def harvest_pairs(
    params: EncoderParams,
    sequences: Sequence[PoseSequence],
    spec: WindowSpec,
    metric: str = 'cosine',
    threads: int = 1,
    max_pairs: Optional[int] = None
) -> HarvestResult:
    """
    全系列ペアをDTWで整列し、パス上の全セルを演技間の正例ペアとして収穫

    Args:
        threads: 埋め込み・整列の並列数（結果は系列ペア順に並べ直す）
        max_pairs: 収穫ペア数の上限（等間隔に間引く）
    """
    if len(sequences) < 2:
        raise DataError(f'収穫には2系列以上必要です（{len(sequences)}系列）')
    _check_sequences(params, sequences)
    _check_unique_names(sequences)
    workers = max(1, int(threads))

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(embed_sequence, params, seq, spec): idx for idx, seq in enumerate(sequences)}
        embedded: Dict[int, EmbeddedSequence] = {}
        for future in as_completed(futures):
            embedded[futures[future]] = future.result()

        def align(i: int, j: int):
            return dtw(cost_matrix(embedded[i], embedded[j], metric))

        combos = list(itertools.combinations(range(len(sequences)), 2))
        futures = {executor.submit(align, i, j): (i, j) for i, j in combos}
        paths = {}
        for future in as_completed(futures):
            paths[futures[future]] = future.result()

    seen = set()
    rows: List[HarvestRow] = []
    for i, j in combos:
        seq_a, seq_b = sequences[i], sequences[j]
        times_a, times_b = embedded[i].times, embedded[j].times
        path = paths[(i, j)]
        for (row, col), cost in zip(path.cells, path.cell_costs):
            key = (seq_a.name, float(times_a[row]), seq_b.name, float(times_b[col]))
            if key in seen:
                continue
            seen.add(key)
            rows.append(HarvestRow(key[0], key[1], key[2], key[3], float(cost)))
        logger.info('収穫 %s vs %s: %d セル mean_cost=%.6f', seq_a.name, seq_b.name, len(path), path.mean_cost)

    rows = _subsample(rows, max_pairs)
    by_name = {seq.name: seq for seq in sequences}
    pairs = [
        TrainingPair(
            a=extract_window(by_name[r.seq_a], r.t_a, spec),
            b=extract_window(by_name[r.seq_b], r.t_b, spec),
            origin='harvested',
            cost=r.cost,
        )
        for r in rows
    ]
    logger.info('収穫完了: %d 整列, %d ペア', len(combos), len(pairs))
    return HarvestResult(pairs=pairs, rows=rows, n_alignments=len(combos))


# ====== Phase 2 ======

def train_phase2(
    params: EncoderParams,
    sequences: Sequence[PoseSequence],
    harvested: Sequence[TrainingPair],
    spec: WindowSpec,
    train_config: TrainConfig = TrainConfig(),
    loss_config: LossConfig = LossConfig()
) -> TrainingResult:
    """
    Phase 2: 拡張ペアと収穫ペアを一様にシャッフルして混ぜ、Phase 1のパラメータから学習を続ける
    """
    if not harvested:
        raise DataError('収穫ペアがありません（Phase 2 には収穫が必要です）')
    _check_sequences(params, sequences)
    layouts = {seq.layout.name: seq.layout for seq in sequences}
    for pair in harvested:
        if pair.a.layout_name not in layouts:
            raise DataError(f'収穫ペアのレイアウト {pair.a.layout_name} が学習系列にありません')

    samples = _window_samples(sequences, spec)
    items = [('augmented', k) for k in range(len(samples))] + [('harvested', k) for k in range(len(harvested))]
    if len(items) < train_config.batch_size:
        raise DataError(
            f'1バッチ分のペアがありません（ペア数: {len(items)}, batch_size: {train_config.batch_size}）'
        )

    params = params.copy()
    optimizer = SgdMomentum(train_config.lr, train_config.momentum, train_config.clip_for(loss_config))
    rng = np.random.default_rng([train_config.seed, 2])
    history = []

    for epoch in range(1, train_config.epochs_phase2 + 1):
        order = rng.permutation(len(items))
        losses = []
        for start, stop in _batches(len(order), train_config.batch_size):
            batch_a, batch_b = [], []
            for k in order[start:stop]:
                origin, index = items[k]
                if origin == 'augmented':
                    seq_idx, t = samples[index]
                    a, b = _augmented_pair(sequences[seq_idx], t, spec, rng, train_config.two_augmented)
                else:
                    pair = harvested[index]
                    layout = layouts[pair.a.layout_name]
                    a = normalize_window(pair.a, layout).data
                    b = normalize_window(pair.b, layout).data
                batch_a.append(a)
                batch_b.append(b)
            losses.append(train_step(params, optimizer, np.stack(batch_a), np.stack(batch_b), loss_config))
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise DataError(f'Phase 2 epoch {epoch}: 損失が非有限になりました')
        history.append((epoch, mean_loss))
        logger.info('phase=2 epoch=%d/%d mean_loss=%.6f batches=%d',
                    epoch, train_config.epochs_phase2, mean_loss, len(losses))

    return TrainingResult(params=params, loss_history=history, phase=2)
