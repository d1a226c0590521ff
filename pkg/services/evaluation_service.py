"""
評価サービス
Kendall's Tau、キーポーズ転写精度、参照系列に対する全系列の整列コスト、損失関数の比較
"""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .alignment_service import (
    AlignOptions, EmbeddedSequence, KeyposeLabels, align_embedded, embed_sequence
)
from .encoder_service import EncoderConfig, EncoderParams, init
from .errors import DataError, ZeroNormError
from .normalize_service import WindowSpec
from .pose_io_service import PoseSequence, mirror_lr
from .training_service import LossConfig, TrainConfig, harvest_pairs, train_phase1, train_phase2

logger = logging.getLogger(__name__)

Embeddings = Union[EmbeddedSequence, np.ndarray]


@dataclass(frozen=True)
class TauReport:
    """系列ペアごとのTauと平均"""
    per_pair: Tuple[Tuple[str, str, float], ...]
    metric: str = 'cosine'
    symmetric: bool = True
    per_action: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_tau(self) -> float:
        if not self.per_pair:
            return float('nan')
        return float(np.mean([tau for _, _, tau in self.per_pair]))

    @property
    def action_mean_tau(self) -> float:
        """アクションごとの平均の平均（アクション情報がなければ mean_tau）"""
        if not self.per_action:
            return self.mean_tau
        return float(np.mean(list(self.per_action.values())))

    def summary(self) -> dict:
        return {
            'mean_tau': self.mean_tau,
            'action_mean_tau': self.action_mean_tau,
            'n_pairs': len(self.per_pair),
            'metric': self.metric,
            'symmetric': self.symmetric,
            'per_action': dict(sorted(self.per_action.items())),
        }


@dataclass(frozen=True)
class AccuracyCurve:
    """閾値ごとの、誤差が閾値以内のキーポーズの割合"""
    thresholds: Tuple[float, ...]
    fractions: Tuple[float, ...]

    def __post_init__(self):
        thresholds = tuple(float(t) for t in self.thresholds)
        fractions = tuple(float(f) for f in self.fractions)
        if len(thresholds) != len(fractions):
            raise DataError('閾値と割合の数が一致しません')
        if any(not 0.0 <= f <= 1.0 for f in fractions):
            raise DataError('割合は0〜1の範囲にしてください')
        order = np.argsort(thresholds, kind='stable')
        if any(fractions[a] > fractions[b] for a, b in zip(order, order[1:])):
            raise DataError('精度曲線が閾値に対して単調ではありません')
        object.__setattr__(self, 'thresholds', thresholds)
        object.__setattr__(self, 'fractions', fractions)

    def rows(self) -> List[Tuple[float, float]]:
        return list(zip(self.thresholds, self.fractions))


# (summary のキー, 属性名)
COMPARISON_SETUPS = (
    ('hadsell_margin/euclidean', 'hadsell_euclidean'),
    ('cosine_contrastive/euclidean', 'cosine_euclidean'),
    ('cosine_contrastive/cosine/phase1', 'phase1_cosine'),
    ('cosine_contrastive/cosine/phase2', 'phase2_cosine'),
)


@dataclass(frozen=True)
class LossComparison:
    """
    損失関数と距離関数の組み合わせ4通りのTau
    Hadsell損失 + ユークリッド距離、コサイン損失 + ユークリッド距離、
    コサイン損失（Phase 1 / Phase 2）+ コサイン距離
    """
    hadsell_euclidean: TauReport
    cosine_euclidean: TauReport
    phase1_cosine: TauReport
    phase2_cosine: TauReport

    def summary(self) -> dict:
        return {name: getattr(self, attr).mean_tau for name, attr in COMPARISON_SETUPS}


# ====== Kendall's Tau ======

def rank_tau(assignments: Sequence[int]) -> float:
    """
    対応先インデックス列の順序保存度
    i<j の全ペアで v(i)<v(j) を一致、それ以外（同値含む）を不一致として
    (一致 - 不一致) / nC2
    """
    v = np.asarray(assignments)
    n = v.shape[0]
    if n < 2:
        raise DataError(f'Tauには2フレーム以上必要です（{n}フレーム）')
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    concordant = int(np.sum((v[None, :] > v[:, None]) & upper))
    total = n * (n - 1) // 2
    return (concordant - (total - concordant)) / total


def _vectors(emb: Embeddings) -> np.ndarray:
    if isinstance(emb, EmbeddedSequence):
        return emb.vectors
    return np.asarray(emb, dtype=np.float64)


def nearest_neighbours(emb_a: Embeddings, emb_b: Embeddings, metric: str = 'cosine') -> np.ndarray:
    """Aの各埋め込みに最も近いBのインデックス（同点は小さいインデックス）"""
    a, b = _vectors(emb_a), _vectors(emb_b)
    if metric == 'cosine':
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise ZeroNormError('ノルム0の埋め込みがあります')
        return np.argmax((a / na[:, None]) @ (b / nb[:, None]).T, axis=1)
    if metric == 'euclidean':
        diff = a[:, None, :] - b[None, :, :]
        return np.argmin(np.sum(diff * diff, axis=2), axis=1)
    raise DataError(f'未知の距離関数です: {metric}')


def kendalls_tau(emb_a: Embeddings, emb_b: Embeddings, metric: str = 'cosine', symmetric: bool = True) -> float:
    """
    最近傍対応のKendall's Tau
    symmetric=True では A→B と B→A の平均
    """
    a, b = _vectors(emb_a), _vectors(emb_b)
    if a.shape[0] < 2 or (symmetric and b.shape[0] < 2):
        raise DataError('Tauには2フレーム以上必要です')
    tau = rank_tau(nearest_neighbours(a, b, metric))
    if not symmetric:
        return tau
    return 0.5 * (tau + rank_tau(nearest_neighbours(b, a, metric)))


def _embed_all(params: EncoderParams, sequences: Sequence[PoseSequence], spec: WindowSpec,
               threads: int = 1) -> List[EmbeddedSequence]:
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        futures = {executor.submit(embed_sequence, params, seq, spec): idx for idx, seq in enumerate(sequences)}
        embedded = {}
        for future in as_completed(futures):
            embedded[futures[future]] = future.result()
    return [embedded[k] for k in range(len(sequences))]


def corpus_tau(
    params: EncoderParams,
    sequences: Sequence[PoseSequence],
    spec: WindowSpec,
    actions: Optional[Sequence[Optional[str]]] = None,
    metric: str = 'cosine',
    symmetric: bool = True,
    threads: int = 1
) -> TauReport:
    """
    コーパス内の全系列ペアのTau
    actions を渡した場合は同じアクション同士のペアのみを評価し、アクションごとの平均も出す
    """
    if len(sequences) < 2:
        raise DataError(f'Tau評価には2系列以上必要です（{len(sequences)}系列）')
    if actions is not None and len(actions) != len(sequences):
        raise DataError('actions の数が系列数と一致しません')
    embedded = _embed_all(params, sequences, spec, threads)

    per_pair = []
    by_action: Dict[str, List[float]] = {}
    for i, j in itertools.combinations(range(len(sequences)), 2):
        action = None
        if actions is not None:
            if actions[i] != actions[j]:
                continue
            action = actions[i]
        tau = kendalls_tau(embedded[i], embedded[j], metric, symmetric)
        per_pair.append((sequences[i].name, sequences[j].name, tau))
        if action is not None:
            by_action.setdefault(action, []).append(tau)

    if not per_pair:
        raise DataError('評価できる系列ペアがありません（同じアクションの系列が2つ以上必要です）')
    report = TauReport(
        per_pair=tuple(per_pair),
        metric=metric,
        symmetric=symmetric,
        per_action={k: float(np.mean(v)) for k, v in by_action.items()},
    )
    logger.info('Tau: %d ペア mean=%.6f (metric=%s)', len(per_pair), report.mean_tau, metric)
    return report


# ====== キーポーズ精度 ======

def keypose_accuracy(
    predicted: KeyposeLabels,
    ground_truth: KeyposeLabels,
    thresholds: Sequence[float]
) -> AccuracyCurve:
    """閾値ごとに |t_pred - t_gt| <= 閾値 となるラベルの割合"""
    if predicted.labels != ground_truth.labels:
        raise DataError(
            f'予測と正解のラベルが一致しません（予測: {len(predicted)}件, 正解: {len(ground_truth)}件）'
        )
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        return AccuracyCurve((), ())
    if len(ground_truth) == 0:
        raise DataError('キーポーズがありません')
    errors = np.abs(predicted.times - ground_truth.times)
    fractions = [float(np.mean(errors <= t)) for t in thresholds]
    return AccuracyCurve(tuple(thresholds), tuple(fractions))


# ====== 全系列の整列コスト ======

def all_pairs_cost(
    params: EncoderParams,
    sequences: Sequence[PoseSequence],
    reference_index: int,
    spec: WindowSpec,
    options: AlignOptions = AlignOptions(),
    threads: int = 1
) -> List[Tuple[str, float]]:
    """
    参照系列と全系列（参照自身を含む）の平均整列コスト
    参照自身を先頭に、残りはコスト昇順（同値は名前順）
    """
    if not 0 <= reference_index < len(sequences):
        raise DataError(f'参照インデックスが範囲外です: {reference_index}（{len(sequences)}系列）')
    if options.stride_seconds is not None:
        spec = WindowSpec(spec.length_seconds, spec.sample_rate, options.stride_seconds)

    embedded = _embed_all(params, sequences, spec, threads)
    flipped = _embed_all(params, [mirror_lr(s) for s in sequences], spec, threads) if options.flip_lr else None
    reference = embedded[reference_index]

    def score(idx: int) -> float:
        result = align_embedded(reference, embedded[idx], options)
        if flipped is not None:
            mirrored = align_embedded(reference, flipped[idx], options, flipped=True)
            if mirrored.mean_cost < result.mean_cost:
                result = mirrored
        return result.mean_cost

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        futures = {executor.submit(score, idx): idx for idx in range(len(sequences))}
        costs = {}
        for future in as_completed(futures):
            costs[futures[future]] = future.result()

    ref_name = sequences[reference_index].name
    others = sorted(
        ((sequences[k].name, costs[k]) for k in range(len(sequences)) if k != reference_index),
        key=lambda item: (item[1], item[0])
    )
    logger.info('全系列コスト: 参照=%s, %d 系列', ref_name, len(sequences))
    return [(ref_name, costs[reference_index])] + others


# ====== 損失関数の比較 ======

def compare_losses(
    train_sequences: Sequence[PoseSequence],
    eval_sequences: Sequence[PoseSequence],
    spec: WindowSpec,
    encoder_config: EncoderConfig,
    train_config: TrainConfig = TrainConfig(),
    margin: Optional[float] = None,
    threads: int = 1
) -> LossComparison:
    """
    同じ初期値・乱数・エポック数で学習し、4通りの組み合わせでTauを比較

    - Hadsell損失で Phase 1 学習、ユークリッド距離で整列
    - コサイン損失で Phase 1 学習、ユークリッド距離で整列
    - コサイン損失で Phase 1 学習、コサイン距離で整列
    - さらに収穫ペアで Phase 2 学習、コサイン距離で整列

    Args:
        train_sequences: 学習系列（Phase 2 の収穫にも使う）
        eval_sequences: 評価系列（学習に使っていない演技）
        margin: Hadsell損失のマージン（省略時は既定値）
    """
    initial = init(encoder_config)
    hadsell = LossConfig('hadsell_margin') if margin is None else LossConfig('hadsell_margin', margin)
    cosine = LossConfig('cosine_contrastive')

    def evaluate(params: EncoderParams, metric: str, setup: str) -> TauReport:
        report = corpus_tau(params, eval_sequences, spec, metric=metric, threads=threads)
        logger.info('損失比較 %s: mean_tau=%.6f', setup, report.mean_tau)
        return report

    hadsell_params = train_phase1(initial, train_sequences, spec, train_config, hadsell).params
    phase1_params = train_phase1(initial, train_sequences, spec, train_config, cosine).params
    harvest = harvest_pairs(phase1_params, train_sequences, spec, metric=cosine.metric,
                            threads=threads, max_pairs=train_config.max_pairs)
    phase2_params = train_phase2(phase1_params, train_sequences, harvest.pairs, spec, train_config, cosine).params

    return LossComparison(
        hadsell_euclidean=evaluate(hadsell_params, 'euclidean', 'hadsell_margin/euclidean'),
        cosine_euclidean=evaluate(phase1_params, 'euclidean', 'cosine_contrastive/euclidean'),
        phase1_cosine=evaluate(phase1_params, 'cosine', 'cosine_contrastive/cosine/phase1'),
        phase2_cosine=evaluate(phase2_params, 'cosine', 'cosine_contrastive/cosine/phase2'),
    )
