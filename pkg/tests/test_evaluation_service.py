import itertools

import numpy as np
import pytest

from services.alignment_service import AlignOptions, KeyposeLabels
from services.encoder_service import EncoderConfig
from services.errors import DataError
from services.evaluation_service import (
    AccuracyCurve, TauReport, all_pairs_cost, compare_losses, corpus_tau, kendalls_tau,
    keypose_accuracy, nearest_neighbours, rank_tau
)
from services.pose_io_service import PoseSequence
from services.synthetic_service import toy_layout, truncated_copy
from services.training_service import TrainConfig


def pair_count_tau(v):
    """i<j の全ペアを数え上げるTau（同値は不一致）"""
    concordant = discordant = 0
    for i, j in itertools.combinations(range(len(v)), 2):
        if v[i] < v[j]:
            concordant += 1
        else:
            discordant += 1
    return (concordant - discordant) / (concordant + discordant)


def distinct_directions(n, dim=6, seed=0):
    return np.random.default_rng(seed).normal(size=(n, dim))


# ====== Kendall's Tau ======

def test_tau_of_identical_embeddings():
    emb = distinct_directions(8)
    assert kendalls_tau(emb, emb) == 1.0


def test_tau_of_reversed_embeddings():
    emb = distinct_directions(8)
    assert kendalls_tau(emb, emb[::-1]) == -1.0


def test_rank_tau_hand_count():
    assert rank_tau([0, 2, 1, 3]) == pytest.approx(2.0 / 3.0)


def test_rank_tau_counts_ties_as_discordant():
    assert rank_tau([0, 0, 1]) == pytest.approx(1.0 / 3.0)
    assert rank_tau([4, 4, 4]) == -1.0


def test_rank_tau_matches_pair_counting():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 11))
        v = rng.integers(0, 6, size=n)
        assert rank_tau(v) == pair_count_tau(list(v))


def test_tau_is_scale_invariant():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(7, 5))
    b = rng.normal(size=(9, 5))
    scaled = a * rng.uniform(0.1, 10.0, size=(7, 1))
    assert kendalls_tau(scaled, b) == kendalls_tau(a, b)


def test_symmetrized_tau_averages_both_directions():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(6, 4))
    b = rng.normal(size=(8, 4))
    forward = kendalls_tau(a, b, symmetric=False)
    backward = kendalls_tau(b, a, symmetric=False)
    assert kendalls_tau(a, b) == pytest.approx(0.5 * (forward + backward))


def test_nearest_neighbours_euclidean():
    a = np.array([[0.0, 0.0], [10.0, 0.0]])
    b = np.array([[9.0, 0.0], [0.5, 0.0], [100.0, 0.0]])
    np.testing.assert_array_equal(nearest_neighbours(a, b, 'euclidean'), [1, 0])


def test_tau_needs_two_frames():
    with pytest.raises(DataError):
        kendalls_tau(np.ones((1, 3)), np.ones((4, 3)))


def test_tau_report_mean():
    report = TauReport(per_pair=(('a', 'b', 0.5), ('a', 'c', 1.0), ('b', 'c', -0.25)))
    assert abs(report.mean_tau - (0.5 + 1.0 - 0.25) / 3) < 1e-12
    assert report.action_mean_tau == report.mean_tau
    assert report.summary()['n_pairs'] == 3


def test_corpus_tau_covers_all_pairs(small_corpus, toy_spec, toy_params):
    sequences = [perf.sequence for perf in small_corpus]
    report = corpus_tau(toy_params, sequences, toy_spec, threads=2)
    assert [(a, b) for a, b, _ in report.per_pair] == [
        ('perf00', 'perf01'), ('perf00', 'perf02'), ('perf01', 'perf02')
    ]
    assert all(-1.0 <= tau <= 1.0 for _, _, tau in report.per_pair)
    assert report.symmetric


def test_corpus_tau_by_action(small_corpus, toy_spec, toy_params):
    sequences = [perf.sequence for perf in small_corpus]
    report = corpus_tau(toy_params, sequences, toy_spec, actions=['jump', 'jump', 'kick'])
    assert len(report.per_pair) == 1
    assert set(report.per_action) == {'jump'}
    assert report.action_mean_tau == pytest.approx(report.per_pair[0][2])


def test_corpus_tau_without_matching_actions(small_corpus, toy_spec, toy_params):
    sequences = [perf.sequence for perf in small_corpus]
    with pytest.raises(DataError):
        corpus_tau(toy_params, sequences, toy_spec, actions=['a', 'b', 'c'])


# ====== キーポーズ精度 ======

def test_accuracy_of_perfect_prediction():
    gt = KeyposeLabels((('a', 1.0), ('b', 2.0), ('c', 3.5)))
    curve = keypose_accuracy(gt, gt, [0.0, 0.5, 1.0])
    assert curve.fractions == (1.0, 1.0, 1.0)


def test_accuracy_with_constant_offset():
    gt = KeyposeLabels((('a', 1.0), ('b', 2.0), ('c', 3.5)))
    pred = KeyposeLabels(tuple((label, t + 0.7) for label, t in gt.entries))
    curve = keypose_accuracy(pred, gt, [0.5, 1.0])
    assert curve.rows() == [(0.5, 0.0), (1.0, 1.0)]


def test_accuracy_with_no_thresholds():
    gt = KeyposeLabels((('a', 1.0),))
    curve = keypose_accuracy(gt, gt, [])
    assert curve.thresholds == ()
    assert curve.fractions == ()


def test_accuracy_label_mismatch():
    gt = KeyposeLabels((('a', 1.0), ('b', 2.0)))
    pred = KeyposeLabels((('a', 1.0),))
    with pytest.raises(DataError):
        keypose_accuracy(pred, gt, [0.5])


def test_accuracy_curve_is_monotone():
    gt = KeyposeLabels(tuple((f'k{i}', float(i)) for i in range(10)))
    rng = np.random.default_rng(0)
    pred = KeyposeLabels(tuple((label, t + rng.normal(scale=0.6)) for label, t in gt.entries))
    curve = keypose_accuracy(pred, gt, [0.1, 0.25, 0.5, 1.0, 2.0])
    assert list(curve.fractions) == sorted(curve.fractions)
    assert all(0.0 <= f <= 1.0 for f in curve.fractions)


def test_accuracy_curve_rejects_decreasing_fractions():
    with pytest.raises(DataError):
        AccuracyCurve((0.5, 1.0), (0.8, 0.4))


# ====== 全系列の整列コスト ======

def corpus_with_copies(small_corpus):
    perf = small_corpus[0]
    seq = perf.sequence
    copy = PoseSequence(seq.layout, seq.frames, seq.frame_rate, name='copy')
    return [seq, small_corpus[1].sequence, copy, truncated_copy(perf, 0.6).sequence]


def test_all_pairs_cost_ordering(small_corpus, toy_spec, toy_params):
    sequences = corpus_with_copies(small_corpus)
    rows = all_pairs_cost(toy_params, sequences, 0, toy_spec)
    assert rows[0][0] == 'perf00'
    assert rows[0][1] < 1e-6
    others = [cost for _, cost in rows[1:]]
    assert others == sorted(others)
    costs = dict(rows)
    assert costs['perf00_trunc'] > costs['copy']
    assert len(rows) == len(sequences)


def test_all_pairs_cost_is_deterministic(small_corpus, toy_spec, toy_params):
    sequences = corpus_with_copies(small_corpus)
    one = all_pairs_cost(toy_params, sequences, 1, toy_spec, threads=1)
    many = all_pairs_cost(toy_params, sequences, 1, toy_spec, threads=4)
    assert one == many


def test_all_pairs_cost_with_flip(small_corpus, toy_spec, toy_params):
    sequences = corpus_with_copies(small_corpus)
    plain = dict(all_pairs_cost(toy_params, sequences, 0, toy_spec))
    flipped = dict(all_pairs_cost(toy_params, sequences, 0, toy_spec, AlignOptions(flip_lr=True)))
    for name, cost in flipped.items():
        assert cost <= plain[name]


def test_all_pairs_cost_bad_reference(small_corpus, toy_spec, toy_params):
    with pytest.raises(DataError):
        all_pairs_cost(toy_params, [perf.sequence for perf in small_corpus], 5, toy_spec)


# ====== 損失関数の比較 ======

def test_compare_losses_smoke(small_corpus, toy_spec):
    sequences = [perf.sequence for perf in small_corpus]
    config = EncoderConfig(n_frames=toy_spec.n_frames, n_points=toy_layout().n_points,
                           c1=4, k1_t=3, s1_t=1, c2=6, k2_t=3, s2_t=1, embed_dim=12, seed=5)
    comparison = compare_losses(sequences, sequences, toy_spec, config,
                                TrainConfig(batch_size=8, epochs_phase1=1, epochs_phase2=1, max_pairs=20))
    summary = comparison.summary()
    assert list(summary) == [
        'hadsell_margin/euclidean',
        'cosine_contrastive/euclidean',
        'cosine_contrastive/cosine/phase1',
        'cosine_contrastive/cosine/phase2',
    ]
    assert comparison.hadsell_euclidean.metric == 'euclidean'
    assert comparison.cosine_euclidean.metric == 'euclidean'
    assert comparison.phase1_cosine.metric == 'cosine'
    assert comparison.phase2_cosine.metric == 'cosine'
    assert all(-1.0 <= v <= 1.0 for v in summary.values())
    # 3系列の全ペア
    assert len(comparison.phase2_cosine.per_pair) == 3
