import numpy as np
import pytest

from services.alignment_service import (
    AlignmentPath, AlignOptions, CostMatrix, EmbeddedSequence, KeyposeLabels, align_embedded,
    align_pair, cost_matrix, default_ltw_gamma, dtw, embed_sequence, linear_transfer,
    load_keyposes, ltw_penalized, transfer_keyposes
)
from services.errors import DataError, FormatError, ShapeError, ZeroNormError
from services.normalize_service import WindowSpec
from services.pose_io_service import PoseSequence, mirror_lr
from services.synthetic_service import truncated_copy


def matrix(values):
    values = np.asarray(values, dtype=np.float64)
    n, m = values.shape
    return CostMatrix(values, np.arange(n) * 0.5, np.arange(m) * 0.5)


def embedded(vectors, name='e', stride=0.5):
    vectors = np.asarray(vectors, dtype=np.float64)
    return EmbeddedSequence(name, vectors, np.arange(len(vectors)) * stride)


def brute_force_min(values):
    """全単調パスを列挙した最小コスト"""
    n, m = values.shape
    best = [np.inf]

    def walk(i, j, total):
        total += values[i, j]
        if i == n - 1 and j == m - 1:
            best[0] = min(best[0], total)
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, total)
        if i + 1 < n:
            walk(i + 1, j, total)
        if j + 1 < m:
            walk(i, j + 1, total)

    walk(0, 0, 0.0)
    return best[0]


# ====== コスト行列 ======

def test_self_cost_has_zero_diagonal():
    rng = np.random.default_rng(0)
    emb = embedded(rng.normal(size=(6, 5)))
    cost = cost_matrix(emb, emb)
    np.testing.assert_allclose(np.diagonal(cost.values), 0.0, atol=1e-12)
    assert cost.values.min() >= 0.0
    assert cost.values.max() <= 2.0


def test_orthogonal_and_antipodal_costs():
    a = embedded([[1.0, 0.0], [0.0, 2.0]])
    b = embedded([[0.0, 3.0], [-1.0, 0.0]])
    cost = cost_matrix(a, b)
    assert cost.values[0, 0] == pytest.approx(1.0)
    assert cost.values[0, 1] == pytest.approx(2.0)
    assert cost.values[1, 0] == pytest.approx(0.0)


def test_zero_embedding_reports_index():
    a = embedded([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]], name='take3')
    with pytest.raises(ZeroNormError) as excinfo:
        cost_matrix(a, a)
    assert 'index=1' in str(excinfo.value)
    assert 'take3' in str(excinfo.value)


def test_euclidean_cost():
    a = embedded([[0.0, 0.0]])
    b = embedded([[3.0, 4.0], [0.0, 1.0]])
    cost = cost_matrix(a, b, metric='euclidean')
    np.testing.assert_allclose(cost.values, [[5.0, 1.0]])
    assert cost.metric == 'euclidean'


def test_cost_matrix_keeps_window_times():
    a = embedded(np.eye(3), stride=0.5)
    b = embedded(np.eye(3)[:2], stride=0.25)
    cost = cost_matrix(a, b)
    np.testing.assert_array_equal(cost.row_times, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(cost.col_times, [0.0, 0.25])


def test_cost_matrix_rejects_non_finite():
    with pytest.raises(DataError):
        matrix([[0.0, np.nan]])


# ====== DTW ======

def test_identity_favoring_matrix_gives_diagonal():
    values = 1.0 - np.eye(5)
    path = dtw(matrix(values))
    assert path.cells == tuple((i, i) for i in range(5))
    assert path.total_cost == 0.0


def test_single_column_visits_every_row():
    path = dtw(matrix(np.arange(4.0)[:, None]))
    assert path.cells == ((0, 0), (1, 0), (2, 0), (3, 0))
    assert path.total_cost == 6.0


def test_single_row_visits_every_column():
    path = dtw(matrix([[1.0, 2.0, 3.0]]))
    assert path.cells == ((0, 0), (0, 1), (0, 2))


def test_ties_prefer_diagonal():
    path = dtw(matrix(np.zeros((3, 3))))
    assert path.cells == ((0, 0), (1, 1), (2, 2))


def test_ties_prefer_row_advance_over_column():
    values = np.zeros((3, 3))
    values[1, 1] = 10.0
    path = dtw(matrix(values))
    assert path.cells == ((0, 0), (0, 1), (1, 2), (2, 2))


def test_matches_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n, m = rng.integers(1, 6, size=2)
        values = rng.uniform(0.0, 2.0, size=(n, m))
        path = dtw(matrix(values))
        path.validate(n, m)
        assert path.total_cost == pytest.approx(brute_force_min(values), abs=1e-12)


def test_brute_force_on_8_by_10():
    rng = np.random.default_rng(7)
    values = rng.uniform(0.0, 2.0, size=(8, 10))
    assert dtw(matrix(values)).total_cost == pytest.approx(brute_force_min(values), abs=1e-12)


def test_transpose_has_same_total_cost():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n, m = rng.integers(1, 9, size=2)
        values = rng.uniform(size=(n, m))
        assert dtw(matrix(values)).total_cost == pytest.approx(dtw(matrix(values.T)).total_cost, abs=1e-12)


def test_constant_shift_bookkeeping():
    rng = np.random.default_rng(5)
    values = rng.uniform(size=(6, 7))
    shifted = dtw(matrix(values + 0.3))
    cells = tuple(np.array(shifted.cells).T)
    assert shifted.total_cost == pytest.approx(values[cells].sum() + 0.3 * len(shifted), abs=1e-12)


def test_path_validate_rejects_bad_step():
    path = AlignmentPath(((0, 0), (2, 1)), [0.0, 0.0])
    with pytest.raises(DataError):
        path.validate(3, 2)
    with pytest.raises(DataError):
        AlignmentPath(((0, 0), (1, 1)), [0.0, 0.0]).validate(3, 3)


# ====== LTW ======

def test_ltw_zero_gamma_is_unchanged():
    values = np.random.default_rng(0).uniform(size=(4, 6))
    np.testing.assert_array_equal(ltw_penalized(matrix(values), 0.0).values, values)


def test_ltw_penalty_values():
    penalized = ltw_penalized(matrix(np.zeros((5, 5))), 0.8)
    np.testing.assert_allclose(np.diagonal(penalized.values), 0.0)
    assert penalized.values[0, 4] == pytest.approx(0.8)
    assert penalized.values[4, 0] == pytest.approx(0.8)
    assert penalized.values[1, 3] == pytest.approx(0.8 * 0.5)


def test_ltw_single_row():
    penalized = ltw_penalized(matrix(np.zeros((1, 3))), 1.0)
    np.testing.assert_allclose(penalized.values, [[0.0, 0.5, 1.0]])


def test_ltw_negative_gamma():
    with pytest.raises(DataError):
        ltw_penalized(matrix(np.zeros((2, 2))), -0.1)


def test_default_gamma_is_half_mean():
    assert default_ltw_gamma(matrix([[0.0, 1.0], [2.0, 1.0]])) == pytest.approx(0.5)


def test_ltw_pulls_path_to_diagonal_but_reports_raw_costs():
    # 0行目の横移動が安い行列
    vectors_a = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    vectors_b = np.array([[1.0, 0.0, 0.0], [1.0, 0.1, 0.0], [1.0, 0.0, 0.1], [0.0, 0.0, 1.0]])
    a, b = embedded(vectors_a), embedded(vectors_b)
    plain = align_embedded(a, b)
    strong = align_embedded(a, b, AlignOptions(ltw_gamma=10.0))
    assert plain.path.cells != strong.path.cells
    assert strong.path.cells == ((0, 0), (1, 1), (2, 2), (3, 3))
    raw = cost_matrix(a, b).values
    np.testing.assert_allclose(strong.path.cell_costs, [raw[i, i] for i in range(4)])
    assert strong.mean_cost == pytest.approx(np.mean([raw[i, i] for i in range(4)]))
    assert strong.ltw_gamma == 10.0


def test_ltw_auto_uses_default_gamma():
    rng = np.random.default_rng(1)
    a = embedded(rng.normal(size=(5, 4)))
    b = embedded(rng.normal(size=(7, 4)))
    result = align_embedded(a, b, AlignOptions(ltw_auto=True))
    assert result.ltw_gamma == pytest.approx(default_ltw_gamma(cost_matrix(a, b)))


def test_align_options_validation():
    with pytest.raises(DataError):
        AlignOptions(metric='manhattan')
    with pytest.raises(DataError):
        AlignOptions(ltw_gamma=-1.0)


# ====== ペア整列 ======

def test_self_alignment_is_diagonal(small_corpus, toy_spec, toy_params):
    seq = small_corpus[0].sequence
    result = align_pair(toy_params, seq, seq, toy_spec)
    n, m = result.cost.shape
    assert n == m
    assert result.path.cells == tuple((i, i) for i in range(n))
    assert result.mean_cost < 1e-6
    assert result.flipped is False
    summary = result.summary()
    assert summary['path_length'] == n
    assert summary['n'] == summary['m'] == n


def test_flip_detects_mirrored_copy(small_corpus, toy_spec, toy_params):
    seq = small_corpus[1].sequence
    mirrored = mirror_lr(seq)
    result = align_pair(toy_params, seq, mirrored, toy_spec, AlignOptions(flip_lr=True))
    assert result.flipped is True
    assert result.mean_cost < 1e-6


def test_flip_keeps_original_when_it_is_better(small_corpus, toy_spec, toy_params):
    seq = small_corpus[0].sequence
    result = align_pair(toy_params, seq, seq, toy_spec, AlignOptions(flip_lr=True))
    assert result.flipped is False


def test_truncated_copy_costs_more(small_corpus, toy_spec, toy_params):
    perf = small_corpus[0]
    full = align_pair(toy_params, perf.sequence, perf.sequence, toy_spec)
    partial = align_pair(toy_params, perf.sequence, truncated_copy(perf, 0.6).sequence, toy_spec)
    assert partial.mean_cost > full.mean_cost
    partial.path.validate(*partial.cost.shape)
    assert 0.0 <= partial.mean_cost <= 2.0


def test_stride_override(small_corpus, toy_spec, toy_params):
    seq = small_corpus[0].sequence
    coarse = align_pair(toy_params, seq, seq, toy_spec, AlignOptions(stride_seconds=1.0))
    fine = align_pair(toy_params, seq, seq, toy_spec)
    assert coarse.cost.shape[0] < fine.cost.shape[0]
    assert np.all(np.diff(coarse.cost.row_times) == 1.0)


def test_embed_sequence_rejects_wrong_window(small_corpus, toy_params):
    with pytest.raises(ShapeError):
        embed_sequence(toy_params, small_corpus[0].sequence, WindowSpec(length_seconds=2.0, sample_rate=10.0))


def test_embed_sequence_rejects_wrong_layout(moving_sequence, toy_spec, toy_params):
    with pytest.raises(ShapeError) as excinfo:
        embed_sequence(toy_params, moving_sequence, toy_spec)
    assert '9点' in str(excinfo.value)
    assert '4点' in str(excinfo.value)


# ====== キーポーズ転写 ======

def test_self_transfer_keeps_times():
    times = np.arange(10) * 0.5
    path = AlignmentPath(tuple((i, i) for i in range(10)), np.zeros(10))
    labels = KeyposeLabels((('a', 0.6), ('b', 2.0), ('c', 4.4)))
    out = transfer_keyposes(path, labels, times, times)
    assert out.labels == ['a', 'b', 'c']
    np.testing.assert_allclose(out.times, labels.times, atol=0.5)
    assert out.times[1] == 2.0


def test_transfer_uses_midpoint_of_column_run():
    path = AlignmentPath(((0, 0), (1, 1), (1, 2), (1, 3), (2, 4)), np.zeros(5))
    row_times = [0.0, 1.0, 2.0]
    col_times = [0.0, 0.5, 1.0, 1.5, 2.0]
    out = transfer_keyposes(path, KeyposeLabels((('kp', 1.1),)), row_times, col_times)
    assert out.entries == (('kp', 1.0),)


def test_transfer_along_two_to_one_stretch():
    cells = []
    for i in range(5):
        cells.append((i, 2 * i))
        if i < 4:
            cells.append((i, 2 * i + 1))
    path = AlignmentPath(tuple(cells), np.zeros(len(cells)))
    row_times = np.arange(5) * 1.0
    col_times = np.arange(9) * 1.0
    labels = KeyposeLabels(tuple((f'k{i}', float(i)) for i in range(5)))
    out = transfer_keyposes(path, labels, row_times, col_times)
    assert np.all(np.abs(out.times - 2.0 * labels.times) <= 1.0)


def test_transfer_rejects_label_outside_span():
    times = [0.0, 0.5, 1.0]
    path = AlignmentPath(((0, 0), (1, 1), (2, 2)), np.zeros(3))
    with pytest.raises(DataError):
        transfer_keyposes(path, KeyposeLabels((('late', 1.6),)), times, times)


def test_linear_transfer():
    labels = KeyposeLabels((('a', 1.0), ('b', 3.0)))
    out = linear_transfer(labels, 1.0, 3.0, 10.0, 14.0)
    assert out.entries == (('a', 10.0), ('b', 14.0))
    with pytest.raises(DataError):
        linear_transfer(labels, 2.0, 2.0, 0.0, 1.0)


def test_load_keyposes_with_and_without_header(tmp_path):
    with_header = tmp_path / 'a.csv'
    with_header.write_text('label,time_seconds\nstart,0.5\nturn,2.25\n', encoding='utf-8')
    without_header = tmp_path / 'b.csv'
    without_header.write_text('start,0.5\nturn,2.25\n\n', encoding='utf-8')
    assert load_keyposes(with_header) == load_keyposes(without_header)
    assert load_keyposes(with_header).entries == (('start', 0.5), ('turn', 2.25))


def test_load_keyposes_bad_time(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('label,time_seconds\nstart,soon\n', encoding='utf-8')
    with pytest.raises(FormatError):
        load_keyposes(path)


def test_load_keyposes_not_utf8(tmp_path):
    path = tmp_path / 'sjis.csv'
    path.write_bytes('label,time_seconds\n開始,0.5\n'.encode('shift_jis'))
    with pytest.raises(FormatError):
        load_keyposes(path)


def test_load_keyposes_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_keyposes(tmp_path / 'none.csv')


def test_mirrored_sequence_is_not_identical(small_corpus):
    seq = small_corpus[1].sequence
    assert not np.allclose(mirror_lr(seq).frames, seq.frames)
    assert isinstance(mirror_lr(seq), PoseSequence)
