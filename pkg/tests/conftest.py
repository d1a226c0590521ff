"""
共通フィクスチャ
小さなレイアウト・ランプ系列・合成コーパス・小型エンコーダ
"""
import numpy as np
import pytest

from services.encoder_service import EncoderConfig, init
from services.normalize_service import WindowSpec
from services.pose_io_service import PointLayout, PoseSequence
from services.synthetic_service import SyntheticConfig, generate_corpus, toy_layout


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='slow マーカーのテストも実行')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='--runslow を指定すると実行')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def hip_layout():
    """4点スケルトン（股関節アンカー）"""
    return PointLayout(
        name='hip4',
        points=('left_hip', 'right_hip', 'left_wrist', 'right_wrist'),
        roles={'left-hip': 'left_hip', 'right-hip': 'right_hip'},
        lr_pairs=(('left_hip', 'right_hip'), ('left_wrist', 'right_wrist')),
        frame_rate=25.0,
    )


@pytest.fixture
def marker_layout():
    """骨盤4マーカー＋頭1点"""
    return PointLayout(
        name='pelvis5',
        points=('LASI', 'RASI', 'LPSI', 'RPSI', 'HEAD'),
        roles={
            'left-pelvis-anterior': 'LASI',
            'right-pelvis-anterior': 'RASI',
            'left-pelvis-posterior': 'LPSI',
            'right-pelvis-posterior': 'RPSI',
        },
        lr_pairs=(('LASI', 'RASI'), ('LPSI', 'RPSI')),
    )


def moving_frames(n_frames: int, frame_rate: float, seed: int = 0) -> np.ndarray:
    """股関節は左右に固定、手首が滑らかに動く4点の系列"""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / frame_rate
    frames = np.zeros((n_frames, 4, 3))
    frames[:, 0] = (-0.2, 0.0, 1.0)
    frames[:, 1] = (0.2, 0.0, 1.0)
    phase = rng.uniform(0, 2 * np.pi, size=6)
    frames[:, 2, 0] = -0.5 + 0.3 * np.sin(1.3 * t + phase[0])
    frames[:, 2, 1] = 0.3 * np.sin(0.7 * t + phase[1])
    frames[:, 2, 2] = 1.2 + 0.4 * np.sin(2.1 * t + phase[2])
    frames[:, 3, 0] = 0.5 + 0.3 * np.sin(0.9 * t + phase[3])
    frames[:, 3, 1] = 0.3 * np.sin(1.7 * t + phase[4])
    frames[:, 3, 2] = 1.2 + 0.4 * np.sin(1.1 * t + phase[5])
    return frames


@pytest.fixture
def moving_sequence(hip_layout):
    return PoseSequence(layout=hip_layout, frames=moving_frames(200, 25.0), frame_rate=25.0, name='moving')


@pytest.fixture
def small_spec():
    """1秒 × 10fps の窓、0.5秒間隔"""
    return WindowSpec(length_seconds=1.0, sample_rate=10.0, stride_seconds=0.5)


@pytest.fixture
def small_encoder_config(small_spec):
    return EncoderConfig(n_frames=small_spec.n_frames, n_points=4, c1=4, k1_t=3, s1_t=1,
                         c2=5, k2_t=3, s2_t=2, embed_dim=8, seed=3)


@pytest.fixture
def small_params(small_encoder_config):
    return init(small_encoder_config)


@pytest.fixture(scope='session')
def small_corpus():
    """合成コーパス（3演技・4プリミティブ）"""
    config = SyntheticConfig(n_performances=3, n_primitives=4, primitive_seconds=1.5,
                             frame_rate=25.0, seed=11)
    return generate_corpus(config)


@pytest.fixture
def toy_spec():
    return WindowSpec(length_seconds=1.0, sample_rate=10.0, stride_seconds=0.5)


@pytest.fixture
def toy_params(toy_spec):
    config = EncoderConfig(n_frames=toy_spec.n_frames, n_points=toy_layout().n_points,
                           c1=4, k1_t=3, s1_t=1, c2=6, k2_t=3, s2_t=1, embed_dim=12, seed=5)
    return init(config)
