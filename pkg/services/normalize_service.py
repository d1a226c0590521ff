"""
時間窓の切り出しと正規化サービス
骨盤中心への平行移動、Z軸まわりの回転、チャンネル別スケール正規化、時間方向の拡張
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from config.settings import WINDOW_LENGTH_SECONDS, WINDOW_SAMPLE_RATE, WINDOW_STRIDE_SECONDS
from .errors import ConfigError, DataError, DegeneratePoseError, ShapeError
from .pose_io_service import PointLayout, PoseSequence, sample_frames

logger = logging.getLogger(__name__)

# 左右骨盤ベクトル（XY射影）の長さがこれ未満なら向きを決められない
DEGENERATE_ANCHOR_EPS = 1e-9
# 標準偏差がこれ未満のチャンネルは定数とみなし1で割る
DEGENERATE_STD_EPS = 1e-12

# 時間方向の拡張範囲（3秒窓での値）
AUGMENT_OFFSET_SECONDS = 0.5
AUGMENT_SCALE_RANGE = 1.0 / 3.0


@dataclass(frozen=True)
class WindowSpec:
    """時間窓の長さ・サンプリングレート・切り出し間隔"""
    length_seconds: float = WINDOW_LENGTH_SECONDS
    sample_rate: float = WINDOW_SAMPLE_RATE
    stride_seconds: float = WINDOW_STRIDE_SECONDS

    def __post_init__(self):
        if not self.length_seconds > 0:
            raise ConfigError('length_seconds は正の値にしてください')
        if not self.sample_rate > 0:
            raise ConfigError('sample_rate は正の値にしてください')
        if not self.stride_seconds > 0:
            raise ConfigError('stride_seconds は正の値にしてください')
        if self.n_frames < 2:
            raise ConfigError(
                f'窓のフレーム数が2未満です（{self.length_seconds}秒 × {self.sample_rate}fps）'
            )

    @property
    def n_frames(self) -> int:
        return int(round(self.length_seconds * self.sample_rate))

    @classmethod
    def for_frames(cls, n_frames: int, sample_rate: float = WINDOW_SAMPLE_RATE,
                   stride_seconds: float = WINDOW_STRIDE_SECONDS) -> 'WindowSpec':
        """フレーム数指定で作成（例: 15フレーム = 0.6秒 @25fps）"""
        return cls(length_seconds=n_frames / sample_rate, sample_rate=sample_rate,
                   stride_seconds=stride_seconds)


@dataclass(frozen=True, eq=False)
class Window:
    """N × 3P の時間窓（行=フレーム、列=レイアウト順のx,y,z）"""
    data: np.ndarray
    source_name: str
    center_time: float
    sample_rate: float
    layout_name: str
    normalized: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] % 3 != 0:
            raise ShapeError(f'窓の形状が不正です: {data.shape}')
        if data.shape[0] < 2:
            raise ShapeError(f'窓のフレーム数が2未満です: {data.shape[0]}')
        if not np.all(np.isfinite(data)):
            raise DataError(f'窓に非有限値があります: {self.source_name} t={self.center_time:.3f}')
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_points(self) -> int:
        return self.data.shape[1] // 3

    def points(self) -> np.ndarray:
        """N × P × 3 形式で取得"""
        return self.data.reshape(self.n_frames, self.n_points, 3)


def window_centers(seq: PoseSequence, spec: WindowSpec) -> np.ndarray:
    """系列全体を stride_seconds 間隔でカバーする窓の中心時刻"""
    count = int(np.floor(seq.duration / spec.stride_seconds + 1e-9)) + 1
    return np.arange(count) * spec.stride_seconds


def _check_center(seq: PoseSequence, center_time: float, spec: WindowSpec):
    if center_time < -spec.length_seconds or center_time > seq.duration + spec.length_seconds:
        raise DataError(
            f'{seq.name}: 窓の中心時刻 {center_time:.3f}秒 が系列範囲'
            f'（0〜{seq.duration:.3f}秒）から窓長以上離れています'
        )


def extract_window(
    seq: PoseSequence,
    center_time: float,
    spec: WindowSpec,
    sample_rate: Optional[float] = None
) -> Window:
    """
    中心時刻 t0 の時間窓を切り出し（未正規化）

    Args:
        seq: 元の系列
        center_time: 窓の中心（秒）
        spec: 窓の設定。行数は常に spec.n_frames
        sample_rate: 行間隔を決めるレート（省略時 spec.sample_rate）
    """
    _check_center(seq, center_time, spec)
    rate = spec.sample_rate if sample_rate is None else sample_rate
    n = spec.n_frames
    times = center_time + (np.arange(n) - (n - 1) / 2.0) / rate
    frames = sample_frames(seq, times)
    return Window(
        data=frames.reshape(n, -1),
        source_name=seq.name,
        center_time=float(center_time),
        sample_rate=float(rate),
        layout_name=seq.layout.name,
    )


def normalize_window(w: Window, layout: PointLayout) -> Window:
    """
    体中心の正規化

    1. 中心フレームの LMID, RMID を求め、(LMID+RMID)/2 を全フレームから引く
    2. RMID-LMID のXY射影が +X 軸に乗るよう全フレームをZ軸まわりに回転
    3. X, Y, Z の各チャンネル（全点・全フレーム）をそれぞれの標準偏差で割る
    """
    if w.layout_name != layout.name or w.n_points != layout.n_points:
        raise ShapeError(
            f'窓とレイアウトが一致しません（窓: {w.layout_name} {w.n_points}点, '
            f'レイアウト: {layout.name} {layout.n_points}点）'
        )

    pts = w.points().copy()
    left_idx, right_idx = layout.anchor_indices()
    center = pts[w.n_frames // 2]
    lmid = center[list(left_idx)].mean(axis=0)
    rmid = center[list(right_idx)].mean(axis=0)

    side = rmid - lmid
    side_len = float(np.hypot(side[0], side[1]))
    if side_len < DEGENERATE_ANCHOR_EPS:
        raise DegeneratePoseError(
            f'{w.source_name} t={w.center_time:.3f}: 左右骨盤ベクトルが短すぎて向きを決められません'
        )

    pts -= (lmid + rmid) / 2.0

    cos_t, sin_t = side[0] / side_len, side[1] / side_len
    x = pts[..., 0].copy()
    y = pts[..., 1].copy()
    pts[..., 0] = cos_t * x + sin_t * y
    pts[..., 1] = -sin_t * x + cos_t * y

    std = pts.reshape(-1, 3).std(axis=0)
    std = np.where(std < DEGENERATE_STD_EPS, 1.0, std)
    pts /= std

    return Window(
        data=pts.reshape(w.n_frames, -1),
        source_name=w.source_name,
        center_time=w.center_time,
        sample_rate=w.sample_rate,
        layout_name=w.layout_name,
        normalized=True,
    )


def draw_augmentation(rng: np.random.Generator, spec: WindowSpec) -> Tuple[float, float]:
    """
    時間オフセット δt と相対時間スケール δr をサンプリング
    δt の範囲は窓長に比例（3秒窓で ±0.5秒）
    """
    delta_t = rng.uniform(-AUGMENT_OFFSET_SECONDS, AUGMENT_OFFSET_SECONDS) * (spec.length_seconds / 3.0)
    delta_r = rng.uniform(-AUGMENT_SCALE_RANGE, AUGMENT_SCALE_RANGE)
    return float(delta_t), float(delta_r)


def augment_window(
    seq: PoseSequence,
    center_time: float,
    spec: WindowSpec,
    delta_t: float,
    delta_r: float
) -> Window:
    """指定した δt, δr で拡張窓を切り出し（行数は spec.n_frames のまま）"""
    _check_center(seq, center_time, spec)
    return extract_window(seq, center_time + delta_t, spec, sample_rate=(1.0 + delta_r) * spec.sample_rate)


def augment(seq: PoseSequence, center_time: float, spec: WindowSpec, rng: np.random.Generator) -> Window:
    """ランダムな時間オフセット・時間スケールで拡張した窓（未正規化）"""
    delta_t, delta_r = draw_augmentation(rng, spec)
    return augment_window(seq, center_time, spec, delta_t, delta_r)
