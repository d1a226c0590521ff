"""
合成コーパス生成サービス
決まった順序のモーションプリミティブを演じる疑似演技（台本付きパフォーマンス）を生成する
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .alignment_service import KeyposeLabels
from .csv_service import CsvService
from .errors import ConfigError, DataError
from .pose_io_service import PointLayout, PoseSequence, write_sequence_csv

logger = logging.getLogger(__name__)

TOY_LAYOUT_NAME = 'toy_skeleton9'

# 基本姿勢（メートル、Z上向き、右股関節が +X 側）
_BASE_POSE = {
    'pelvis': (0.0, 0.0, 1.0),
    'left_hip': (-0.15, 0.0, 0.95),
    'right_hip': (0.15, 0.0, 0.95),
    'chest': (0.0, 0.0, 1.4),
    'head': (0.0, 0.0, 1.7),
    'left_hand': (-0.4, 0.0, 1.1),
    'right_hand': (0.4, 0.0, 1.1),
    'left_foot': (-0.15, 0.0, 0.05),
    'right_foot': (0.15, 0.0, 0.05),
}

# プリミティブで動かす振幅（股関節・骨盤は固定）
_AMPLITUDE = {
    'pelvis': 0.0,
    'left_hip': 0.0,
    'right_hip': 0.0,
    'chest': 0.1,
    'head': 0.15,
    'left_hand': 0.5,
    'right_hand': 0.5,
    'left_foot': 0.3,
    'right_foot': 0.3,
}


def toy_layout(frame_rate: Optional[float] = None) -> PointLayout:
    """9点の簡易スケルトン（股関節アンカー）"""
    return PointLayout(
        name=TOY_LAYOUT_NAME,
        points=tuple(_BASE_POSE),
        roles={'left-hip': 'left_hip', 'right-hip': 'right_hip'},
        lr_pairs=(('left_hip', 'right_hip'), ('left_hand', 'right_hand'), ('left_foot', 'right_foot')),
        frame_rate=frame_rate,
    )


@dataclass(frozen=True)
class SyntheticConfig:
    """合成コーパスの設定"""
    n_performances: int = 8
    n_primitives: int = 10
    primitive_seconds: float = 2.0
    duration_jitter: float = 0.3
    frame_rate: float = 50.0
    noise_fraction: float = 0.02
    seed: int = 0
    truncate_fraction: Optional[float] = None

    def __post_init__(self):
        if self.n_performances < 1 or self.n_primitives < 1:
            raise ConfigError('演技数・プリミティブ数は1以上にしてください')
        if not self.primitive_seconds > 0 or not self.frame_rate > 0:
            raise ConfigError('primitive_seconds・frame_rate は正の値にしてください')
        if not 0 <= self.duration_jitter < 1:
            raise ConfigError('duration_jitter は0以上1未満にしてください')
        if self.noise_fraction < 0:
            raise ConfigError('noise_fraction は0以上にしてください')
        if self.truncate_fraction is not None and not 0 < self.truncate_fraction < 1:
            raise ConfigError('truncate_fraction は0より大きく1未満にしてください')


@dataclass(frozen=True, eq=False)
class SyntheticPerformance:
    """合成演技と正解キーポーズ"""
    sequence: PoseSequence
    keyposes: KeyposeLabels
    action: str = 'scripted'
    complete: bool = True

    @property
    def name(self) -> str:
        return self.sequence.name


class MotionScript:
    """
    全演技で共通のプリミティブ列
    各プリミティブは s∈[0,1] で A sin(πs) + B sin(2πs) の変位を加え、両端で基本姿勢に戻る
    """

    def __init__(self, n_primitives: int, seed: int = 0):
        rng = np.random.default_rng([seed, 0])
        self.layout_points = tuple(_BASE_POSE)
        scale = np.array([_AMPLITUDE[p] for p in self.layout_points])[:, None]
        shape = (n_primitives, len(self.layout_points), 3)
        self.amp_a = rng.uniform(-1.0, 1.0, size=shape) * scale
        self.amp_b = rng.uniform(-0.5, 0.5, size=shape) * scale
        self.base = np.array([_BASE_POSE[p] for p in self.layout_points])

    @property
    def n_primitives(self) -> int:
        return self.amp_a.shape[0]

    def pose(self, primitive: int, phase: np.ndarray) -> np.ndarray:
        """len(phase) × P × 3"""
        phase = np.asarray(phase, dtype=np.float64)[:, None, None]
        return (self.base
                + self.amp_a[primitive] * np.sin(np.pi * phase)
                + self.amp_b[primitive] * np.sin(2.0 * np.pi * phase))


def _rotate_translate(frames: np.ndarray, yaw: float, offset: np.ndarray) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    out = frames.copy()
    out[..., 0] = c * frames[..., 0] - s * frames[..., 1] + offset[0]
    out[..., 1] = s * frames[..., 0] + c * frames[..., 1] + offset[1]
    return out


def generate_performance(script: MotionScript, config: SyntheticConfig, index: int,
                         layout: PointLayout) -> SyntheticPerformance:
    """1演技を生成（index ごとに独立した乱数系列）"""
    rng = np.random.default_rng([config.seed, 1, index])
    jitter = config.duration_jitter
    durations = config.primitive_seconds * rng.uniform(1.0 - jitter, 1.0 + jitter, size=script.n_primitives)
    bounds = np.concatenate([[0.0], np.cumsum(durations)])
    total = float(bounds[-1])

    n_frames = int(round(total * config.frame_rate)) + 1
    times = np.arange(n_frames) / config.frame_rate
    primitive = np.clip(np.searchsorted(bounds, times, side='right') - 1, 0, script.n_primitives - 1)
    phase = np.clip((times - bounds[primitive]) / durations[primitive], 0.0, 1.0)

    frames = np.empty((n_frames, len(script.layout_points), 3))
    for k in range(script.n_primitives):
        mask = primitive == k
        if np.any(mask):
            frames[mask] = script.pose(k, phase[mask])

    frames = _rotate_translate(frames, rng.uniform(0.0, 2.0 * np.pi), rng.uniform(-1.0, 1.0, size=2))
    if config.noise_fraction > 0:
        std = frames.reshape(-1, 3).std(axis=0)
        frames = frames + rng.normal(0.0, 1.0, size=frames.shape) * (config.noise_fraction * std)

    keyposes = KeyposeLabels(tuple(
        (f'kp{k + 1:02d}', float(bounds[k] + 0.5 * durations[k])) for k in range(script.n_primitives)
    ))
    seq = PoseSequence(layout=layout, frames=frames, frame_rate=config.frame_rate, name=f'perf{index:02d}')
    return SyntheticPerformance(sequence=seq, keyposes=keyposes)


def truncated_copy(perf: SyntheticPerformance, fraction: float) -> SyntheticPerformance:
    """先頭 fraction の区間だけを残した不完全な演技"""
    if not 0 < fraction < 1:
        raise DataError(f'fraction は0より大きく1未満にしてください: {fraction}')
    seq = perf.sequence
    n_keep = max(2, int(round(seq.n_frames * fraction)))
    truncated = PoseSequence(
        layout=seq.layout,
        frames=seq.frames[:n_keep],
        frame_rate=seq.frame_rate,
        name=f'{seq.name}_trunc',
    )
    keep = tuple((label, t) for label, t in perf.keyposes.entries if t <= truncated.duration)
    return SyntheticPerformance(truncated, KeyposeLabels(keep), perf.action, complete=False)


def generate_corpus(config: SyntheticConfig = SyntheticConfig()) -> List[SyntheticPerformance]:
    """
    合成コーパスを生成
    truncate_fraction 指定時は1本目の演技を切り詰めたコピーを末尾に加える
    """
    layout = toy_layout(config.frame_rate)
    script = MotionScript(config.n_primitives, config.seed)
    performances = [generate_performance(script, config, i, layout) for i in range(config.n_performances)]
    if config.truncate_fraction is not None:
        performances.append(truncated_copy(performances[0], config.truncate_fraction))
    logger.info('合成コーパス: %d 演技 (プリミティブ %d, seed=%d)',
                len(performances), config.n_primitives, config.seed)
    return performances


def write_corpus(performances: List[SyntheticPerformance], out_dir: Path) -> Path:
    """
    レイアウトJSON・フレームCSV・キーポーズCSV・マニフェストを書き出す

    Returns:
        マニフェストのパス
    """
    if not performances:
        raise DataError('書き出す演技がありません')
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_service = CsvService(out_dir)

    layout = performances[0].sequence.layout
    layout_file = f'{layout.name}.json'
    with open(out_dir / layout_file, 'w', encoding='utf-8') as f:
        json.dump(layout.to_dict(), f, ensure_ascii=False, indent=2)
        f.write('\n')

    manifest = []
    for perf in performances:
        frames_file = f'{perf.name}.csv'
        keyposes_file = f'{perf.name}_keyposes.csv'
        write_sequence_csv(perf.sequence, out_dir / frames_file)
        csv_service.write_keyposes(perf.keyposes, keyposes_file)
        manifest.append({
            'name': perf.name,
            'layout': layout_file,
            'frames': frames_file,
            'frame_rate': perf.sequence.frame_rate,
            'keyposes': keyposes_file,
            'action': perf.action,
        })

    manifest_path = out_dir / 'manifest.json'
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
        f.write('\n')
    return manifest_path
