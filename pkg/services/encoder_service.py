"""
エンコーダサービス
N×3P の正規化窓を D 次元埋め込みへ写す3層ネットワーク（畳み込み2層＋全結合1層）
順伝播・逆伝播ともにnumpyで実装
"""
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config.settings import ENCODER_DEFAULTS, MODEL_FORMAT_VERSION, SHORT_WINDOW_FRAMES
from .errors import ConfigError, FormatError, ShapeError, VersionError
from .normalize_service import Window, WindowSpec

logger = logging.getLogger(__name__)

# 1層目の空間方向カーネル幅・ストライド（1点の x,y,z）
SPATIAL_KERNEL = 3

TENSOR_NAMES = ('W1', 'b1', 'W2', 'b2', 'W3', 'b3')


@dataclass(frozen=True)
class EncoderConfig:
    """エンコーダの構成"""
    n_frames: int
    n_points: int
    c1: int = ENCODER_DEFAULTS['c1']
    k1_t: int = ENCODER_DEFAULTS['k1_t']
    s1_t: int = ENCODER_DEFAULTS['s1_t']
    c2: int = ENCODER_DEFAULTS['c2']
    k2_t: int = ENCODER_DEFAULTS['k2_t']
    s2_t: int = ENCODER_DEFAULTS['s2_t']
    embed_dim: int = ENCODER_DEFAULTS['embed_dim']
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(f'エンコーダ設定 {f.name} は整数にしてください: {value!r}')
            if f.name != 'seed' and value < 1:
                raise ConfigError(f'エンコーダ設定 {f.name} は1以上にしてください: {value}')
        if self.t1 < 1 or self.t2 < 1:
            raise ConfigError(
                f'層の出力長が1未満です（N={self.n_frames}, T1={self.t1}, T2={self.t2}）。'
                'カーネル・ストライドを小さくしてください'
            )

    @property
    def input_width(self) -> int:
        """1層目の入力列数（3P）"""
        return SPATIAL_KERNEL * self.n_points

    @property
    def t1(self) -> int:
        return (self.n_frames - self.k1_t) // self.s1_t + 1

    @property
    def t2(self) -> int:
        return (self.t1 - self.k2_t) // self.s2_t + 1

    def tensor_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            'W1': (self.c1, self.k1_t, SPATIAL_KERNEL),
            'b1': (self.c1,),
            'W2': (self.c2, self.k2_t, self.n_points, self.c1),
            'b2': (self.c2,),
            'W3': (self.embed_dim, self.t2 * self.c2),
            'b3': (self.embed_dim,),
        }

    def fan_in(self, name: str) -> int:
        return {
            'W1': self.k1_t * SPATIAL_KERNEL,
            'W2': self.k2_t * self.n_points * self.c1,
            'W3': self.t2 * self.c2,
        }[name]

    @classmethod
    def for_window(cls, spec: WindowSpec, n_points: int, **overrides) -> 'EncoderConfig':
        """
        窓設定に合わせた構成
        短い窓（15フレーム等）では1・2層目の時間ストライドを1にする
        """
        params = dict(ENCODER_DEFAULTS)
        if spec.n_frames <= SHORT_WINDOW_FRAMES:
            params.update(s1_t=1, s2_t=1)
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(n_frames=spec.n_frames, n_points=n_points, **params)


@dataclass(eq=False)
class EncoderParams:
    """全層の重み・バイアスと構成（学習ループが唯一の書き手）"""
    config: EncoderConfig
    tensors: Dict[str, np.ndarray]
    window: Optional[WindowSpec] = None

    def __post_init__(self):
        shapes = self.config.tensor_shapes()
        for name in TENSOR_NAMES:
            if name not in self.tensors:
                raise ShapeError(f'パラメータ {name} がありません')
            tensor = np.asarray(self.tensors[name], dtype=np.float64)
            if tensor.shape != shapes[name]:
                raise ShapeError(f'パラメータ {name} の形状が不正です（{tensor.shape}, 期待: {shapes[name]}）')
            if not np.all(np.isfinite(tensor)):
                raise ShapeError(f'パラメータ {name} に非有限値があります')
            self.tensors[name] = tensor
        if self.window is not None and self.window.n_frames != self.config.n_frames:
            raise ShapeError(
                f'窓のフレーム数がモデルと一致しません（窓: {self.window.n_frames}, モデル: {self.config.n_frames}）'
            )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> 'EncoderParams':
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.window)

    def with_window(self, window: WindowSpec) -> 'EncoderParams':
        """学習時の窓設定を付けたコピー"""
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, window)

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


class ForwardCache(NamedTuple):
    """逆伝播用に保持する中間値"""
    x: np.ndarray         # B × N × P × 3
    patches1: np.ndarray  # B × T1 × k1 × P × 3
    z1: np.ndarray        # B × T1 × P × c1（ReLU前）
    a1: np.ndarray
    patches2: np.ndarray  # B × T2 × k2 × P × c1
    z2: np.ndarray        # B × T2 × c2（ReLU前）
    h: np.ndarray         # B × (T2·c2)


def init(config: EncoderConfig, window: Optional[WindowSpec] = None) -> EncoderParams:
    """
    パラメータを初期化
    重みは一様分布 U(-sqrt(1/fan_in), sqrt(1/fan_in))、バイアスは0（seedで決定的）
    """
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.startswith('b'):
            tensors[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / config.fan_in(name))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    params = EncoderParams(config, tensors, window)
    logger.debug('エンコーダ初期化: %d パラメータ (T1=%d, T2=%d)', params.n_parameters, config.t1, config.t2)
    return params


def _time_index(n_out: int, kernel: int, stride: int) -> np.ndarray:
    return np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :]


def _as_batch(params: EncoderParams, windows) -> np.ndarray:
    """窓（Window / N×3P / B×N×3P）を B×N×P×3 に揃えて形状検証"""
    cfg = params.config
    if isinstance(windows, Window):
        data = windows.data[None]
    elif isinstance(windows, (list, tuple)) and windows and isinstance(windows[0], Window):
        data = np.stack([w.data for w in windows])
    else:
        data = np.asarray(windows, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
    if data.ndim != 3:
        raise ShapeError(f'窓の形状が不正です: {data.shape}')
    if data.shape[1:] != (cfg.n_frames, cfg.input_width):
        raise ShapeError(
            f'窓の形状がモデルと一致しません（モデル: {cfg.n_frames}フレーム × {cfg.n_points}点, '
            f'入力: {data.shape[1]}フレーム × {data.shape[2] / 3:g}点）'
        )
    return data.reshape(data.shape[0], cfg.n_frames, cfg.n_points, SPATIAL_KERNEL)


def forward_batch(params: EncoderParams, windows) -> Tuple[np.ndarray, ForwardCache]:
    """
    バッチ順伝播

    Returns:
        (B × D 埋め込み, 逆伝播用キャッシュ)
    """
    cfg = params.config
    x = _as_batch(params, windows)

    # 1層目: カーネル (k1_t, 3)、ストライド (s1_t, 3)
    idx1 = _time_index(cfg.t1, cfg.k1_t, cfg.s1_t)
    patches1 = x[:, idx1]
    z1 = np.einsum('btkpd,ckd->btpc', patches1, params['W1']) + params['b1']
    a1 = np.maximum(z1, 0.0)

    # 2層目: 全点をまたぐカーネル (k2_t, P)
    idx2 = _time_index(cfg.t2, cfg.k2_t, cfg.s2_t)
    patches2 = a1[:, idx2]
    z2 = np.einsum('btkpc,okpc->bto', patches2, params['W2']) + params['b2']
    a2 = np.maximum(z2, 0.0)

    # 3層目: 全結合（出力に活性化なし）
    h = a2.reshape(a2.shape[0], -1)
    out = h @ params['W3'].T + params['b3']
    return out, ForwardCache(x, patches1, z1, a1, patches2, z2, h)


def backward_batch(
    params: EncoderParams,
    cache: ForwardCache,
    grad_out: np.ndarray
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    バッチ逆伝播（バッチ方向の和は固定順のeinsumで決定的）

    Args:
        grad_out: B × D の出力勾配

    Returns:
        (パラメータ勾配, B × N × 3P の入力勾配)
    """
    cfg = params.config
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    if g.shape != (cache.h.shape[0], cfg.embed_dim):
        raise ShapeError(f'出力勾配の形状が不正です（{g.shape}, 期待: {(cache.h.shape[0], cfg.embed_dim)}）')

    grads = {}
    grads['W3'] = g.T @ cache.h
    grads['b3'] = g.sum(axis=0)
    da2 = (g @ params['W3']).reshape(cache.z2.shape)

    dz2 = da2 * (cache.z2 > 0)
    grads['W2'] = np.einsum('bto,btkpc->okpc', dz2, cache.patches2)
    grads['b2'] = dz2.sum(axis=(0, 1))
    dpatches2 = np.einsum('bto,okpc->btkpc', dz2, params['W2'])
    idx2 = _time_index(cfg.t2, cfg.k2_t, cfg.s2_t)
    da1 = np.zeros_like(cache.a1)
    for k in range(cfg.k2_t):
        da1[:, idx2[:, k]] += dpatches2[:, :, k]

    dz1 = da1 * (cache.z1 > 0)
    grads['W1'] = np.einsum('btpc,btkpd->ckd', dz1, cache.patches1)
    grads['b1'] = dz1.sum(axis=(0, 1, 2))
    dpatches1 = np.einsum('btpc,ckd->btkpd', dz1, params['W1'])
    idx1 = _time_index(cfg.t1, cfg.k1_t, cfg.s1_t)
    dx = np.zeros_like(cache.x)
    for k in range(cfg.k1_t):
        dx[:, idx1[:, k]] += dpatches1[:, :, k]

    return grads, dx.reshape(dx.shape[0], cfg.n_frames, cfg.input_width)


def forward(params: EncoderParams, w) -> np.ndarray:
    """1窓の埋め込み（D次元、正規化しない）"""
    out, _ = forward_batch(params, w)
    return out[0]


def backward(params: EncoderParams, w, grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """1窓についての全パラメータ勾配と入力勾配（N × 3P）"""
    _, cache = forward_batch(params, w)
    grads, dx = backward_batch(params, cache, np.asarray(grad_out, dtype=np.float64)[None])
    return grads, dx[0]


def embed_windows(params: EncoderParams, windows: Sequence[Window], batch_size: int = 256) -> np.ndarray:
    """窓リストの埋め込み（len × D）"""
    if not windows:
        return np.zeros((0, params.config.embed_dim))
    chunks = []
    for start in range(0, len(windows), batch_size):
        out, _ = forward_batch(params, list(windows[start:start + batch_size]))
        chunks.append(out)
    return np.concatenate(chunks, axis=0)


# ====== 保存・読み込み ======

def to_dict(params: EncoderParams) -> Dict:
    data = {
        'format_version': MODEL_FORMAT_VERSION,
        'config': asdict(params.config),
        'tensors': {
            name: {
                'shape': list(params[name].shape),
                'data': [float(v) for v in params[name].ravel()],
            }
            for name in TENSOR_NAMES
        },
    }
    if params.window is not None:
        data['window'] = asdict(params.window)
    return data


def save(params: EncoderParams, path: Path) -> Path:
    """
    モデルJSONを保存
    floatはreprで書くので読み戻すとビット一致する
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_dict(params), f)
        f.write('\n')
    return path


def from_dict(data: Dict) -> EncoderParams:
    if not isinstance(data, dict):
        raise FormatError('モデルはJSONオブジェクトで指定してください')
    version = data.get('format_version')
    if version != MODEL_FORMAT_VERSION:
        raise VersionError(f'モデル形式のバージョンが一致しません（ファイル: {version}, 対応: {MODEL_FORMAT_VERSION}）')
    try:
        config = EncoderConfig(**data['config'])
    except (KeyError, TypeError) as e:
        raise FormatError(f'モデルの config が不正です: {e}') from None

    shapes = config.tensor_shapes()
    tensors = {}
    for name in TENSOR_NAMES:
        try:
            entry = data['tensors'][name]
            shape = tuple(int(s) for s in entry['shape'])
            values = np.asarray(entry['data'], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f'モデルのテンソル {name} が不正です: {e}') from None
        if shape != shapes[name] or values.size != int(np.prod(shape)):
            raise ShapeError(
                f'テンソル {name} の形状が config と一致しません（ファイル: {shape}, 要素数 {values.size}, 期待: {shapes[name]}）'
            )
        tensors[name] = values.reshape(shape)

    window = None
    if data.get('window') is not None:
        try:
            window = WindowSpec(**data['window'])
        except (TypeError, ValueError) as e:
            raise FormatError(f'モデルの window が不正です: {e}') from None
    return EncoderParams(config, tensors, window)


def load(path: Path) -> EncoderParams:
    """モデルJSONを読み込み、configと形状を検証"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f'モデルファイルを解析できません: {path}: {e}') from None
    except UnicodeDecodeError as e:
        raise FormatError(f'モデルファイルがUTF-8ではありません: {path}: {e.reason}') from None
    return from_dict(data)


def check_layout(params: EncoderParams, n_points: int, layout_name: str = ''):
    """モデルの点数とレイアウトの点数が一致するか確認"""
    if params.config.n_points != n_points:
        raise ShapeError(
            f'モデルとレイアウトの点数が一致しません（モデル: {params.config.n_points}点, '
            f'レイアウト{(" " + layout_name) if layout_name else ""}: {n_points}点）'
        )
