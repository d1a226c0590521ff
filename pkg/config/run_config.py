"""
実行設定（RunConfig）
既定値 < 設定JSON < コマンドラインフラグ の順で上書きする
"""
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional

from config.settings import THREADS
from services.alignment_service import AlignOptions
from services.encoder_service import EncoderConfig
from services.errors import ConfigError, FormatError, PoseAlignError
from services.normalize_service import WindowSpec
from services.training_service import LossConfig, TrainConfig

SECTION_FIELDS = {
    'window': ('length_seconds', 'sample_rate', 'stride_seconds'),
    'encoder': ('c1', 'k1_t', 's1_t', 'c2', 'k2_t', 's2_t', 'embed_dim'),
    'train': ('batch_size', 'lr', 'momentum', 'epochs_phase1', 'epochs_phase2', 'two_augmented', 'max_pairs',
              'grad_clip'),
    'loss': ('kind', 'margin'),
    'align': ('flip_lr', 'ltw_gamma', 'ltw_auto', 'metric', 'stride_seconds'),
}
TOP_LEVEL_FIELDS = ('seed', 'threads') + tuple(SECTION_FIELDS)


@dataclass(frozen=True)
class RunConfig:
    """窓・エンコーダ・学習・損失・整列の設定とseed・並列数"""
    window: Dict[str, Any] = field(default_factory=dict)
    encoder: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    loss: Dict[str, Any] = field(default_factory=dict)
    align: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    threads: int = THREADS

    def __post_init__(self):
        for section, allowed in SECTION_FIELDS.items():
            values = getattr(self, section)
            if not isinstance(values, dict):
                raise ConfigError(f'{section} はオブジェクトで指定してください')
            unknown = sorted(set(values) - set(allowed))
            if unknown:
                raise ConfigError(f'{section} に未知のキーがあります: {", ".join(unknown)}')
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f'seed は整数にしてください: {self.seed!r}')
        if isinstance(self.threads, bool) or not isinstance(self.threads, int) or self.threads < 1:
            raise ConfigError(f'threads は1以上の整数にしてください: {self.threads!r}')
        # 子の不変条件をここで検証する
        spec = self.window_spec()
        self.encoder_config(spec, n_points=1)
        self.train_config()
        self.loss_config()
        self.align_options()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        if not isinstance(data, dict):
            raise ConfigError('設定はJSONオブジェクトで指定してください')
        unknown = sorted(set(data) - set(TOP_LEVEL_FIELDS))
        if unknown:
            raise ConfigError(f'未知の設定キーがあります: {", ".join(unknown)}')
        kwargs = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Optional[Path]) -> 'RunConfig':
        """設定JSONを読み込み（None なら既定値）"""
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(str(path))
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f'設定ファイルのJSONが不正です: {path}: {e}') from None
        except UnicodeDecodeError as e:
            raise FormatError(f'設定ファイルがUTF-8ではありません: {path}: {e.reason}') from None
        return cls.from_dict(data)

    def merged(self, section: Optional[str] = None, **flags) -> 'RunConfig':
        """
        フラグで上書きした設定を返す（値が None のフラグは無視）

        Args:
            section: 上書き先のセクション（None ならトップレベルの seed / threads）
        """
        flags = {k: v for k, v in flags.items() if v is not None}
        if not flags:
            return self
        if section is None:
            return replace(self, **flags)
        if section not in SECTION_FIELDS:
            raise ConfigError(f'未知のセクションです: {section}')
        return replace(self, **{section: {**getattr(self, section), **flags}})

    def _build(self, section: str, factory, *args, **kwargs):
        """子の設定を組み立て、型の誤りも ConfigError にする"""
        try:
            return factory(*args, **kwargs)
        except PoseAlignError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f'{section} の値が不正です: {e}') from None

    def window_spec(self) -> WindowSpec:
        return self._build('window', WindowSpec, **self.window)

    def encoder_config(self, spec: WindowSpec, n_points: int) -> EncoderConfig:
        return self._build('encoder', EncoderConfig.for_window, spec, n_points, seed=self.seed, **self.encoder)

    def train_config(self) -> TrainConfig:
        return self._build('train', TrainConfig, seed=self.seed, **self.train)

    def loss_config(self) -> LossConfig:
        return self._build('loss', LossConfig, **self.loss)

    def align_options(self) -> AlignOptions:
        return self._build('align', AlignOptions, **self.align)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'window': dict(self.window),
            'encoder': dict(self.encoder),
            'train': dict(self.train),
            'loss': dict(self.loss),
            'align': dict(self.align),
            'seed': self.seed,
            'threads': self.threads,
        }
