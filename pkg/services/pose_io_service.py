"""
3Dポイント列の入出力サービス
レイアウト・フレームCSVの読み込み、検証、リサンプリング、リターゲット、左右反転
"""
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, FormatError, LayoutError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

# 正規化アンカーに使う役割タグ
PELVIS_ROLES = (
    'left-pelvis-anterior',
    'right-pelvis-anterior',
    'left-pelvis-posterior',
    'right-pelvis-posterior',
)
HIP_ROLES = ('left-hip', 'right-hip')
ROLE_TAGS = PELVIS_ROLES + HIP_ROLES

COORD_SUFFIXES = ('x', 'y', 'z')


@dataclass(frozen=True)
class PointLayout:
    """名前付き3Dポイント集合（マーカーセット／スケルトン）"""
    name: str
    points: Tuple[str, ...]
    roles: Dict[str, str] = field(default_factory=dict)
    lr_pairs: Tuple[Tuple[str, str], ...] = ()
    frame_rate: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, 'points', tuple(self.points))
        object.__setattr__(self, 'lr_pairs', tuple(tuple(p) for p in self.lr_pairs))
        object.__setattr__(self, 'roles', dict(self.roles))

        if not self.points:
            raise LayoutError(f'レイアウト {self.name}: ポイントがありません')
        if len(set(self.points)) != len(self.points):
            dup = sorted({p for p in self.points if self.points.count(p) > 1})
            raise LayoutError(f'レイアウト {self.name}: ポイント名が重複しています: {dup}')

        for role, point in self.roles.items():
            if role not in ROLE_TAGS:
                raise LayoutError(f'レイアウト {self.name}: 未知の役割タグ {role}')
            if point not in self.points:
                raise LayoutError(f'レイアウト {self.name}: 役割 {role} のポイント {point} が存在しません')

        for pair in self.lr_pairs:
            if len(pair) != 2:
                raise LayoutError(f'レイアウト {self.name}: 左右ペアは2点で指定してください: {pair}')
            left, right = pair
            if left == right:
                raise LayoutError(f'レイアウト {self.name}: 左右ペアが同一ポイントです: {left}')
            for p in pair:
                if p not in self.points:
                    raise LayoutError(f'レイアウト {self.name}: 左右ペアのポイント {p} が存在しません')

        if self.frame_rate is not None and not self.frame_rate > 0:
            raise LayoutError(f'レイアウト {self.name}: frame_rate は正の値にしてください')

        # アンカー判定（例外を投げるだけ）
        self.anchor_mode

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def anchor_mode(self) -> str:
        """
        正規化アンカーの種類
        骨盤4マーカーが揃えば 'marker'、左右股関節が揃えば 'skeleton'
        """
        if all(r in self.roles for r in PELVIS_ROLES):
            return 'marker'
        if all(r in self.roles for r in HIP_ROLES):
            return 'skeleton'
        raise LayoutError(
            f'レイアウト {self.name}: 正規化アンカーがありません'
            '（骨盤4マーカー、または left-hip と right-hip の両方が必要です）'
        )

    def index(self, point: str) -> int:
        try:
            return self.points.index(point)
        except ValueError:
            raise LayoutError(f'レイアウト {self.name}: ポイント {point} が存在しません') from None

    def anchor_indices(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        """
        左右中点（LMID, RMID）を作るポイントのインデックス

        Returns:
            (左側インデックス, 右側インデックス)
        """
        if self.anchor_mode == 'marker':
            left = (self.index(self.roles['left-pelvis-anterior']),
                    self.index(self.roles['left-pelvis-posterior']))
            right = (self.index(self.roles['right-pelvis-anterior']),
                     self.index(self.roles['right-pelvis-posterior']))
            return left, right
        return (self.index(self.roles['left-hip']),), (self.index(self.roles['right-hip']),)

    def mirror_permutation(self) -> np.ndarray:
        """左右ペアを入れ替えるポイント順の置換"""
        perm = np.arange(self.n_points)
        for left, right in self.lr_pairs:
            li, ri = self.index(left), self.index(right)
            perm[li], perm[ri] = ri, li
        return perm

    def csv_header(self) -> List[str]:
        return [f'{p}.{c}' for p in self.points for c in COORD_SUFFIXES]

    def to_dict(self) -> Dict:
        data = {
            'name': self.name,
            'points': list(self.points),
            'roles': dict(self.roles),
            'lr_pairs': [list(p) for p in self.lr_pairs],
        }
        if self.frame_rate is not None:
            data['frame_rate'] = self.frame_rate
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'PointLayout':
        if not isinstance(data, dict):
            raise FormatError('レイアウトはJSONオブジェクトで指定してください')
        for key in ('name', 'points'):
            if key not in data:
                raise FormatError(f'レイアウトに {key} がありません')
        return cls(
            name=str(data['name']),
            points=tuple(str(p) for p in data['points']),
            roles={str(k): str(v) for k, v in data.get('roles', {}).items()},
            lr_pairs=tuple(tuple(p) for p in data.get('lr_pairs', [])),
            frame_rate=float(data['frame_rate']) if data.get('frame_rate') is not None else None,
        )


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """F × P × 3 の座標配列（Z軸が上）"""
    layout: PointLayout
    frames: np.ndarray
    frame_rate: float
    name: str = ''

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ShapeError(f'{self.name}: フレーム配列は F×P×3 が必要です（実際: {frames.shape}）')
        if frames.shape[0] < 1:
            raise ShapeError(f'{self.name}: フレームが1つもありません')
        if frames.shape[1] != self.layout.n_points:
            raise ShapeError(
                f'{self.name}: ポイント数が一致しません'
                f'（データ: {frames.shape[1]}, レイアウト {self.layout.name}: {self.layout.n_points}）'
            )
        if not self.frame_rate > 0:
            raise DataError(f'{self.name}: frame_rate は正の値にしてください')

        bad = np.argwhere(~np.isfinite(frames))
        if bad.size:
            f, p, _ = bad[0]
            raise NonFiniteError(
                f'{self.name}: 非有限値があります: frame={int(f)}, point={self.layout.points[int(p)]}'
            )

        frames.setflags(write=False)
        object.__setattr__(self, 'frames', frames)
        object.__setattr__(self, 'frame_rate', float(self.frame_rate))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        """最初のフレームから最後のフレームまでの秒数"""
        return (self.n_frames - 1) / self.frame_rate

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    def with_frames(self, frames: np.ndarray, frame_rate: Optional[float] = None,
                    layout: Optional[PointLayout] = None, name: Optional[str] = None) -> 'PoseSequence':
        return PoseSequence(
            layout=layout or self.layout,
            frames=frames,
            frame_rate=self.frame_rate if frame_rate is None else frame_rate,
            name=self.name if name is None else name,
        )


@dataclass(frozen=True)
class RetargetMap:
    """ターゲット点 = ソース点の重み付き和 のルール集合"""
    source_layout_name: str
    target_layout_name: str
    rules: Dict[str, Tuple[Tuple[str, float], ...]]

    def __post_init__(self):
        rules = {}
        for target, terms in self.rules.items():
            terms = tuple((str(src), float(w)) for src, w in terms)
            if not terms:
                raise FormatError(f'リターゲット {target}: ルールが空です')
            total = sum(w for _, w in terms)
            if abs(total - 1.0) > 1e-9:
                raise FormatError(f'リターゲット {target}: 重みの合計が1ではありません（{total}）')
            rules[str(target)] = terms
        object.__setattr__(self, 'rules', rules)

    def check_layouts(self, source: PointLayout, target: PointLayout):
        """ソース／ターゲットレイアウトとの整合性を確認"""
        if source.name != self.source_layout_name:
            raise LayoutError(
                f'リターゲットのソースが一致しません（マップ: {self.source_layout_name}, 系列: {source.name}）'
            )
        if target.name != self.target_layout_name:
            raise LayoutError(
                f'リターゲットのターゲットが一致しません（マップ: {self.target_layout_name}, 指定: {target.name}）'
            )
        missing = [p for p in target.points if p not in self.rules]
        if missing:
            raise LayoutError(f'ルールのないターゲット点があります: {missing}')
        extra = [p for p in self.rules if p not in target.points]
        if extra:
            raise LayoutError(f'ターゲットレイアウトに存在しない点のルールがあります: {extra}')
        for target_point, terms in self.rules.items():
            for src, _ in terms:
                if src not in source.points:
                    raise LayoutError(
                        f'ルール {target_point} が存在しないソース点 {src} を参照しています'
                    )

    def weight_matrix(self, source: PointLayout, target: PointLayout) -> np.ndarray:
        """P_target × P_source の重み行列"""
        self.check_layouts(source, target)
        weights = np.zeros((target.n_points, source.n_points))
        for ti, target_point in enumerate(target.points):
            for src, w in self.rules[target_point]:
                weights[ti, source.index(src)] += w
        return weights

    @classmethod
    def from_dict(cls, data: Dict) -> 'RetargetMap':
        if not isinstance(data, dict):
            raise FormatError('リターゲットマップはJSONオブジェクトで指定してください')
        for key in ('source', 'target', 'rules'):
            if key not in data:
                raise FormatError(f'リターゲットマップに {key} がありません')
        try:
            rules = {t: tuple((s, w) for s, w in terms) for t, terms in data['rules'].items()}
        except (TypeError, ValueError, AttributeError):
            raise FormatError('リターゲットルールは {target: [[source, weight], ...]} 形式で指定してください') from None
        return cls(source_layout_name=str(data['source']),
                   target_layout_name=str(data['target']),
                   rules=rules)

    def to_dict(self) -> Dict:
        return {
            'source': self.source_layout_name,
            'target': self.target_layout_name,
            'rules': {t: [[s, w] for s, w in terms] for t, terms in self.rules.items()},
        }


# ====== 読み込み・書き出し ======

def read_text(path: Path, what: str) -> str:
    """UTF-8のテキストファイルを読み込み（デコードできなければ FormatError）"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        return path.read_text(encoding='utf-8')
    except UnicodeDecodeError as e:
        raise FormatError(f'{what}がUTF-8ではありません: {path}: {e.reason} (byte {e.start})') from None


def _read_json(path: Path, what: str) -> Dict:
    text = read_text(path, what)
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f'{what}のJSONが不正です: {path}: {e}') from None


def load_layout(path: Path) -> PointLayout:
    """レイアウトJSONを読み込み"""
    return PointLayout.from_dict(_read_json(path, 'レイアウト'))


def load_retarget_map(path: Path) -> RetargetMap:
    """リターゲットマップJSONを読み込み"""
    return RetargetMap.from_dict(_read_json(path, 'リターゲットマップ'))


def load_frames_csv(
    frames_path: Path,
    layout: PointLayout,
    frame_rate: Optional[float] = None,
    name: Optional[str] = None
) -> PoseSequence:
    """
    フレームCSVを読み込み

    Args:
        frames_path: ヘッダー `<pt>.x,<pt>.y,<pt>.z` を持つCSV
        layout: 列順を決めるレイアウト
        frame_rate: 指定がなければレイアウトの frame_rate を使う
        name: 系列名（省略時はファイル名）

    Returns:
        検証済みのPoseSequence
    """
    frames_path = Path(frames_path)
    if not frames_path.exists():
        raise FileNotFoundError(str(frames_path))

    rate = frame_rate if frame_rate is not None else layout.frame_rate
    if rate is None:
        raise DataError(f'{frames_path}: フレームレートが指定されていません（--frame-rate またはレイアウトの frame_rate）')

    name = name or frames_path.stem
    reader = csv.reader(io.StringIO(read_text(frames_path, 'フレームCSV'), newline=''))
    header = next(reader, None)
    if header is None:
        raise FormatError(f'{frames_path}: 空のファイルです')
    header = [h.strip() for h in header]

    expected = layout.csv_header()
    if len(header) != len(expected):
        raise ShapeError(
            f'{frames_path}: 列数がレイアウトと一致しません'
            f'（CSV: {len(header)}列 = {len(header) / 3:g}点, レイアウト {layout.name}: {layout.n_points}点）'
        )
    if header != expected:
        wrong = next(h for h, e in zip(header, expected) if h != e)
        raise FormatError(f'{frames_path}: ヘッダーがレイアウト順と一致しません（{wrong}）')

    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(expected):
            raise FormatError(f'{frames_path}:{line_no}: 列数が不正です（{len(row)}列）')
        values = []
        for col, cell in enumerate(row):
            try:
                value = float(cell)
            except ValueError:
                raise FormatError(f'{frames_path}:{line_no}: 数値ではありません: {header[col]}={cell!r}') from None
            if not math.isfinite(value):
                raise NonFiniteError(
                    f'{frames_path}: 非有限値があります: frame={len(rows)}, '
                    f'point={layout.points[col // 3]} ({header[col]}={cell})'
                )
            values.append(value)
        rows.append(values)

    if not rows:
        raise FormatError(f'{frames_path}: フレームがありません')

    frames = np.asarray(rows, dtype=np.float64).reshape(len(rows), layout.n_points, 3)
    logger.debug('読み込み: %s (%d frames, %d points)', frames_path, len(rows), layout.n_points)
    return PoseSequence(layout=layout, frames=frames, frame_rate=rate, name=name)


def load_sequence(layout_path: Path, frames_path: Path, frame_rate: Optional[float] = None) -> PoseSequence:
    """レイアウトJSONとフレームCSVからPoseSequenceを作成"""
    layout = load_layout(layout_path)
    return load_frames_csv(frames_path, layout, frame_rate=frame_rate)


def write_sequence_csv(seq: PoseSequence, path: Path, float_format: str = '.9g') -> Path:
    """フレームCSVとして書き出し"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = seq.frames.reshape(seq.n_frames, -1)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(seq.layout.csv_header())
        for row in flat:
            writer.writerow([format(v, float_format) for v in row])
    return path


# ====== 変換 ======

def sample_frames(seq: PoseSequence, times: Sequence[float]) -> np.ndarray:
    """
    任意時刻の姿勢を線形補間で取得
    範囲外の時刻は先頭／末尾フレームにクランプ

    Returns:
        len(times) × P × 3 配列
    """
    times = np.asarray(times, dtype=np.float64)
    last = seq.n_frames - 1
    pos = np.clip(times * seq.frame_rate, 0.0, float(last))
    i0 = np.floor(pos).astype(int)
    i0 = np.minimum(i0, last)
    i1 = np.minimum(i0 + 1, last)
    w = (pos - i0)[:, None, None]
    return seq.frames[i0] * (1.0 - w) + seq.frames[i1] * w


def resample(seq: PoseSequence, target_rate: float) -> PoseSequence:
    """
    指定フレームレートにリサンプリング
    元の全区間を等間隔にカバーし、最初と最後のフレームは保存される
    """
    if not target_rate > 0:
        raise DataError('target_rate は正の値にしてください')

    n_out = max(1, int(round(seq.n_frames * target_rate / seq.frame_rate)))
    if n_out == 1 or seq.n_frames == 1:
        times = np.zeros(n_out)
    else:
        times = np.linspace(0.0, seq.duration, n_out)
    frames = sample_frames(seq, times)
    logger.debug('リサンプル: %s %.3gfps -> %.3gfps (%d -> %d frames)',
                 seq.name, seq.frame_rate, target_rate, seq.n_frames, n_out)
    return seq.with_frames(frames, frame_rate=target_rate)


def retarget(seq: PoseSequence, rmap: RetargetMap, target_layout: PointLayout) -> PoseSequence:
    """
    別レイアウトの点集合へ写像
    各ターゲット点 = ルールに従うソース点の重み付き和（フレーム数・レートは維持）
    """
    weights = rmap.weight_matrix(seq.layout, target_layout)
    frames = np.einsum('ts,fsc->ftc', weights, seq.frames)
    return seq.with_frames(frames, layout=target_layout)


def mirror_lr(seq: PoseSequence) -> PoseSequence:
    """
    左右反転
    左右ペアの列を入れ替えた後、全点のX座標の符号を反転する
    """
    if not seq.layout.lr_pairs:
        raise LayoutError(f'レイアウト {seq.layout.name}: 左右ペア（lr_pairs）が定義されていません')
    frames = seq.frames[:, seq.layout.mirror_permutation(), :].copy()
    frames[:, :, 0] = -frames[:, :, 0]
    return seq.with_frames(frames)


# ====== コーパス（マニフェスト） ======

@dataclass(frozen=True, eq=False)
class CorpusEntry:
    """マニフェストの1エントリ"""
    sequence: PoseSequence
    keyposes_path: Optional[Path] = None
    action: str = ''

    @property
    def name(self) -> str:
        return self.sequence.name


def load_corpus(manifest_path: Path, layout_resolver=None) -> List[CorpusEntry]:
    """
    マニフェストJSON（系列エントリのリスト）を読み込み

    Args:
        manifest_path: [{"name", "layout", "frames", "frame_rate"?, "keyposes"?, "action"?}, ...]
        layout_resolver: レイアウト名→PointLayout（同梱レイアウト参照用、省略可）
    """
    manifest_path = Path(manifest_path)
    data = _read_json(manifest_path, 'マニフェスト')
    if isinstance(data, dict):
        data = data.get('sequences', [])
    if not isinstance(data, list) or not data:
        raise FormatError(f'{manifest_path}: マニフェストは系列エントリのリストで指定してください')

    base = manifest_path.parent
    layouts: Dict[str, PointLayout] = {}
    entries = []
    names = set()
    for i, item in enumerate(data):
        if not isinstance(item, dict) or 'layout' not in item or 'frames' not in item:
            raise FormatError(f'{manifest_path}: エントリ{i}に layout / frames がありません')

        layout_ref = str(item['layout'])
        if layout_ref not in layouts:
            layout_path = base / layout_ref
            if layout_path.exists() or layout_resolver is None:
                layouts[layout_ref] = load_layout(layout_path)
            else:
                layouts[layout_ref] = layout_resolver(layout_ref)

        frames_path = base / str(item['frames'])
        seq = load_frames_csv(
            frames_path,
            layouts[layout_ref],
            frame_rate=item.get('frame_rate'),
            name=item.get('name') or frames_path.stem,
        )
        if seq.name in names:
            raise FormatError(f'{manifest_path}: 系列名が重複しています: {seq.name}')
        names.add(seq.name)

        keyposes = item.get('keyposes')
        entries.append(CorpusEntry(
            sequence=seq,
            keyposes_path=(base / keyposes) if keyposes else None,
            action=str(item.get('action', '')),
        ))
    return entries
