"""
マスタデータ管理サービス
同梱のポイントレイアウトとリターゲットマップの一覧・取得
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from .errors import FormatError, LayoutError
from .pose_io_service import PointLayout, RetargetMap, load_layout, load_retarget_map

logger = logging.getLogger(__name__)


class MasterService:
    """マスタデータ管理サービス"""

    def __init__(self, master_data_dir: Path):
        self.master_data_dir = Path(master_data_dir)
        self.layouts_dir = self.master_data_dir / 'layouts'
        self.maps_dir = self.master_data_dir / 'retarget_maps'
        self._layouts: Dict[str, PointLayout] = {}
        self._maps: Dict[str, RetargetMap] = {}
        self._load_all()

    def _load_all(self):
        """全マスタデータを読み込み"""
        self._load_layouts()
        self._load_retarget_maps()

    def _load_layouts(self):
        """レイアウトを読み込み（ファイル名とレイアウト名は一致させる）"""
        if not self.layouts_dir.exists():
            return
        for path in sorted(self.layouts_dir.glob('*.json')):
            layout = load_layout(path)
            if layout.name != path.stem:
                raise FormatError(f'{path}: レイアウト名 {layout.name} がファイル名と一致しません')
            self._layouts[layout.name] = layout
        logger.debug('同梱レイアウト: %s', ', '.join(self._layouts))

    def _load_retarget_maps(self):
        """リターゲットマップを読み込み、同梱レイアウトとの整合性を確認"""
        if not self.maps_dir.exists():
            return
        for path in sorted(self.maps_dir.glob('*.json')):
            rmap = load_retarget_map(path)
            source = self._layouts.get(rmap.source_layout_name)
            target = self._layouts.get(rmap.target_layout_name)
            if source is not None and target is not None:
                rmap.check_layouts(source, target)
            self._maps[path.stem] = rmap

    # ====== レイアウト ======

    def get_layouts(self) -> List[Dict]:
        """レイアウト一覧（名前・点数・アンカー種別）"""
        return [
            {
                'name': layout.name,
                'n_points': layout.n_points,
                'anchor_mode': layout.anchor_mode,
                'frame_rate': layout.frame_rate,
            }
            for layout in self._layouts.values()
        ]

    def get_layout(self, name: str) -> PointLayout:
        layout = self._layouts.get(name)
        if layout is None:
            raise LayoutError(f'同梱レイアウト {name} がありません（{", ".join(self._layouts) or "なし"}）')
        return layout

    def resolve_layout(self, ref: str) -> PointLayout:
        """
        レイアウト参照を解決
        拡張子 .json ならファイルパス（無ければ FileNotFoundError）、それ以外は同梱レイアウト名
        """
        if Path(ref).suffix == '.json':
            return load_layout(Path(ref))
        return self.get_layout(ref)

    # ====== リターゲットマップ ======

    def get_retarget_maps(self) -> List[Dict]:
        return [
            {
                'name': name,
                'source': rmap.source_layout_name,
                'target': rmap.target_layout_name,
                'n_rules': len(rmap.rules),
            }
            for name, rmap in self._maps.items()
        ]

    def get_retarget_map(self, name: str) -> RetargetMap:
        rmap = self._maps.get(name)
        if rmap is None:
            raise LayoutError(f'同梱リターゲットマップ {name} がありません（{", ".join(self._maps) or "なし"}）')
        return rmap

    def find_retarget_map(self, source: str, target: str) -> Optional[RetargetMap]:
        """ソース・ターゲットのレイアウト名でマップを検索"""
        for rmap in self._maps.values():
            if rmap.source_layout_name == source and rmap.target_layout_name == target:
                return rmap
        return None

    def resolve_retarget_map(self, ref: str) -> RetargetMap:
        if Path(ref).suffix == '.json':
            return load_retarget_map(Path(ref))
        return self.get_retarget_map(ref)

    def export_layout(self, name: str) -> str:
        """レイアウトJSON文字列（APIのダウンロード用）"""
        return json.dumps(self.get_layout(name).to_dict(), ensure_ascii=False, indent=2)
