"""
例外定義
CLI・APIで機械判読できるエラーコードを持つ
"""


class PoseAlignError(ValueError):
    """全サービス共通の基底例外"""
    code = 'E_POSEALIGN'

    def line(self) -> str:
        """1行形式（'<CODE>: <message>'）"""
        return f'{self.code}: {self}'


class FormatError(PoseAlignError):
    """ファイル・レコードの形式不正"""
    code = 'E_FORMAT'


class NonFiniteError(PoseAlignError):
    """NaN・無限大を含む座標"""
    code = 'E_NONFINITE'


class LayoutError(PoseAlignError):
    """ポイントレイアウトの不変条件違反（アンカー含む）"""
    code = 'E_LAYOUT'


class ShapeError(PoseAlignError):
    """配列形状・ポイント数の不一致"""
    code = 'E_SHAPE'


class DegeneratePoseError(PoseAlignError):
    """左右骨盤ベクトルが潰れていて向きを決められない"""
    code = 'E_DEGENERATE'


class ZeroNormError(PoseAlignError):
    """ノルム0の埋め込みベクトル"""
    code = 'E_ZERONORM'


class DataError(PoseAlignError):
    """処理に必要なデータが足りない・範囲外"""
    code = 'E_DATA'


class ConfigError(PoseAlignError):
    """設定値の不正・未知のキー"""
    code = 'E_CONFIG'


class VersionError(PoseAlignError):
    """モデルファイルのバージョン不一致"""
    code = 'E_VERSION'
