"""
設定管理モジュール
"""
import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

# ベースディレクトリ
BASE_DIR = Path(__file__).resolve().parent.parent

# ファイルパス
MASTER_DATA_DIR = Path(os.getenv('POSEALIGN_MASTER_DATA_DIR', str(BASE_DIR / 'master_data')))
UPLOAD_DIR = Path(os.getenv('POSEALIGN_UPLOAD_DIR', str(BASE_DIR / 'uploads')))
OUTPUT_DIR = Path(os.getenv('POSEALIGN_OUTPUT_DIR', str(BASE_DIR / 'output')))

# APIで使うモデル（未設定ならalign系エンドポイントは無効）
MODEL_PATH = os.getenv('POSEALIGN_MODEL_PATH', '')

# ログ
LOG_LEVEL = os.getenv('POSEALIGN_LOG_LEVEL', 'INFO')

# 並列処理（--threads 未指定時の既定値）
THREADS = int(os.getenv('POSEALIGN_THREADS', '1'))

# 時間窓
WINDOW_LENGTH_SECONDS = 3.0
WINDOW_SAMPLE_RATE = 25.0
WINDOW_STRIDE_SECONDS = 0.5

# エンコーダ（75フレーム窓用の既定値）
ENCODER_DEFAULTS = {
    'c1': 32,
    'k1_t': 5,
    's1_t': 3,
    'c2': 64,
    'k2_t': 5,
    's2_t': 2,
    'embed_dim': 256,
}
# 短い窓（15フレーム前後）では時間方向ストライドを1にする
SHORT_WINDOW_FRAMES = 30

# 学習
BATCH_SIZE = 128
LEARNING_RATE = 0.01
MOMENTUM = 0.9
EPOCHS_PHASE1 = 15
EPOCHS_PHASE2 = 30
HADSELL_MARGIN = 1.0
# Hadsell損失では勾配の全体ノルムをこの値で打ち切る（TrainConfig.grad_clip 未指定時）
HADSELL_GRAD_CLIP = 1.0

# 出力
MODEL_FORMAT_VERSION = 1
FLOAT_FORMAT = '.9g'


# Flaskアプリ設定
class Config:
    SECRET_KEY = os.getenv('SECRET_KEY', 'dev-secret-key')
    MAX_CONTENT_LENGTH = 200 * 1024 * 1024  # 200MB（長時間のモーキャプCSV対応）
    UPLOAD_EXTENSIONS = ['.csv', '.json']
    MASTER_DATA_DIR = MASTER_DATA_DIR
    UPLOAD_DIR = UPLOAD_DIR
    OUTPUT_DIR = OUTPUT_DIR
    MODEL_PATH = MODEL_PATH
