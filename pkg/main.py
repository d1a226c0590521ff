"""
ポーズ系列整列システム
Flask APIサーバー
"""
import logging
import uuid
from pathlib import Path
from typing import Dict, Optional

from flask import Flask, Response, request, jsonify, send_file
from werkzeug.utils import secure_filename

from config.settings import Config, LOG_LEVEL
from services import encoder_service
from services.alignment_service import AlignOptions, align_pair, load_keyposes, transfer_keyposes
from services.csv_service import CsvService
from services.errors import PoseAlignError
from services.master_service import MasterService
from services.normalize_service import WindowSpec
from services.pose_io_service import load_frames_csv, retarget, write_sequence_csv

app = Flask(__name__)
app.config.from_object(Config)

logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.INFO))
logger = logging.getLogger(__name__)

# モデルはパスごとに1回だけ読み込む
_models: Dict[str, encoder_service.EncoderParams] = {}


def master_service() -> MasterService:
    return MasterService(Path(app.config['MASTER_DATA_DIR']))


def csv_service() -> CsvService:
    return CsvService(Path(app.config['OUTPUT_DIR']))


def current_model() -> Optional[encoder_service.EncoderParams]:
    """POSEALIGN_MODEL_PATH のモデル（未設定ならNone）"""
    model_path = app.config.get('MODEL_PATH')
    if not model_path:
        return None
    key = str(model_path)
    if key not in _models:
        _models[key] = encoder_service.load(Path(model_path))
    return _models[key]


def model_window(params: encoder_service.EncoderParams) -> WindowSpec:
    """モデルに保存された学習時の窓（古いモデルは既定の窓）"""
    return params.window if params.window is not None else WindowSpec()


def allowed_file(filename: str) -> bool:
    """許可されたファイル形式かチェック"""
    return '.' in filename and \
           ('.' + filename.rsplit('.', 1)[1].lower()) in app.config.get('UPLOAD_EXTENSIONS', [])


def error_response(e: PoseAlignError):
    return jsonify({'error': str(e), 'code': e.code}), 400


def save_upload(field: str) -> Path:
    """アップロードファイルを保存してパスを返す（欠落時はValueError）"""
    if field not in request.files:
        raise ValueError(f'ファイル {field} が指定されていません')
    file = request.files[field]
    if file.filename == '':
        raise ValueError(f'ファイル {field} が選択されていません')
    if not allowed_file(file.filename):
        raise ValueError(f'許可されていないファイル形式です: {file.filename}')

    upload_dir = Path(app.config['UPLOAD_DIR'])
    upload_dir.mkdir(parents=True, exist_ok=True)
    filepath = upload_dir / f"{uuid.uuid4()}_{secure_filename(file.filename)}"
    file.save(str(filepath))
    return filepath


def form_float(name: str) -> Optional[float]:
    value = request.form.get(name)
    if value is None or value == '':
        return None
    try:
        return float(value)
    except ValueError:
        raise ValueError(f'{name} は数値で指定してください: {value}') from None


def form_flag(name: str) -> bool:
    return request.form.get(name, '').lower() in ('1', 'true', 'yes', 'on')


def align_options_from_form() -> AlignOptions:
    return AlignOptions(
        flip_lr=form_flag('flip_lr'),
        ltw_gamma=form_float('ltw_gamma'),
        ltw_auto=form_flag('ltw_auto'),
        metric=request.form.get('metric', 'cosine'),
    )


def load_upload_sequence(field: str, layout_field: str = 'layout'):
    layout_ref = request.form.get(layout_field) or request.form.get('layout')
    if not layout_ref:
        raise ValueError(f'{layout_field} が指定されていません')
    layout = master_service().get_layout(layout_ref)
    path = save_upload(field)
    return load_frames_csv(path, layout, frame_rate=form_float('frame_rate'), name=Path(request.files[field].filename).stem)


@app.route('/api/health', methods=['GET'])
def health_check():
    """ヘルスチェック"""
    return jsonify({
        'status': 'ok',
        'model_configured': bool(app.config.get('MODEL_PATH')),
    })


# ====== マスタデータ ======

@app.route('/api/master/layouts', methods=['GET'])
def get_layouts():
    """同梱レイアウト一覧"""
    return jsonify({'layouts': master_service().get_layouts()})


@app.route('/api/master/layouts/<name>', methods=['GET'])
def get_layout(name):
    """同梱レイアウトの詳細"""
    try:
        return jsonify(master_service().get_layout(name).to_dict())
    except PoseAlignError as e:
        return jsonify({'error': str(e), 'code': e.code}), 404


@app.route('/api/master/layouts/<name>/export', methods=['GET'])
def export_layout(name):
    """同梱レイアウトをJSONファイルとしてダウンロード"""
    try:
        body = master_service().export_layout(name)
    except PoseAlignError as e:
        return jsonify({'error': str(e), 'code': e.code}), 404
    return Response(
        body,
        mimetype='application/json',
        headers={'Content-Disposition': f'attachment; filename={name}.json'},
    )


@app.route('/api/master/retarget-maps', methods=['GET'])
def get_retarget_maps():
    """同梱リターゲットマップ一覧"""
    return jsonify({'retarget_maps': master_service().get_retarget_maps()})


# ====== 整列 ======

@app.route('/api/align', methods=['POST'])
def align():
    """2系列を整列してサマリーとパスCSVを返す"""
    try:
        params = current_model()
        if params is None:
            return jsonify({'error': 'モデルが設定されていません（POSEALIGN_MODEL_PATH）'}), 503

        seq_a = load_upload_sequence('seq_a')
        seq_b = load_upload_sequence('seq_b', 'layout_b')
        result = align_pair(params, seq_a, seq_b, model_window(params), align_options_from_form())

        path_file = f'path_{uuid.uuid4().hex}.csv'
        csv_service().write_path(result, path_file)
        return jsonify({
            'success': True,
            'summary': result.summary(),
            'path_file': path_file,
        })
    except PoseAlignError as e:
        return error_response(e)
    except ValueError as e:
        return jsonify({'error': str(e)}), 400
    except Exception as e:
        logger.exception('整列に失敗しました')
        return jsonify({'error': f'整列に失敗しました: {str(e)}'}), 500


@app.route('/api/transfer', methods=['POST'])
def transfer():
    """参照系列のキーポーズを対象系列へ転写"""
    try:
        params = current_model()
        if params is None:
            return jsonify({'error': 'モデルが設定されていません（POSEALIGN_MODEL_PATH）'}), 503

        reference = load_upload_sequence('reference')
        target = load_upload_sequence('target', 'layout_b')
        labels = load_keyposes(save_upload('keyposes'))

        result = align_pair(params, reference, target, model_window(params), align_options_from_form())
        transferred = transfer_keyposes(result.path, labels, result.cost.row_times, result.cost.col_times)

        keypose_file = f'keyposes_{uuid.uuid4().hex}.csv'
        service = csv_service()
        service.write_keyposes(transferred, keypose_file)
        return jsonify({
            'success': True,
            'keyposes': [{'label': label, 'time': t} for label, t in transferred.entries],
            'keypose_file': keypose_file,
            'keypose_csv': service.keyposes_csv_string(transferred),
            'flipped': result.flipped,
            'mean_cost': result.mean_cost,
        })
    except PoseAlignError as e:
        return error_response(e)
    except ValueError as e:
        return jsonify({'error': str(e)}), 400
    except Exception as e:
        logger.exception('転写に失敗しました')
        return jsonify({'error': f'転写に失敗しました: {str(e)}'}), 500


@app.route('/api/retarget', methods=['POST'])
def retarget_sequence():
    """アップロード系列を同梱マップでリターゲット"""
    try:
        map_name = request.form.get('map')
        target_name = request.form.get('target_layout')
        if not map_name and not target_name:
            return jsonify({'error': 'map または target_layout が指定されていません'}), 400

        master = master_service()
        seq = load_upload_sequence('frames')
        if map_name:
            rmap = master.get_retarget_map(map_name)
            target = master.get_layout(target_name or rmap.target_layout_name)
        else:
            target = master.get_layout(target_name)
            rmap = master.find_retarget_map(seq.layout.name, target.name)
            if rmap is None:
                return jsonify({
                    'error': f'{seq.layout.name} → {target.name} の同梱リターゲットマップがありません',
                    'code': 'E_LAYOUT',
                }), 400

        out_file = f'retarget_{uuid.uuid4().hex}.csv'
        write_sequence_csv(retarget(seq, rmap, target), Path(app.config['OUTPUT_DIR']) / out_file)
        return jsonify({
            'success': True,
            'file': out_file,
            'layout': target.name,
            'n_frames': seq.n_frames,
        })
    except PoseAlignError as e:
        return error_response(e)
    except ValueError as e:
        return jsonify({'error': str(e)}), 400
    except Exception as e:
        logger.exception('リターゲットに失敗しました')
        return jsonify({'error': f'リターゲットに失敗しました: {str(e)}'}), 500


@app.route('/api/download/<filename>', methods=['GET'])
def download(filename):
    """出力ファイルをダウンロード"""
    filepath = Path(app.config['OUTPUT_DIR']) / secure_filename(filename)
    if not filepath.exists():
        return jsonify({'error': 'ファイルが見つかりません'}), 404

    return send_file(
        filepath,
        as_attachment=True,
        download_name=filepath.name,
        mimetype='application/json' if filepath.suffix == '.json' else 'text/csv'
    )


if __name__ == '__main__':
    app.run(debug=True, port=5000)
