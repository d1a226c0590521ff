"""
posealign コマンドライン
学習・埋め込み・整列・収穫・キーポーズ転写・Tau評価・リターゲット・リサンプル・合成データ・コスト一覧
"""
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click

from config.run_config import RunConfig
from config.settings import LOG_LEVEL, MASTER_DATA_DIR, OUTPUT_DIR
from services import encoder_service
from services.alignment_service import (
    align_pair, embed_sequence, linear_transfer, load_keyposes, transfer_keyposes
)
from services.csv_service import CsvService
from services.errors import ConfigError, DataError, PoseAlignError
from services.evaluation_service import all_pairs_cost, compare_losses, corpus_tau, keypose_accuracy
from services.master_service import MasterService
from services.normalize_service import WindowSpec
from services.pose_io_service import (
    CorpusEntry, PoseSequence, load_corpus, load_frames_csv, resample, retarget, write_sequence_csv
)
from services.synthetic_service import SyntheticConfig, generate_corpus, write_corpus
from services.training_service import harvest_pairs, train_phase1, train_phase2

logger = logging.getLogger('posealign')


class PoseAlignGroup(click.Group):
    """エラーを '<CODE>: <message>' の1行で標準エラーに出し、終了コード2で終わる"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except PoseAlignError as e:
            click.echo(e.line(), err=True)
            ctx.exit(2)
        except FileNotFoundError as e:
            click.echo(f'E_IO: {e.filename or (e.args[0] if e.args else e)}', err=True)
            ctx.exit(2)


def _master() -> MasterService:
    return MasterService(MASTER_DATA_DIR)


def _parse_floats(text: Optional[str]) -> List[float]:
    if not text:
        return []
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f'数値のカンマ区切りで指定してください: {text}') from None


# ====== 共通オプション ======

def config_options(func):
    """設定ファイル・seed・並列数・窓の設定"""
    options = [
        click.option('--config', 'config_path', default=None, help='RunConfig JSON'),
        click.option('--seed', type=int, default=None, help='乱数seed'),
        click.option('--threads', type=int, default=None, envvar='POSEALIGN_THREADS', help='並列数'),
        click.option('--window-length', type=float, default=None, help='窓長（秒）'),
        click.option('--sample-rate', type=float, default=None, help='窓のサンプリングレート'),
        click.option('--stride', type=float, default=None, help='窓の切り出し間隔（秒）'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def sequence_options(func):
    """系列入力（マニフェスト、またはレイアウト＋フレームCSV）"""
    options = [
        click.option('--manifest', default=None, help='コーパスのマニフェストJSON'),
        click.option('--layout', default=None, help='レイアウトJSONのパスまたは同梱レイアウト名'),
        click.option('--frame-rate', type=float, default=None, help='フレームCSVのフレームレート'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def align_options(func):
    options = [
        click.option('--flip-lr', is_flag=True, help='左右反転した系列とも整列して良い方を採用'),
        click.option('--ltw-gamma', type=float, default=None, help='LTW事前分布の強さ'),
        click.option('--ltw-auto', is_flag=True, help='LTW事前分布の強さをコスト平均の半分にする'),
        click.option('--metric', type=click.Choice(['cosine', 'euclidean']), default=None),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _run_config(config_path, seed=None, threads=None, window_length=None, sample_rate=None,
                stride=None, **sections) -> RunConfig:
    rc = RunConfig.load(Path(config_path) if config_path else None)
    rc = rc.merged(seed=seed, threads=threads)
    rc = rc.merged('window', length_seconds=window_length, sample_rate=sample_rate, stride_seconds=stride)
    for section, flags in sections.items():
        rc = rc.merged(section, **flags)
    return rc


def _model_window(rc: RunConfig, params: encoder_service.EncoderParams) -> WindowSpec:
    """窓設定が設定JSON・フラグに無ければ、モデルに保存された学習時の窓を使う"""
    if not rc.window and params.window is not None:
        return params.window
    return rc.window_spec()


def _load_entries(master: MasterService, manifest: Optional[str], layout: Optional[str],
                  frames: Sequence[str], frame_rate: Optional[float]) -> List[CorpusEntry]:
    if manifest:
        if frames:
            raise ConfigError('--manifest とフレームCSVは同時に指定できません')
        return load_corpus(Path(manifest), layout_resolver=master.resolve_layout)
    if not frames:
        raise ConfigError('--manifest またはフレームCSVを指定してください')
    if not layout:
        raise ConfigError('フレームCSVには --layout が必要です')
    point_layout = master.resolve_layout(layout)
    return [CorpusEntry(load_frames_csv(Path(f), point_layout, frame_rate=frame_rate)) for f in frames]


def _load_one(master: MasterService, layout: str, frames: str, frame_rate: Optional[float]) -> PoseSequence:
    return _load_entries(master, None, layout, [frames], frame_rate)[0].sequence


@click.group(cls=PoseAlignGroup)
@click.option('--log-level', default=LOG_LEVEL, envvar='POSEALIGN_LOG_LEVEL',
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
def cli(log_level):
    """3Dポーズ系列の対照学習エンコーダとDTW整列"""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
        force=True,
    )


# ====== train ======

@cli.command()
@config_options
@sequence_options
@click.argument('frames', nargs=-1)
@click.option('--phase', type=click.Choice(['1', '2', 'both']), default='both')
@click.option('--init-model', default=None, help='Phase 2 の開始モデル（--phase 2 のとき必須）')
@click.option('--out-dir', default=str(OUTPUT_DIR), help='出力ディレクトリ')
@click.option('--epochs1', type=int, default=None)
@click.option('--epochs2', type=int, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--lr', type=float, default=None)
@click.option('--momentum', type=float, default=None)
@click.option('--two-augmented', is_flag=True, help='拡張した窓同士をペアにする')
@click.option('--max-pairs', type=int, default=None, help='収穫ペア数の上限')
@click.option('--loss', 'loss_kind', type=click.Choice(['cosine_contrastive', 'hadsell_margin']), default=None)
@click.option('--grad-clip', type=float, default=None, help='勾配ノルムの上限')
@click.option('--margin', type=float, default=None)
def train(config_path, seed, threads, window_length, sample_rate, stride, manifest, layout, frame_rate,
          frames, phase, init_model, out_dir, epochs1, epochs2, batch_size, lr, momentum, two_augmented,
          max_pairs, grad_clip, loss_kind, margin):
    """エンコーダを学習（Phase 1 / Phase 2 / 両方）"""
    rc = _run_config(
        config_path, seed, threads, window_length, sample_rate, stride,
        train=dict(epochs_phase1=epochs1, epochs_phase2=epochs2, batch_size=batch_size, lr=lr,
                   momentum=momentum, two_augmented=two_augmented or None, max_pairs=max_pairs,
                   grad_clip=grad_clip),
        loss=dict(kind=loss_kind, margin=margin),
    )
    spec = rc.window_spec()
    train_config = rc.train_config()
    loss_config = rc.loss_config()
    sequences = [e.sequence for e in _load_entries(_master(), manifest, layout, frames, frame_rate)]
    csv_service = CsvService(Path(out_dir))

    if phase in ('1', 'both'):
        params = encoder_service.init(rc.encoder_config(spec, sequences[0].layout.n_points))
        result = train_phase1(params, sequences, spec, train_config, loss_config)
        csv_service.write_loss_history(result.loss_history, 'loss_phase1.csv')
        params = result.params
    else:
        if not init_model:
            raise ConfigError('--phase 2 には --init-model が必要です')
        params = encoder_service.load(Path(init_model))
        spec = _model_window(rc, params)

    if phase in ('2', 'both'):
        harvest = harvest_pairs(params, sequences, spec, metric=loss_config.metric,
                                threads=rc.threads, max_pairs=train_config.max_pairs)
        csv_service.write_harvest(harvest.rows)
        result = train_phase2(params, sequences, harvest.pairs, spec, train_config, loss_config)
        csv_service.write_loss_history(result.loss_history, 'loss_phase2.csv')
        params = result.params

    model_path = encoder_service.save(params.with_window(spec), csv_service.output_dir / 'model.json')
    csv_service.write_summary(rc.to_dict(), 'run_config.json')
    logger.info('モデルを保存しました: %s', model_path)
    click.echo(str(model_path))


# ====== embed ======

@cli.command()
@config_options
@sequence_options
@click.argument('frames', nargs=-1)
@click.option('--model', 'model_path', required=True)
@click.option('--out-dir', default=str(OUTPUT_DIR))
def embed(config_path, seed, threads, window_length, sample_rate, stride, manifest, layout, frame_rate,
          frames, model_path, out_dir):
    """等間隔の窓の埋め込みをCSVに書き出す"""
    rc = _run_config(config_path, seed, threads, window_length, sample_rate, stride)
    params = encoder_service.load(Path(model_path))
    spec = _model_window(rc, params)
    csv_service = CsvService(Path(out_dir))
    for entry in _load_entries(_master(), manifest, layout, frames, frame_rate):
        emb = embed_sequence(params, entry.sequence, spec)
        click.echo(str(csv_service.write_embeddings(emb)))


# ====== align ======

@cli.command()
@config_options
@align_options
@click.argument('seq_a')
@click.argument('seq_b')
@click.option('--model', 'model_path', required=True)
@click.option('--layout', required=True, help='系列Aのレイアウト')
@click.option('--layout-b', default=None, help='系列Bのレイアウト（省略時は --layout）')
@click.option('--frame-rate', type=float, default=None)
@click.option('--out-dir', default=str(OUTPUT_DIR))
def align(config_path, seed, threads, window_length, sample_rate, stride, flip_lr, ltw_gamma, ltw_auto,
          metric, seq_a, seq_b, model_path, layout, layout_b, frame_rate, out_dir):
    """2系列を整列して path.csv と summary.json を書き出す"""
    rc = _run_config(config_path, seed, threads, window_length, sample_rate, stride,
                     align=dict(flip_lr=flip_lr or None, ltw_gamma=ltw_gamma, ltw_auto=ltw_auto or None, metric=metric))
    master = _master()
    params = encoder_service.load(Path(model_path))
    a = _load_one(master, layout, seq_a, frame_rate)
    b = _load_one(master, layout_b or layout, seq_b, frame_rate)

    result = align_pair(params, a, b, _model_window(rc, params), rc.align_options())
    csv_service = CsvService(Path(out_dir))
    csv_service.write_path(result)
    summary_path = csv_service.write_summary(result.summary())
    click.echo(str(summary_path))


# ====== harvest ======

@cli.command()
@config_options
@sequence_options
@click.argument('frames', nargs=-1)
@click.option('--model', 'model_path', required=True)
@click.option('--metric', type=click.Choice(['cosine', 'euclidean']), default='cosine')
@click.option('--max-pairs', type=int, default=None)
@click.option('--out', 'out_path', default=str(OUTPUT_DIR / 'harvest.csv'))
def harvest(config_path, seed, threads, window_length, sample_rate, stride, manifest, layout, frame_rate,
            frames, model_path, metric, max_pairs, out_path):
    """全系列ペアをDTW整列し、収穫ペアをCSVにダンプ"""
    rc = _run_config(config_path, seed, threads, window_length, sample_rate, stride,
                     train=dict(max_pairs=max_pairs))
    params = encoder_service.load(Path(model_path))
    sequences = [e.sequence for e in _load_entries(_master(), manifest, layout, frames, frame_rate)]
    result = harvest_pairs(params, sequences, _model_window(rc, params), metric=metric,
                           threads=rc.threads, max_pairs=rc.train_config().max_pairs)
    out_path = Path(out_path)
    click.echo(str(CsvService(out_path.parent).write_harvest(result.rows, out_path.name)))


# ====== transfer ======

@cli.command()
@config_options
@align_options
@click.argument('reference')
@click.argument('target')
@click.option('--model', 'model_path', default=None, help='DTW転写に使うモデル（--linear では不要）')
@click.option('--layout', required=True)
@click.option('--layout-b', default=None)
@click.option('--frame-rate', type=float, default=None)
@click.option('--keyposes', 'keyposes_path', required=True, help='参照系列のキーポーズCSV')
@click.option('--linear', is_flag=True, help='始点・終点を結ぶ直線で転写（比較用）')
@click.option('--ground-truth', default=None, help='対象系列の正解キーポーズCSV（精度曲線を出力）')
@click.option('--thresholds', default='0.5,1.0', help='精度曲線の閾値（秒、カンマ区切り）')
@click.option('--out', 'out_path', default=str(OUTPUT_DIR / 'transferred_keyposes.csv'))
def transfer(config_path, seed, threads, window_length, sample_rate, stride, flip_lr, ltw_gamma, ltw_auto,
             metric, reference, target, model_path, layout, layout_b, frame_rate, keyposes_path, linear,
             ground_truth, thresholds, out_path):
    """参照系列のキーポーズを対象系列へ転写"""
    rc = _run_config(config_path, seed, threads, window_length, sample_rate, stride,
                     align=dict(flip_lr=flip_lr or None, ltw_gamma=ltw_gamma, ltw_auto=ltw_auto or None, metric=metric))
    master = _master()
    ref = _load_one(master, layout, reference, frame_rate)
    tgt = _load_one(master, layout_b or layout, target, frame_rate)
    labels = load_keyposes(Path(keyposes_path))

    if linear:
        transferred = linear_transfer(labels, 0.0, ref.duration, 0.0, tgt.duration)
    else:
        if not model_path:
            raise ConfigError('DTW転写には --model が必要です')
        params = encoder_service.load(Path(model_path))
        result = align_pair(params, ref, tgt, _model_window(rc, params), rc.align_options())
        transferred = transfer_keyposes(result.path, labels, result.cost.row_times, result.cost.col_times)

    out_path = Path(out_path)
    csv_service = CsvService(out_path.parent)
    click.echo(str(csv_service.write_keyposes(transferred, out_path.name)))

    if ground_truth:
        curve = keypose_accuracy(transferred, load_keyposes(Path(ground_truth)), _parse_floats(thresholds))
        click.echo(str(csv_service.write_accuracy(curve, f'{out_path.stem}_accuracy.csv')))


# ====== tau ======

@cli.command()
@config_options
@click.option('--model', 'model_path', required=True)
@click.option('--manifest', required=True)
@click.option('--metric', type=click.Choice(['cosine', 'euclidean']), default='cosine')
@click.option('--asymmetric', is_flag=True, help='A→B 方向のみで計算')
@click.option('--by-action', is_flag=True, help='同じアクションの系列ペアのみ評価し、アクション平均を出す')
@click.option('--out-dir', default=str(OUTPUT_DIR))
def tau(config_path, seed, threads, window_length, sample_rate, stride, model_path, manifest, metric,
        asymmetric, by_action, out_dir):
    """コーパス内の系列ペアの Kendall's Tau"""
    rc = _run_config(config_path, seed, threads, window_length, sample_rate, stride)
    params = encoder_service.load(Path(model_path))
    entries = load_corpus(Path(manifest), layout_resolver=_master().resolve_layout)
    report = corpus_tau(
        params,
        [e.sequence for e in entries],
        _model_window(rc, params),
        actions=[e.action for e in entries] if by_action else None,
        metric=metric,
        symmetric=not asymmetric,
        threads=rc.threads,
    )
    csv_service = CsvService(Path(out_dir))
    csv_service.write_tau(report)
    click.echo(str(csv_service.write_summary(report.summary(), 'tau_summary.json')))


# ====== compare ======

@cli.command()
@config_options
@click.option('--manifest', required=True, help='学習コーパスのマニフェスト')
@click.option('--eval-manifest', required=True, help='評価コーパスのマニフェスト（学習に使わない演技）')
@click.option('--epochs1', type=int, default=None)
@click.option('--epochs2', type=int, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--max-pairs', type=int, default=None, help='収穫ペア数の上限')
@click.option('--margin', type=float, default=None, help='Hadsell損失のマージン')
@click.option('--out-dir', default=str(OUTPUT_DIR))
def compare(config_path, seed, threads, window_length, sample_rate, stride, manifest, eval_manifest,
            epochs1, epochs2, batch_size, max_pairs, margin, out_dir):
    """損失関数と距離関数の4通りの組み合わせを学習・評価して Tau を比較"""
    rc = _run_config(
        config_path, seed, threads, window_length, sample_rate, stride,
        train=dict(epochs_phase1=epochs1, epochs_phase2=epochs2, batch_size=batch_size, max_pairs=max_pairs),
        loss=dict(margin=margin),
    )
    master = _master()
    train_sequences = [e.sequence for e in load_corpus(Path(manifest), layout_resolver=master.resolve_layout)]
    eval_sequences = [e.sequence for e in load_corpus(Path(eval_manifest), layout_resolver=master.resolve_layout)]
    spec = rc.window_spec()
    comparison = compare_losses(
        train_sequences, eval_sequences, spec,
        rc.encoder_config(spec, train_sequences[0].layout.n_points),
        rc.train_config(),
        margin=rc.loss_config().margin,
        threads=rc.threads,
    )
    csv_service = CsvService(Path(out_dir))
    click.echo(str(csv_service.write_summary(comparison.summary(), 'loss_comparison.json')))


# ====== retarget ======

@cli.command(name='retarget')
@click.argument('frames')
@click.option('--map', 'map_ref', default=None,
              help='リターゲットマップJSONのパスまたは同梱マップ名（省略時はレイアウト名から同梱マップを検索）')
@click.option('--layout', required=True, help='ソースレイアウト')
@click.option('--target-layout', default=None, help='ターゲットレイアウト（省略時はマップのターゲット名で同梱から解決）')
@click.option('--frame-rate', type=float, default=None)
@click.option('--out', 'out_path', required=True)
def retarget_cmd(frames, map_ref, layout, target_layout, frame_rate, out_path):
    """別レイアウトへリターゲットしたフレームCSVを書き出す"""
    master = _master()
    seq = _load_one(master, layout, frames, frame_rate)
    if map_ref:
        rmap = master.resolve_retarget_map(map_ref)
        target = master.resolve_layout(target_layout or rmap.target_layout_name)
    else:
        if not target_layout:
            raise ConfigError('--map を省略する場合は --target-layout が必要です')
        target = master.resolve_layout(target_layout)
        rmap = master.find_retarget_map(seq.layout.name, target.name)
        if rmap is None:
            raise ConfigError(f'{seq.layout.name} → {target.name} の同梱リターゲットマップがありません')
    click.echo(str(write_sequence_csv(retarget(seq, rmap, target), Path(out_path))))


# ====== resample ======

@cli.command(name='resample')
@click.argument('frames')
@click.option('--layout', required=True)
@click.option('--frame-rate', type=float, default=None, help='入力のフレームレート')
@click.option('--rate', 'target_rate', type=float, required=True, help='出力のフレームレート')
@click.option('--out', 'out_path', required=True)
def resample_cmd(frames, layout, frame_rate, target_rate, out_path):
    """フレームレートを変換したフレームCSVを書き出す"""
    seq = _load_one(_master(), layout, frames, frame_rate)
    click.echo(str(write_sequence_csv(resample(seq, target_rate), Path(out_path))))


# ====== synth ======

@cli.command()
@click.option('--out-dir', required=True)
@click.option('--performances', type=int, default=8)
@click.option('--primitives', type=int, default=10)
@click.option('--primitive-seconds', type=float, default=2.0)
@click.option('--frame-rate', type=float, default=50.0)
@click.option('--noise', type=float, default=0.02, help='座標ノイズ（チャンネル標準偏差に対する比）')
@click.option('--truncate', type=float, default=None, help='1本目を切り詰めたコピーを加える（残す割合）')
@click.option('--seed', type=int, default=0)
def synth(out_dir, performances, primitives, primitive_seconds, frame_rate, noise, truncate, seed):
    """合成の台本付き演技コーパスとマニフェストを書き出す"""
    config = SyntheticConfig(
        n_performances=performances,
        n_primitives=primitives,
        primitive_seconds=primitive_seconds,
        frame_rate=frame_rate,
        noise_fraction=noise,
        seed=seed,
        truncate_fraction=truncate,
    )
    click.echo(str(write_corpus(generate_corpus(config), Path(out_dir))))


# ====== sweep ======

@cli.command()
@config_options
@align_options
@click.option('--model', 'model_path', required=True)
@click.option('--manifest', required=True)
@click.option('--reference', required=True, help='参照系列の名前')
@click.option('--out', 'out_path', default=str(OUTPUT_DIR / 'costs.csv'))
def sweep(config_path, seed, threads, window_length, sample_rate, stride, flip_lr, ltw_gamma, ltw_auto,
          metric, model_path, manifest, reference, out_path):
    """参照系列に対する全系列の平均整列コスト（参照自身が先頭、残りはコスト昇順）"""
    rc = _run_config(config_path, seed, threads, window_length, sample_rate, stride,
                     align=dict(flip_lr=flip_lr or None, ltw_gamma=ltw_gamma, ltw_auto=ltw_auto or None, metric=metric))
    params = encoder_service.load(Path(model_path))
    entries = load_corpus(Path(manifest), layout_resolver=_master().resolve_layout)
    names = [e.name for e in entries]
    if reference not in names:
        raise DataError(f'参照系列 {reference} がマニフェストにありません')
    costs = all_pairs_cost(params, [e.sequence for e in entries], names.index(reference),
                           _model_window(rc, params), rc.align_options(), threads=rc.threads)
    out_path = Path(out_path)
    click.echo(str(CsvService(out_path.parent).write_costs(costs, out_path.name)))


if __name__ == '__main__':
    cli()
