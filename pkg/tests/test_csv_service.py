import json

import numpy as np

from services.alignment_service import AlignmentPath, AlignmentResult, CostMatrix, EmbeddedSequence, KeyposeLabels
from services.csv_service import CsvService, format_float
from services.evaluation_service import AccuracyCurve, TauReport
from services.training_service import HarvestRow


def small_result():
    values = np.array([[0.0, 0.25], [0.5, 1.0 / 3.0]])
    cost = CostMatrix(values, [0.0, 0.5], [0.0, 0.5])
    path = AlignmentPath(((0, 0), (1, 1)), [0.0, 1.0 / 3.0])
    return AlignmentResult(path=path, mean_cost=path.mean_cost, flipped=False, cost=cost)


def test_format_float_uses_nine_digits():
    assert format_float(1.0 / 3.0) == '0.333333333'
    assert format_float(2.0) == '2'
    assert format_float(1.5e-12) == '1.5e-12'


def test_loss_history_csv(tmp_path):
    path = CsvService(tmp_path).write_loss_history([(1, 0.5), (2, 0.25)], 'loss.csv')
    assert path.read_bytes() == b'epoch,mean_loss\n1,0.5\n2,0.25\n'


def test_harvest_csv(tmp_path):
    rows = [HarvestRow('a', 0.0, 'b', 0.5, 0.125)]
    path = CsvService(tmp_path).write_harvest(rows)
    assert path.read_text(encoding='utf-8') == 'seq_a,t_a,seq_b,t_b,cost\na,0,b,0.5,0.125\n'


def test_path_csv(tmp_path):
    path = CsvService(tmp_path).write_path(small_result())
    text = path.read_text(encoding='utf-8')
    assert text.splitlines() == ['i,j,cost,row_time,col_time', '0,0,0,0,0', '1,1,0.333333333,0.5,0.5']


def test_summary_json_is_sorted_and_rounded(tmp_path):
    service = CsvService(tmp_path)
    path = service.write_summary(small_result().summary())
    data = json.loads(path.read_text(encoding='utf-8'))
    assert data['mean_cost'] == 0.166666667
    assert data['flipped'] is False
    assert data['path_length'] == 2
    assert list(data) == sorted(data)


def test_summary_replaces_non_finite(tmp_path):
    assert json.loads(CsvService(tmp_path).summary_string({'tau': float('nan')})) == {'tau': None}


def test_keyposes_round_trip_text(tmp_path):
    service = CsvService(tmp_path)
    labels = KeyposeLabels((('start', 0.5), ('end', 12.25)))
    path = service.write_keyposes(labels, 'kp.csv')
    assert path.read_text(encoding='utf-8') == 'label,time_seconds\nstart,0.5\nend,12.25\n'
    assert service.keyposes_csv_string(labels) == path.read_text(encoding='utf-8')


def test_tau_accuracy_and_costs(tmp_path):
    service = CsvService(tmp_path)
    tau = service.write_tau(TauReport(per_pair=(('a', 'b', 0.75),)))
    assert tau.read_text(encoding='utf-8') == 'seq_a,seq_b,tau\na,b,0.75\n'
    accuracy = service.write_accuracy(AccuracyCurve((0.5, 1.0), (0.5, 1.0)))
    assert accuracy.read_text(encoding='utf-8') == 'threshold,fraction\n0.5,0.5\n1,1\n'
    costs = service.write_costs([('ref', 0.0), ('other', 0.1)])
    assert costs.read_text(encoding='utf-8') == 'name,mean_cost\nref,0\nother,0.1\n'


def test_embeddings_csv(tmp_path):
    emb = EmbeddedSequence('take', np.array([[1.0, -2.0], [0.5, 0.0]]), np.array([0.0, 0.5]))
    path = CsvService(tmp_path).write_embeddings(emb)
    assert path.name == 'take_embeddings.csv'
    assert path.read_text(encoding='utf-8') == 'time,e0,e1\n0,1,-2\n0.5,0.5,0\n'


def test_absolute_filename_is_kept(tmp_path):
    target = tmp_path / 'elsewhere' / 'loss.csv'
    path = CsvService(tmp_path / 'out').write_loss_history([(1, 1.0)], target)
    assert path == target
    assert target.exists()
