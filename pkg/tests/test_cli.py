import csv
import json

import numpy as np
import pytest

from cli.app import (
    parse_rank_split, parse_rank_splits, SWEEP_COLUMNS,
    EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING
)
from core.errors import ConfigError
from core.model import load_checkpoint
from core.tensor_data import read_coo
from main_cli import main


QUICK_TRAIN = [
    '--batch-size', '32', '--warmstart-epochs', '1', '--ao-max-iters', '1',
    '--max-epochs', '3', '--max-restarts', '0', '--no-log-file',
]


def synth(out, *extra):
    return main(['synth', '--shape', '6,6,6', '--r-true', '1', '--f-true', '1', '--missing', '0.5',
                 '--seed', '1', '--out', str(out), '--no-log-file', *extra])


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "synth"
    assert synth(out) == EXIT_OK
    return out


@pytest.fixture
def trained(tmp_path, synth_dir):
    run = tmp_path / "run"
    code = main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '1/1',
                 '--seed', '1', '--out', str(run), *QUICK_TRAIN])
    assert code in (EXIT_OK, EXIT_TRAINING)
    return run


class TestRankSplit:
    def test_parse(self):
        assert parse_rank_split("3/10") == (3, 10)
        assert parse_rank_split(" 20/0 ") == (20, 0)
        assert parse_rank_splits("4/16,10/10,16/4") == [(4, 16), (10, 10), (16, 4)]

    @pytest.mark.parametrize("text", ["0/0", "3", "a/b", "-1/2", "1/2/3", ""])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_rank_split(text)

    def test_empty_list(self):
        with pytest.raises(ConfigError):
            parse_rank_splits(" , ")


class TestSynth:
    def test_writes_data_and_truth(self, synth_dir):
        data = read_coo(synth_dir / 'data.coo', 3)
        assert data.shape == (6, 6, 6)
        assert data.nnz == 108
        truth = load_checkpoint(synth_dir / 'truth.ckpt.json')
        assert (truth.R, truth.F) == (1, 1)
        np.testing.assert_array_equal(truth.predict_batch(data.indices), data.values)

    def test_byte_identical_reruns(self, tmp_path, synth_dir):
        again = tmp_path / "again"
        assert synth(again) == EXIT_OK
        for name in ('data.coo', 'truth.ckpt.json'):
            assert (again / name).read_bytes() == (synth_dir / name).read_bytes()

    def test_full_missing_rejected(self, tmp_path):
        assert synth(tmp_path / "x", '--missing', '1.0') == EXIT_USAGE

    def test_seed_required(self, tmp_path):
        code = main(['synth', '--shape', '4,4', '--r-true', '1', '--f-true', '0',
                     '--out', str(tmp_path), '--no-log-file'])
        assert code == EXIT_USAGE


class TestTrain:
    def test_outputs(self, trained):
        for name in ('model.ckpt.json', 'history.csv', 'summary.json', 'split.json'):
            assert (trained / name).exists()
        summary = json.loads((trained / 'summary.json').read_text())
        assert summary['rank_split'] == '1/1'
        assert summary['shape'] == [6, 6, 6]
        assert summary['seconds'] == 0.0
        assert summary['config']['seed'] == 1
        header = (trained / 'history.csv').read_text().splitlines()[0]
        assert header == 'epoch,phase,train_loss,val_rmse,seconds'

    def test_deterministic_history(self, tmp_path, synth_dir, trained):
        again = tmp_path / "again"
        main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '1/1',
              '--seed', '1', '--out', str(again), *QUICK_TRAIN])
        for name in ('history.csv', 'summary.json', 'model.ckpt.json'):
            assert (again / name).read_bytes() == (trained / name).read_bytes()

    def test_reuse_split(self, tmp_path, synth_dir, trained):
        again = tmp_path / "again"
        main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '1/1', '--seed', '2',
              '--split', str(trained / 'split.json'), '--out', str(again), *QUICK_TRAIN])
        assert (again / 'split.json').read_bytes() == (trained / 'split.json').read_bytes()

    def test_pure_cp_run(self, tmp_path, synth_dir):
        run = tmp_path / "cp"
        main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '2/0',
              '--seed', '1', '--out', str(run), *QUICK_TRAIN])
        summary = json.loads((run / 'summary.json').read_text())
        assert summary['epochs_by_phase']['ao'] == 0
        assert load_checkpoint(run / 'model.ckpt.json').F == 0

    def test_zero_rank_split_rejected(self, tmp_path, synth_dir):
        code = main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '0/0',
                     '--seed', '1', '--out', str(tmp_path / "r"), '--no-log-file'])
        assert code == EXIT_USAGE

    def test_seed_required(self, tmp_path, synth_dir):
        code = main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '1/1',
                     '--out', str(tmp_path / "r"), '--no-log-file'])
        assert code == EXIT_USAGE

    def test_invalid_hyperparameter(self, tmp_path, synth_dir):
        code = main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '1/1',
                     '--seed', '1', '--lr', '-0.1', '--out', str(tmp_path / "r"), '--no-log-file'])
        assert code == EXIT_USAGE

    def test_missing_data_file(self, tmp_path):
        code = main(['train', '--data', str(tmp_path / "nope.coo"), '--rank-split', '1/1',
                     '--seed', '1', '--out', str(tmp_path / "r"), '--no-log-file'])
        assert code == EXIT_DATA

    def test_config_file(self, tmp_path, synth_dir):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({'max-epochs': 2, 'max-restarts': 0, 'warmstart-epochs': 1,
                                      'ao-max-iters': 1, 'batch-size': 32, 'seed': 4}))
        run = tmp_path / "cfg"
        main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '1/1',
              '--config', str(config), '--out', str(run), '--no-log-file'])
        summary = json.loads((run / 'summary.json').read_text())
        assert summary['config']['max_epochs'] == 2
        assert summary['config']['seed'] == 4

    def test_log_file(self, tmp_path, synth_dir):
        logs = tmp_path / "logs"
        main(['train', '--data', str(synth_dir / 'data.coo'), '--rank-split', '1/0', '--seed', '1',
              '--out', str(tmp_path / "r"), '--log-dir', str(logs), '--max-epochs', '1',
              '--max-restarts', '0', '--warmstart-epochs', '1'])
        files = list(logs.glob("train_*.log"))
        assert len(files) == 1


class TestImpute:
    def test_values_match_model(self, tmp_path, trained):
        queries = tmp_path / "queries.txt"
        queries.write_text("0,0,0\n# comment\n5,4,3,9.5\n")
        out = tmp_path / "values.txt"
        code = main(['impute', '--model', str(trained / 'model.ckpt.json'), '--queries', str(queries),
                     '--out', str(out), '--no-log-file'])
        assert code == EXIT_OK
        lines = out.read_text().splitlines()
        expected = load_checkpoint(trained / 'model.ckpt.json').predict_batch(np.array([[0, 0, 0], [5, 4, 3]]))
        assert [l.rsplit(',', 1)[0] for l in lines] == ['0,0,0', '5,4,3']
        assert [float(l.rsplit(',', 1)[1]) for l in lines] == list(expected)

    def test_stdout_and_one_based(self, tmp_path, trained, capsys):
        queries = tmp_path / "queries.txt"
        queries.write_text("1,1,1\n6,6,6\n")
        capsys.readouterr()
        code = main(['impute', '--model', str(trained / 'model.ckpt.json'), '--queries', str(queries),
                     '--one-based', '--no-log-file'])
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert [l.rsplit(',', 1)[0] for l in lines] == ['1,1,1', '6,6,6']

    def test_empty_query_file(self, tmp_path, trained):
        queries = tmp_path / "queries.txt"
        queries.write_text("")
        out = tmp_path / "values.txt"
        code = main(['impute', '--model', str(trained / 'model.ckpt.json'), '--queries', str(queries),
                     '--out', str(out), '--no-log-file'])
        assert code == EXIT_OK
        assert out.read_text() == ""

    def test_out_of_bounds(self, tmp_path, trained):
        queries = tmp_path / "queries.txt"
        queries.write_text("0,0,0\n6,0,0\n")
        out = tmp_path / "values.txt"
        code = main(['impute', '--model', str(trained / 'model.ckpt.json'), '--queries', str(queries),
                     '--out', str(out), '--no-log-file'])
        assert code == EXIT_DATA
        assert not out.exists()


class TestEval:
    def test_self_alignment(self, tmp_path, synth_dir):
        out = tmp_path / "eval.json"
        truth = str(synth_dir / 'truth.ckpt.json')
        code = main(['eval', '--model', truth, '--data', str(synth_dir / 'data.coo'),
                     '--align', truth, '--out', str(out), '--no-log-file'])
        assert code == EXIT_OK
        result = json.loads(out.read_text())
        assert result['metrics']['rmse'] == 0.0
        assert result['metrics']['rfe'] == 0.0
        assert result['alignment']['permutation'] == [0]
        assert result['alignment']['congruences'] == pytest.approx([1.0])

    def test_zero_norm_eval_set(self, tmp_path, synth_dir):
        data = tmp_path / "zeros.coo"
        data.write_text("# shape: 6,6,6\n0,0,0,0.0\n1,2,3,0.0\n")
        out = tmp_path / "eval.json"
        code = main(['eval', '--model', str(synth_dir / 'truth.ckpt.json'), '--data', str(data),
                     '--out', str(out), '--no-log-file'])
        assert code == EXIT_OK
        metrics = json.loads(out.read_text())['metrics']
        assert metrics['rfe'] is None
        assert "undefined" in metrics['rfe_error']
        assert metrics['n_entries'] == 2

    def test_shape_mismatch(self, tmp_path, synth_dir):
        data = tmp_path / "other.coo"
        data.write_text("# shape: 5,5,5\n0,0,0,1.0\n")
        code = main(['eval', '--model', str(synth_dir / 'truth.ckpt.json'), '--data', str(data),
                     '--no-log-file'])
        assert code == EXIT_DATA

    def test_index_outside_model(self, tmp_path, synth_dir):
        data = tmp_path / "other.coo"
        data.write_text("0,0,0,1.0\n7,0,0,1.0\n")
        code = main(['eval', '--model', str(synth_dir / 'truth.ckpt.json'), '--data', str(data),
                     '--no-log-file'])
        assert code == EXIT_DATA


class TestSweep:
    def test_empty_splits_rejected(self, tmp_path, synth_dir):
        code = main(['sweep', '--data', str(synth_dir / 'data.coo'), '--splits', '', '--seed', '1',
                     '--no-log-file'])
        assert code == EXIT_USAGE

    def test_grid(self, tmp_path, synth_dir):
        out = tmp_path / "sweep.csv"
        code = main(['sweep', '--data', str(synth_dir / 'data.coo'), '--splits', '1/0,0/1',
                     '--seeds', '1,2', '--jobs', '2', '--out', str(out), *QUICK_TRAIN])
        assert code == EXIT_OK
        rows = list(csv.reader(out.open()))
        assert tuple(rows[0]) == SWEEP_COLUMNS
        assert len(rows) == 1 + 2 * 3
        assert [r[:3] for r in rows[1:4]] == [['1', '0', '1'], ['1', '0', '2'], ['1', '0', 'success_rate']]
        assert [r[:3] for r in rows[4:7]] == [['0', '1', '1'], ['0', '1', '2'], ['0', '1', 'success_rate']]
        for row in (rows[1], rows[2], rows[4], rows[5]):
            assert row[7] == '0.0'
            assert row[8] in ('0', '1')
        rate = float(rows[3][8])
        assert rate == sum(int(r[8]) for r in rows[1:3]) / 2

    def test_parallel_matches_serial(self, tmp_path, synth_dir):
        outputs = []
        for jobs in ('1', '3'):
            out = tmp_path / f"sweep{jobs}.csv"
            main(['sweep', '--data', str(synth_dir / 'data.coo'), '--splits', '1/1,2/0',
                  '--seeds', '1,2', '--jobs', jobs, '--out', str(out), *QUICK_TRAIN])
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]
