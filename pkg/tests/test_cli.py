import json
import math

import numpy as np
import pandas as pd
import pytest

from gr2r.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, main
from gr2r.io_formats import SWEEP_COLUMNS, read_image, read_metrics, write_image

SMALL_DATA = {'kind': 'synthetic', 'n_train': 4, 'n_test': 2, 'height': 8, 'width': 8}


def write_config(tmp_path, name='run.json', **overrides):
    doc = {
        'model': {'family': 'gaussian', 'params': {'sigma': 0.1}},
        'alpha': 0.5,
        'J': 2,
        'loss': 'gr2r_mse',
        'estimator': {'kind': 'affine'},
        'train': {'step_size': 0.5, 'epochs': 20, 'batch_size': 4},
        'seed': 0,
        'dataset': dict(SMALL_DATA),
    }
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestExitCodes:

    def test_alpha_out_of_range(self, tmp_path):
        cfg = write_config(tmp_path, alpha=1.5)
        assert main(['train', '--config', cfg, '--out', str(tmp_path / 'out')]) == EXIT_CONFIG

    def test_binomial_alpha_off_lattice(self, tmp_path):
        cfg = write_config(tmp_path, model={'family': 'binomial', 'params': {'looks': 4}}, alpha=0.3)
        assert main(['train', '--config', cfg, '--out', str(tmp_path / 'out')]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(['train', '--config', str(tmp_path / 'absent.json')]) == EXIT_CONFIG

    def test_command_needs_config(self, tmp_path):
        assert main(['sweep-alpha', '--out', str(tmp_path)]) == EXIT_CONFIG

    def test_bad_jobs(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(['train', '--config', cfg, '--jobs', '0', '--out', str(tmp_path)]) == EXIT_CONFIG

    def test_divergence(self, tmp_path):
        cfg = write_config(tmp_path, train={'step_size': 1e8, 'epochs': 200, 'batch_size': 4})
        with np.errstate(all='ignore'):
            code = main(['train', '--config', cfg, '--out', str(tmp_path / 'out')])
        assert code == EXIT_DIVERGENCE


class TestCorruptAndSplit:

    def test_tiny_sigma_leaves_file_unchanged(self, tmp_path, rng):
        clean = tmp_path / 'clean.pfm'
        write_image(str(clean), rng.uniform(0.2, 0.8, size=(6, 5)))
        cfg = write_config(tmp_path, model={'family': 'gaussian', 'params': {'sigma': 1e-12}})
        noisy = tmp_path / 'noisy.pfm'
        code = main(['corrupt', '--config', cfg, '--input', str(clean), '--output', str(noisy),
                     '--out', str(tmp_path / 'out')])
        assert code == EXIT_OK
        assert noisy.read_bytes() == clean.read_bytes()

    def test_poisson_output_on_lattice(self, tmp_path):
        cfg = write_config(tmp_path, model={'family': 'poisson', 'params': {'gamma_gain': 0.5}}, alpha=0.15)
        out = tmp_path / 'out'
        assert main(['corrupt', '--config', cfg, '--out', str(out)]) == EXIT_OK
        y = read_image(str(out / 'noisy.pfm'))
        np.testing.assert_array_equal(y / 0.5, np.round(y / 0.5))
        assert json.loads((out / 'corrupt.json').read_text())['seed'] == 0

    def test_split_recombines(self, tmp_path):
        cfg = write_config(tmp_path, model={'family': 'poisson', 'params': {'gamma_gain': 0.5}}, alpha=0.5)
        out = tmp_path / 'out'
        main(['corrupt', '--config', cfg, '--out', str(out)])
        assert main(['split', '--config', cfg, '--input', str(out / 'noisy.pfm'), '--out', str(out)]) == EXIT_OK
        y = read_image(str(out / 'noisy.pfm'))
        y1, y2 = read_image(str(out / 'y1.pfm')), read_image(str(out / 'y2.pfm'))
        np.testing.assert_allclose(0.5 * y1 + 0.5 * y2, y, atol=1e-5)

    def test_split_needs_input(self, tmp_path):
        assert main(['split', '--config', write_config(tmp_path), '--out', str(tmp_path)]) == EXIT_CONFIG


class TestTraining:

    def test_evaluate_reproduces_training_score(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / 'out'
        assert main(['train', '--config', cfg, '--out', str(out)]) == EXIT_OK
        assert main(['evaluate', '--config', cfg, '--out', str(out)]) == EXIT_OK
        trained, evaluated = read_metrics(str(out / 'metrics.jsonl'))
        assert trained.run_id == 'train-gr2r_mse-seed0'
        assert len(trained.loss_curve) == 20
        assert trained.wall_ms is None
        assert evaluated.psnr_db == trained.psnr_db

    def test_runs_are_reproducible(self, tmp_path):
        cfg = write_config(tmp_path, loss='gr2r_nll',
                           model={'family': 'poisson', 'params': {'gamma_gain': 0.05}}, alpha=0.15,
                           estimator={'kind': 'affine', 'range_map': 'positive'},
                           train={'step_size': 0.2, 'epochs': 10, 'batch_size': 2})
        for name in ('a', 'b'):
            assert main(['train', '--config', cfg, '--seed', '3', '--out', str(tmp_path / name)]) == EXIT_OK
        for artifact in ('estimator.json', 'metrics.jsonl'):
            assert (tmp_path / 'a' / artifact).read_bytes() == (tmp_path / 'b' / artifact).read_bytes()

    def test_sure_training(self, tmp_path):
        cfg = write_config(tmp_path, loss='sure', train={'step_size': 0.5, 'epochs': 5, 'batch_size': 4})
        assert main(['train', '--config', cfg, '--out', str(tmp_path / 'out')]) == EXIT_OK

    def test_record_timing(self, tmp_path):
        cfg = write_config(tmp_path, record_timing=True, train={'step_size': 0.5, 'epochs': 2, 'batch_size': 4})
        out = tmp_path / 'out'
        main(['train', '--config', cfg, '--out', str(out)])
        (record,) = read_metrics(str(out / 'metrics.jsonl'))
        assert record.wall_ms is not None and record.wall_ms > 0


class TestSweep:

    def test_single_alpha(self, tmp_path):
        cfg = write_config(tmp_path, J=1, train={'step_size': 0.5, 'epochs': 10, 'batch_size': 4})
        out = tmp_path / 'out'
        assert main(['sweep-alpha', '--config', cfg, '--out', str(out)]) == EXIT_OK
        table = pd.read_csv(out / 'sweep.csv')
        assert list(table.columns) == SWEEP_COLUMNS
        assert len(table) == 1
        assert table['alpha'][0] == pytest.approx(0.5)

    def test_small_alpha_beats_large_alpha(self, tmp_path):
        data = {'kind': 'synthetic', 'n_train': 8, 'n_test': 4, 'height': 16, 'width': 16}
        cfg = write_config(tmp_path, alpha=None, alphas=[0.2, 0.9], J=1, dataset=data,
                           train={'step_size': 0.5, 'epochs': 100, 'batch_size': 8})
        out = tmp_path / 'out'
        assert main(['sweep-alpha', '--config', cfg, '--out', str(out)]) == EXIT_OK
        table = pd.read_csv(out / 'sweep.csv')
        assert table['alpha'].tolist() == pytest.approx([0.2, 0.9])
        assert table['psnr_db'][0] >= table['psnr_db'][1]


class TestOtherCommands:

    def test_verify_is_byte_reproducible(self, tmp_path):
        for name, jobs in (('a', '1'), ('b', '2')):
            assert main(['verify', '--seed', '0', '--jobs', jobs, '--out', str(tmp_path / name)]) == EXIT_OK
        first = (tmp_path / 'a' / 'verify_report.json').read_bytes()
        assert first == (tmp_path / 'b' / 'verify_report.json').read_bytes()
        report = json.loads(first)
        assert report['passed'] is True
        assert len(report['checks']) == 24
        assert set(report['coverage']) == {check['check_id'] for check in report['checks']}

    def test_inpaint_full_mask(self, tmp_path):
        cfg = write_config(tmp_path, loss='gr2r_operator_mse',
                           train={'step_size': 0.2, 'epochs': 2, 'batch_size': 4},
                           inpaint={'p': 1.0, 'mask_seed': 1, 'transforms': ['shifts'], 'max_shift': 1,
                                    'ei_weight': 0.1})
        out = tmp_path / 'out'
        assert main(['inpaint', '--config', cfg, '--out', str(out)]) == EXIT_OK
        assert json.loads((out / 'operator.json').read_text())['kind'] == 'identity'
        (record,) = read_metrics(str(out / 'metrics.jsonl'))
        assert math.isfinite(record.psnr_db)

    def test_inpaint_needs_section(self, tmp_path):
        assert main(['inpaint', '--config', write_config(tmp_path), '--out', str(tmp_path)]) == EXIT_CONFIG

    def test_moments(self, tmp_path):
        cfg = write_config(tmp_path, moments={'noise': 'log-rayleigh', 'sigma': 0.1, 'n': 20000, 'k': 3,
                                              'tau': 1.0})
        out = tmp_path / 'out'
        assert main(['moments', '--config', cfg, '--out', str(out)]) == EXIT_OK
        doc = json.loads((out / 'moments.json').read_text())
        assert max(doc['residuals'].values()) < 0.1
        assert doc['alpha_equivalent'] == pytest.approx(0.5)
