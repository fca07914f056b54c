import json
import math

import numpy as np
import pandas as pd
import pytest

from gr2r.exceptions import ConfigError, ShapeError
from gr2r.io_formats import (
    SWEEP_COLUMNS, MetricsRecord, append_metrics, dumps_deterministic, load_run_config,
    parse_run_config, psnr, read_image, read_metrics, serialize_run_config, write_image,
    write_sweep_csv,
)

GAUSSIAN = '{"model": {"family": "gaussian", "params": {"sigma": 0.1}}'


class TestPfm:

    def test_single_pixel_layout(self, tmp_path):
        path = tmp_path / 'one.pfm'
        write_image(str(path), np.array([[0.5]]))
        raw = path.read_bytes()
        assert raw[:12] == b'Pf\n1 1\n-1.0\n'
        assert raw[12:] == np.array([0.5], dtype='<f4').tobytes()

    def test_rows_are_stored_bottom_up(self, tmp_path):
        path = tmp_path / 'rows.pfm'
        image = np.array([[1.0, 2.0], [3.0, 4.0]])
        write_image(str(path), image)
        payload = np.frombuffer(path.read_bytes()[len(b'Pf\n2 2\n-1.0\n'):], dtype='<f4')
        np.testing.assert_array_equal(payload, [3.0, 4.0, 1.0, 2.0])
        np.testing.assert_array_equal(read_image(str(path)), image)

    def test_big_endian_and_color(self, tmp_path, rng):
        path = tmp_path / 'color.pfm'
        image = rng.uniform(size=(3, 2, 3)).astype(np.float32).astype(np.float64)
        write_image(str(path), image, little_endian=False)
        assert path.read_bytes().startswith(b'PF\n2 3\n1.0\n')
        np.testing.assert_array_equal(read_image(str(path)), image)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / 'short.pfm'
        path.write_bytes(b'Pf\n2 2\n-1.0\n' + np.zeros(3, dtype='<f4').tobytes())
        with pytest.raises(ConfigError):
            read_image(str(path))

    @pytest.mark.parametrize('header', [b'P6\n1 1\n-1.0\n', b'Pf\n1\n-1.0\n', b'Pf\n1 1\n0.0\n'])
    def test_malformed_header(self, tmp_path, header):
        path = tmp_path / 'bad.pfm'
        path.write_bytes(header + np.zeros(4, dtype='<f4').tobytes())
        with pytest.raises(ConfigError):
            read_image(str(path))

    def test_rejects_batches(self, tmp_path):
        with pytest.raises(ShapeError):
            write_image(str(tmp_path / 'x.pfm'), np.zeros((2, 3, 3, 3)))


class TestPsnr:

    def test_uniform_error(self):
        x = np.zeros((10, 10))
        assert psnr(x + 0.1, x) == pytest.approx(20.0)

    def test_exact_match(self):
        x = np.ones((3, 3))
        assert psnr(x, x) == math.inf

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros(3), np.zeros(4))


class TestRunConfig:

    def test_defaults(self):
        cfg = parse_run_config(GAUSSIAN + '}')
        assert cfg.loss == 'gr2r_mse'
        assert cfg.alpha is None
        assert cfg.noise_model().sigma == 0.1

    @pytest.mark.parametrize('text', [
        GAUSSIAN + ', "alpha": 1.5}',
        GAUSSIAN + ', "alphas": [0.2, 0.0]}',
        GAUSSIAN + ', "J": 0}',
        GAUSSIAN + ', "learning_rate": 0.1}',
        '{"model": {"family": "binomial", "params": {"looks": 4}}, "alpha": 0.3}',
        '{"model": {"family": "poisson", "params": {"gamma_gain": -1.0}}}',
        '{"model": {"family": "laplace"}}',
        GAUSSIAN + ', "inpaint": {"p": 0.0}}',
        GAUSSIAN + ', "inpaint": {"p": 1.5}}',
        '{"model": ',
    ], ids=['alpha', 'alphas', 'J', 'unknown-key', 'binomial-lattice', 'gain', 'family', 'mask-p',
            'mask-p-above-one', 'json'])
    def test_rejections(self, text):
        with pytest.raises(ConfigError):
            parse_run_config(text)

    def test_binomial_alpha_on_lattice(self):
        cfg = parse_run_config('{"model": {"family": "binomial", "params": {"looks": 10}}, "alpha": 0.3}')
        assert cfg.noise_model().looks == 10

    def test_full_observation_is_allowed(self):
        cfg = parse_run_config(GAUSSIAN + ', "inpaint": {"p": 1.0}}')
        assert cfg.inpaint.p == 1.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / 'absent.json'))

    def test_serialization_is_stable(self):
        cfg = parse_run_config(GAUSSIAN + ', "alpha": 0.5, "seed": 3}')
        text = serialize_run_config(cfg)
        assert serialize_run_config(parse_run_config(text)) == text


class TestDeterministicJson:

    def test_sorted_keys_and_special_floats(self):
        text = dumps_deterministic({'b': np.float64(0.1), 'a': [math.inf, np.int64(2)]}, indent=None)
        assert text == '{"a": ["inf", 2], "b": 0.1}'

    def test_float_round_trip(self):
        value = 1.0 / 3.0
        assert json.loads(dumps_deterministic({'v': value}))['v'] == value

    def test_floats_carry_seventeen_digit_precision(self):
        value = 0.1 + 0.2
        text = dumps_deterministic(value, indent=None)
        assert text == '0.30000000000000004'
        assert float(text) == float(f"{value:.17g}")


class TestMetrics:

    def test_append_and_read(self, tmp_path):
        path = str(tmp_path / 'runs' / 'metrics.jsonl')
        append_metrics(path, MetricsRecord('train-a', 'gr2r_mse', 0.5, 27.5, [1.0, 0.5], 1))
        append_metrics(path, MetricsRecord('evaluate-a', 'gr2r_mse', 0.5, 'inf', seed=1))
        records = read_metrics(path)
        assert [r.run_id for r in records] == ['train-a', 'evaluate-a']
        assert records[0].loss_curve == [1.0, 0.5]
        assert records[0].wall_ms is None
        assert records[1].psnr_db == math.inf

    def test_sweep_columns(self, tmp_path):
        path = tmp_path / 'sweep.csv'
        write_sweep_csv(str(path), [{'seed': 0, 'psnr_db': 25.0, 'loss_name': 'gr2r_mse', 'alpha': 0.2},
                                    {'seed': 0, 'psnr_db': math.nan, 'loss_name': 'gr2r_mse', 'alpha': 0.9}])
        table = pd.read_csv(path)
        assert list(table.columns) == SWEEP_COLUMNS
        assert table['alpha'].tolist() == pytest.approx([0.2, 0.9])
        assert math.isnan(table['psnr_db'][1])
