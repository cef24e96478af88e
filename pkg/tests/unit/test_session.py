"""Unit tests for the diagnosis session."""

from unittest.mock import patch

import pytest
import numpy as np

from flamefront.core.session import (
    DiagnosisSession,
    DiagnosticsOptions,
    diagnose,
    dispersion_kappas,
    dispersion_tables,
)
from flamefront.nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from flamefront.nn.models import PfnoConfig, build_model
from flamefront.utils.errors import ConfigError, StorageError

N = 32


@pytest.fixture
def checkpoint_path(temp_dir):
    config = PfnoConfig(levels=2, channels=4, kappa_max=8, n_ratios=3, n=N, proj_hidden=8, ratio_hidden=4)
    model = build_model('pfno', config, seed=4)
    return save_checkpoint(temp_dir / "model.ckpt", Checkpoint.from_model(model))


def tiny_options(**overrides):
    base = dict(steps=4, n_sequences=2, window=(1, 5), seed=2)
    base.update(overrides)
    return DiagnosticsOptions(**base)


class TestDiagnosticsOptions:
    """Test diagnosis settings."""

    def test_defaults(self):
        options = DiagnosticsOptions()

        assert (options.steps, options.n_sequences, options.window) == (2000, 7, (1000, 4000))
        assert options.sequence_length == 4000
        assert options.remove_mean and options.jacobian_method == 'fd'

    def test_round_trip(self):
        options = tiny_options(jacobian_method='autodiff')

        assert DiagnosticsOptions.from_dict(options.to_dict()) == options

    def test_rejects_invalid_values(self):
        with pytest.raises(ConfigError):
            DiagnosticsOptions(window=(5, 5))
        with pytest.raises(ConfigError):
            DiagnosticsOptions(jacobian_method='symbolic')
        with pytest.raises(ConfigError):
            DiagnosticsOptions(epsilon=0.0)
        with pytest.raises(ConfigError):
            DiagnosticsOptions.from_dict({'horizon': 10})

    def test_dispersion_band(self):
        assert dispersion_kappas(10.0, 256).tolist() == list(range(1, 16))
        assert dispersion_kappas(40.0, 32).tolist() == list(range(1, 17))
        assert dispersion_kappas(25.0, 256, band=1.0).tolist() == list(range(1, 26))


class TestDiagnosisSession:
    """Test the diagnosis workflow with a small model."""

    def test_requires_configs(self, temp_dir):
        with pytest.raises(ConfigError):
            DiagnosisSession(None, [], temp_dir)

    def test_full_run_writes_every_table(self, checkpoint_path, temp_dir):
        out = temp_dir / "diag"
        written = diagnose(checkpoint_path, [(1.0, 10.0)], out,
                           tiny_options(jacobian_method='autodiff'))

        names = sorted(p.name for p in written)
        assert names == sorted(f"{d}_1_10.csv" for d in
                               ('error', 'length', 'slope', 'autocorr', 'dispersion', 'jacobian'))

    def test_report_contents(self, checkpoint_path, temp_dir):
        session = DiagnosisSession(checkpoint_path, [(0.5, 10.0)], temp_dir / "diag", tiny_options())
        session.run()
        report = session.reports[0]

        assert report.error.values.shape == (5,)
        assert report.error.values[0] == 0.0
        assert report.length_reference.shape == (5,)
        assert report.autocorr_reference[0] == pytest.approx(1.0)
        assert report.autocorr_predicted is not None
        assert report.dispersion_kappas.tolist() == list(range(1, 16))
        assert set(report.slopes) == {0}

    def test_same_seed_same_reference(self, checkpoint_path, temp_dir):
        first = DiagnosisSession(checkpoint_path, [(1.0, 10.0)], temp_dir / "a", tiny_options())
        second = DiagnosisSession(checkpoint_path, [(1.0, 10.0)], temp_dir / "b", tiny_options(threads=2))
        first.run()
        second.run()

        assert np.array_equal(first.reports[0].length_reference, second.reports[0].length_reference)
        assert ((temp_dir / "a" / "error_1_10.csv").read_bytes()
                == (temp_dir / "b" / "error_1_10.csv").read_bytes())

    def test_missing_checkpoint(self, temp_dir):
        with patch('flamefront.core.session.print_status') as mock_status:
            with pytest.raises(StorageError):
                diagnose(temp_dir / "absent.ckpt", [(1.0, 10.0)], temp_dir, tiny_options())

        assert mock_status.call_args[0][1] == "ERROR"

    def test_dispersion_tables_from_model(self, checkpoint_path, temp_dir):
        written = dispersion_tables([(0.0, 10.0), (1.0, 10.0)], temp_dir / "disp", checkpoint=checkpoint_path)

        assert sorted(p.name for p in written) == [
            "dispersion_0_10.csv", "dispersion_1_10.csv", "jacobian_0_10.csv", "jacobian_1_10.csv",
        ]

    def test_run_dispersion_loads_model_once(self, checkpoint_path, temp_dir):
        session = DiagnosisSession(checkpoint_path, [(0.5, 10.0)], temp_dir / "disp", tiny_options())

        with patch('flamefront.core.session.load_checkpoint', wraps=load_checkpoint) as mock_load:
            session.load_model()
            written = session.run_dispersion()

        assert mock_load.call_count == 1
        assert session.model.kind == 'pfno'
        assert sorted(p.name for p in written) == ["dispersion_0.5_10.csv", "jacobian_0.5_10.csv"]
        assert session.reports[0].dispersion_kappas.tolist() == list(range(1, 16))
