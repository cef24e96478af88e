"""Integration tests for the complete dataset, training and diagnosis flow."""

import json

import pytest
from click.testing import CliRunner

from flamefront.cli import main
from flamefront.core.dataset import load_manifest
from flamefront.core.session import DiagnosisSession, DiagnosticsOptions
from flamefront.nn.checkpoint import load_checkpoint

RUN_CONFIG = {
    'seed': 3,
    'dataset': {'n': 32},
    'model': {'kind': 'pfno', 'config': {'levels': 1, 'channels': 3, 'kappa_max': 8, 'n_ratios': 2,
                                         'n': 32, 'proj_hidden': 4, 'ratio_hidden': 3}},
    'training': {'checkpoint_every': 1},
}


@pytest.fixture
def workspace(temp_dir):
    config = temp_dir / "run.json"
    config.write_text(json.dumps(RUN_CONFIG))
    return temp_dir, config


def invoke(temp_dir, config, *args):
    result = CliRunner().invoke(main, ['--log-file', str(temp_dir / 'run.log'), '--run-config', str(config), *args])
    return result


@pytest.mark.integration
@pytest.mark.slow
class TestPipeline:
    """Test the desk-scale pipeline end to end."""

    def test_dataset_train_rollout_diagnose(self, workspace):
        root, config = workspace
        data, train_out = root / "data", root / "train"

        result = invoke(root, config, 'gen-dataset', '--out', str(data), '--config', '0,10', '--config', '1,10',
                        '--n-sequences', '2', '--n-valid', '1', '--steps', '4')
        assert result.exit_code == 0, result.output
        assert load_manifest(data, 'train').n_steps == 4

        result = invoke(root, config, 'train', '--data', str(data), '--out', str(train_out),
                        '--epochs', '2', '--batch-size', '4', '--n-recurrent', '2')
        assert result.exit_code == 0, result.output
        final = load_checkpoint(train_out / 'final.ckpt')
        assert final.epoch == 2
        assert len((train_out / 'train_log.csv').read_text().splitlines()) == 3

        result = invoke(root, config, 'rollout', '--checkpoint', str(train_out / 'final.ckpt'),
                        '--rho', '0.5', '--beta', '10', '--steps', '3', '--out', str(root / 'rollout'))
        assert result.exit_code in (0, 3), result.output
        assert load_manifest(root / 'rollout', 'rollout').mesh_size == 32

        result = invoke(root, config, 'diagnose', '--checkpoint', str(train_out / 'final.ckpt'),
                        '--config', '1,10', '--steps', '4', '--n-sequences', '2', '--window', '1', '5',
                        '--out', str(root / 'diag'))
        assert result.exit_code == 0, result.output
        names = {p.name for p in (root / 'diag').iterdir()}
        assert {f"{d}_1_10.csv" for d in ('error', 'length', 'slope', 'autocorr', 'dispersion', 'jacobian')} <= names
        assert 'resolved_config.json' in names

    def test_resume_continues_from_checkpoint(self, workspace):
        root, config = workspace
        data = root / "data"
        invoke(root, config, 'gen-dataset', '--out', str(data), '--config', '1,10',
               '--n-sequences', '2', '--n-valid', '1', '--steps', '4')

        first = invoke(root, config, 'train', '--data', str(data), '--out', str(root / 'a'),
                       '--epochs', '1', '--batch-size', '4', '--n-recurrent', '2')
        assert first.exit_code == 0, first.output
        resumed = invoke(root, config, 'train', '--data', str(data), '--out', str(root / 'b'),
                         '--epochs', '2', '--batch-size', '4', '--n-recurrent', '2',
                         '--resume', str(root / 'a' / 'final.ckpt'))
        assert resumed.exit_code == 0, resumed.output
        assert load_checkpoint(root / 'b' / 'final.ckpt').epoch == 2

    def test_reference_solver_diagnosis_without_model(self, temp_dir):
        options = DiagnosticsOptions(steps=3, n_sequences=1, window=(1, 3), seed=1)
        session = DiagnosisSession(None, [(1.0, 10.0)], temp_dir / "diag", options)
        written = session.run()

        report = session.reports[0]
        assert report.error is None
        assert report.length_reference.shape == (4,)
        assert report.dispersion_kappas.tolist() == list(range(1, 16))
        assert {p.name for p in written} == {
            "length_1_10.csv", "autocorr_1_10.csv", "dispersion_1_10.csv", "jacobian_1_10.csv",
        }

    def test_dispersion_command_reference_solver(self, workspace):
        root, config = workspace
        result = invoke(root, config, 'dispersion', '--config', '0.5,10', '--band', '0.5',
                        '--out', str(root / 'disp'))

        assert result.exit_code == 0, result.output
        lines = (root / 'disp' / 'dispersion_0.5_10.csv').read_text().splitlines()
        assert len(lines) == 1 + 5
