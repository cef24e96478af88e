"""Desk-scale acceptance checks: training quality, rollout stability and long-run statistics.

One pFNO is trained for the whole module on the reduced corpus ((0, 10) and (1, 10),
20 sequences each, n=20, 200 epochs, batch 100) and shared by every test.
"""

import pytest
import numpy as np

from flamefront.core.closure import closure_from_rho_beta, dispersion_omega
from flamefront.core.dataset import generate_corpus, simulate_block
from flamefront.core.diagnostics import autocorrelation, front_length, measured_dispersion, model_step
from flamefront.core.training import TrainingConfig, evaluate, rollout, train
from flamefront.nn.checkpoint import load_checkpoint
from flamefront.nn.models import GammaInput, build_model

GRID = [(0.0, 10.0), (1.0, 10.0)]
SEED = 0
N_RECURRENT = 20
ROLLOUT_STEPS = 2000
STATISTICS_WINDOW = (500, 2000)

pytestmark = [pytest.mark.integration, pytest.mark.slow]


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    train_manifest = generate_corpus(GRID, root / "data", split='train', n_sequences=20, seed=SEED)
    valid_manifest = generate_corpus(GRID, root / "data", split='valid', n_sequences=4, seed=SEED)
    config = TrainingConfig(epochs=200, batch_size=100, n_recurrent=N_RECURRENT, seed=SEED)
    result = train(build_model('pfno', seed=SEED), train_manifest, config, valid_manifest,
                   out_dir=root / "train")
    return {
        'root': root,
        'valid': valid_manifest,
        'result': result,
        'model': result.checkpoint.to_model(),
    }


class TestDeskScaleTraining:
    """Training on the reduced corpus."""

    def test_validation_error_below_threshold(self, desk_run):
        final = desk_run['result'].log.rows[-1]

        assert final.valid_l2 < 0.08

    def test_beats_untrained_model(self, desk_run):
        untrained = load_checkpoint(desk_run['root'] / "train" / "initial.ckpt").to_model()
        baseline, _ = evaluate(untrained, desk_run['valid'], N_RECURRENT)
        trained, _ = evaluate(desk_run['model'], desk_run['valid'], N_RECURRENT)

        assert trained < baseline

    def test_validation_error_improves_over_blocks_of_epochs(self, desk_run):
        valid = np.array([r.valid_l2 for r in desk_run['result'].log.rows])
        block_means = valid.reshape(-1, 20).mean(axis=1)

        assert np.all(np.diff(block_means) <= 0.0)

    @pytest.mark.parametrize("rho,beta", GRID)
    def test_learned_dispersion_sign_agrees(self, desk_run, rho, beta):
        params = closure_from_rho_beta(rho, beta)
        kappas = np.arange(1, 16)
        _, omega, _ = measured_dispersion(model_step(desk_run['model'], GammaInput(rho, beta)),
                                          desk_run['model'].config.n, 0.15, kappas, check=False)

        agreement = np.mean(np.sign(omega) == np.sign(dispersion_omega(params, kappas)))
        assert agreement >= 0.8


class TestDeskScaleRollout:
    """Long recurrent rollouts in the giant-cusp regime (rho=1, beta=10)."""

    @pytest.fixture(scope="class")
    def sequences(self, desk_run):
        params = closure_from_rho_beta(1.0, 10.0)
        block, _ = simulate_block(params, 0, 3, ROLLOUT_STEPS, seed=SEED, split='test',
                                  n=desk_run['model'].config.n)
        reference = block.astype(np.float64)
        predicted = [rollout(desk_run['model'], ref[0], GammaInput(1.0, 10.0), ROLLOUT_STEPS) for ref in reference]
        return reference, predicted

    def test_rollout_stays_finite_and_bounded(self, sequences):
        _, predicted = sequences
        for sequence in predicted:
            lengths = front_length(sequence.states)

            assert sequence.failed_at is None
            assert len(sequence) == ROLLOUT_STEPS + 1
            assert np.all(np.isfinite(sequence.states))
            assert np.all((lengths >= 1.0) & (lengths <= 10.0))

    def test_autocorrelation_matches_reference(self, sequences):
        reference, predicted = sequences
        _, r_reference = autocorrelation(list(reference), STATISTICS_WINDOW)
        _, r_model = autocorrelation([s.states for s in predicted], STATISTICS_WINDOW)

        assert r_model[0] == 1.0
        assert np.array_equal(r_model[1:], r_model[1:][::-1])
        assert np.max(np.abs(r_model - r_reference)) < 0.3
