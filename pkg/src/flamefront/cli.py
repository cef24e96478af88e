"""Command-line interface for the flamefront toolkit."""

import sys
import logging
import click
from pathlib import Path

from . import __version__
from .core.closure import closure_from_rho_beta
from .core.dataset import (
    generate_corpus,
    generate_long,
    initial_condition,
    load_manifest,
    scaled_count,
    sequence_seed,
    write_sequence,
)
from .core.integrator import IntegratorConfig
from .core.session import diagnose, dispersion_tables
from .core.training import rollout, train
from .nn.checkpoint import load_checkpoint
from .nn.models import MODEL_KINDS, GammaInput, build_model
from .utils.config import ModelSection, RunConfig, load_run_config, write_resolved
from .utils.errors import FlameFrontError, NonFiniteError, StorageError
from .utils.progress import print_status
from .utils.validation import parse_config_pair, validate_rho_beta

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False, log_file: str = 'flamefront.log'):
    """Setup logging configuration.

    Args:
        verbose: Also log to stderr at DEBUG level
        log_file: Log file path, kept outside run directories
    """
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler(sys.stderr) if verbose else logging.NullHandler()
        ],
        force=True,
    )


def _run(ctx, label: str, action):
    """Run a subcommand body and map failures to exit codes."""
    verbose = ctx.obj.get('verbose', False)
    try:
        action()
    except KeyboardInterrupt:
        print_status(f"\n{label} cancelled by user", "WARNING")
        sys.exit(130)
    except FlameFrontError as e:
        print_status(f"{label} failed: {e}", "ERROR")
        logger.error(f"{label} failed: {e}")
        sys.exit(e.exit_code)
    except Exception as e:
        print_status(f"Unexpected error: {e}", "ERROR")
        if verbose:
            import traceback
            traceback.print_exc()
        sys.exit(1)


def _config(ctx, seed) -> RunConfig:
    return ctx.obj['run_config'].with_seed(seed)


def _parse_configs(values) -> list:
    return [parse_config_pair(v) for v in values]


def _out_option(default: str):
    return click.option('--out', '-o', type=click.Path(path_type=Path), default=default,
                        show_default=True, help='Run directory for every output file')


seed_option = click.option('--seed', type=int, default=None,
                           help='Master seed (defaults to the run config seed, 0)')
threads_option = click.option('--threads', type=int, default=None,
                              help='Worker threads (default 1)')
deterministic_option = click.option('--deterministic/--no-deterministic', default=None,
                                    help='Force single-threaded reductions [default: deterministic]')


@click.group()
@click.version_option(version=__version__)
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose logging')
@click.option('--run-config', type=click.Path(path_type=Path), default=None,
              help='JSON run configuration; flags override its values')
@click.option('--log-file', type=click.Path(), default='flamefront.log', show_default=True,
              help='Log file location')
@click.pass_context
def main(ctx, verbose, run_config, log_file):
    """flamefront - parametric flame-front simulation and neural surrogates.

    Simulates the rescaled Sivashinsky equation, builds operator-learning
    corpora, trains pFNO / pFNO* / pCNN surrogates and computes the
    evaluation diagnostics.
    """
    ctx.ensure_object(dict)
    ctx.obj['verbose'] = verbose
    setup_logging(verbose, log_file)
    try:
        ctx.obj['run_config'] = load_run_config(run_config)
    except FlameFrontError as e:
        print_status(f"Invalid run configuration: {e}", "ERROR")
        sys.exit(e.exit_code)


@main.command()
@click.option('--rho', type=float, required=True, help='Blend ratio in [0, 1] (0: diffusive-thermal, 1: Darrieus-Landau)')
@click.option('--beta', type=float, required=True, help='Largest unstable wavenumber (> 0)')
@click.pass_context
def params(ctx, rho, beta):
    """Print the closed coefficients mu, nu, tau for (RHO, BETA).

    Example:

      \b
      flamefront params --rho 0 --beta 10
      mu=1 nu=1 tau=1
    """
    def action():
        p = closure_from_rho_beta(*validate_rho_beta(rho, beta))
        click.echo(f"mu={p.mu:.12g} nu={p.nu:.12g} tau={p.tau:.12g}")

    _run(ctx, "Closure", action)


@main.command()
@click.option('--rho', type=float, required=True, help='Blend ratio in [0, 1]')
@click.option('--beta', type=float, required=True, help='Largest unstable wavenumber')
@click.option('--steps', type=int, default=500, show_default=True, help='Output intervals to integrate')
@click.option('--dt', type=float, default=None, help='Output interval [default: 0.15]')
@_out_option('solve_out')
@seed_option
@click.pass_context
def solve(ctx, rho, beta, steps, dt, out, seed):
    """Integrate one sequence from a random initial front."""
    def action():
        config = _config(ctx, seed)
        recipe = config.dataset
        dt_out = dt if dt is not None else recipe.dt
        integrator = IntegratorConfig(abs_tol=config.integrator.abs_tol, rel_tol=config.integrator.rel_tol,
                                      dt_out=dt_out, max_internal_steps=config.integrator.max_internal_steps)
        p = closure_from_rho_beta(*validate_rho_beta(rho, beta))
        print_status(f"Integrating {steps} steps at rho={p.rho:g}, beta={p.beta:g}", "INFO")
        sequence = generate_long(p, n_steps=steps, dt=dt_out, seed=config.seed, n=recipe.n,
                                 init_range=recipe.init_range, integrator=integrator)
        write_sequence(out, 'solve', sequence, master_seed=config.seed)
        write_resolved(config, out, {'name': 'solve', 'rho': p.rho, 'beta': p.beta, 'steps': steps})
        print_status(f"Sequence written to {out}", "SUCCESS")

    _run(ctx, "Solve", action)


@main.command('gen-dataset')
@_out_option('dataset')
@click.option('--scale', type=float, default=None, help='Multiply sequence counts (e.g. 0.02 gives 5 of 250) [default: 1]')
@click.option('--config', 'configs', multiple=True, help='RHO,BETA to generate (repeatable; default: the 15 standard configs)')
@click.option('--n-sequences', type=int, default=None, help='Training sequences per config [default: 250]')
@click.option('--n-valid', type=int, default=None, help='Validation sequences per config [default: 25]')
@click.option('--steps', type=int, default=None, help='Output intervals per sequence [default: 500]')
@click.option('--long/--no-long', 'with_long', default=False, show_default=True,
              help='Also integrate one long sequence per config')
@click.option('--long-steps', type=int, default=None, help='Output intervals of the long sequences [default: 125000]')
@seed_option
@threads_option
@click.pass_context
def gen_dataset(ctx, out, scale, configs, n_sequences, n_valid, steps, with_long, long_steps, seed, threads):
    """Build the training and validation corpora.

    Examples:

      \b
      # Desk scale: 5 training sequences per configuration
      flamefront gen-dataset --scale 0.02 --out data

      \b
      # Two configurations only
      flamefront gen-dataset --config 0,10 --config 1,10 --n-sequences 20
    """
    def action():
        config = _config(ctx, seed).override(
            'dataset', scale=scale, n_sequences=n_sequences, n_valid=n_valid, n_steps=steps,
            long_steps=long_steps, grid=_parse_configs(configs) or None,
        )
        recipe = config.dataset
        integrator = IntegratorConfig(abs_tol=config.integrator.abs_tol, rel_tol=config.integrator.rel_tol,
                                      dt_out=recipe.dt, max_internal_steps=config.integrator.max_internal_steps)
        grid = recipe.configurations
        workers = threads or 1
        common = dict(n_steps=recipe.n_steps, dt=recipe.dt, init_range=recipe.init_range,
                      seed=config.seed, n=recipe.n, integrator=integrator, threads=workers)

        train_count = scaled_count(recipe.n_sequences, recipe.scale)
        valid_count = scaled_count(recipe.n_valid, recipe.scale)
        print_status(f"Step 1: Training split ({len(grid)} configs x {train_count} sequences)", "INFO")
        generate_corpus(grid, out, split='train', n_sequences=train_count, **common)
        print_status(f"Step 2: Validation split ({len(grid)} configs x {valid_count} sequences)", "INFO")
        generate_corpus(grid, out, split='valid', n_sequences=valid_count, **common)

        if with_long:
            print_status(f"Step 3: Long sequences ({recipe.long_steps} steps)", "INFO")
            for rho, beta in grid:
                p = closure_from_rho_beta(rho, beta)
                generate_long(p, n_steps=recipe.long_steps, dt=recipe.dt, seed=config.seed, n=recipe.n,
                              init_range=recipe.init_range, integrator=integrator,
                              out_dir=out / 'long' / f"rho{p.rho:g}_beta{p.beta:g}")

        write_resolved(config, out, {'name': 'gen-dataset', 'long': with_long})
        print_status(f"Dataset written to {out}", "SUCCESS")

    _run(ctx, "Dataset generation", action)


@main.command('train')
@click.option('--data', type=click.Path(path_type=Path, exists=True), required=True,
              help='Directory written by gen-dataset')
@_out_option('train_out')
@click.option('--model', 'kind', type=click.Choice(MODEL_KINDS), default=None, help='Architecture [default: pfno]')
@click.option('--betas', multiple=True, type=float, help='Restrict training to these beta values (repeatable)')
@click.option('--epochs', type=int, default=None, help='Epochs [default: 1000]')
@click.option('--batch-size', type=int, default=None, help='Windows per batch [default: 1000]')
@click.option('--lr', type=float, default=None, help='Initial learning rate [default: 0.0025]')
@click.option('--n-recurrent', type=int, default=None, help='Rollout depth n of the 1-to-n loss [default: 20]')
@click.option('--scale', type=float, default=None, help='Multiply epochs and batch size [default: 1]')
@click.option('--resume', type=click.Path(path_type=Path, exists=True), default=None,
              help='Checkpoint to continue from')
@seed_option
@threads_option
@deterministic_option
@click.pass_context
def train_cmd(ctx, data, out, kind, betas, epochs, batch_size, lr, n_recurrent, scale, resume,
              seed, threads, deterministic):
    """Train a surrogate with the 1-to-n recurrent objective.

    Examples:

      \b
      flamefront train --data data --model pfno --scale 0.2

      \b
      # Single-beta pCNN variant
      flamefront train --data data --model pcnn --betas 10
    """
    def action():
        config = _config(ctx, seed)
        if kind is not None and kind != config.model.kind:
            config = RunConfig(seed=config.seed, integrator=config.integrator, dataset=config.dataset,
                               model=ModelSection(kind=kind), training=config.training,
                               diagnostics=config.diagnostics)
        config = config.override(
            'training', epochs=epochs, batch_size=batch_size, lr=lr, n_recurrent=n_recurrent, scale=scale,
            threads=threads, deterministic=deterministic, betas=list(betas) or None, seed=config.seed,
        )

        train_manifest = load_manifest(data, 'train')
        try:
            valid_manifest = load_manifest(data, 'valid')
        except StorageError:
            print_status("No validation split found; validation columns will be NaN", "WARNING")
            valid_manifest = None

        checkpoint = load_checkpoint(resume) if resume else None
        if checkpoint is not None:
            model = checkpoint.to_model()
        else:
            model = build_model(config.model.kind, config.model.build_config(), seed=config.seed)
        print_status(f"Training {model.kind} with {model.parameter_count()} parameters", "INFO")
        write_resolved(config, out, {'name': 'train', 'data': str(data)})
        result = train(model, train_manifest, config.training, valid_manifest=valid_manifest,
                       out_dir=out, resume=checkpoint)
        final = result.log.rows[-1] if len(result.log) else None
        if final is not None:
            print_status(f"Final train L2 {final.train_l2:.4g}, valid L2 {final.valid_l2:.4g}", "SUCCESS")
        print_status(f"Checkpoints written to {out}", "SUCCESS")

    _run(ctx, "Training", action)


@main.command('rollout')
@click.option('--checkpoint', type=click.Path(path_type=Path, exists=True), required=True, help='Trained checkpoint')
@click.option('--rho', type=float, required=True, help='Blend ratio in [0, 1]')
@click.option('--beta', type=float, required=True, help='Largest unstable wavenumber')
@click.option('--steps', type=int, default=2000, show_default=True, help='Recurrent applications')
@_out_option('rollout_out')
@seed_option
@click.pass_context
def rollout_cmd(ctx, checkpoint, rho, beta, steps, out, seed):
    """Roll a trained model out from a random initial front."""
    def action():
        config = _config(ctx, seed)
        recipe = config.dataset
        rho_, beta_ = validate_rho_beta(rho, beta)
        ckpt = load_checkpoint(checkpoint)
        model = ckpt.to_model()
        initial = initial_condition(sequence_seed(config.seed, 'test', 0, 0), model.config.n, recipe.init_range)
        sequence = rollout(model, initial, GammaInput(rho_, beta_), steps, recipe.dt)
        write_sequence(out, 'rollout', sequence, master_seed=config.seed)
        write_resolved(config, out, {'name': 'rollout', 'checkpoint': str(checkpoint),
                                     'rho': rho_, 'beta': beta_, 'steps': steps})
        if sequence.failed_at is not None:
            raise NonFiniteError(f"Rollout turned non-finite at step {sequence.failed_at}; "
                                 f"{len(sequence) - 1} steps written to {out}", index=sequence.failed_at)
        print_status(f"Rollout written to {out}", "SUCCESS")

    _run(ctx, "Rollout", action)


@main.command('diagnose')
@click.option('--checkpoint', type=click.Path(path_type=Path, exists=True), required=True, help='Trained checkpoint')
@click.option('--config', 'configs', multiple=True, required=True, help='RHO,BETA to diagnose (repeatable)')
@_out_option('diagnostics')
@click.option('--steps', type=int, default=None, help='Rollout length for error, length and slope [default: 2000]')
@click.option('--n-sequences', type=int, default=None, help='Sequences for autocorrelation [default: 7]')
@click.option('--window', type=(int, int), default=None, help='Autocorrelation window LO HI in steps [default: 1000 4000]')
@click.option('--epsilon', type=float, default=None, help='Jacobian perturbation amplitude [default: 1e-6]')
@click.option('--jacobian', 'jacobian_method', type=click.Choice(['fd', 'autodiff']), default=None,
              help='Also cross-check the Jacobian by reverse mode [default: fd]')
@click.option('--keep-mean', is_flag=True, help='Autocorrelation without removing the spatial mean')
@seed_option
@threads_option
@click.pass_context
def diagnose_cmd(ctx, checkpoint, configs, out, steps, n_sequences, window, epsilon, jacobian_method,
                 keep_mean, seed, threads):
    """Emit error, length, slope, autocorrelation, Jacobian and dispersion tables.

    Example:

      \b
      flamefront diagnose --checkpoint train_out/final.ckpt --config 1,10 --steps 2000
    """
    def action():
        config = _config(ctx, seed)
        config = config.override(
            'diagnostics', steps=steps, n_sequences=n_sequences, window=list(window) if window else None,
            epsilon=epsilon, jacobian_method=jacobian_method, remove_mean=False if keep_mean else None,
            threads=threads, seed=config.seed, dt=config.dataset.dt,
        )
        pairs = _parse_configs(configs)
        write_resolved(config, out, {'name': 'diagnose', 'checkpoint': str(checkpoint),
                                     'configs': [list(p) for p in pairs]})
        integrator = IntegratorConfig(abs_tol=config.integrator.abs_tol, rel_tol=config.integrator.rel_tol,
                                      dt_out=config.dataset.dt,
                                      max_internal_steps=config.integrator.max_internal_steps)
        diagnose(checkpoint, pairs, out, config.diagnostics, integrator)

    _run(ctx, "Diagnosis", action)


@main.command('dispersion')
@click.option('--config', 'configs', multiple=True, required=True, help='RHO,BETA (repeatable)')
@click.option('--checkpoint', type=click.Path(path_type=Path, exists=True), default=None,
              help='Measure a trained model instead of the reference integrator')
@_out_option('dispersion')
@click.option('--epsilon', type=float, default=None, help='Jacobian perturbation amplitude [default: 1e-6]')
@click.option('--band', type=float, default=None, help='Measure modes 1..floor(BAND * beta) [default: 1.5]')
@click.pass_context
def dispersion_cmd(ctx, configs, checkpoint, out, epsilon, band):
    """Emit analytic and measured dispersion curves with their Jacobians."""
    def action():
        config = _config(ctx, None).override('diagnostics', epsilon=epsilon, kappa_band=band,
                                             dt=ctx.obj['run_config'].dataset.dt)
        pairs = _parse_configs(configs)
        write_resolved(config, out, {'name': 'dispersion',
                                     'checkpoint': str(checkpoint) if checkpoint else None,
                                     'configs': [list(p) for p in pairs]})
        dispersion_tables(pairs, out, checkpoint, config.diagnostics)
        print_status(f"Dispersion tables written to {out}", "SUCCESS")

    _run(ctx, "Dispersion", action)


if __name__ == '__main__':
    main()
