"""
Command-line driver.

Subcommands share one JSON run configuration plus flag overrides and write
every artifact into the run's output directory:

    simulate           observations.csv, truth.json
    train-likelihoods  surrogates/ registry, samples/, traces/, training_log.csv
    assimilate         assimilation_log.csv, assimilation_tidy.csv,
                       posterior_samples.csv, maps/
    mcmc               chain.csv, iact.csv, comparison.csv, comparison.txt
    diagnose           loglik_error.csv

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from config import LOG_FORMAT_VERSION
from app.baseline import compare_posteriors, iact, mh_chain
from app.errors import ConfigError, NumericalError
from app.models import (
    analytic_gaussian_loglik,
    em31_sigma_eff,
    generate_joint_samples,
    simulate_observations,
)
from app.polybasis import basis_counter
from app.run_models import RunConfig, dump_run_config, load_run_config
from app.sbi import (
    PosteriorDensity,
    assimilate_step,
    build_surrogate,
    history_frame,
    initial_state,
    sample_posterior,
    tidy_frame,
)
from app.storage import (
    SurrogateRegistry,
    read_csv,
    read_observations,
    save_map,
    write_csv,
    write_json,
    write_observations,
    write_samples,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2

OBSERVATIONS_FILE = "observations.csv"
POSTERIOR_SAMPLES_FILE = "posterior_samples.csv"
SURROGATE_DIR = "surrogates"


def _path(cfg: RunConfig, *parts: str) -> str:
    return os.path.join(cfg.output_dir, *parts)


def _theta_columns(dim: int) -> List[str]:
    return [f"theta{i}" for i in range(dim)]


def _load_observations(cfg: RunConfig, path: Optional[str]) -> np.ndarray:
    path = path or _path(cfg, OBSERVATIONS_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f"observation file not found: {path} (run 'simulate' first)")
    observations, _ = read_observations(path)
    return observations


def _load_surrogates(cfg: RunConfig, steps: Sequence[int]):
    registry = SurrogateRegistry(_path(cfg, SURROGATE_DIR))
    available = set(registry.steps())
    for t in steps:
        if t not in available:
            raise ConfigError(f"missing surrogate for step {t}")
    return registry.load_all(list(steps))


# ----------------------------------------------------------------------
# simulate
# ----------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    model = cfg.model.build()
    n_steps = cfg.simulation.n_steps
    print(f"[*] Simulating {n_steps} observations with model '{model.model_id}' at theta = {cfg.simulation.theta_ref}")
    observations = simulate_observations(model, cfg.simulation.theta_ref, n_steps, cfg.seed)
    manifest = {
        "format": "seqtm-observations",
        "version": LOG_FORMAT_VERSION,
        "n_y": model.n_y,
        "n_steps": n_steps,
        "seed": cfg.seed,
        "model_id": model.model_id,
    }
    write_observations(observations, _path(cfg, OBSERVATIONS_FILE), manifest)
    write_json(_path(cfg, "truth.json"), {
        "theta_ref": cfg.simulation.theta_ref,
        "seed": cfg.seed,
        "n_steps": n_steps,
        "model_id": model.model_id,
        "model_calls": model.n_calls,
    })
    print(f"[OK] Wrote {n_steps} observations to {_path(cfg, OBSERVATIONS_FILE)}")
    return EXIT_OK


# ----------------------------------------------------------------------
# train-likelihoods
# ----------------------------------------------------------------------

def _train_step(cfg_json: str, t: int) -> dict:
    """Sample and train the surrogate of one step; runs in worker processes."""
    cfg = RunConfig.model_validate_json(cfg_json)
    model = cfg.model.build()
    joint = generate_joint_samples(model, cfg.proposal(), t, cfg.surrogates.n_samples, cfg.seed)
    start = basis_counter.count
    surrogate = build_surrogate(joint, cfg.surrogates.atm)
    return {
        "t": t,
        "surrogate": surrogate,
        "samples": joint,
        "basis_evals": basis_counter.count - start,
        "model_calls": model.n_calls,
    }


def _store_step(cfg: RunConfig, registry: SurrogateRegistry, result: dict) -> List[dict]:
    t, surrogate, joint = result["t"], result["surrogate"], result["samples"]
    registry.add(surrogate, info={"n_samples": joint.n, "skipped": joint.skipped,
                                  "basis_evals": result["basis_evals"]})
    if cfg.surrogates.save_samples:
        write_samples(joint, _path(cfg, "samples", f"step_{t:03d}.csv"))
    if surrogate.trace is not None:
        write_csv(surrogate.trace, _path(cfg, "traces", f"step_{t:03d}.csv"))
    return [
        {"step": t, "quantity": "n_terms", "value": float(surrogate.map.n_terms)},
        {"step": t, "quantity": "basis_evals", "value": float(result["basis_evals"])},
        {"step": t, "quantity": "model_calls", "value": float(result["model_calls"])},
        {"step": t, "quantity": "skipped_samples", "value": float(joint.skipped)},
    ]


def cmd_train_likelihoods(cfg: RunConfig, args) -> int:
    steps = list(range(1, cfg.simulation.n_steps + 1))
    registry = SurrogateRegistry(_path(cfg, SURROGATE_DIR))
    cfg_json = cfg.model_dump_json()
    print(f"[*] Training {len(steps)} surrogate likelihoods "
          f"({cfg.surrogates.n_samples} samples per step, {cfg.workers} worker(s))")

    rows, failures = [], {}

    def record(t: int, fetch: Callable[[], dict]):
        try:
            result = fetch()
        except Exception as e:
            logger.error(f"Step {t}: surrogate training failed: {e}")
            registry.mark_failed(t, str(e))
            failures[t] = str(e)
            print(f"[WARNING] Step {t} failed: {e}")
            return
        rows.extend(_store_step(cfg, registry, result))
        print(f"[OK] Step {t}: {result['surrogate'].map.n_terms} terms")

    if cfg.workers > 1 and len(steps) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(steps))) as pool:
            futures = {pool.submit(_train_step, cfg_json, t): t for t in steps}
            for future in as_completed(futures):
                record(futures[future], future.result)
        # child processes count into their own copy of the counter
        basis_counter.add(int(sum(r["value"] for r in rows if r["quantity"] == "basis_evals")))
    else:
        for t in steps:
            record(t, lambda t=t: _train_step(cfg_json, t))

    frame = pd.DataFrame(rows, columns=["step", "quantity", "value"]).sort_values(["step", "quantity"], kind="stable")
    write_csv(frame, _path(cfg, "training_log.csv"),
              {"format": "seqtm-training-log", "version": LOG_FORMAT_VERSION, "seed": cfg.seed})

    if failures:
        print(f"[WARNING] {len(failures)} of {len(steps)} steps failed: {sorted(failures)}")
        return EXIT_NUMERICAL
    print(f"[OK] Registry complete: {registry.directory}")
    return EXIT_OK


# ----------------------------------------------------------------------
# assimilate
# ----------------------------------------------------------------------

def _write_assimilation(cfg: RunConfig, state):
    manifest = {"format": "seqtm-assimilation-log", "version": LOG_FORMAT_VERSION, "seed": cfg.seed}
    write_csv(history_frame(state), _path(cfg, "assimilation_log.csv"), manifest)
    write_csv(tidy_frame(state), _path(cfg, "assimilation_tidy.csv"), manifest)


def cmd_assimilate(cfg: RunConfig, args) -> int:
    observations = _load_observations(cfg, args.observations)
    steps = list(range(1, observations.shape[0] + 1))
    surrogates = _load_surrogates(cfg, steps)
    assimilation = cfg.assimilation.model_copy(update={"seed": cfg.seed})
    state = initial_state(cfg.prior.density(), surrogates, assimilation)
    print(f"[*] Assimilating {len(steps)} observations (l_max {assimilation.l_max}, "
          f"tolerances {assimilation.var_tol:g} / {assimilation.trace_tol:g})")

    try:
        for y_t in observations:
            state = assimilate_step(state, y_t)
            rec = state.history[-1]
            print(f"    step {rec.step:3d}  {rec.branch:<12s} length {rec.composition_length}  "
                  f"var {rec.variance_diag:.2e}  trace {rec.trace_diag:.2e}  cost {rec.step_cost}")
    finally:
        if state.history:
            _write_assimilation(cfg, state)

    samples = sample_posterior(state, cfg.n_posterior_samples, cfg.seed)
    write_csv(pd.DataFrame(samples, columns=_theta_columns(state.dim)), _path(cfg, POSTERIOR_SAMPLES_FILE),
              {"format": "seqtm-posterior-samples", "version": LOG_FORMAT_VERSION,
               "step": state.t, "seed": cfg.seed})
    for i, tmap in enumerate(state.composition.maps):
        save_map(tmap, _path(cfg, "maps", f"map_{i:02d}.json"))
    median = np.median(samples, axis=0)
    print(f"[OK] Posterior at step {state.t}: median {np.round(median, 4).tolist()}, "
          f"std {np.round(samples.std(axis=0), 4).tolist()}")
    return EXIT_OK


# ----------------------------------------------------------------------
# mcmc
# ----------------------------------------------------------------------

def log_posterior_function(cfg: RunConfig, observations: np.ndarray) -> Callable[[np.ndarray], float]:
    """Unnormalized log posterior of one parameter vector.

    em31 and gaussian-linear use their analytic likelihoods; other models
    fall back to the trained surrogates of steps 1..t.
    """
    prior = cfg.prior.density()
    kind = cfg.model.kind
    if kind == "em31":
        em31 = cfg.model.em31
        y = observations[:, 0]

        def logpost(theta):
            if theta[0] < 0:
                return -np.inf
            return float(prior.log_density(theta[None])[0]
                         + np.sum(analytic_gaussian_loglik(y, theta[0], em31, normalized=True)))
        return logpost

    if kind == "gaussian-linear":
        model = cfg.model.build()

        def logpost(theta):
            r = (observations - model.matrix @ theta) / model.noise_std
            return float(prior.log_density(theta[None])[0] - 0.5 * np.sum(r ** 2))
        return logpost

    logger.info(f"No analytic likelihood for model '{kind}', using the surrogate likelihoods")
    steps = list(range(1, observations.shape[0] + 1))
    surrogates = _load_surrogates(cfg, steps)
    density = PosteriorDensity(prior, [surrogates[t] for t in steps], list(observations))
    return lambda theta: float(density.log_density(theta[None])[0])


def _tm_samples(cfg: RunConfig) -> Optional[np.ndarray]:
    run = cfg.mcmc.tm_run
    path = os.path.join(run, POSTERIOR_SAMPLES_FILE) if run else None
    if path is None or not os.path.exists(path):
        return None
    frame, _ = read_csv(path)
    return frame.to_numpy(dtype=float)


def cmd_mcmc(cfg: RunConfig, args) -> int:
    observations = _load_observations(cfg, args.observations)
    step = cfg.mcmc.step or observations.shape[0]
    if step > observations.shape[0]:
        raise ConfigError(f"mcmc step {step} exceeds the {observations.shape[0]} available observations")
    logpost = log_posterior_function(cfg, observations[:step])

    tm = _tm_samples(cfg)
    if tm is not None:
        start = tm.mean(axis=0)
        sigma = np.atleast_2d(np.cov(tm, rowvar=False))
        print(f"[*] Starting chain at the transport-map posterior mean {np.round(start, 4).tolist()}")
    else:
        logger.warning("No transport-map run available, starting the chain at the prior mean")
        print("[WARNING] No transport-map run available, starting at the prior mean with the prior covariance")
        start = np.asarray(cfg.prior.mean, dtype=float)
        sigma = np.asarray(cfg.prior.cov, dtype=float)

    print(f"[*] Running {cfg.mcmc.n} MH steps on the posterior of step {step}")
    chain = mh_chain(logpost, start, sigma, cfg.mcmc.n, cfg.seed)
    manifest = {"format": "seqtm-chain", "version": LOG_FORMAT_VERSION, "step": step, "seed": cfg.seed,
                "acceptance_rate": chain.acceptance_rate}
    write_csv(chain.to_frame(), _path(cfg, "chain.csv"), manifest)

    burned = chain.burned(cfg.mcmc.burn_in)
    rows = []
    for j in range(burned.shape[1]):
        try:
            value = iact(burned[:, j])
        except ValueError as e:
            logger.warning(f"IACT unavailable for theta{j}: {e}")
            value = np.nan
        rows.append({"step": step, "quantity": f"theta{j}_iact", "value": value})
    rows.append({"step": step, "quantity": "acceptance_rate", "value": chain.acceptance_rate})
    write_csv(pd.DataFrame(rows, columns=["step", "quantity", "value"]), _path(cfg, "iact.csv"))

    if tm is not None:
        report = compare_posteriors(tm, chain, cfg.mcmc.burn_in)
        write_csv(report, _path(cfg, "comparison.csv"))
        with open(_path(cfg, "comparison.txt"), "w", encoding="utf-8") as f:
            f.write(report.to_string(index=False) + "\n")
        print(report.to_string(index=False))
        if not report["agree"].all():
            print("[WARNING] Transport-map and MCMC means differ by more than 3 standard errors")
    print(f"[OK] Chain written, acceptance rate {chain.acceptance_rate:.3f}")
    return EXIT_OK


# ----------------------------------------------------------------------
# diagnose
# ----------------------------------------------------------------------

def likelihood_error_grid(cfg: RunConfig, surrogate) -> pd.DataFrame:
    """Surrogate against analytic EM31 log-likelihood on a (theta, y) grid.

    y spans sigma_eff(theta) +/- y_halfwidth * sigma_eps for each theta;
    relative_error compares normalized log-likelihoods.
    """
    d = cfg.diagnose
    em31 = cfg.model.em31
    thetas = np.linspace(d.theta_min, d.theta_max, d.n_theta)
    offsets = np.linspace(-d.y_halfwidth, d.y_halfwidth, d.n_y) * em31.sigma_eps
    theta_grid = np.repeat(thetas, d.n_y)
    y_grid = (em31_sigma_eff(thetas, em31)[:, None] + offsets[None, :]).ravel()
    approx = surrogate.loglik(theta_grid[:, None], y_grid[:, None])
    exact = analytic_gaussian_loglik(y_grid, theta_grid, em31, normalized=True)
    return pd.DataFrame({
        "theta": theta_grid,
        "y": y_grid,
        "surrogate_loglik": approx,
        "analytic_loglik": exact,
        "relative_error": np.abs(approx - exact) / np.abs(exact),
    })


def cmd_diagnose(cfg: RunConfig, args) -> int:
    if cfg.model.kind != "em31":
        raise ConfigError("diagnose compares against the analytic EM31 likelihood and needs model.kind = em31")
    step = cfg.diagnose.step
    surrogate = _load_surrogates(cfg, [step])[step]
    grid = likelihood_error_grid(cfg, surrogate)
    write_csv(grid, _path(cfg, "loglik_error.csv"),
              {"format": "seqtm-loglik-error", "version": LOG_FORMAT_VERSION, "step": step})
    print(f"[OK] Step {step}: median relative error {grid['relative_error'].median():.4f}, "
          f"max {grid['relative_error'].max():.4f}")
    return EXIT_OK


# ----------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------

COMMANDS = {
    "simulate": (cmd_simulate, "Simulate the observation sequence y_1..y_T"),
    "train-likelihoods": (cmd_train_likelihoods, "Build one surrogate likelihood per step"),
    "assimilate": (cmd_assimilate, "Characterize the sequential posteriors"),
    "mcmc": (cmd_mcmc, "Random-walk Metropolis baseline and comparison"),
    "diagnose": (cmd_diagnose, "Surrogate log-likelihood error grid (EM31)"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '--config',
        help='JSON run configuration file'
    )
    common.add_argument(
        '--set',
        dest='overrides',
        action='append',
        default=[],
        metavar='SECTION.FIELD=VALUE',
        help='Override one configuration field (repeatable, value parsed as JSON)'
    )
    common.add_argument(
        '--output-dir',
        help='Run directory (default: SEQTM_OUTPUT_DIR or ./runs)'
    )
    common.add_argument(
        '--workers',
        type=int,
        help='Worker count (default: SEQTM_WORKERS or 1)'
    )
    common.add_argument(
        '--seed',
        type=int,
        help='Master seed of the run'
    )

    parser = argparse.ArgumentParser(
        prog="seqtm",
        description="Sequential simulation-based inference with adaptive transport maps",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    # Simulate 40 EM31 observations at theta = 2
    python seqtm.py simulate --set model.kind=em31 --output-dir runs/em31

    # Train the surrogate likelihoods on 4 workers
    python seqtm.py train-likelihoods --config runs/em31/config.json --workers 4

    # Assimilate the observations, then compare with MCMC
    python seqtm.py assimilate --config runs/em31/config.json
    python seqtm.py mcmc --config runs/em31/config.json --set mcmc.tm_run=runs/em31
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (handler, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("assimilate", "mcmc"):
            p.add_argument(
                '--observations',
                help='Observation CSV (default: <output-dir>/observations.csv)'
            )
        if name == "train-likelihoods":
            p.add_argument(
                '--proposal-map', action='append', dest='proposal_maps', default=None,
                help='Posterior map file used as the sampling proposal (repeat in composition order)'
            )
        p.set_defaults(handler=handler)
    return parser


def _flag_overrides(args) -> List[str]:
    overrides = list(args.overrides)
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    proposal_maps = getattr(args, "proposal_maps", None)
    if proposal_maps:
        overrides.append(f"surrogates.proposal_maps={json.dumps(proposal_maps)}")
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, _flag_overrides(args))
        dump_run_config(cfg, cfg.output_dir)
        return args.handler(cfg, args)
    except (ConfigError, ValidationError, FileNotFoundError) as e:
        print(f"\n[ERROR] {e}")
        return EXIT_CONFIG
    except NumericalError as e:
        logger.exception("Numerical failure")
        print(f"\n[ERROR] Numerical failure: {e}")
        return EXIT_NUMERICAL
    except RuntimeError as e:
        logger.error(f"Model failure: {e}")
        print(f"\n[ERROR] Model failure: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
