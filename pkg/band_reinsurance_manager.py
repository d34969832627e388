#!/usr/bin/env python3
"""
Band Reinsurance Manager - optimal dividends with reinsurance on a
multi-line portfolio with thinning-dependent claims.

Subcommands:
1. solve     - march the HJB scheme, extract the band policy, write artifacts
2. simulate  - Monte Carlo value of a solved policy at chosen starting surpluses
3. verify    - residual, bounds, boundary and partition checks of a solved policy
4. converge  - barrier and V(0) across a list of grid steps
5. plots     - value and contract curves for several configurations

Exit codes: 0 success, 1 configuration/model/artifact error,
2 best-effort solve or failed verification.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from aggregate_claims import AggregateBuilder
from band_reinsurance_errors import (ArtifactError, BandReinsuranceError, ConfigError,
                                     PartitionStructureError)
from band_solver import (BandPolicy, GridSolution, default_x_max, extract_partition, grid_size, policy_value,
                         refine_study, solve, strategy_value_curves)
from candidate_search import CandidatePool, make_pool
from hjb_operators import GridFunction, boundary_consistency, check_bounds, hjb_residual, v0_closed_form
from report_generator import ReportGenerator, load_policy, read_csv_artifact
from run_config import RunConfig, get_config, load_process_defaults, resolve_x0
from surplus_simulator import SimulationConfig, estimate_value
from thinning_model import ThinningModel, model_fingerprint

PROCESS_DEFAULTS = load_process_defaults()

# Using an absolute path for the log file
ABS_LOG_FILE_PATH = os.path.abspath('band_reinsurance.log')

logging.basicConfig(
    level=getattr(logging, PROCESS_DEFAULTS['LOG_LEVEL'], logging.INFO),
    format='%(asctime)s - %(levelname)s - %(message)s',
    handlers=[
        logging.FileHandler(ABS_LOG_FILE_PATH),
        logging.StreamHandler()
    ]
)
logger = logging.getLogger(__name__)


def parse_arguments(argv: Optional[List[str]] = None):
    """Parse command line arguments"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--h', type=float, help='Grid step (overrides H)')
    common.add_argument('--x-max', type=float, help='Grid upper end (overrides X_MAX)')
    common.add_argument('--seed', type=int, help='Simulation seed (overrides SIM_SEED)')
    common.add_argument('--paths', type=int, help='Simulation paths (overrides SIM_PATHS)')
    common.add_argument('--output-dir', help='Artifact directory (overrides OUTPUT_DIR)')
    common.add_argument('-q', '--quiet', action='store_true', help='Suppress the printed summaries')

    parser = argparse.ArgumentParser(
        description='Band Reinsurance Manager - dividend band strategies with optimal reinsurance',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Solve Example 1 with independent proportional contracts
  python %(prog)s solve configs/example1_prop.env

  # Coarser grid for a quick look
  python %(prog)s solve configs/example1_prop.env --h 0.05

  # Monte Carlo check of the solved policy
  python %(prog)s simulate configs/example1_prop.env --paths 100000 --seed 7

  # Verify the artifacts in the output directory
  python %(prog)s verify configs/example1_prop.env

  # Convergence over H_LIST
  python %(prog)s converge configs/example1_prop.env

  # Value curves of the four Example 1 configurations
  python %(prog)s plots configs/example1_prop.env configs/example1_prop_shared.env --output-dir outputs/plots
"""
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    for name, help_text in (('solve', 'Solve the HJB scheme and write the band policy'),
                            ('converge', 'Run the grid refinement study over H_LIST')):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.add_argument('config', help='Run configuration file')

    for name, help_text in (('simulate', 'Monte Carlo value of a solved policy'),
                            ('verify', 'Check a solved policy against the HJB equation')):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.add_argument('config', help='Run configuration file')
        sub.add_argument('--policy', help='policy.json to use (default: <output dir>/policy.json)')

    plots = subparsers.add_parser('plots', parents=[common], help='Value and contract curves for several configs')
    plots.add_argument('configs', nargs='+', help='Run configuration files')

    return parser.parse_args(argv)


def config_override_from_args(args) -> Dict:
    """Command line flags keyed like the config file"""
    return {
        'H': args.h,
        'X_MAX': args.x_max,
        'SIM_SEED': args.seed,
        'SIM_PATHS': args.paths,
        'OUTPUT_DIR': args.output_dir,
    }


def echo(quiet: bool, message: str = ""):
    if not quiet:
        print(message)


def build_pool(config: RunConfig, model: ThinningModel, h: float, K: int) -> CandidatePool:
    builder = AggregateBuilder(model, h, K)
    return make_pool(builder, config.grid, config.families, config.shared,
                     cap=config.candidate_cap, refine=config.refine)


def solve_config(config: RunConfig, model: ThinningModel) -> Tuple[GridSolution, CandidatePool]:
    x_max = config.x_max if config.x_max is not None else default_x_max(model)
    pool = build_pool(config, model, config.h, grid_size(config.h, x_max))
    solution = solve(model, pool, config.h, x_max, tol=config.residual_tol, band_cap=config.band_cap,
                     b1_stride=config.b1_stride)
    return solution, pool


def run_solve(config: RunConfig, quiet: bool = False) -> int:
    model = config.load_model()
    echo(quiet, f"\n🔧 Solving '{config.name}' for model '{model.label}' (h={config.h:g})")
    solution, pool = solve_config(config, model)

    reporter = ReportGenerator(config.output_dir, config.config_hash(), config.name)
    reports = reporter.generate_solve_reports(solution, model.label, pool.describe())
    if config.h_list:
        reports['convergence'] = reporter.generate_convergence(_convergence_table(config, model))
    reports['index'] = reporter.generate_index_report(reports)

    policy = solution.bands
    echo(quiet, "\n📊 SOLVE SUMMARY:")
    echo(quiet, f"   Barrier levels (A): {', '.join(f'{a:.4f}' for a in policy.levels)}")
    echo(quiet, f"   Bands: {solution.band_count}")
    echo(quiet, f"   V(0): {solution.V.values[0]:.6g}")
    echo(quiet, f"   Max HJB residual: {solution.residual_report['max_abs_residual']:.3e} "
                f"(tolerance {solution.residual_report['tolerance']:.3e})")
    for warning in policy.diagnostics.get('structure_warnings', []):
        echo(quiet, f"   ⚠️  Partition kept as best effort: {warning}")
    echo(quiet, f"\n📁 Artifacts written to {config.output_dir}")

    if solution.verified:
        echo(quiet, "\n✅ SOLVE COMPLETED: residual verified")
        return 0
    echo(quiet, "\n🟡 SOLVE COMPLETED (best effort): residual above tolerance")
    echo(quiet, f"📝 Check logs: {ABS_LOG_FILE_PATH}")
    return 2


def _convergence_table(config: RunConfig, model: ThinningModel):
    x_max = config.x_max if config.x_max is not None else default_x_max(model)

    def factory(h, K):
        return build_pool(config, model, h, K)

    return refine_study(model, factory, config.h_list, x_max, tol=config.residual_tol)


def run_converge(config: RunConfig, quiet: bool = False) -> int:
    if not config.h_list:
        raise ConfigError("converge needs H_LIST", key='H_LIST')
    model = config.load_model()
    table = _convergence_table(config, model)
    reporter = ReportGenerator(config.output_dir, config.config_hash(), config.name)
    filename = reporter.generate_convergence(table)

    echo(quiet, "\n📉 CONVERGENCE:")
    for row in table.itertuples():
        echo(quiet, f"   h={row.h:<8g} a1={row.a1:<10.4f} V(0)={row.V0:.6g}")
    echo(quiet, f"   Barrier changes shrink: {'yes' if table.attrs['monotone'] else 'no'}")
    echo(quiet, f"\n📁 {filename}")
    return 0


def _policy_path(config: RunConfig, policy: Optional[str]) -> Path:
    return Path(policy) if policy else Path(config.output_dir) / 'policy.json'


def _check_policy_model(policy: BandPolicy, model: ThinningModel):
    digest = model_fingerprint(model)
    if policy.model_fingerprint != digest:
        raise ArtifactError(f"policy/model mismatch: policy hash {policy.model_fingerprint}, model hash {digest}")


def _value_at(frame, x0: float) -> float:
    x, V = frame['x'].to_numpy(), frame['V'].to_numpy()
    if x0 > x[-1]:
        return float(V[-1] + (x0 - x[-1]))
    return float(np.interp(x0, x, V))


def run_simulate(config: RunConfig, policy_file: Optional[str] = None, quiet: bool = False) -> int:
    model = config.load_model()
    policy = load_policy(_policy_path(config, policy_file))
    _check_policy_model(policy, model)

    x0_list = resolve_x0(config.sim_x0, policy.levels)
    cfg = SimulationConfig(paths=config.sim_paths, dt=config.sim_dt, t_max=config.sim_t_max,
                           seed=config.sim_seed, integrator=config.sim_integrator,
                           threads=int(PROCESS_DEFAULTS['BAND_THREADS']))
    echo(quiet, f"\n🎲 Simulating {cfg.paths} paths per starting point (seed {cfg.seed}, {cfg.integrator})")
    results = estimate_value(model, policy, cfg, x0_list)

    values_path = Path(config.output_dir) / 'value_function.csv'
    V_h = None
    if values_path.exists():
        frame = read_csv_artifact(values_path)
        V_h = [_value_at(frame, x0) for x0 in x0_list]
    else:
        logger.warning(f"{values_path} not found; simulation report carries no V_h column")

    reporter = ReportGenerator(config.output_dir, config.config_hash(), config.name)
    settings = {'paths': cfg.paths, 'seed': cfg.seed, 'dt': cfg.dt, 't_max': cfg.horizon(model),
                'integrator': cfg.integrator, 'x0': x0_list}
    reporter.generate_simulation_report(results, V_h, settings)

    echo(quiet, "\n📊 SIMULATION SUMMARY:")
    for k, result in enumerate(results):
        line = (f"   x0={result.x0:<8g} {result.mean_discounted_dividends:.6g} ± {result.std_error:.3g}"
                f"  ruin {result.ruin_fraction:.3f}")
        if V_h is not None:
            line += f"  V_h={V_h[k]:.6g}"
        echo(quiet, line)
    echo(quiet, f"\n✅ SIMULATION COMPLETED. Reports in {config.output_dir}")
    return 0


def verify_policy(model: ThinningModel, policy: BandPolicy, frame, pool: CandidatePool,
                  tol: float) -> Dict[str, Dict]:
    """Pass/fail per check with numeric margins; never raises on a failing check"""
    fprime = frame['fprime'].to_numpy()
    u = policy_value(frame['f'].to_numpy(), fprime, frame['V'].to_numpy(), policy)
    checks: Dict[str, Dict] = {}

    residual = hjb_residual(u, pool, model, tol)
    checks['hjb_residual'] = {
        'passed': residual['passed'],
        'margin': residual['tolerance'] - residual['max_abs_residual'],
        'max_abs_residual': residual['max_abs_residual'],
        'tolerance': residual['tolerance'],
        'violating_intervals': residual['violating_intervals'],
        'message': ("residual above tolerance on " +
                    ", ".join(f"[{lo:g}, {hi:g}]" for lo, hi in residual['violating_intervals'])),
    }

    bounds = check_bounds(u, model)
    checks['bounds'] = {
        'passed': not bounds['lower_bound_violations'] and not bounds['upper_bound_violations'],
        'margin': min(bounds['lower_margin'], bounds['upper_margin']),
        'lower_margin': bounds['lower_margin'],
        'upper_margin': bounds['upper_margin'],
        'message': (f"{len(bounds['lower_bound_violations'])} lower and "
                    f"{len(bounds['upper_bound_violations'])} upper envelope violations"),
    }
    checks['slope'] = {
        'passed': not bounds['slope_violations'],
        'margin': bounds['min_slope'] - 1.0,
        'min_slope': bounds['min_slope'],
        'message': f"slope below 1 at {len(bounds['slope_violations'])} point(s)",
    }

    first = int(policy.a_indices[0])
    v0, v0_vector = v0_closed_form(model, pool)
    boundary = boundary_consistency(float(u.values[0]), v0, first)
    checks['boundary'] = {
        **boundary,
        'v0_contract': v0_vector.label(),
        'message': (f"V(0)/v0 = {boundary['ratio']:.4f} "
                    f"({'equality' if boundary['mode'] == 'equality' else 'lower bound'} check)"),
    }

    try:
        extracted = extract_partition(GridFunction(policy.h, frame['V'].to_numpy()), model, pool, tol)
        gap = max((abs(a - b) for a, b in zip(extracted.levels, policy.levels)), default=0.0)
        same = len(extracted.levels) == len(policy.levels) and gap <= 0.5 * policy.h
        checks['partition'] = {
            'passed': same,
            'margin': 0.5 * policy.h - gap if len(extracted.levels) == len(policy.levels) else -np.inf,
            'levels': extracted.levels,
            'policy_levels': policy.levels,
            'message': f"recomputed A {extracted.levels} differs from the policy's {policy.levels}",
        }
    except PartitionStructureError as e:
        checks['partition'] = {'passed': False, 'margin': None, 'message': str(e),
                               'diagnostics': e.diagnostics}

    checks['fprime_nonnegative'] = {
        'passed': bool(np.all(fprime >= 0)),
        'margin': float(fprime.min()),
        'message': f"f' reaches {fprime.min():.3e}",
    }
    return checks


def run_verify(config: RunConfig, policy_file: Optional[str] = None, quiet: bool = False) -> int:
    model = config.load_model()
    policy = load_policy(_policy_path(config, policy_file))
    _check_policy_model(policy, model)
    frame = read_csv_artifact(Path(config.output_dir) / 'value_function.csv')

    pool = build_pool(config, model, policy.h, policy.K)
    checks = verify_policy(model, policy, frame, pool, config.residual_tol)
    reporter = ReportGenerator(config.output_dir, config.config_hash(), config.name)
    reporter.generate_verification_report(checks)

    echo(quiet, "\n🔍 VERIFICATION:")
    for name, check in checks.items():
        echo(quiet, f"   {'✅' if check['passed'] else '❌'} {name}")
    if all(check['passed'] for check in checks.values()):
        echo(quiet, "\n✅ VERIFICATION PASSED")
        return 0
    echo(quiet, "\n❌ VERIFICATION FAILED")
    return 2


def run_plots(configs: List[RunConfig], output_dir: str, quiet: bool = False) -> int:
    solutions = {}
    for config in configs:
        model = config.load_model()
        echo(quiet, f"🔧 Solving '{config.name}'")
        solutions[config.name], _ = solve_config(config, model)

    values, params = strategy_value_curves(solutions)
    reporter = ReportGenerator(output_dir, "+".join(c.config_hash() for c in configs), "plots")
    written = reporter.generate_plot_data(values, params)
    echo(quiet, "\n📈 PLOT DATA:")
    for filename in written.values():
        echo(quiet, f"   {filename}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Main function"""
    args = parse_arguments(argv)
    config_override = config_override_from_args(args)

    try:
        if args.command == 'plots':
            configs = [get_config(path, {**config_override, 'OUTPUT_DIR': None}) for path in args.configs]
            output_dir = args.output_dir or os.path.join(PROCESS_DEFAULTS['OUTPUT_ROOT'], 'plots')
            return run_plots(configs, output_dir, args.quiet)

        config = get_config(args.config, config_override)
        if args.command == 'solve':
            return run_solve(config, args.quiet)
        if args.command == 'converge':
            return run_converge(config, args.quiet)
        if args.command == 'simulate':
            return run_simulate(config, args.policy, args.quiet)
        return run_verify(config, args.policy, args.quiet)

    except PartitionStructureError as e:
        logger.error(f"Partition extraction failed: {e}")
        print(f"\n🟡 Best effort: {e}")
        return 2
    except BandReinsuranceError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"\n❌ Error: {e}")
        return 1
    except KeyboardInterrupt:
        print("\n⚠️ Operation cancelled by user")
        return 1
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        print(f"\n❌ Error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
