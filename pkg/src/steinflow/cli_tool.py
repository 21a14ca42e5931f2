import argparse
import json
import logging
import os
import sys

from . import __version__, continuum, storage, svgd, verify
from .config import CHART_FILE, META_FILE, PARTICLES_FILE_TEMPLATE, TRAJECTORY_FILE, Estimator
from .discrepancy import ksd
from .errors import SteinflowError
from .experiment import ExperimentConfig, load_config
from .svg_template import get_svg_content
from .utils import derive_rng

logger = logging.getLogger(__name__)


def _version_text() -> str:
    versions = storage.package_versions()
    return (f"steinflow {__version__} (numpy {versions['numpy']}, scipy {versions['scipy']}, "
            f"python {versions['python']})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steinflow", description="SVGD particle runs, flows, discrepancies and checks.")
    parser.add_argument("--version", action="version", version=_version_text())
    parser.add_argument("--verbose", action="store_true", help="Print all debug and info messages.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    run = sub.add_parser("run", help="Run discrete SVGD iterations.")
    run.add_argument("--config", required=True, help="Experiment config file (TOML, dotted keys).")
    run.add_argument("--out", required=True, help="Output directory.")
    run.add_argument("--seed", type=int, help="Override the config seed.")
    run.add_argument("--track-density", action="store_true", help="Track log-densities and record KL.")
    run.add_argument("--svg", action="store_true", help="Also write a KSD/KL chart as SVG.")

    for name, help_text in (("flow", "Integrate the continuous-time particle ODE."),
                            ("langevin", "Run independent unadjusted Langevin chains.")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="Experiment config file (TOML, dotted keys).")
        p.add_argument("--out", required=True, help="Output directory.")
        p.add_argument("--t-end", type=float, help="Final time (overrides the config).")
        p.add_argument("--dt", type=float, help="Time step (overrides the config).")
        p.add_argument("--seed", type=int, help="Override the config seed.")
        p.add_argument("--svg", action="store_true", help="Also write a KSD/KL chart as SVG.")
        if name == "flow":
            p.add_argument("--track-density", action="store_true", help="Track log-densities and record KL.")

    k = sub.add_parser("ksd", help="Kernelized Stein discrepancy of a point set.")
    k.add_argument("--config", required=True, help="Config providing target.* and kernel.* keys.")
    k.add_argument("--points", required=True, help="CSV file of points, one row per point.")
    k.add_argument("--estimator", choices=[e.value for e in Estimator], default=Estimator.VSTAT.value)

    v = sub.add_parser("verify", help="Run the numerical identity and inequality checks.")
    v.add_argument("--config", help="Config providing verify.* keys (defaults when omitted).")
    v.add_argument("--out", help="Write the report as a JSON array to this file.")
    v.add_argument("--only", action="append", metavar="CHECK", choices=list(verify.CHECKS),
                   help="Run only this check (repeatable).")
    return parser


def _write_outputs(cfg: ExperimentConfig, record: svgd.TrajectoryRecord, out_dir: str, svg: bool,
                   command: str):
    os.makedirs(out_dir, exist_ok=True)
    storage.write_trajectory_csv(os.path.join(out_dir, TRAJECTORY_FILE), record)
    for row in record.snapshots():
        storage.write_particles_csv(os.path.join(out_dir, PARTICLES_FILE_TEMPLATE.format(step=row.step)),
                                    row.positions)
    final_step = record.rows[-1].step
    storage.write_particles_csv(os.path.join(out_dir, PARTICLES_FILE_TEMPLATE.format(step=final_step)),
                                record.final.positions)
    extra = {"command": command}
    if cfg.overrides:
        extra.update(overrides=cfg.overrides, source_config=cfg.source_text)
    storage.write_meta_json(os.path.join(out_dir, META_FILE), cfg.text, cfg.values, cfg.seed, extra)
    if svg or cfg.output.svg:
        with open(os.path.join(out_dir, CHART_FILE), "w", encoding="utf-8") as f:
            f.write(get_svg_content(record, title=f"steinflow {command}"))
    print(os.path.join(out_dir, TRAJECTORY_FILE))


def cmd_run(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed, track_density=args.track_density or None)
    initial = cfg.init.build(cfg.n_particles, derive_rng(cfg.seed, "init"), cfg.output.track_density)
    record = svgd.run(cfg.target, cfg.kernel, initial, cfg.schedule, cfg.max_iter, cfg.output.record_every,
                      track_density=cfg.output.track_density, snapshot_every=cfg.output.thinning)
    _write_outputs(cfg, record, args.out, args.svg, "run")
    return 0


def cmd_flow(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed, track_density=args.track_density or None,
                                                  t_end=args.t_end, dt=args.dt)
    initial = cfg.init.build(cfg.n_particles, derive_rng(cfg.seed, "init"), cfg.output.track_density)
    record = continuum.integrate_vlasov(cfg.target, cfg.kernel, initial, cfg.flow, track=cfg.output.track_density,
                                        snapshot_every=cfg.output.thinning)
    _write_outputs(cfg, record, args.out, args.svg, "flow")
    return 0


def cmd_langevin(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed).with_langevin_time(args.t_end, args.dt)
    initial = cfg.init.build(cfg.n_particles, derive_rng(cfg.seed, "init"))
    record = continuum.run_langevin(cfg.target, initial, cfg.langevin, cfg.seed, spec=cfg.kernel,
                                    snapshot_every=cfg.output.thinning)
    _write_outputs(cfg, record, args.out, args.svg, "langevin")
    return 0


def cmd_ksd(args) -> int:
    cfg = load_config(args.config)
    points = storage.read_points_csv(args.points)
    report = ksd(cfg.target, cfg.kernel, points, Estimator(args.estimator))
    print(json.dumps(report.to_dict()))
    return 0


def cmd_verify(args) -> int:
    cfg = load_config(args.config).verify if args.config else verify.VerifyConfig()
    results = verify.report_all(cfg, args.out, args.only)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name}: observed={result.observed:.6g} target={result.bound_or_target:.6g}")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "run": cmd_run,
    "flow": cmd_flow,
    "langevin": cmd_langevin,
    "ksd": cmd_ksd,
    "verify": cmd_verify,
}


def dispatch(argv: list[str]) -> int:
    """Parses ``argv`` and runs the selected subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logger.debug("Running %s with %s", args.command, vars(args))
    try:
        return COMMANDS[args.command](args)
    except SteinflowError as e:
        print(f"Error: {e}")
        return 1


def main():
    """Main function for the CLI tool."""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
