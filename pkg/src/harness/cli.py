"""
Command-line interface: simulate, fit, krige, experiment, render and presets.

Exit codes: 0 success, 2 configuration or argument error, 3 numerical failure, 4 IO error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import structlog

from src.geoblend.errors import ArgumentError, ConfigError, DomainError
from src.harness.config import ExperimentConfig, field_of, load_config, parse_config
from src.harness.fields import read_field, render_heatmap, write_field
from src.harness.presets import get_preset, list_presets
from src.harness.runner import ExperimentRunner
from src.harness.settings import RuntimeSettings

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def configure_logging(json_logs: bool = False, verbose: bool = False) -> None:
    renderer = structlog.processors.JSONRenderer() if json_logs else structlog.dev.ConsoleRenderer()
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.DEBUG if verbose else logging.INFO
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoblend",
        description="Multivariate GMRF priors with geodesic blending across interfaces.",
    )
    parser.add_argument("--config", type=Path, help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="Override the config seed")
    parser.add_argument("--out", type=Path, help="Output directory")
    parser.add_argument("--threads", type=int, help="Number of worker processes")
    parser.add_argument("--log-json", action="store_true", help="Emit JSON log lines")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    commands = parser.add_subparsers(dest="command", required=True)
    for name, description in (
        ("simulate", "Draw a truth field and its observations"),
        ("fit", "Fit the configured models by maximum likelihood"),
        ("krige", "Fit and compute posterior means"),
    ):
        sub = commands.add_parser(name, help=description)
        sub.add_argument("--replicate", type=int, default=0, help="Replicate index")

    experiment = commands.add_parser("experiment", help="Run a preset or the --config experiment")
    experiment.add_argument("preset", nargs="?", help="Preset name (see 'presets')")
    experiment.add_argument("--replicates", type=int, help="Override the replicate count")

    render = commands.add_parser("render", help="Render one component of a field file")
    render.add_argument("field_file", type=Path, help="Field file (any of .json/.bin or the stem)")
    render.add_argument("--field", type=int, default=0, help="Component index")
    render.add_argument("--min", type=float, dest="vmin", help="Lower end of the gray scale")
    render.add_argument("--max", type=float, dest="vmax", help="Upper end of the gray scale")
    render.add_argument("--png", action="store_true", help="Also write a PNG")

    commands.add_parser("presets", help="List the preset names")
    return parser


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.command == "experiment" and args.preset:
        config = get_preset(args.preset, replicates=args.replicates, seed=args.seed)
    elif args.config is not None:
        config = load_config(args.config)
        overrides = {"seed": args.seed}
        if args.command == "experiment":
            overrides["replicates"] = args.replicates
        updates = {k: v for k, v in overrides.items() if v is not None}
        if updates:
            config = parse_config(config.model_dump(mode="json") | updates)
    else:
        raise ArgumentError(f"'{args.command}' needs --config or a preset name")
    return config


def _output_dir(args: argparse.Namespace, config: ExperimentConfig, settings: RuntimeSettings) -> Path:
    if args.out is not None:
        return args.out
    if config.output_dir is not None:
        return Path(config.output_dir)
    return settings.output_dir / config.name


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _simulate(runner: ExperimentRunner, replicate: int) -> None:
    truth, obs = runner.simulate(replicate)
    grid = runner.config.grid
    directory = runner.output_dir / f"replicate-{replicate:03d}"
    write_field(directory / "truth", truth, grid, runner.n_fields, {"replicate": replicate})
    write_field(
        directory / "observations",
        obs.d,
        grid,
        obs.operator.n_obs // grid.n,
        {"replicate": replicate, "kind": str(obs.operator.kind), "seed": obs.seed},
    )
    render_heatmap(field_of(truth, grid, 0), directory / "truth-field1", png=runner.config.png)


def _fit(runner: ExperimentRunner, replicate: int) -> None:
    _, obs = runner.simulate(replicate)
    results = {}
    for kind in runner.config.fit_models:
        fit = runner.fit(obs, kind)
        if fit is not None:
            results[str(kind)] = fit.model_dump(mode="json", exclude={"per_replicate"})
    _write_json(runner.output_dir / f"fit-replicate-{replicate:03d}.json", results)


def _krige(runner: ExperimentRunner, replicate: int) -> None:
    truth, obs = runner.simulate(replicate)
    grid = runner.config.grid
    directory = runner.output_dir / f"replicate-{replicate:03d}"
    errors = {}
    write_field(directory / "truth", truth, grid, runner.n_fields, {"replicate": replicate})
    for kind in runner.config.fit_models:
        fit = runner.fit(obs, kind)
        hyper = fit.estimate if fit is not None else runner.config.truth_hyper()
        posterior = runner.predict(obs, hyper, kind, truth)
        write_field(
            directory / f"prediction-{kind}",
            posterior.mean,
            grid,
            runner.n_fields,
            {"replicate": replicate, "model": str(kind)},
        )
        errors[str(kind)] = posterior.relative_error
    _write_json(directory / "krige.json", {"relative_error": errors})


def _render(args: argparse.Namespace) -> None:
    field_file = read_field(args.field_file)
    scale = None
    if args.vmin is not None or args.vmax is not None:
        if args.vmin is None or args.vmax is None:
            raise ArgumentError("--min and --max must be given together")
        scale = (args.vmin, args.vmax)
    stem = args.out or Path(args.field_file).with_suffix("")
    target = Path(f"{stem}-field{args.field + 1}")
    for path in render_heatmap(field_file.component(args.field), target, scale, args.png):
        print(path)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_json, args.verbose)

    try:
        if args.command == "presets":
            print("\n".join(list_presets()))
            return EXIT_OK
        if args.command == "render":
            _render(args)
            return EXIT_OK

        settings = RuntimeSettings.from_env()
        config = _resolve_config(args)
        runner = ExperimentRunner(
            config,
            _output_dir(args, config, settings),
            threads=args.threads or config.threads or settings.threads,
        )
        if args.command == "experiment":
            manifest = runner.run()
            print(json.dumps(manifest.summary, indent=2, sort_keys=True))
        else:
            handler = {"simulate": _simulate, "fit": _fit, "krige": _krige}[args.command]
            handler(runner, args.replicate)
        return EXIT_OK
    except (ConfigError, ArgumentError) as exc:
        logger.error("Configuration error", error=str(exc))
        return EXIT_CONFIG
    except DomainError as exc:
        logger.error("Numerical failure", error=str(exc), index=exc.index)
        return EXIT_NUMERICAL
    except OSError as exc:
        logger.error("IO error", error=str(exc))
        return EXIT_IO


def main() -> None:
    sys.exit(run())
