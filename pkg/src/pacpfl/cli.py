"""Command line entry point: ``pacpfl {generate,train,evaluate,bounds}``."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import yaml

from . import config as config_mod
from . import experiment, fed, metrics
from .config import ConfigError
from .data import DataError
from .gp import NumericalInstabilityError

log = logging.getLogger("pacpfl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class OutputExistsError(OSError):
    pass


def _prepare_dir(path: Path, force: bool, keep=()):
    """Create ``path``; refuse to touch existing output unless ``force``.

    Files named in ``keep`` survive a forced overwrite.
    """
    if path.exists() and any(p.name not in keep for p in path.iterdir()):
        if not force:
            raise OutputExistsError(f"{path} already exists; pass --force to overwrite")
        for p in path.iterdir():
            if p.name in keep:
                continue
            if p.is_dir():
                shutil.rmtree(p)
            else:
                p.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.output_dir = args.out
    if cfg.data.manifest and args.config:
        manifest = Path(cfg.data.manifest)
        if not manifest.is_absolute():
            cfg.data.manifest = str(Path(args.config).parent / manifest)
    return cfg.validate()


def run_dir(cfg) -> Path:
    return Path(cfg.output_dir) / f"{cfg.mode}_{cfg.seed}"


def cmd_generate(cfg, force=False) -> Path:
    if cfg.data.source != "synthetic":
        raise ConfigError("data.source: generate needs a synthetic task")
    out = _prepare_dir(Path(cfg.output_dir) / f"data_{cfg.seed}", force)
    dataset = experiment.load_dataset(cfg)
    manifest = experiment.write_dataset(dataset, out)
    config_mod.save(cfg, out / "config.yaml")
    log.info("wrote %d existing and %d new clients to %s", dataset.n, len(dataset.new), out)
    return manifest


def cmd_train(cfg, force=False) -> Path:
    out = _prepare_dir(run_dir(cfg), force)
    dataset = experiment.load_dataset(cfg)
    result = experiment.train(cfg, dataset)
    spec = experiment.gp_spec(experiment.effective_config(cfg)[0])
    fed.save_particles(out / "particles.txt", result.particles, spec)
    if result.roundlog is not None:
        result.roundlog.write_csv(out / "rounds.csv")
    report = experiment.bounds_report(cfg, dataset, result.particles)
    experiment.write_report(report, out / "bounds.yaml")
    config_mod.save(cfg, out / "config.yaml")
    log.info("trained %s; outputs in %s", cfg.mode, out)
    return out


def cmd_evaluate(cfg, particle_file=None, force=False) -> Path:
    out = run_dir(cfg)
    particle_file = Path(particle_file) if particle_file else out / "particles.txt"
    if not cfg.oracle and not particle_file.exists():
        raise FileNotFoundError(f"particle file {particle_file} not found; run train first")
    for name in ("metrics.csv", "summary.csv"):
        if (out / name).exists() and not force:
            raise OutputExistsError(f"{out / name} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    dataset = experiment.load_dataset(cfg)
    particles = None
    if not cfg.oracle:
        spec = experiment.gp_spec(experiment.effective_config(cfg)[0])
        particles = fed.load_particles(particle_file, spec)
    rows, summaries = experiment.evaluate(cfg, dataset, particles)
    metrics.write_metrics_csv(rows, out / "metrics.csv")
    metrics.write_summary_csv(summaries, out / "summary.csv")
    for s in summaries:
        print(f"{s.group:8s} {s.metric:5s} mean={s.mean:.4f} median={s.median:.4f} "
              f"+/-{s.half_width:.4f} (n={s.count})")
    return out


def cmd_bounds(cfg, particle_file=None, force=False) -> dict:
    dataset = experiment.load_dataset(cfg)
    particles = None
    if particle_file:
        spec = experiment.gp_spec(experiment.effective_config(cfg)[0])
        particles = fed.load_particles(particle_file, spec)
    report = experiment.bounds_report(cfg, dataset, particles)
    out = run_dir(cfg)
    target = out / "bounds_report.yaml"
    if target.exists() and not force:
        raise OutputExistsError(f"{target} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    experiment.write_report(report, target)
    print(yaml.safe_dump(experiment._plain(report), sort_keys=False), end="")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacpfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("generate", "write the synthetic federation as CSV files"),
        ("train", "train the configured mode and write particles, round log and bounds"),
        ("evaluate", "personalize every client and write RSMSE/CE tables"),
        ("bounds", "write the term-by-term bound report"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name in ("evaluate", "bounds"):
            p.add_argument("--particles", help="particle file (default: the run directory's)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "generate":
            cmd_generate(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.force)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.particles, args.force)
        else:
            cmd_bounds(cfg, args.particles, args.force)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalInstabilityError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, DataError, fed.ParticleFileError) as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
