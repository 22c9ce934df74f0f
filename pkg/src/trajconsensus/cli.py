"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 missing or
stale upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import synth
from .core import write_tracks
from .errors import (
    ConfigurationError, EmptyDatasetError, MissingDependencyError, SchemaError, StaleArtifactError,
)
from .pipeline import STAGES, RunConfig, load_config, run_stage, validate, write_run_manifest

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_DEPENDENCY = 0, 1, 2, 3

log = logging.getLogger("trajconsensus")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (MissingDependencyError, StaleArtifactError)):
        return EXIT_DEPENDENCY
    if isinstance(exc, (ConfigurationError, SchemaError, EmptyDatasetError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (a run_manifest.json also works)")
    common.add_argument("--input", action="append", help="trajectory file; repeatable")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (0 = all cores)")
    common.add_argument("--seed", type=int, help="seed for randomized synthetic inputs")
    common.add_argument("--policy", action="append", default=[], metavar="NAME=VALUE",
                        help="override a config value, e.g. pet_missing=strict or flow.enabled=false")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="trajconsensus", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run the full pipeline (or --stage NAME only)")
    run.add_argument("--stage", choices=STAGES, action="append",
                     help="run only these stages; upstream dumps must exist")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sp = sub.add_parser("synth", parents=[common], help="write a synthetic scenario as trajectory + geometry files")
    sp.add_argument("--scenario", action="append", default=[],
                    help="bundled scenario name, scenario file, or 'suite'")
    sp.add_argument("--random-pairs", type=int, default=0, help="append N seeded random crossing pairs")
    sp.add_argument("--list", action="store_true", help="list bundled scenarios and exit")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.input:
        cfg.ingest.input = list(args.input)
    if args.out:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    if args.seed is not None:
        cfg.seed = args.seed
    for item in args.policy:
        if "=" not in item:
            raise ConfigurationError(f"--policy expects NAME=VALUE, got {item!r}")
        name, value = item.split("=", 1)
        cfg.override(name.strip(), value.strip())
    return cfg


def cmd_synth(args) -> int:
    if args.list:
        for name in synth.library():
            spec = synth.load_scenario(name)
            print(f"{name}: {spec.description.strip()}")
        return EXIT_OK
    cfg = resolve_config(args)
    if not args.scenario and args.random_pairs <= 0:
        raise ConfigurationError("synth needs --scenario or --random-pairs")
    specs = []
    for s in args.scenario:
        names = synth.library() if s == "suite" else [s]
        specs.extend(synth.load_scenario(n) for n in names)
    tracks, geometry = synth.combine(specs) if specs else ([], None)
    rng = np.random.default_rng(cfg.seed)
    tracks.extend(synth.random_pairs(rng, args.random_pairs, first_slot=len(specs)))
    out = Path(cfg.out) / "synth"
    out.mkdir(parents=True, exist_ok=True)
    write_tracks(tracks, out / "tracks.csv")
    if geometry is not None:
        (out / "geometry.yaml").write_text(yaml.safe_dump(geometry.to_dict(), sort_keys=True), encoding="utf-8")
    (out / "scenarios.yaml").write_text(
        yaml.safe_dump({"seed": cfg.seed, "random_pairs": args.random_pairs,
                        "scenarios": [s.to_dict() for s in specs]}, sort_keys=False),
        encoding="utf-8")
    print(f"wrote {len(tracks)} tracks to {out}")
    return EXIT_OK


def _print_summary(out: Path) -> None:
    report = out / "report" / "report.json"
    if report.is_file():
        doc = json.loads(report.read_text(encoding="utf-8"))
        print(f"encounters: {doc['encounters']} (AV->VRU records: {doc['av_vru_encounters']})")
        if doc["min_ttc"] is not None:
            print(f"min TTC: {doc['min_ttc']:.3f} s")
        c = doc.get("consensus")
        if c:
            print(f"consensus over {c['frames']} frames: all three {c['pct_all_three']:.2f}%, "
                  f"exactly two {c['pct_exactly_two']:.2f}%, at most one {c['pct_at_most_one']:.2f}%")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = None
    stage = args.command
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = resolve_config(args)
        if args.command == "run":
            stages = tuple(s for s in STAGES if s in args.stage) if args.stage else STAGES
            validate(cfg, stages)
            for stage in stages:
                run_stage(stage, cfg)
            write_run_manifest(cfg)
            _print_summary(Path(cfg.out))
        else:
            validate(cfg, (stage,))
            run_stage(stage, cfg)
            write_run_manifest(cfg)
            if stage == "report":
                _print_summary(Path(cfg.out))
        (Path(cfg.out) / "error.json").unlink(missing_ok=True)
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = exit_code_for(exc)
        report = {"stage": stage, "error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if code == EXIT_RUNTIME:
            report["traceback"] = traceback.format_exc()
        print(f"error [{type(exc).__name__}] in {stage}: {exc}", file=sys.stderr)
        if cfg is not None:
            try:
                out = Path(cfg.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "error.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
            except OSError:
                pass
        return code


if __name__ == "__main__":
    sys.exit(main())
