"""Command-line entry point.

Subcommands: annotate (run the two-stage pipeline over a scene), eval
(score predictions against references), synth (generate a synthetic scene),
export (convert annotations to a flat text table), check (run the
synthetic-scene self-check oracle).

Configuration precedence, lowest to highest: built-in defaults, the JSON
file named by $OPENBOX_CONFIG, the file given with --config, --set overrides,
then explicit --seed/--workers flags. The effective configuration is dumped
next to every annotate run's outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import CONFIG_DOC, PipelineConfig, parse_override
from .evaluation import EvalConfig, EvalError, evaluate
from .geometry import OrientedBox3
from .pipeline import annotate_scene
from .scene_io import (FORMAT_VERSION, Annotation, AnnotationSet, NoFramesError,
                       SceneFormatError, default_priors, load_priors,
                       load_sequence, read_annotations, write_annotations)
from .synth import SceneSpec, generate, oracle_check

CONFIG_ENV = "OPENBOX_CONFIG"
EXPORT_FORMATS = ("flat",)

log = logging.getLogger("openbox")


def _config_epilog() -> str:
    lines = ["pipeline config keys (JSON file via --config or $%s, or --set KEY=VALUE):"
             % CONFIG_ENV]
    for f in dataclasses.fields(PipelineConfig):
        doc = CONFIG_DOC.get(f.name, "")
        lines.append(f"  {f.name}={f.default!r:<8}  {doc}")
    return "\n".join(lines) + "\n"


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    env_path = os.environ.get(CONFIG_ENV)
    if env_path:
        cfg = PipelineConfig.from_file(env_path)
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_file(args.config)
    overrides = {}
    for text in getattr(args, "set", None) or []:
        key, value = parse_override(text)
        overrides[key] = value
    if overrides:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **overrides})
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replaced(seed=args.seed)
    if getattr(args, "workers", None) is not None:
        cfg = cfg.replaced(workers=args.workers)
    return cfg


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Flat text export / import


def export_flat(annotations: list[Annotation]) -> str:
    """One box per line: frame class cx cy cz l w h yaw score (6 decimals).

    Space-separated; spaces inside class labels become underscores.
    """
    lines = []
    for a in sorted(annotations, key=lambda a: (a.frame, a.track_id, a.class_label)):
        label = a.class_label.replace(" ", "_")
        c = a.box.center
        lines.append(f"{a.frame} {label} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f} "
                     f"{a.box.length:.6f} {a.box.width:.6f} {a.box.height:.6f} "
                     f"{a.box.yaw:.6f} {a.score:.6f}")
    return "".join(line + "\n" for line in lines)


def import_flat(text: str) -> AnnotationSet:
    """Parse the flat text format back into annotations.

    The format carries no track, motion, or provenance information; imported
    boxes get sequential track ids and neutral static metadata.
    """
    annotations: list[Annotation] = []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 10:
            raise ValueError(f"flat line {ln}: expected 10 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            values = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise ValueError(f"flat line {ln}: {exc}")
        annotations.append(Annotation(
            frame=frame,
            track_id=len(annotations),
            class_label=parts[1].replace("_", " "),
            box=OrientedBox3(center=np.array(values[0:3]), length=values[3],
                             width=values[4], height=values[5], yaw=values[6]),
            motion_state="static",
            physical_type="static_rigid",
            provenance="import/flat",
            score=values[7],
        ))
    return AnnotationSet(annotations=annotations,
                         frames=sorted({a.frame for a in annotations}))


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_annotate(args: argparse.Namespace) -> int:
    scene_dir = Path(args.scene)
    out_dir = Path(args.out) if args.out else scene_dir / "autolabel"
    cfg = _build_config(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "config.json")

    try:
        frames = load_sequence(scene_dir)
    except NoFramesError as exc:
        log.warning("%s; writing empty annotations", exc)
        write_annotations([], out_dir / "annotations.json", frames=[])
        _write_json(out_dir / "skips.json",
                    {"format_version": FORMAT_VERSION, "skips": []})
        return 0

    if args.priors:
        priors = load_priors(args.priors)
    elif (scene_dir / "priors.json").exists():
        priors = load_priors(scene_dir / "priors.json")
    else:
        log.info("no priors file found; using built-in defaults")
        priors = default_priors()

    result = annotate_scene(frames, priors, cfg)
    write_annotations(result.annotations, out_dir / "annotations.json",
                      frames=[f.index for f in frames])
    _write_json(out_dir / "skips.json", {
        "format_version": FORMAT_VERSION,
        "skips": [{"frame": s.frame, "track_id": s.track_id, "reason": s.reason,
                   "camera": s.camera, "detail": s.detail} for s in result.skips],
    })
    log.info("wrote %d annotations (%d skips) to %s",
             len(result.annotations), len(result.skips), out_dir)
    return 0


def _parse_band(text: str) -> tuple[float, float]:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise ValueError(f"band {text!r} is not of the form LO:HI")


def _cmd_eval(args: argparse.Namespace) -> int:
    thresholds = tuple(args.threshold) if args.threshold else (0.25, 0.5)
    if args.band is not None:
        bands = tuple(_parse_band(b) for b in args.band)
    else:
        bands = EvalConfig().bands
    config = EvalConfig(kind=args.kind, thresholds=thresholds,
                        class_agnostic=args.class_agnostic, bands=bands)
    report = evaluate(args.predictions, args.references, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out_dir / "curves.csv").write_text(report.curves_csv(), encoding="utf-8")
    _write_json(out_dir / "eval_config.json", {
        "format_version": FORMAT_VERSION,
        "kind": config.kind,
        "thresholds": list(config.thresholds),
        "class_agnostic": config.class_agnostic,
        "bands": [list(b) for b in config.bands],
    })
    sys.stdout.write(report.to_text())
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.spec == "-":
        spec = SceneSpec()
    else:
        spec = SceneSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    priors = load_priors(args.priors) if args.priors else None
    scene = generate(spec, args.out, priors=priors)
    log.info("wrote %d frames, %d truth annotations to %s",
             len(scene.frames), len(scene.truth.annotations), scene.scene_dir)
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    if args.format not in EXPORT_FORMATS:
        raise ValueError(f"unknown export format {args.format!r}; "
                         f"known formats: {', '.join(EXPORT_FORMATS)}")
    annotations = read_annotations(args.annotations)
    out = Path(args.out) if args.out else Path(args.annotations).with_suffix(".txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(export_flat(annotations.annotations), encoding="utf-8")
    log.info("wrote %d lines to %s", len(annotations.annotations), out)
    return 0


def _cmd_check(args: argparse.Namespace) -> int:
    report = oracle_check(args.scene)
    sys.stdout.write(f"checks run: {report.checks}\n")
    for violation in report.violations:
        sys.stdout.write(f"violation: {violation}\n")
    sys.stdout.write("ok\n" if report.ok else "FAILED\n")
    return 0 if report.ok else 1


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    epilog = _config_epilog()
    parser = argparse.ArgumentParser(
        prog="openbox",
        description="Two-stage LiDAR auto-labeling toolkit.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="increase log verbosity (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_text, epilog=epilog,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("annotate", "run the auto-labeling pipeline over a scene directory")
    p.add_argument("scene", help="scene directory (frames/<t>/...)")
    p.add_argument("--priors", help="priors JSON (default: <scene>/priors.json, "
                                    "else built-in defaults)")
    p.add_argument("--out", help="output directory (default: <scene>/autolabel)")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="override the random seed")
    p.add_argument("--workers", type=int, help="override the worker count")
    p.set_defaults(func=_cmd_annotate)

    p = add("eval", "score a prediction file against a reference file")
    p.add_argument("predictions", help="predictions annotations JSON")
    p.add_argument("references", help="reference annotations JSON")
    p.add_argument("--out", default="eval", help="output directory (default: eval)")
    p.add_argument("--kind", choices=("3d", "bev"), default="3d",
                   help="IoU kind (default: 3d)")
    p.add_argument("--threshold", type=float, action="append",
                   help="IoU threshold (repeatable; default: 0.25 0.5)")
    p.add_argument("--class-agnostic", action="store_true",
                   help="pool all classes into one cell")
    p.add_argument("--band", action="append", metavar="LO:HI",
                   help="distance band in metres (repeatable; default: "
                        "0:30 30:50 50:80)")
    p.set_defaults(func=_cmd_eval)

    p = add("synth", "generate a synthetic scene from a scene-spec JSON")
    p.add_argument("spec", help="scene spec JSON path, or '-' for the default scene")
    p.add_argument("out", help="output scene directory")
    p.add_argument("--priors", help="priors JSON to copy into the scene")
    p.set_defaults(func=_cmd_synth)

    p = add("export", "convert an annotations file to a flat text table")
    p.add_argument("annotations", help="annotations JSON")
    p.add_argument("--format", default="flat",
                   help="output format token (known: flat)")
    p.add_argument("--out", help="output file (default: annotations path with .txt)")
    p.set_defaults(func=_cmd_export)

    p = add("check", "run the synthetic-scene self-check oracle")
    p.add_argument("scene", help="generated scene directory")
    p.set_defaults(func=_cmd_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SceneFormatError, EvalError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
