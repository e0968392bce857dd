"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 registration failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import (
    DegenerateInputError,
    EmitterLocError,
    FormatError,
    IoError,
    ParameterError,
    RangeError,
    RegistrationError,
    UnsupportedError,
)
from .image_model import load_pgm, save_pgm

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_REGISTRATION = 3
EXIT_IO = 4

log = logging.getLogger("emitterloc")


def _cmd_locate(args) -> int:
    from .pipeline import PipelineConfig, run_pipeline, write_outputs

    config = PipelineConfig.load(args.config)
    image = load_pgm(args.image)
    result = run_pipeline(config, image)
    for w in result.registration.warnings:
        print(f"warning: {w}", file=sys.stderr)
    paths = write_outputs(result, args.out_prefix, image.width, image.height)
    n_ok = sum(r.converged for r in result.records)
    print(f"{len(result.records)} emitters ({n_ok} converged); wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .synthesis import SceneSpec, render_field

    try:
        text = Path(args.scene).read_text()
    except OSError as exc:
        raise IoError(f"cannot read scene {args.scene}: {exc}") from exc
    scene = SceneSpec.from_json(text)
    image = render_field(scene)
    save_pgm(image, args.out)
    print(f"wrote {args.out} ({image.width}x{image.height})")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(sys.stdout) else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emitterloc",
        description="Localize point emitters relative to four alignment marks.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("locate", help="register a field image and localize its emitters")
    p.add_argument("--image", required=True, help="input PGM (P5) image")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out-prefix", required=True, help="writes <prefix>.csv, <prefix>.json, <prefix>.svg")
    p.set_defaults(func=_cmd_locate)

    p = sub.add_parser("synth", help="render a synthetic field from a scene JSON")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RegistrationError as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        return EXIT_REGISTRATION
    except (IoError, FormatError, UnsupportedError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ParameterError, RangeError, DegenerateInputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EmitterLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
