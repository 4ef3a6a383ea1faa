"""Command line for populating plantreg caches and priors from imagery.

Exit codes follow the consumer toolkit: 0 success, 1 usage error,
2 runtime failure (including unavailable pretrained models).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import extract
from .backends import make_backend

log = logging.getLogger("plantreg_extractor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plantreg-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="extract one embedding per metadata row")
    p.add_argument("--images", required=True, help="image root directory")
    p.add_argument("--metadata", required=True, help="metadata csv path")
    p.add_argument("--out", required=True, help="output cache base path")
    p.add_argument("--backend", choices=("stub", "pretrained"), default="pretrained")
    p.add_argument("--prompts", default="plant,pot")
    p.add_argument("--padding", type=float, default=0.1)
    p.add_argument("--threshold", type=float, default=0.35)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("priors", help="emit the five level-prompt priors")
    p.add_argument("--out", required=True, help="output base path")
    p.add_argument("--backend", choices=("stub", "pretrained"), default="pretrained")
    p.add_argument("--quiet", action="store_true")

    return parser


def _cmd_run(args) -> int:
    prompts = tuple(p.strip() for p in args.prompts.split(",") if p.strip())
    job = extract.ExtractionJob(
        image_root=args.images,
        metadata_path=args.metadata,
        out_base=args.out,
        prompts=prompts,
        padding=args.padding,
        confidence_threshold=args.threshold,
        batch_size=args.batch,
    )
    backend = make_backend(args.backend)
    result = extract.extract_embeddings(job, backend, backend)
    print(
        f"extracted {result.accepted} embeddings "
        f"({result.fallbacks} full-frame fallbacks, "
        f"{len(result.rejected)} rejected rows); log at {result.log_path}"
    )
    return 0


def _cmd_priors(args) -> int:
    backend = make_backend(args.backend)
    extract.extract_priors(args.out, backend)
    print(f"wrote priors to {args.out}.priors.(manifest.json|f32bin)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(
            stream=sys.stderr,
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return {"run": _cmd_run, "priors": _cmd_priors}[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
