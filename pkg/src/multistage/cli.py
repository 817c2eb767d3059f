"""Command line entry point: one subcommand per pipeline stage.

Each subcommand builds a run spec (from ``--config`` and/or flags), validates
it, and runs the stage into a directory under $MULTISTAGE_WORKDIR.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import SpecError, validate
from .runner import run

log = logging.getLogger("multistage")

COMMANDS = {"pretrain-amateur": "amateur", "pretrain-expert": "expert", "pretrain-generalist": "generalist",
            "adapt": "adapt", "benchmark": "benchmark", "nas-search": "nas"}
TASK_ALIASES = {"cls": "classification", "patch": "patchwise", "pixel": "pixelwise",
                "classification": "classification", "patchwise": "patchwise", "pixelwise": "pixelwise"}
SCHEME_ALIASES = {"natural": "natural", "unified": "unified", "partial": "partially_merged",
                  "partially_merged": "partially_merged"}
FILE_FLAGS = {"arch", "init", "rerepresenter", "model", "experts", "space"}


def _common(p: argparse.ArgumentParser, steps: bool = True) -> None:
    p.add_argument("--config", help="YAML run spec; flags given here override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--workdir", help="run directory, relative to $MULTISTAGE_WORKDIR")
    p.add_argument("--arch", help="architecture file (JSON stage records)")
    p.add_argument("--size", type=int, help="synthetic image size")
    if steps:
        p.add_argument("--steps", type=int, help="training steps (search budget for nas-search)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="multistage", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-amateur", help="image-text pretraining on the synthetic corpus")
    _common(p)
    p.add_argument("--no-local", action="store_true", help="skip the region-level stage")

    p = sub.add_parser("pretrain-expert", help="single-task multi-dataset training")
    _common(p)
    p.add_argument("--task", choices=sorted(TASK_ALIASES))
    p.add_argument("--datasets", nargs="+")
    p.add_argument("--scheme", choices=sorted(SCHEME_ALIASES))
    p.add_argument("--init", help="checkpoint whose backbone initializes the expert")

    p = sub.add_parser("pretrain-generalist", help="join experts into a multi-task generalist")
    _common(p)
    p.add_argument("--experts", nargs="+")
    p.add_argument("--scheme")
    p.add_argument("--module")

    p = sub.add_parser("adapt", help="downstream fine-tune (multi-stage or plain)")
    _common(p)
    p.add_argument("--init")
    p.add_argument("--rerepresenter", help="codebook checkpoint, or 'none' for a plain fine-tune")
    p.add_argument("--task", choices=sorted(TASK_ALIASES))
    p.add_argument("--contrastive", choices=("on", "off"))
    p.add_argument("--percent", type=float)

    p = sub.add_parser("benchmark", help="linear probe and depth probe on the synthetic suite")
    _common(p, steps=False)
    p.add_argument("--model")
    p.add_argument("--suite")
    p.add_argument("--percent", type=float)

    p = sub.add_parser("nas-search", help="controller search over the backbone space")
    _common(p)
    p.add_argument("--budget", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--oracle", choices=("surrogate", "train"))
    p.add_argument("--space", help="search-space JSON file")
    return ap


def spec_doc(args) -> dict:
    """Merge the optional YAML document with command-line flags."""
    stage = COMMANDS[args.command]
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = yaml.safe_load(fh) or {}
    doc.setdefault("stage", stage)
    for key in ("seed", "workdir"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    if args.size is not None:
        doc.setdefault("data", {})["size"] = args.size
    block = doc.setdefault(stage, {}) or {}
    doc[stage] = block
    if getattr(args, "steps", None) is not None:
        block["stage4_steps" if stage == "adapt" else "budget" if stage == "nas" else "steps"] = args.steps
    flags = {k: v for k, v in vars(args).items() if v is not None}
    # paths given on the command line are relative to the cwd, not to the workdir root
    for k in FILE_FLAGS & set(flags):
        if flags[k] != "none":
            flags[k] = [str(Path(x).resolve()) for x in flags[k]] if isinstance(flags[k], list) \
                else str(Path(flags[k]).resolve())
    if "arch" in flags:
        doc["arch"] = flags["arch"]
    if "task" in flags:
        block["task"] = TASK_ALIASES[flags["task"]]
    if stage == "expert" and "scheme" in flags:
        block["scheme"] = SCHEME_ALIASES[flags["scheme"]]
    if stage == "generalist":
        for k, dst in (("experts", "experts"), ("scheme", "scheme"), ("module", "module")):
            if k in flags:
                block[dst] = flags[k]
    if "contrastive" in flags:
        block["contrastive"] = flags["contrastive"] == "on"
    if getattr(args, "no_local", False):
        block["local"] = False
    for k in ("datasets", "init", "rerepresenter", "model", "suite", "percent", "budget", "k", "oracle", "space"):
        if k in flags:
            block[k] = flags[k]
    return doc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        doc = spec_doc(args)
        stage = COMMANDS[args.command]
        mismatch = [] if doc["stage"] == stage else [
            f"stage: config says {doc['stage']!r} but the command runs {stage!r}"]
        try:
            spec = validate(doc)
        except SpecError as exc:
            raise SpecError(mismatch + exc.problems) from None
        if mismatch:
            raise SpecError(mismatch)
        log.info("running stage %s (seed %d) into %s", spec.stage, spec.seed, spec.run_dir())
        summary = run(spec)
    except SpecError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # any stage failure is a nonzero exit
        log.debug("stage failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

