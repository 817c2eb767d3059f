"""Run specifications: a YAML document per stage, validated before anything runs.

Layout::

    stage: expert            # amateur | expert | generalist | adapt | benchmark | nas
    seed: 0
    arch: configs/arch.json  # optional architecture file
    data: {size: 32, n_upstream: 512}
    expert: {task: classification, datasets: [syn-shape, syn-color], steps: 150}

Only the block named by ``stage`` (plus ``data``) is read. Unknown keys are
errors, and all of them are reported at once. Relative file paths resolve
against the working-directory root ($MULTISTAGE_WORKDIR, default: cwd), the
same root run directories live under, so one stage's outputs can be named in
the next stage's spec.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adaptation import MFConfig
from .amateur import AmateurConfig
from .expert import SCHEMES as LABEL_SCHEMES, TASK_TYPES, ExpertConfig
from .generalist import IMPLEMENTED_KINDS, SCHEMES as SHARING_SCHEMES, GeneralistConfig

STAGES = ("amateur", "expert", "generalist", "adapt", "benchmark", "nas")
WORKDIR_ENV = "MULTISTAGE_WORKDIR"

_fields = lambda cls: {f.name for f in dataclasses.fields(cls)}

DATA_KEYS = {"size", "n_corpus", "n_upstream", "n_downstream"}
# stage block -> (allowed keys, keys naming files that must exist)
BLOCKS = {
    "amateur": (_fields(AmateurConfig) | {"local"}, set()),
    "expert": (_fields(ExpertConfig) | {"task", "datasets", "scheme", "init", "fpn_channels"}, {"init"}),
    "generalist": (_fields(GeneralistConfig) | {"experts", "scheme", "module"}, {"experts"}),
    "adapt": (_fields(MFConfig) | {"init", "rerepresenter", "task", "percent", "codes", "rerep_steps"},
              {"init", "rerepresenter"}),
    "benchmark": ({"model", "suite", "percent", "probe"}, {"model"}),
    "nas": ({"budget", "k", "resolution", "oracle", "alpha", "batch", "space"}, {"space"}),
}
TOP_KEYS = {"stage", "seed", "arch", "data", "workdir", "name"} | set(BLOCKS)


class SpecError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid run spec:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class RunSpec:
    stage: str
    seed: int
    params: dict = field(default_factory=dict)     # the stage block
    data: dict = field(default_factory=dict)
    arch: str | None = None
    workdir: str | None = None
    name: str | None = None

    def run_dir(self) -> Path:
        """``workdir`` (or ``<stage>-s<seed>``) under $MULTISTAGE_WORKDIR (default: cwd)."""
        return workdir_root() / (self.workdir or f"{self.name or self.stage}-s{self.seed}")


def _check_choice(problems, where, value, choices):
    if value is not None and value not in choices:
        problems.append(f"{where}: {value!r} not in {sorted(choices)}")


def workdir_root() -> Path:
    return Path(os.environ.get(WORKDIR_ENV, "."))


def validate(doc: dict, base_dir: str | os.PathLike | None = None) -> RunSpec:
    """Check a raw mapping and build a RunSpec; raises SpecError listing every problem."""
    problems = []
    if not isinstance(doc, dict):
        raise SpecError(["top level must be a mapping"])
    for k in sorted(set(doc) - TOP_KEYS):
        problems.append(f"{k}: unknown key")
    stage = doc.get("stage")
    if stage is None:
        problems.append("stage: missing")
    elif stage not in STAGES:
        problems.append(f"stage: unknown stage {stage!r}; expected one of {list(STAGES)}")
    seed = doc.get("seed")
    if seed is None:
        problems.append("seed: missing (a seed is mandatory)")
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append(f"seed: must be a non-negative integer, got {seed!r}")
    data = doc.get("data") or {}
    if not isinstance(data, dict):
        problems.append("data: must be a mapping")
        data = {}
    for k in sorted(set(data) - DATA_KEYS):
        problems.append(f"data.{k}: unknown key")

    base = Path(base_dir) if base_dir is not None else workdir_root()
    resolve = lambda p: str(p if Path(p).is_absolute() else base / p)

    arch = doc.get("arch")
    if arch is not None:
        arch = resolve(arch)
        if not Path(arch).is_file():
            problems.append(f"arch: file not found: {arch}")

    params = {}
    for block, (allowed, file_keys) in BLOCKS.items():
        raw = doc.get(block)
        if raw is None:
            continue
        if not isinstance(raw, dict):
            problems.append(f"{block}: must be a mapping")
            continue
        for k in sorted(set(raw) - allowed):
            problems.append(f"{block}.{k}: unknown key")
        if block != stage:
            continue
        params = dict(raw)
        for k in sorted(file_keys & set(raw)):
            if raw[k] == "none":      # e.g. no re-representer: plain fine-tune
                continue
            paths = raw[k] if isinstance(raw[k], list) else [raw[k]]
            resolved = [resolve(p) for p in paths]
            for p in resolved:
                if not Path(p).is_file():
                    problems.append(f"{block}.{k}: file not found: {p}")
            params[k] = resolved if isinstance(raw[k], list) else resolved[0]

    if stage == "expert":
        _check_choice(problems, "expert.task", params.get("task"), TASK_TYPES)
        _check_choice(problems, "expert.scheme", params.get("scheme"), LABEL_SCHEMES)
        if "task" not in params:
            problems.append("expert.task: missing")
    if stage == "generalist":
        _check_choice(problems, "generalist.scheme", params.get("scheme"), SHARING_SCHEMES)
        _check_choice(problems, "generalist.module", params.get("module"), IMPLEMENTED_KINDS)
        if len(params.get("experts", [])) < 2:
            problems.append("generalist.experts: needs at least two expert checkpoints")
    if stage == "adapt":
        if "init" not in params:
            problems.append("adapt.init: missing")
        # the bundled downstream suite only has a classification fine-tune
        _check_choice(problems, "adapt.task", params.get("task"), ("classification",))
    if stage == "benchmark" and "model" not in params:
        problems.append("benchmark.model: missing")
    if stage == "nas":
        _check_choice(problems, "nas.oracle", params.get("oracle"), ("surrogate", "train"))

    if problems:
        raise SpecError(problems)
    return RunSpec(stage, seed, params, dict(data), arch, doc.get("workdir"), doc.get("name"))


def load_spec(path: str | os.PathLike) -> RunSpec:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return validate(doc)

