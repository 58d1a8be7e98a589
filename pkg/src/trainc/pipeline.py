"""Pass pipeline configuration and driver.

Passes belong to three phases that must run in order: graph generation
(autodiff, autocast, partition_zero), expression optimisation (fusion,
dispatch, hfuse) and execution order (schedule, remat, overlap).  A pipeline
is described by JSON validated against the bundled schema.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .autocast import PrecisionPolicy, autocast
from .autodiff import TrainingSpec, autodiff
from .distpar import World, horizontal_fuse_collectives, overlap_schedule, partition_zero
from .errors import PipelineOrderError, TraincError
from .fusion import FusionConfig, fuse_pass
from .ir.convert import ensure_anf
from .ir.expr import FunctionIR, anf_bindings
from .memsched import RematPlan, peak_memory, rematerialize, schedule
from .opreg import DispatchConfig, dispatch_pass

log = logging.getLogger("trainc.pipeline")

PHASES: dict[str, int] = {
    "autodiff": 0,
    "autocast": 0,
    "partition_zero": 0,
    "fusion": 1,
    "dispatch": 1,
    "hfuse": 1,
    "schedule": 2,
    "remat": 2,
    "overlap": 2,
}
PHASE_NAMES = ("graph-generation", "expression", "order")
CANONICAL_ORDER = tuple(PHASES)


def load_schema() -> dict:
    text = resources.files("trainc").joinpath("schemas/pipeline.schema.json").read_text()
    return json.loads(text)


def configure_logging() -> None:
    """Enable pass tracing when ``TRAINC_LOG=debug``."""
    if os.environ.get("TRAINC_LOG", "").lower() == "debug":
        logging.basicConfig(format="%(name)s: %(message)s")
        logging.getLogger("trainc").setLevel(logging.DEBUG)


def check_order(passes: list[str]) -> None:
    for prev, cur in zip(passes, passes[1:]):
        if PHASES[cur] < PHASES[prev]:
            raise PipelineOrderError(
                f"pass {cur!r} ({PHASE_NAMES[PHASES[cur]]} phase) cannot follow "
                f"{prev!r} ({PHASE_NAMES[PHASES[prev]]} phase)"
            )


@dataclass
class PipelineConfig:
    passes: list[str] = field(default_factory=list)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    amp_overrides: dict[str, str] = field(default_factory=dict)
    amp_fusion_aware: bool = True
    fusion: FusionConfig = field(default_factory=FusionConfig)
    dispatch: DispatchConfig = field(default_factory=DispatchConfig)
    remat_budget: int | None = None
    remat_fraction: float | None = None
    remat_depth: int = 3
    n_ranks: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        check_order(self.passes)

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        """Validate against the schema and build; raises on order violations."""
        jsonschema.validate(obj, load_schema())
        amp = obj.get("amp", {})
        fusion = obj.get("fusion", {})
        remat = obj.get("remat")
        dist = obj.get("distpar", {})
        dispatch = DispatchConfig.from_json(obj.get("dispatch", {}))
        passes = obj.get("passes")
        if passes is None:
            wanted = {
                "autodiff": "training" in obj,
                "autocast": bool(amp.get("enabled", False)),
                "partition_zero": dist.get("n_ranks", 1) > 1,
                "fusion": "fusion" in obj and fusion.get("enabled", True),
                "dispatch": "dispatch" in obj,
                "hfuse": dist.get("n_ranks", 1) > 1 and dist.get("hfuse", True),
                "schedule": bool(obj.get("schedule", False)),
                "remat": remat is not None,
                "overlap": dist.get("n_ranks", 1) > 1 and dist.get("overlap", True),
            }
            passes = [p for p in CANONICAL_ORDER if wanted[p]]
        remat = remat or {}
        return cls(
            passes=list(passes),
            training=TrainingSpec.from_json(obj.get("training", {})),
            amp_overrides=dict(amp.get("overrides", {})),
            amp_fusion_aware=bool(amp.get("fusion_aware", True)),
            fusion=FusionConfig.from_json(fusion, dialects=dispatch.enabled_dialects),
            dispatch=dispatch,
            remat_budget=remat.get("budget_bytes"),
            remat_fraction=remat.get("budget_fraction"),
            remat_depth=int(remat.get("max_depth", 3)),
            n_ranks=int(dist.get("n_ranks", 1)),
            seed=int(obj.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class PipelineResult:
    fn: FunctionIR
    stages: list[tuple[str, FunctionIR]]
    remat_plan: RematPlan | None = None


def _size(fn: FunctionIR) -> int:
    return len(anf_bindings(ensure_anf(fn))[0])


def run_pipeline(fn: FunctionIR, cfg: PipelineConfig) -> PipelineResult:
    """Apply ``cfg.passes`` in order, recording the IR after each."""
    stages: list[tuple[str, FunctionIR]] = []
    plan = None
    for name in cfg.passes:
        try:
            fn, plan = _apply_pass(name, fn, cfg, plan)
        except TraincError as exc:
            exc.pass_name = name
            raise
        fn = ensure_anf(fn)
        log.debug("%s: %d bindings", name, _size(fn))
        stages.append((name, fn))
    return PipelineResult(fn, stages, plan)


def _apply_pass(name: str, fn: FunctionIR, cfg: PipelineConfig, plan):
    if name == "autodiff":
        fn = autodiff(fn, cfg.training)
    elif name == "autocast":
        fn = autocast(fn, PrecisionPolicy.default().with_overrides(cfg.amp_overrides), fusion_aware=cfg.amp_fusion_aware)
    elif name == "partition_zero":
        fn = partition_zero(fn, World(cfg.n_ranks))
    elif name == "fusion":
        fn = fuse_pass(fn, cfg=cfg.fusion)
    elif name == "dispatch":
        fn = dispatch_pass(fn, cfg.dispatch)
    elif name == "hfuse":
        fn = horizontal_fuse_collectives(fn)
    elif name == "schedule":
        fn = schedule(fn)
    elif name == "remat":
        budget = cfg.remat_budget
        if budget is None:
            budget = int(peak_memory(fn).peak * (cfg.remat_fraction or 1.0))
        fn, plan = rematerialize(fn, budget, max_depth=cfg.remat_depth)
        log.debug("remat: budget %d B, %d replays", budget, plan.overhead)
    elif name == "overlap":
        fn = overlap_schedule(fn)
    return fn, plan
