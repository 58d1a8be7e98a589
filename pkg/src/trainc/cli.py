"""``trainc`` command-line driver.

Exit codes: 0 success, 1 parse or configuration error, 2 type error,
3 pipeline-order violation, 4 infeasible memory budget, 5 collective
protocol error, 6 any other compiler error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .autocast import cast_census
from .errors import (
    BudgetInfeasible,
    ParseError,
    PipelineOrderError,
    ProtocolError,
    TraincError,
    TypeInferenceError,
)
from .fusion import closures_of, kernel_count
from .ir.convert import ensure_anf
from .ir.expr import FunctionIR, anf_bindings
from .ir.infer import infer_types
from .ir.text import parse_text, print_text
from .memsched import liveness, peak_memory
from .models import MODELS, get_model
from .opreg import dispatch_pass
from .pipeline import PipelineConfig, configure_logging, run_pipeline

EXIT_PARSE = 1
EXIT_TYPE = 2
EXIT_ORDER = 3
EXIT_BUDGET = 4
EXIT_PROTOCOL = 5
EXIT_OTHER = 6

MODEL_ALIASES = {"mlp": "mlp2"}


def _model(name: str):
    return get_model(MODEL_ALIASES.get(name, name))


def _load_pipeline(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.load(path)


def _load_fn(path: str) -> FunctionIR:
    text = Path(path).read_text()
    return infer_types(parse_text(text, base_dir=Path(path).parent).main)


def _source_fn(args) -> FunctionIR:
    if getattr(args, "input", None):
        return _load_fn(args.input)
    if getattr(args, "model", None):
        return infer_types(_model(args.model).forward())
    raise SystemExit("one of --in or --model is required")


def _needs_dispatch(fn: FunctionIR) -> bool:
    return any("." not in getattr(v, "op", ".") for _, v in anf_bindings(ensure_anf(fn))[0])


# ------------------------------------------------------------------ commands


def cmd_compile(args) -> int:
    from .vm.bytecode import compile_bytecode, disassemble

    cfg = _load_pipeline(args.pipeline)
    fn = _source_fn(args)
    result = run_pipeline(fn, cfg)
    if args.dump_after:
        out_dir = Path(args.dump_dir or (Path(args.out).parent if args.out else "."))
        out_dir.mkdir(parents=True, exist_ok=True)
        wanted = set(args.dump_after)
        for name, stage in result.stages:
            if "all" in wanted or name in wanted:
                (out_dir / f"after_{name}.ir").write_text(print_text(stage))
    text = print_text(result.fn)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.emit:
        fn = result.fn
        if _needs_dispatch(fn):
            fn = dispatch_pass(ensure_anf(fn), cfg.dispatch)
        Path(args.emit).write_text(disassemble(compile_bytecode(fn)))
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _load_pipeline(args.pipeline)
    if "autodiff" not in cfg.passes:
        cfg.passes.insert(0, "autodiff")
    model = _model(args.model)
    seed = cfg.seed if args.seed is None else args.seed
    fn = run_pipeline(infer_types(model.forward()), cfg).fn
    res = train(fn, model, args.steps, seed, dispatch=cfg.dispatch)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "iter_time", "peak_pool_bytes"])
    for i, (loss, t, peak) in enumerate(zip(res.losses, res.iter_seconds, res.peak_pool_bytes)):
        w.writerow([i, repr(loss), f"{t:.6f}", peak])
    if args.report:
        Path(args.report).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_inspect(args) -> int:
    fn = _source_fn(args)
    if args.pipeline or args.train:
        cfg = _load_pipeline(args.pipeline)
        if args.train and "autodiff" not in cfg.passes:
            cfg.passes.insert(0, "autodiff")
        fn = run_pipeline(fn, cfg).fn
    fn = ensure_anf(fn)
    out = sys.stdout
    if args.mem:
        prof = peak_memory(fn)
        bindings, _ = anf_bindings(fn)
        out.write("index,live_bytes,op\n")
        for i, (b, (var, value)) in enumerate(zip(prof.curve, bindings)):
            op = getattr(value, "op", None) or (value.fn.name if hasattr(value, "fn") else type(value).__name__)
            out.write(f"{i},{b},{op}\n")
        out.write(f"# peak {prof.peak} at {prof.peak_index}\n")
    if args.liveness:
        table = liveness(fn)
        out.write("buffer,bytes,def,last_use,pinned,output\n")
        for b in table.names:
            lo, hi = table.intervals[b]
            out.write(f"{b},{table.sizes[b]},{lo},{hi},{int(b in table.pinned)},{int(b in table.outputs)}\n")
    if args.kernels:
        out.write(f"kernels {kernel_count(fn)}\nclosures {len(closures_of(fn))}\n")
    if args.casts:
        census = cast_census(fn)
        out.write("".join(f"{k} {v}\n" for k, v in census.items()))
    return 0


def cmd_simulate(args) -> int:
    from .autodiff import Adam, SGD, TrainingSpec, autodiff
    from .distpar import (
        World,
        horizontal_fuse_collectives,
        partition_zero,
        simulate,
        simulate_timeline,
    )
    from .training import train

    model = _model(args.model)
    opt = Adam() if args.optimizer == "adam" else SGD()
    fn_train = autodiff(model.forward(), TrainingSpec(optimizer=opt))
    world = World(args.ranks)
    fn_rank = partition_zero(fn_train, world)
    fused = horizontal_fuse_collectives(fn_rank)
    program = fn_rank if args.no_hfuse else fused

    def data(step: int):
        x, label = model.data(args.seed, step)
        return {"x": x, "label": label}

    res = simulate(world, program, data, args.steps, model.init_params(args.seed))
    base = train(fn_train, model, args.steps, args.seed)
    err = max(
        float(np.max(np.abs(res.params(r)[k] - base.state[f"param:{k}"]))) for r in range(world.n_ranks) for k in res.params(r)
    )
    serial = simulate_timeline(fn_rank, overlap=False).makespan
    overlap = simulate_timeline(fn_rank).makespan
    both = simulate_timeline(fused).makespan
    report = {
        "ranks": world.n_ranks,
        "steps": args.steps,
        "parity_max_abs_error": err,
        "opt_state_bytes_per_rank": res.opt_state_bytes,
        "collective_calls_per_step": res.collective_calls_per_step,
        "makespan": {"serial": serial, "overlap": overlap, "overlap+hfuse": both},
    }
    print(json.dumps(report, indent=2))
    if args.report:
        chosen = simulate_timeline(program, overlap=not args.no_overlap)
        res.timeline = chosen
        Path(args.report).write_text(res.timeline_csv())
    return 0


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trainc", description="Miniature training compiler driver.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="run a pass pipeline over an IR file")
    c.add_argument("--in", dest="input")
    c.add_argument("--model", choices=sorted(MODELS) + sorted(MODEL_ALIASES))
    c.add_argument("--pipeline")
    c.add_argument("--out")
    c.add_argument("--emit", help="write the bytecode disassembly here")
    c.add_argument("--dump-after", action="append", default=[], metavar="PASS", help="pass name or 'all'")
    c.add_argument("--dump-dir")
    c.set_defaults(func=cmd_compile)

    t = sub.add_parser("train", help="train a built-in model and write a CSV report")
    t.add_argument("--model", required=True, choices=sorted(MODELS) + sorted(MODEL_ALIASES))
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--pipeline")
    t.add_argument("--seed", type=int)
    t.add_argument("--report")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("inspect", help="memory, liveness, kernel and cast reports")
    i.add_argument("--in", dest="input")
    i.add_argument("--model", choices=sorted(MODELS) + sorted(MODEL_ALIASES))
    i.add_argument("--pipeline")
    i.add_argument("--train", action="store_true", help="inspect the training step (adds autodiff)")
    i.add_argument("--mem", action="store_true")
    i.add_argument("--liveness", action="store_true")
    i.add_argument("--kernels", action="store_true")
    i.add_argument("--casts", action="store_true")
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("simulate-dist", help="multi-rank data-parallel simulation")
    s.add_argument("--ranks", type=int, required=True)
    s.add_argument("--model", default="mlp2", choices=sorted(MODELS) + sorted(MODEL_ALIASES))
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    s.add_argument("--no-overlap", action="store_true")
    s.add_argument("--no-hfuse", action="store_true")
    s.add_argument("--report", help="timeline CSV (rank, stream, op, start, end)")
    s.set_defaults(func=cmd_simulate)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ParseError, json.JSONDecodeError, jsonschema.ValidationError)):
        return EXIT_PARSE
    if isinstance(exc, TypeInferenceError):
        return EXIT_TYPE
    if isinstance(exc, PipelineOrderError):
        return EXIT_ORDER
    if isinstance(exc, BudgetInfeasible):
        return EXIT_BUDGET
    if isinstance(exc, ProtocolError):
        return EXIT_PROTOCOL
    return EXIT_OTHER


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TraincError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        where = getattr(exc, "pass_name", None)
        prefix = f"error in pass {where}: " if where else "error: "
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(prefix + msg, file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
