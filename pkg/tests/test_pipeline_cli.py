from __future__ import annotations

import csv
import io
import json
import os
import subprocess
import sys

import jsonschema
import pytest

from trainc.cli import main
from trainc.errors import PipelineOrderError
from trainc.ir import check_wellformed, parse_function, print_text
from trainc.memsched import peak_memory
from trainc.models import get_model
from trainc.pipeline import PipelineConfig, load_schema, run_pipeline

from conftest import parse

CHAIN = """fn main(%x: f32[10]) {
  let %a = tanh(%x);
  let %b = neg(%a);
  %b
}
"""

FULL = {
    "training": {"optimizer": {"kind": "sgd", "lr": 0.1}},
    "amp": {"enabled": True},
    "fusion": {},
    "dispatch": {},
    "schedule": True,
    "remat": {"budget_fraction": 1.0},
}


@pytest.fixture
def write(tmp_path):
    def _write(name: str, content) -> str:
        path = tmp_path / name
        path.write_text(content if isinstance(content, str) else json.dumps(content))
        return str(path)

    return _write


@pytest.fixture
def mlp_ir(write):
    return write("mlp2.ir", get_model("mlp2").source())


def cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_schema_is_valid_json_schema():
    jsonschema.Draft202012Validator.check_schema(load_schema())


def test_implicit_passes_follow_canonical_order():
    cfg = PipelineConfig.from_json(FULL)
    assert cfg.passes == ["autodiff", "autocast", "fusion", "dispatch", "schedule", "remat"]


def test_order_error_names_passes_and_phases():
    with pytest.raises(PipelineOrderError) as info:
        PipelineConfig(passes=["schedule", "fusion"])
    msg = str(info.value)
    for word in ("schedule", "fusion", "order phase", "expression phase"):
        assert word in msg


def test_stages_recorded_and_wellformed():
    res = run_pipeline(get_model("mlp2").forward(), PipelineConfig.from_json(FULL))
    assert [name for name, _ in res.stages] == PipelineConfig.from_json(FULL).passes
    for _, stage in res.stages:
        assert check_wellformed(stage) == []
    assert res.remat_plan is not None


def test_identity_pipeline(capsys, write):
    src = write("chain.ir", CHAIN)
    code, out, _ = cli(capsys, "compile", "--in", src, "--pipeline", write("p.json", {"passes": []}))
    assert code == 0
    assert out == print_text(parse_function(CHAIN))


def test_autodiff_only(capsys, write, mlp_ir):
    code, out, _ = cli(capsys, "compile", "--in", mlp_ir, "--pipeline", write("p.json", {"passes": ["autodiff"]}))
    assert code == 0
    for p in ("w1", "b1", "w2", "b2"):
        assert f'grad_of="{p}"' in out


def test_full_pipeline_dumps_every_stage(capsys, write, mlp_ir, tmp_path):
    out_ir = tmp_path / "out.ir"
    emit = tmp_path / "bc.txt"
    code, _, _ = cli(
        capsys, "compile", "--in", mlp_ir, "--pipeline", write("p.json", FULL),
        "--out", str(out_ir), "--emit", str(emit), "--dump-after", "all",
    )
    assert code == 0
    for name in PipelineConfig.from_json(FULL).passes:
        dumped = parse_function((tmp_path / f"after_{name}.ir").read_text())
        assert check_wellformed(dumped) == []
    assert out_ir.read_text() == (tmp_path / "after_remat.ir").read_text()
    assert emit.read_text().strip()


def test_parse_error_exit_1(capsys, write):
    code, _, err = cli(capsys, "compile", "--in", write("bad.ir", "fn main(%x: f32[10]) { let %a = ; }"))
    assert code == 1 and err.startswith("error")


def test_bad_json_exit_1(capsys, write, mlp_ir):
    assert cli(capsys, "compile", "--in", mlp_ir, "--pipeline", write("p.json", "{not json"))[0] == 1


def test_schema_violation_exit_1(capsys, write, mlp_ir):
    bad = {"fusion": {"max_group": 0}}
    assert cli(capsys, "compile", "--in", mlp_ir, "--pipeline", write("p.json", bad))[0] == 1


def test_type_error_exit_2(capsys, write):
    src = "fn main(%a: f32[2,3], %b: f32[4,5]) {\n  let %c = matmul(%a, %b);\n  %c\n}\n"
    code, _, err = cli(capsys, "compile", "--in", write("t.ir", src))
    assert code == 2 and "matmul" in err


def test_order_violation_exit_3(capsys, write, mlp_ir):
    code, _, err = cli(capsys, "compile", "--in", mlp_ir, "--pipeline", write("p.json", {"passes": ["schedule", "autodiff"]}))
    assert code == 3 and "autodiff" in err and "schedule" in err


def test_infeasible_budget_exit_4(capsys, write, mlp_ir):
    cfg = {"training": {}, "remat": {"budget_bytes": 1}}
    code, _, err = cli(capsys, "compile", "--in", mlp_ir, "--pipeline", write("p.json", cfg))
    assert code == 4 and "error in pass remat" in err


def _csv(text):
    return list(csv.reader(io.StringIO(text)))


def test_train_zero_steps_header_only(capsys):
    code, out, _ = cli(capsys, "train", "--model", "mlp2", "--steps", "0")
    assert code == 0
    assert _csv(out) == [["step", "loss", "iter_time", "peak_pool_bytes"]]


def test_train_deterministic_except_timing(capsys):
    runs = [_csv(cli(capsys, "train", "--model", "mlp", "--steps", "3", "--seed", "5")[1]) for _ in range(2)]
    strip = [[(r[0], r[1], r[3]) for r in rows] for rows in runs]
    assert strip[0] == strip[1] and len(strip[0]) == 4


def test_train_fusion_bit_identical_on_ref(capsys, write):
    ref = {"dispatch": {"dialects": {"opt": False}}}
    plain = write("a.json", ref)
    fused = write("b.json", {**ref, "fusion": {}})
    losses = []
    for p in (plain, fused):
        rows = _csv(cli(capsys, "train", "--model", "mlp2", "--steps", "3", "--pipeline", p)[1])
        losses.append([r[1] for r in rows[1:]])
    assert losses[0] == losses[1]


def test_inspect_kernels_drop_after_fusion(capsys, write):
    def kernels(cfg):
        out = cli(capsys, "inspect", "--model", "mlp2", "--train", "--pipeline", write("p.json", cfg), "--kernels")[1]
        return int(out.split()[1])

    assert kernels({"fusion": {}}) < kernels({})


def test_inspect_mem_on_chain(capsys, write):
    out = cli(capsys, "inspect", "--in", write("chain.ir", CHAIN), "--mem")[1]
    assert out.splitlines()[0] == "index,live_bytes,op"
    prof = peak_memory(parse(CHAIN))
    assert out.splitlines()[-1] == f"# peak {prof.peak} at {prof.peak_index}" == "# peak 120 at 1"


def test_inspect_casts_without_amp(capsys):
    out = cli(capsys, "inspect", "--model", "mlp2", "--casts")[1]
    assert all(line.split()[1] == "0" for line in out.splitlines())


def test_simulate_single_rank(capsys):
    code, out, _ = cli(capsys, "simulate-dist", "--ranks", "1", "--steps", "2", "--optimizer", "sgd")
    report = json.loads(out)
    assert code == 0 and report["parity_max_abs_error"] == 0.0
    assert len(set(report["makespan"].values())) == 1


def test_simulate_two_ranks_with_report(capsys, tmp_path):
    csv_path = tmp_path / "tl.csv"
    code, out, _ = cli(capsys, "simulate-dist", "--ranks", "2", "--steps", "2", "--optimizer", "sgd", "--report", str(csv_path))
    report = json.loads(out)
    ms = report["makespan"]
    assert code == 0 and report["parity_max_abs_error"] <= 1e-5
    assert ms["overlap+hfuse"] <= ms["overlap"] <= ms["serial"]
    rows = _csv(csv_path.read_text())
    assert rows[0] == ["rank", "stream", "op", "start", "end"]
    assert {r[0] for r in rows[1:]} == {"0", "1"}


def test_debug_logging_traces_passes(write, mlp_ir):
    env = {**os.environ, "TRAINC_LOG": "debug"}
    proc = subprocess.run(
        [sys.executable, "-m", "trainc.cli", "compile", "--in", mlp_ir, "--pipeline", write("p.json", {"passes": ["autodiff", "fusion"]})],
        capture_output=True, text=True, env=env, check=True,
    )
    assert "trainc.pipeline: autodiff:" in proc.stderr
    assert "trainc.pipeline: fusion:" in proc.stderr
