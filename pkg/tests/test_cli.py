import json
import re
from pathlib import Path

import numpy as np
import pytest

import slrd
from slrd.cli import main
from slrd.tensorio import RunReport, read_tensor


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def gen_layer(capsys, tmp_path, *extra, seed=0):
    out = tmp_path / "data"
    code, _, err = run_cli(
        capsys,
        "gen",
        "--out",
        str(out),
        "--shape",
        "16x16",
        "--calib-count",
        "8",
        "--seq",
        "16",
        "--seed",
        str(seed),
        "--x-scale",
        "0.2",
        *extra,
    )
    assert code == 0, err
    return out


def test_gen_writes_manifest_and_tensors(capsys, tmp_path):
    out = gen_layer(capsys, tmp_path)
    assert (out / "weights.slrt").exists()
    assert (out / "calib.slrt").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["shape"] == [16, 16]
    calib = read_tensor(out / "calib.slrt")
    assert calib.shape == (8, 16, 16)


def test_gen_calib_count_128(capsys, tmp_path):
    out = tmp_path / "c"
    code, _, _ = run_cli(
        capsys, "gen", "--out", str(out), "--shape", "8x8",
        "--calib-count", "128", "--seq", "4",
    )
    assert code == 0
    assert read_tensor(out / "calib.slrt").shape == (128, 4, 8)


def test_gen_deterministic(capsys, tmp_path):
    out1 = gen_layer(capsys, tmp_path / "a", seed=7)
    out2 = gen_layer(capsys, tmp_path / "b", seed=7)
    assert (out1 / "weights.slrt").read_bytes() == (out2 / "weights.slrt").read_bytes()
    assert (out1 / "calib.slrt").read_bytes() == (out2 / "calib.slrt").read_bytes()
    out3 = gen_layer(capsys, tmp_path / "c", seed=8)
    assert (out1 / "weights.slrt").read_bytes() != (out3 / "weights.slrt").read_bytes()


def test_planted_instance_recovered(capsys, tmp_path):
    data = gen_layer(
        capsys, tmp_path, "--planted", "--planted-rank", "2", "--lowrank-scale", "0.05"
    )
    dec = tmp_path / "dec"
    code, out, err = run_cli(
        capsys,
        "decompose",
        "--weights", str(data / "weights.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--out", str(dec),
        "--sparsity", "2:4",
        "--rank", "2",
        "--max-iters", "400",
    )
    assert code == 0, err
    result = json.loads(out)
    report = RunReport.load(dec / "report.jsonl")
    # realizable instance: the objective collapses by orders of magnitude
    assert report.final_objective <= 1e-4 * report.records[0].objective
    assert result["method"] == "admm"


def test_decompose_writes_components_and_report(capsys, tmp_path):
    data = gen_layer(capsys, tmp_path)
    dec = tmp_path / "dec"
    code, _, err = run_cli(
        capsys,
        "decompose",
        "--weights", str(data / "weights.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--out", str(dec),
        "--sparsity", "2:4",
        "--rank", "2",
    )
    assert code == 0, err
    sparse = read_tensor(dec / "sparse.slrt")
    left = read_tensor(dec / "lowrank_left.slrt")
    right = read_tensor(dec / "lowrank_right.slrt")
    assert sparse.shape == (16, 16)
    assert left.shape == (16, 2) and right.shape == (16, 2)
    report = RunReport.load(dec / "report.jsonl")
    assert report.final_objective <= report.records[0].objective + 1e-12


def test_decompose_with_config_file(capsys, tmp_path):
    data = gen_layer(capsys, tmp_path)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("sparsity = 2:4\nrank = 2\nmax_iters = 30\nsolver = altmin\n")
    dec = tmp_path / "dec"
    code, out, _ = run_cli(
        capsys,
        "decompose",
        "--weights", str(data / "weights.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--out", str(dec),
        "--config", str(cfg),
        "--steps", "12",
    )
    assert code == 0
    report = RunReport.load(dec / "report.jsonl")
    assert report.method == "altmin"
    assert len(report.records) == 12  # flag overrides the file


def test_eora_records_exactly_one_alternation(capsys, tmp_path):
    data = gen_layer(capsys, tmp_path)
    dec = tmp_path / "dec"
    code, _, _ = run_cli(
        capsys,
        "decompose",
        "--weights", str(data / "weights.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--out", str(dec),
        "--sparsity", "2:4", "--rank", "2", "--solver", "eora",
    )
    assert code == 0
    report = RunReport.load(dec / "report.jsonl")
    assert report.method == "eora"
    assert len(report.records) == 1


def test_evaluate_matches_solver_objective(capsys, tmp_path):
    data = gen_layer(capsys, tmp_path)
    dec = tmp_path / "dec"
    run_cli(
        capsys,
        "decompose",
        "--weights", str(data / "weights.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--out", str(dec),
        "--sparsity", "2:4", "--rank", "2",
    )
    report = RunReport.load(dec / "report.jsonl")
    code, out, _ = run_cli(
        capsys,
        "evaluate",
        "--weights", str(data / "weights.slrt"),
        "--sparse", str(dec / "sparse.slrt"),
        "--left", str(dec / "lowrank_left.slrt"),
        "--right", str(dec / "lowrank_right.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--sparsity", "2:4",
    )
    assert code == 0
    metrics = json.loads(out)
    assert metrics["objective"] == pytest.approx(report.final_objective, abs=1e-10)
    assert metrics["nm_valid"] is True
    assert metrics["sparsity"] == pytest.approx(0.5, abs=0.01)
    assert metrics["rank"] <= 2
    assert 0 <= metrics["rel_output_err"] < 1


def test_evaluate_exact_decomposition_zero_metrics(capsys, tmp_path, rng):
    w = rng.standard_normal((8, 8))
    sparse, _ = slrd.project(w, slrd.SemiStructured(2, 4))
    lowrank = w - sparse
    left, right = slrd.factor_lowrank(lowrank, 8)
    x = rng.standard_normal((4, 8, 8))
    paths = {}
    for name, arr in [
        ("weights", w), ("sparse", sparse), ("left", left),
        ("right", right), ("calib", x),
    ]:
        paths[name] = tmp_path / f"{name}.slrt"
        slrd.write_tensor(paths[name], arr)
    code, out, _ = run_cli(
        capsys,
        "evaluate",
        "--weights", str(paths["weights"]),
        "--sparse", str(paths["sparse"]),
        "--left", str(paths["left"]),
        "--right", str(paths["right"]),
        "--calib", str(paths["calib"]),
    )
    assert code == 0
    metrics = json.loads(out)
    assert metrics["objective"] == pytest.approx(0.0, abs=1e-16)
    assert metrics["rel_output_err"] == pytest.approx(0.0, abs=1e-12)
    assert metrics["nm_valid"] is None


def test_bench_emits_csv(capsys, tmp_path):
    data = gen_layer(capsys, tmp_path)
    csv_path = tmp_path / "bench.csv"
    code, out, _ = run_cli(
        capsys,
        "bench",
        "--weights", str(data / "weights.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--out", str(csv_path),
        "--sparsity", "2:4", "--rank", "2",
        "--max-iters", "40", "--steps", "20",
    )
    assert code == 0
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "method,iteration,objective"
    methods = {line.split(",")[0] for line in lines[1:]}
    assert methods == {"admm", "altmin", "oats", "eora"}
    finals = json.loads(out)["final_objectives"]
    assert finals["admm"] <= finals["altmin"] + 1e-12
    assert finals["admm"] <= finals["oats"] + 1e-12


def gen_blocks(capsys, tmp_path, blocks=1, seed=0):
    out = tmp_path / "blocks"
    code, _, err = run_cli(
        capsys,
        "gen", "--kind", "blocks", "--out", str(out),
        "--blocks", str(blocks), "--d-model", "16", "--n-heads", "2",
        "--d-ff", "32", "--seq", "8", "--calib-count", "8",
        "--weight-scale", "0.02", "--seed", str(seed),
    )
    assert code == 0, err
    return out


def test_cascade_and_refine_tm(capsys, tmp_path):
    blocks_dir = gen_blocks(capsys, tmp_path)
    casc = tmp_path / "casc"
    code, _, err = run_cli(
        capsys,
        "cascade",
        "--blocks-dir", str(blocks_dir),
        "--calib", str(blocks_dir / "calib.slrt"),
        "--out", str(casc),
        "--sparsity", "2:4", "--rank", "2", "--gram-scale", "auto",
    )
    assert code == 0, err
    assert (casc / "block0.q.sparse.slrt").exists()
    assert (casc / "block0.q.report.jsonl").exists()
    assert (casc / "x_after_block0.slrt").exists()
    summary = json.loads((casc / "cascade.json").read_text())
    assert summary[0]["workers"] == 1

    ref = tmp_path / "refined"
    code, out, err = run_cli(
        capsys,
        "refine-tm",
        "--blocks-dir", str(blocks_dir),
        "--decomp-dir", str(casc),
        "--calib", str(blocks_dir / "calib.slrt"),
        "--out", str(ref),
        "--sparsity", "2:4", "--rank", "2",
        "--tm-epochs", "3",
    )
    assert code == 0, err
    result = json.loads(out)
    assert result["loss_after"] < result["loss_before"]
    assert (ref / "block0.q.sparse.slrt").exists()
    trace = json.loads((ref / "block0.tm_trace.json").read_text())
    assert len(trace) == 4


def test_cascade_workers_do_not_change_results(capsys, tmp_path):
    blocks_dir = gen_blocks(capsys, tmp_path)
    outs = []
    for workers, sub in [(1, "w1"), (3, "w3")]:
        casc = tmp_path / sub
        code, _, _ = run_cli(
            capsys,
            "cascade",
            "--blocks-dir", str(blocks_dir),
            "--calib", str(blocks_dir / "calib.slrt"),
            "--out", str(casc),
            "--sparsity", "2:4", "--rank", "2", "--gram-scale", "auto",
            "--workers", str(workers),
        )
        assert code == 0
        outs.append(casc)
    for name in ("block0.q.sparse.slrt", "block0.down.left.slrt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def _normalize_report_text(text):
    return re.sub(r'"wall_ms": [0-9eE+.-]+', '"wall_ms": 0', text)


def test_cli_runs_are_bitwise_deterministic(capsys, tmp_path):
    data = gen_layer(capsys, tmp_path)
    outs = []
    for sub in ("d1", "d2"):
        dec = tmp_path / sub
        code, _, _ = run_cli(
            capsys,
            "decompose",
            "--weights", str(data / "weights.slrt"),
            "--calib", str(data / "calib.slrt"),
            "--out", str(dec),
            "--sparsity", "2:4", "--rank", "2", "--seed", "5",
        )
        assert code == 0
        outs.append(dec)
    for name in ("sparse.slrt", "lowrank_left.slrt", "lowrank_right.slrt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    r1 = _normalize_report_text((outs[0] / "report.jsonl").read_text())
    r2 = _normalize_report_text((outs[1] / "report.jsonl").read_text())
    assert r1 == r2


def test_exit_code_3_on_missing_file(capsys, tmp_path):
    code, _, err = run_cli(
        capsys,
        "decompose",
        "--weights", str(tmp_path / "nope.slrt"),
        "--calib", str(tmp_path / "nope2.slrt"),
        "--out", str(tmp_path / "dec"),
        "--sparsity", "2:4", "--rank", "2",
    )
    assert code == 3
    assert json.loads(err)["error"] == "data"


def test_exit_code_3_on_bad_config(capsys, tmp_path):
    data = gen_layer(capsys, tmp_path)
    code, _, err = run_cli(
        capsys,
        "decompose",
        "--weights", str(data / "weights.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--out", str(tmp_path / "dec"),
        "--sparsity", "4:4", "--rank", "2",
    )
    assert code == 3
    assert "data" in json.loads(err)["error"]


def test_exit_code_4_on_numerical_failure(capsys, tmp_path):
    blocks_dir = gen_blocks(capsys, tmp_path)
    casc = tmp_path / "casc"
    code, _, _ = run_cli(
        capsys,
        "cascade",
        "--blocks-dir", str(blocks_dir),
        "--calib", str(blocks_dir / "calib.slrt"),
        "--out", str(casc),
        "--sparsity", "2:4", "--rank", "2", "--gram-scale", "auto",
    )
    assert code == 0
    code, _, err = run_cli(
        capsys,
        "refine-tm",
        "--blocks-dir", str(blocks_dir),
        "--decomp-dir", str(casc),
        "--calib", str(blocks_dir / "calib.slrt"),
        "--out", str(tmp_path / "ref"),
        "--sparsity", "2:4", "--rank", "2",
        "--tm-epochs", "4", "--tm-lr", "1e5", "--tm-eta-min", "1.0",
    )
    assert code == 4
    assert json.loads(err)["error"] == "numerical"


def test_exit_code_2_on_unknown_flag(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["decompose", "--bogus-flag", "1"])
    assert exc.value.code == 2


def test_missing_sparsity_and_config_rejected(capsys, tmp_path):
    data = gen_layer(capsys, tmp_path)
    code, _, err = run_cli(
        capsys,
        "decompose",
        "--weights", str(data / "weights.slrt"),
        "--calib", str(data / "calib.slrt"),
        "--out", str(tmp_path / "dec"),
    )
    assert code == 3
    assert "sparsity" in json.loads(err)["message"]
