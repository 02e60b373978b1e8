"""Batch command line: generate synthetic problems, decompose, refine,
cascade over block stacks, evaluate, and benchmark method sweeps.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
Errors are emitted as one JSON object on stderr. All randomness flows
from ``--seed`` through named sub-streams ("gen", "rsvd", "tm-batch"),
so identical invocations produce identical output files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .baselines import AltMinConfig, alt_min, oats
from .block import (
    LAYER_NAMES,
    BlockParams,
    BlockSpec,
    block_forward,
    random_block_params,
)
from .errors import DataError, NumericalError, SlrdError
from .linalg import numerical_rank
from .sparsity import SemiStructured, Unstructured, parse_pattern, project
from .solver import LayerProblem, objective, solve_admm
from .tensorio import RunConfig, load_config, read_tensor, write_tensor
from .tm import (
    CompressedBlock,
    DecomposedLayer,
    cascade_compress,
    factor_lowrank,
    tm_refine,
)
from .util import substream_seed

_CONFIG_FLAGS = {
    # flag -> (RunConfig attribute, converter)
    "sparsity": ("sparsity", parse_pattern),
    "rank": ("rank", int),
    "lam": ("lam", float),
    "rho0": ("rho0", float),
    "max_iters": ("max_iters", int),
    "seed": ("seed", int),
    "solver": ("solver", str),
    "steps": ("steps", int),
    "damp_diag": ("damp_diag", float),
    "damp_trace": ("damp_trace", float),
    "tol_abs": ("tol_abs", float),
    "tol_rel": ("tol_rel", float),
    "rho_cap": ("rho_cap", float),
    "rho_schedule": ("rho_schedule", str),
    "prune_weighting": ("prune_weighting", str),
    "lowrank_mode": ("lowrank_mode", str),
    "gram_scale": ("gram_scale", str),
}
_TM_FLAGS = ("epochs", "batch", "lr", "eta_min", "train_norms")

_FLAG_HELP = {
    "sparsity": "pattern: N:M (e.g. 2:4) or unstructured:FRACTION",
    "solver": "admm | altmin | oats | eora",
    "prune_weighting": (
        "magnitude-prune weighting for the alternating baselines: 'hessian' "
        "uses sqrt(diag(H')), 'diag' the per-column activation norm "
        "sqrt(diag(X.T X)); the oats surrogate itself scales rows by the "
        "raw diag(X.T X)"
    ),
    "rho_schedule": "step | geometric:FACTOR | constant",
    "gram_scale": "raw | auto (rescale gram and lambda jointly before solving)",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="run config file (key = value)")
    for flag in _CONFIG_FLAGS:
        parser.add_argument(
            f"--{flag.replace('_', '-')}",
            type=str,
            default=None,
            help=_FLAG_HELP.get(flag),
        )
    for flag in _TM_FLAGS:
        parser.add_argument(f"--tm-{flag.replace('_', '-')}", type=str, default=None)


def _build_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        if getattr(args, "sparsity", None) is None or getattr(args, "rank", None) is None:
            raise DataError("need either --config or both --sparsity and --rank")
        cfg = RunConfig(sparsity=parse_pattern(args.sparsity), rank=int(args.rank))
    for flag, (attr, conv) in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, conv(value))
    for flag in _TM_FLAGS:
        value = getattr(args, f"tm_{flag}", None)
        if value is None:
            continue
        if flag == "train_norms":
            setattr(cfg.tm, flag, value.lower() in ("true", "1", "yes"))
        elif flag in ("epochs", "batch"):
            setattr(cfg.tm, flag, int(value))
        else:
            setattr(cfg.tm, flag, float(value))
    cfg.validate()
    return cfg


def _load_problem(weights_path, calib_path, cfg: RunConfig) -> LayerProblem:
    weights = read_tensor(weights_path)
    calib = read_tensor(calib_path)
    if weights.ndim != 2:
        raise DataError(f"weights must be a matrix, got ndim={weights.ndim}")
    cfg.validate_for_shape(weights.shape)
    return LayerProblem.from_activations(
        weights, calib, cfg.lam, cfg.sparsity, cfg.rank
    )


def _dispatch_method(problem: LayerProblem, cfg: RunConfig):
    if cfg.solver == "admm":
        return solve_admm(problem, cfg)
    if cfg.solver == "altmin":
        return alt_min(problem, AltMinConfig.from_run_config(cfg))
    if cfg.solver == "oats":
        return oats(problem, AltMinConfig.from_run_config(cfg))
    if cfg.solver == "eora":
        sparse, lowrank, report = alt_min(
            problem, AltMinConfig.from_run_config(cfg, steps=1)
        )
        report.method = "eora"
        return sparse, lowrank, report
    raise DataError(f"unknown solver {cfg.solver!r}")


# ---------------------------------------------------------------- gen


def _cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(substream_seed(args.seed, "gen"))
    manifest = {"seed": args.seed, "kind": args.kind}

    if args.kind == "layer":
        rows, cols = (int(p) for p in args.shape.lower().split("x"))
        if args.planted:
            pattern = parse_pattern(args.planted_sparsity)
            base = rng.standard_normal((rows, cols))
            sparse_true, _ = project(base, pattern)
            r = args.planted_rank
            if r > 0:
                lf = rng.standard_normal((rows, r))
                rf = rng.standard_normal((cols, r))
                lowrank_true = args.lowrank_scale * (lf @ rf.T) / np.sqrt(r)
            else:
                lowrank_true = np.zeros((rows, cols))
            weights = sparse_true + lowrank_true
            if args.noise > 0:
                weights = weights + args.noise * rng.standard_normal((rows, cols))
            manifest["planted"] = {
                "sparsity": str(pattern),
                "rank": r,
                "noise": args.noise,
                "lowrank_scale": args.lowrank_scale,
            }
        else:
            weights = rng.standard_normal((rows, cols))
        mix = np.eye(rows) + args.x_corr * rng.standard_normal((rows, rows)) / np.sqrt(rows)
        total = args.calib_count * args.seq
        calib = rng.standard_normal((args.calib_count, args.seq, rows)) @ mix
        calib *= np.sqrt(args.x_scale / total)
        write_tensor(out / "weights.slrt", weights)
        write_tensor(out / "calib.slrt", calib)
        manifest.update(
            {
                "shape": [rows, cols],
                "calib_count": args.calib_count,
                "seq": args.seq,
                "x_corr": args.x_corr,
                "x_scale": args.x_scale,
                "files": {"weights": "weights.slrt", "calib": "calib.slrt"},
            }
        )
    else:
        spec = BlockSpec(
            d_model=args.d_model,
            n_heads=args.n_heads,
            d_ff=args.d_ff,
            seq_len=args.seq,
        )
        for b in range(args.blocks):
            params = random_block_params(spec, rng, weight_scale=args.weight_scale)
            for name in LAYER_NAMES:
                write_tensor(out / f"block{b}.{name}.slrt", params.weights[name])
            write_tensor(out / f"block{b}.attn_scale.slrt", params.attn_scale)
            write_tensor(out / f"block{b}.mlp_scale.slrt", params.mlp_scale)
        calib = rng.standard_normal((args.calib_count, args.seq, args.d_model))
        write_tensor(out / "calib.slrt", calib)
        manifest.update(
            {
                "blocks": args.blocks,
                "d_model": args.d_model,
                "n_heads": args.n_heads,
                "d_ff": args.d_ff,
                "seq": args.seq,
                "calib_count": args.calib_count,
                "weight_scale": args.weight_scale,
            }
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(json.dumps({"written": str(out)}))
    return 0


def _read_block_stack(blocks_dir: Path):
    manifest = json.loads((blocks_dir / "manifest.json").read_text())
    if manifest.get("kind") != "blocks":
        raise DataError(f"{blocks_dir} does not contain a block stack")
    spec = BlockSpec(
        d_model=manifest["d_model"],
        n_heads=manifest["n_heads"],
        d_ff=manifest["d_ff"],
        seq_len=manifest["seq"],
    )
    params_list = []
    for b in range(manifest["blocks"]):
        weights = {
            name: read_tensor(blocks_dir / f"block{b}.{name}.slrt")
            for name in LAYER_NAMES
        }
        params_list.append(
            BlockParams(
                weights=weights,
                attn_scale=read_tensor(blocks_dir / f"block{b}.attn_scale.slrt"),
                mlp_scale=read_tensor(blocks_dir / f"block{b}.mlp_scale.slrt"),
            )
        )
    return manifest, spec, params_list


# ---------------------------------------------------------- decompose


def _cmd_decompose(args) -> int:
    cfg = _build_config(args)
    problem = _load_problem(args.weights, args.calib, cfg)
    sparse, lowrank, report = _dispatch_method(problem, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    left, right = factor_lowrank(lowrank, cfg.rank)
    write_tensor(out / "sparse.slrt", sparse)
    write_tensor(out / "lowrank_left.slrt", left)
    write_tensor(out / "lowrank_right.slrt", right)
    report.save(out / "report.jsonl")
    print(
        json.dumps(
            {
                "method": report.method,
                "objective": report.final_objective,
                "iterations": len(report.records),
            }
        )
    )
    return 0


# ----------------------------------------------------------- evaluate


def _cmd_evaluate(args) -> int:
    weights = read_tensor(args.weights)
    sparse = read_tensor(args.sparse)
    left = read_tensor(args.left)
    right = read_tensor(args.right)
    calib = read_tensor(args.calib)
    lowrank = left @ right.T
    if sparse.shape != weights.shape or lowrank.shape != weights.shape:
        raise DataError("component shapes do not match the weights")
    pattern = parse_pattern(args.sparsity) if args.sparsity else None
    problem = LayerProblem.from_activations(
        weights,
        calib,
        args.lam,
        pattern if pattern is not None else Unstructured(1.0),
        min(weights.shape),
    )
    err = weights - sparse - lowrank
    if calib.ndim == 2:
        calib = calib[None]
    x_flat = calib.reshape(-1, calib.shape[-1])
    denom = np.linalg.norm(x_flat @ weights)
    rel = float(np.linalg.norm(x_flat @ err) / denom) if denom > 0 else float("nan")
    metrics = {
        "objective": objective(problem, sparse, lowrank),
        "rel_output_err": rel,
        "sparsity": 1.0 - np.count_nonzero(sparse) / sparse.size,
        "rank": numerical_rank(lowrank),
        "nm_valid": _nm_valid(sparse, pattern) if pattern is not None else None,
    }
    print(json.dumps(metrics))
    return 0


def _nm_valid(sparse: np.ndarray, pattern) -> bool:
    if isinstance(pattern, SemiStructured):
        groups = (sparse != 0).reshape(-1, pattern.m)
        return bool(np.all(groups.sum(axis=1) <= pattern.n))
    k = pattern.keep_count(sparse.shape)
    return bool(np.count_nonzero(sparse) <= k)


# ---------------------------------------------------------- refine-tm


def _cmd_refine_tm(args) -> int:
    cfg = _build_config(args)
    blocks_dir = Path(args.blocks_dir)
    manifest, spec, params_list = _read_block_stack(blocks_dir)
    b = args.block_index
    if not (0 <= b < len(params_list)):
        raise DataError(f"block index {b} out of range")
    decomp_dir = Path(args.decomp_dir)
    block = _read_compressed_block(decomp_dir, b, spec)
    x_cal = read_tensor(args.calib)
    refined, trace = tm_refine(
        spec,
        params_list[b],
        block,
        x_cal,
        cfg.tm,
        seed=substream_seed(cfg.seed, f"tm{b}"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_compressed_block(out, b, refined)
    (out / f"block{b}.tm_trace.json").write_text(json.dumps(trace) + "\n")
    # the returned block is the best epoch snapshot: its loss is min(trace)
    print(json.dumps({"block": b, "loss_before": trace[0], "loss_after": min(trace)}))
    return 0


def _write_compressed_block(out: Path, b: int, block: CompressedBlock) -> None:
    for name, layer in block.layers.items():
        write_tensor(out / f"block{b}.{name}.sparse.slrt", layer.sparse)
        write_tensor(out / f"block{b}.{name}.left.slrt", layer.left)
        write_tensor(out / f"block{b}.{name}.right.slrt", layer.right)
    write_tensor(out / f"block{b}.attn_scale.slrt", block.attn_scale)
    write_tensor(out / f"block{b}.mlp_scale.slrt", block.mlp_scale)


def _read_compressed_block(decomp_dir: Path, b: int, spec: BlockSpec) -> CompressedBlock:
    layers = {}
    for name in LAYER_NAMES:
        sparse = read_tensor(decomp_dir / f"block{b}.{name}.sparse.slrt")
        left = read_tensor(decomp_dir / f"block{b}.{name}.left.slrt")
        right = read_tensor(decomp_dir / f"block{b}.{name}.right.slrt")
        layers[name] = DecomposedLayer(
            sparse=sparse, mask=sparse != 0.0, left=left, right=right
        )
    attn_scale = read_tensor(decomp_dir / f"block{b}.attn_scale.slrt")
    mlp_scale = read_tensor(decomp_dir / f"block{b}.mlp_scale.slrt")
    return CompressedBlock(layers=layers, attn_scale=attn_scale, mlp_scale=mlp_scale)


# ------------------------------------------------------------ cascade


def _cmd_cascade(args) -> int:
    cfg = _build_config(args)
    manifest, spec, params_list = _read_block_stack(Path(args.blocks_dir))
    x0 = read_tensor(args.calib)
    blocks, infos, x_final = cascade_compress(
        [spec] * len(params_list),
        params_list,
        x0,
        cfg,
        apply_tm=args.tm,
        hyper=cfg.tm,
        workers=args.workers,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    x = x0
    for b, (block, info) in enumerate(zip(blocks, infos)):
        _write_compressed_block(out, b, block)
        for name, report in info["layer_reports"].items():
            report.save(out / f"block{b}.{name}.report.jsonl")
        x, _ = block_forward(spec, block.to_params(), x)
        write_tensor(out / f"x_after_block{b}.slrt", x)
        entry = {
            "block": b,
            "workers": info["workers"],
            "objectives": {
                name: info["layer_reports"][name].final_objective
                for name in LAYER_NAMES
            },
        }
        if "tm_trace" in info:
            entry["tm_trace"] = info["tm_trace"]
        summary.append(entry)
    (out / "cascade.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({"blocks": len(blocks), "out": str(out)}))
    return 0


# -------------------------------------------------------------- bench


def _cmd_bench(args) -> int:
    methods = args.methods.split(",")
    rows = []
    finals = {}
    for method in methods:
        cfg = _build_config(args)
        cfg.solver = method
        cfg.validate()
        problem = _load_problem(args.weights, args.calib, cfg)
        _, _, report = _dispatch_method(problem, cfg)
        for rec in report.records:
            rows.append((method, rec.iteration, rec.objective))
        finals[method] = report.final_objective
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "iteration", "objective"])
        writer.writerows(rows)
    print(json.dumps({"csv": str(out), "final_objectives": finals}))
    return 0


# --------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slrd",
        description="Layer-wise sparse-plus-low-rank weight decomposition.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic weights and calibration data")
    gen.add_argument("--kind", choices=("layer", "blocks"), default="layer")
    gen.add_argument("--shape", default="32x32", help="layer shape, e.g. 32x32")
    gen.add_argument("--calib-count", type=int, default=128)
    gen.add_argument("--seq", type=int, default=16)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--x-corr", type=float, default=1.0)
    gen.add_argument(
        "--x-scale",
        type=float,
        default=0.2,
        help="approximate mean diagonal of the calibration Gram; the"
        " default keeps the penalty schedule in its convergent regime",
    )
    gen.add_argument("--planted", action="store_true")
    gen.add_argument("--planted-sparsity", default="2:4")
    gen.add_argument("--planted-rank", type=int, default=2)
    gen.add_argument("--noise", type=float, default=0.0)
    gen.add_argument("--lowrank-scale", type=float, default=0.1)
    gen.add_argument("--blocks", type=int, default=1)
    gen.add_argument("--d-model", type=int, default=32)
    gen.add_argument("--n-heads", type=int, default=4)
    gen.add_argument("--d-ff", type=int, default=64)
    gen.add_argument("--weight-scale", type=float, default=None)
    gen.set_defaults(func=_cmd_gen)

    dec = sub.add_parser("decompose", help="decompose one layer's weights")
    dec.add_argument("--weights", required=True)
    dec.add_argument("--calib", required=True)
    dec.add_argument("--out", required=True)
    _add_config_flags(dec)
    dec.set_defaults(func=_cmd_decompose)

    ev = sub.add_parser("evaluate", help="metrics for a stored decomposition")
    ev.add_argument("--weights", required=True)
    ev.add_argument("--sparse", required=True)
    ev.add_argument("--left", required=True)
    ev.add_argument("--right", required=True)
    ev.add_argument("--calib", required=True)
    ev.add_argument("--lam", type=float, default=0.01)
    ev.add_argument(
        "--sparsity",
        default=None,
        help="pattern to validate against; omitted means nm_valid is null",
    )
    ev.set_defaults(func=_cmd_evaluate)

    ref = sub.add_parser("refine-tm", help="refine one block's decomposition")
    ref.add_argument("--blocks-dir", required=True)
    ref.add_argument("--decomp-dir", required=True)
    ref.add_argument("--calib", required=True)
    ref.add_argument("--out", required=True)
    ref.add_argument("--block-index", type=int, default=0)
    _add_config_flags(ref)
    ref.set_defaults(func=_cmd_refine_tm)

    cas = sub.add_parser("cascade", help="compress a block stack sequentially")
    cas.add_argument("--blocks-dir", required=True)
    cas.add_argument("--calib", required=True)
    cas.add_argument("--out", required=True)
    cas.add_argument("--tm", action="store_true")
    cas.add_argument("--workers", type=int, default=1)
    _add_config_flags(cas)
    cas.set_defaults(func=_cmd_cascade)

    ben = sub.add_parser("bench", help="objective traces for a method sweep")
    ben.add_argument("--weights", required=True)
    ben.add_argument("--calib", required=True)
    ben.add_argument("--out", required=True)
    ben.add_argument("--methods", default="admm,altmin,oats,eora")
    _add_config_flags(ben)
    ben.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(json.dumps({"error": "numerical", "message": str(exc)}), file=sys.stderr)
        return 4
    except (DataError, SlrdError, ValueError, OSError, KeyError) as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
