"""Joint refinement of decomposed layers against the dense block output.

Every linear layer of a block is replaced by ``sparse + left @ right.T``
with the sparse support frozen. Adam then minimizes the squared
Frobenius gap between the dense block's outputs and the decomposed
block's outputs on the calibration set, re-masking the sparse values
after every step. ``cascade_compress`` chains this over a stack of
blocks, feeding each block the activations produced by its already
compressed predecessors.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .errors import NumericalError
from .block import (
    LAYER_NAMES,
    BlockParams,
    BlockSpec,
    block_backward,
    block_forward,
    layer_grams,
)
from .linalg import truncated_svd
from .solver import LayerProblem, solve_admm
from .baselines import AltMinConfig, alt_min, oats
from .tensorio import RunConfig, RunReport, TmHyper
from .util import substream_seed


@dataclass
class DecomposedLayer:
    """Masked sparse values plus rank-r factors for one linear layer."""

    sparse: np.ndarray
    mask: np.ndarray
    left: np.ndarray  # (n_in, r)
    right: np.ndarray  # (n_out, r)

    def __post_init__(self):
        if self.mask.shape != self.sparse.shape:
            raise ValueError("mask shape does not match sparse values")
        if self.left.shape[1] != self.right.shape[1]:
            raise ValueError("factor ranks differ")
        if (
            self.left.shape[0] != self.sparse.shape[0]
            or self.right.shape[0] != self.sparse.shape[1]
        ):
            raise ValueError("factor shapes do not match the layer")
        self.sparse = np.where(self.mask, self.sparse, 0.0)

    @property
    def rank_budget(self) -> int:
        return self.left.shape[1]

    def effective(self) -> np.ndarray:
        return self.sparse + self.left @ self.right.T

    def copy(self) -> "DecomposedLayer":
        return DecomposedLayer(
            self.sparse.copy(), self.mask.copy(), self.left.copy(), self.right.copy()
        )


def factor_lowrank(lowrank: np.ndarray, rank: int):
    """Split a low-rank matrix into balanced factors via truncated SVD."""
    u, s, v = truncated_svd(lowrank, rank)
    root = np.sqrt(s)
    return u * root, v * root


def decomposed_from_solution(sparse, support, lowrank, rank) -> DecomposedLayer:
    left, right = factor_lowrank(lowrank, rank)
    return DecomposedLayer(sparse=sparse, mask=support, left=left, right=right)


@dataclass
class CompressedBlock:
    layers: Dict[str, DecomposedLayer]
    attn_scale: np.ndarray
    mlp_scale: np.ndarray

    def to_params(self) -> BlockParams:
        return BlockParams(
            weights={name: layer.effective() for name, layer in self.layers.items()},
            attn_scale=self.attn_scale,
            mlp_scale=self.mlp_scale,
        )

    def copy(self) -> "CompressedBlock":
        return CompressedBlock(
            layers={k: v.copy() for k, v in self.layers.items()},
            attn_scale=self.attn_scale.copy(),
            mlp_scale=self.mlp_scale.copy(),
        )


class Adam:
    """Reference Adam recurrence with bias correction."""

    def __init__(self, shapes: Dict[str, tuple], beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for key, g in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            params[key] -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def adam_reference_step(theta, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1, m=0.0, v=0.0):
    """Single-parameter Adam update, spelled out for cross-checking."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return theta - lr * m_hat / (math.sqrt(v_hat) + eps), m, v


def cosine_lr(step: int, total: int, lr: float, eta_min: float) -> float:
    if total <= 1:
        return lr
    frac = step / (total - 1)
    return eta_min + 0.5 * (lr - eta_min) * (1.0 + math.cos(math.pi * frac))


def matching_loss(
    spec: BlockSpec, params: BlockParams, x_cal: np.ndarray, targets: np.ndarray
) -> float:
    """Squared Frobenius gap between block outputs and the targets."""
    y, _ = block_forward(spec, params, x_cal)
    return float(np.vdot(y - targets, y - targets))


def _trainable(compressed: CompressedBlock, train_norms: bool) -> Dict[str, np.ndarray]:
    params: Dict[str, np.ndarray] = {}
    for name, layer in compressed.layers.items():
        params[f"{name}.sparse"] = layer.sparse
        params[f"{name}.left"] = layer.left
        params[f"{name}.right"] = layer.right
    if train_norms:
        params["attn_scale"] = compressed.attn_scale
        params["mlp_scale"] = compressed.mlp_scale
    return params


def tm_refine(
    spec: BlockSpec,
    dense_params: BlockParams,
    compressed: CompressedBlock,
    x_cal: np.ndarray,
    hyper: Optional[TmHyper] = None,
    seed: int = 0,
) -> tuple[CompressedBlock, List[float]]:
    """Adam refinement of all decomposed layers of one block.

    ``x_cal`` has shape (n_sequences, seq_len, d_model). Targets are the
    dense block's outputs on the same inputs, computed once. Returns the
    refined block and the loss trace: full-set loss before training and
    after each epoch. The sparse supports never widen, factor ranks
    never grow, and a loss exceeding ten times the initial one aborts.
    """
    hyper = hyper or TmHyper()
    hyper.validate()
    x_cal = np.asarray(x_cal, dtype=np.float64)
    if x_cal.ndim != 3:
        raise ValueError(f"calibration stack must be 3-d, got ndim={x_cal.ndim}")
    n_seq = x_cal.shape[0]
    targets, _ = block_forward(spec, dense_params, x_cal)

    out = compressed.copy()
    trainable = _trainable(out, hyper.train_norms)
    opt = Adam({k: v.shape for k, v in trainable.items()}, hyper.beta1, hyper.beta2, hyper.eps)
    batches_per_epoch = math.ceil(n_seq / hyper.batch)
    total_steps = hyper.epochs * batches_per_epoch
    rng = np.random.default_rng(substream_seed(seed, "tm-batch"))

    initial = matching_loss(spec, out.to_params(), x_cal, targets)
    trace = [initial]
    best_loss, best = initial, out.copy()
    step_index = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(n_seq)
        for b in range(batches_per_epoch):
            idx = order[b * hyper.batch : (b + 1) * hyper.batch]
            xb, tb = x_cal[idx], targets[idx]
            params_now = out.to_params()
            y, tape = block_forward(spec, params_now, xb)
            dy = 2.0 * (y - tb)
            grads = block_backward(spec, params_now, tape, dy)
            gdict: Dict[str, np.ndarray] = {}
            for name, layer in out.layers.items():
                dw = grads.weights[name]
                gdict[f"{name}.sparse"] = np.where(layer.mask, dw, 0.0)
                gdict[f"{name}.left"] = dw @ layer.right
                gdict[f"{name}.right"] = dw.T @ layer.left
            if hyper.train_norms:
                gdict["attn_scale"] = grads.attn_scale
                gdict["mlp_scale"] = grads.mlp_scale
            lr_t = cosine_lr(step_index, total_steps, hyper.lr, hyper.eta_min)
            opt.step(trainable, gdict, lr_t)
            step_index += 1
            for layer in out.layers.values():
                layer.sparse *= layer.mask
        epoch_loss = matching_loss(spec, out.to_params(), x_cal, targets)
        trace.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best = epoch_loss, out.copy()
        if epoch_loss > 10.0 * max(initial, 1e-300):
            raise NumericalError(
                f"refinement diverged: loss {epoch_loss:.3e} vs initial {initial:.3e}"
            )
    # the returned block is the best epoch snapshot, so its loss never
    # exceeds the pre-training loss even if late epochs overshoot
    return best, trace


# mean Gram diagonal the "auto" rescaling targets: the regime where the
# default penalty and its schedule converge within the default budget
AUTO_GRAM_TARGET = 0.3


def _solve_layer(
    name: str,
    weights: np.ndarray,
    gram: np.ndarray,
    config: RunConfig,
) -> tuple[str, DecomposedLayer, RunReport]:
    """Decompose one linear layer given the Gram of its inputs.

    With ``gram_scale = "auto"`` the Gram and the ridge coefficient are
    both multiplied by the same factor before solving, which leaves the
    minimizers unchanged while putting the curvature on the scale the
    penalty schedule expects; reported objectives are mapped back to the
    original scale.
    """
    alpha = 1.0
    if config.gram_scale == "auto":
        mean_diag = float(np.mean(np.diag(gram)))
        if mean_diag > 0.0:
            alpha = AUTO_GRAM_TARGET / mean_diag
    problem = LayerProblem(
        weights=weights,
        gram=gram * alpha,
        lam=config.lam * alpha,
        pattern=config.sparsity,
        rank=config.rank,
    )
    if config.solver == "admm":
        sparse, lowrank, report = solve_admm(problem, config)
    elif config.solver == "altmin":
        sparse, lowrank, report = alt_min(problem, AltMinConfig.from_run_config(config))
    elif config.solver == "oats":
        sparse, lowrank, report = oats(problem, AltMinConfig.from_run_config(config))
    elif config.solver == "eora":
        sparse, lowrank, report = alt_min(
            problem, AltMinConfig.from_run_config(config, steps=1)
        )
        report.method = "eora"
    else:
        raise ValueError(f"unknown solver {config.solver!r}")
    if alpha != 1.0:
        for rec in report.records:
            rec.objective /= alpha
            if rec.surrogate is not None:
                rec.surrogate /= alpha * alpha
        report.final_objective /= alpha
        report.meta["gram_scale_alpha"] = alpha
    layer = decomposed_from_solution(sparse, sparse != 0.0, lowrank, config.rank)
    return name, layer, report


def compress_block(
    spec: BlockSpec,
    params: BlockParams,
    x_in: np.ndarray,
    config: RunConfig,
    workers: int = 1,
) -> tuple[CompressedBlock, Dict[str, RunReport]]:
    """Layer-wise decomposition of one block from its input activations."""
    _, tape = block_forward(spec, params, x_in)
    grams = layer_grams(tape)
    jobs = [(name, params.weights[name], grams[name]) for name in LAYER_NAMES]
    results = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_solve_layer, name, w, g, config) for name, w, g in jobs
            ]
            for fut in futures:
                name, layer, report = fut.result()
                results[name] = (layer, report)
    else:
        for name, w, g in jobs:
            name, layer, report = _solve_layer(name, w, g, config)
            results[name] = (layer, report)
    block = CompressedBlock(
        layers={name: results[name][0] for name in LAYER_NAMES},
        attn_scale=params.attn_scale.copy(),
        mlp_scale=params.mlp_scale.copy(),
    )
    reports = {name: results[name][1] for name in LAYER_NAMES}
    return block, reports


def cascade_compress(
    specs: List[BlockSpec],
    params_list: List[BlockParams],
    x0: np.ndarray,
    config: RunConfig,
    apply_tm: bool = False,
    hyper: Optional[TmHyper] = None,
    workers: int = 1,
) -> tuple[List[CompressedBlock], List[dict], np.ndarray]:
    """Compress a stack of blocks, propagating compressed activations.

    Block ``i`` sees the outputs of the already compressed blocks
    ``0..i-1`` both for its calibration Gram matrices and, when
    refinement is on, for the matching targets. Returns the compressed
    blocks, per-block report dicts and the final activations.
    """
    if len(specs) != len(params_list) or not specs:
        raise ValueError("need one params set per block spec")
    x = np.asarray(x0, dtype=np.float64)
    blocks: List[CompressedBlock] = []
    reports: List[dict] = []
    for i, (spec, params) in enumerate(zip(specs, params_list)):
        t0 = time.perf_counter()
        block, layer_reports = compress_block(spec, params, x, config, workers=workers)
        info: dict = {
            "block": i,
            "layer_reports": layer_reports,
            "workers": workers,
        }
        if apply_tm:
            block, trace = tm_refine(
                spec, params, block, x, hyper, seed=substream_seed(config.seed, f"tm{i}")
            )
            info["tm_trace"] = trace
        info["wall_ms"] = (time.perf_counter() - t0) * 1e3
        blocks.append(block)
        reports.append(info)
        x, _ = block_forward(spec, block.to_params(), x)
    return blocks, reports, x
