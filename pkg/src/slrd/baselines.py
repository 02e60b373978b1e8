"""Alternating-minimization baselines sharing the solver's kernels.

``alt_min`` is a lightweight prune-then-fit alternation ("AltMin-lite"):
the prune step is weighted magnitude selection on the residual, without
any least-squares refit of the surviving values, and the low-rank step
is the exact closed-form weighted fit. ``oats`` alternates exact
minimizers of the diagonally weighted surrogate |D(W - S - L)|_F with
D = diag(X.T X). ``eora`` is a single prune plus a single closed-form
low-rank correction, i.e. the one-step alternation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .linalg import HOperator, numerical_rank, rank_r_weighted_fit
from .sparsity import project
from .solver import LayerProblem, build_hessian, objective
from .tensorio import IterationRecord, RunConfig, RunReport

DIAG_FLOOR_REL = 1e-12


@dataclass
class AltMinConfig:
    steps: int = 80
    prune_weighting: str = "hessian"  # "hessian" or "diag"
    damp_diag: float = 0.005
    damp_trace: float = 0.005
    lowrank_mode: str = "exact"

    @classmethod
    def from_run_config(cls, config: RunConfig, steps=None) -> "AltMinConfig":
        return cls(
            steps=config.steps if steps is None else steps,
            prune_weighting=config.prune_weighting,
            damp_diag=config.damp_diag,
            damp_trace=config.damp_trace,
            lowrank_mode="exact" if config.lowrank_mode == "auto" else config.lowrank_mode,
        )


def _prune_weights(problem: LayerProblem, cfg: AltMinConfig, hop: HOperator):
    if cfg.prune_weighting == "hessian":
        return np.sqrt(np.diag(hop.matrix))
    if cfg.prune_weighting == "diag":
        d = np.diag(problem.gram)
        return np.sqrt(np.maximum(d, DIAG_FLOOR_REL * max(d.max(), 1e-300)))
    raise ValueError(f"unknown prune_weighting {cfg.prune_weighting!r}")


def alt_min(
    problem: LayerProblem, cfg: AltMinConfig | None = None
) -> tuple[np.ndarray, np.ndarray, RunReport]:
    """Prune-then-fit alternation; reports the true objective per step."""
    cfg = cfg or AltMinConfig()
    if cfg.steps < 1:
        raise ValueError(f"steps must be >= 1, got {cfg.steps}")
    hop = build_hessian(problem, cfg.damp_diag, cfg.damp_trace)
    weights = _prune_weights(problem, cfg, hop)
    w = problem.weights
    lowrank = np.zeros_like(w)
    report = RunReport(
        method="altmin",
        meta={"steps": cfg.steps, "prune_weighting": cfg.prune_weighting},
    )
    sparse = np.zeros_like(w)
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        sparse, _ = project(w - lowrank, problem.pattern, weights=weights)
        lowrank = rank_r_weighted_fit(
            hop, w - sparse, problem.rank, mode=cfg.lowrank_mode
        )
        report.add(
            IterationRecord(
                iteration=step,
                objective=objective(problem, sparse, lowrank),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    report.final_objective = objective(problem, sparse, lowrank)
    report.final_rank = numerical_rank(lowrank)
    report.final_sparsity = 1.0 - np.count_nonzero(sparse) / sparse.size
    return sparse, lowrank, report


def oats(
    problem: LayerProblem, cfg: AltMinConfig | None = None
) -> tuple[np.ndarray, np.ndarray, RunReport]:
    """Diagonally weighted alternation; exact in its own surrogate.

    Each record carries the surrogate value alongside the true
    reconstruction objective.
    """
    cfg = cfg or AltMinConfig()
    if cfg.steps < 1:
        raise ValueError(f"steps must be >= 1, got {cfg.steps}")
    d = np.diag(problem.gram).copy()
    d = np.maximum(d, DIAG_FLOOR_REL * max(d.max(), 1e-300))
    diag_hop = HOperator(np.diag(d * d))
    w = problem.weights
    lowrank = np.zeros_like(w)
    sparse = np.zeros_like(w)
    report = RunReport(method="oats", meta={"steps": cfg.steps})

    def surrogate(s, l):
        err = (w - s - l) * d[:, None]
        return 0.5 * float(np.vdot(err, err))

    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        sparse, _ = project(w - lowrank, problem.pattern, weights=d)
        lowrank = rank_r_weighted_fit(
            diag_hop, w - sparse, problem.rank, mode=cfg.lowrank_mode
        )
        report.add(
            IterationRecord(
                iteration=step,
                objective=objective(problem, sparse, lowrank),
                surrogate=surrogate(sparse, lowrank),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    report.final_objective = objective(problem, sparse, lowrank)
    report.final_rank = numerical_rank(lowrank)
    report.final_sparsity = 1.0 - np.count_nonzero(sparse) / sparse.size
    return sparse, lowrank, report


def eora(problem: LayerProblem, cfg: AltMinConfig | None = None):
    """One-shot prune plus closed-form low-rank correction."""
    base = cfg or AltMinConfig()
    one_step = AltMinConfig(
        steps=1,
        prune_weighting=base.prune_weighting,
        damp_diag=base.damp_diag,
        damp_trace=base.damp_trace,
        lowrank_mode=base.lowrank_mode,
    )
    sparse, lowrank, _ = alt_min(problem, one_step)
    return sparse, lowrank
