"""Shared instance generators for the unit and acceptance suites.

The layer-problem generator draws correlated calibration activations
scaled so the Gram's mean diagonal sits near 0.2-0.4, the regime where
the default penalty schedule converges within the default iteration
budget. Block weights default to a small scale typical of trained
residual networks so the fixed refinement learning rate is
proportionate.
"""

import numpy as np
import pytest

import slrd


def correlated_problem(
    seed,
    n=32,
    n_out=None,
    scale=0.2,
    corr=1.0,
    total=128,
    lam=0.01,
    pattern=None,
    rank=2,
):
    rng = np.random.default_rng(seed)
    n_out = n_out or n
    pattern = pattern or slrd.SemiStructured(2, 4)
    weights = rng.standard_normal((n, n_out))
    mix = np.eye(n) + corr * rng.standard_normal((n, n)) / np.sqrt(n)
    x = rng.standard_normal((total, n)) @ mix * np.sqrt(scale / total)
    problem = slrd.LayerProblem.from_activations(weights, x, lam, pattern, rank)
    return problem, x


def toy_block(seed, d_model=32, n_heads=4, d_ff=64, seq=16, calib=64, weight_scale=0.02):
    rng = np.random.default_rng(seed)
    spec = slrd.BlockSpec(d_model=d_model, n_heads=n_heads, d_ff=d_ff, seq_len=seq)
    params = slrd.random_block_params(spec, rng, weight_scale=weight_scale)
    x = rng.standard_normal((calib, seq, d_model))
    return spec, params, x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
