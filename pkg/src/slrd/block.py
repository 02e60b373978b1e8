"""A small pre-norm transformer block with hand-written reverse mode.

The block is RMSNorm -> causal multi-head attention -> residual add,
then RMSNorm -> SiLU-gated MLP -> residual add. Weights follow the
(n_in, n_out) convention, applied as ``h @ W``. The forward pass keeps
every intermediate on a tape so the backward pass can produce exact
gradients for all weights, both norm scale vectors and the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import NumericalError
from .util import as_f64

LAYER_NAMES = ("q", "k", "v", "o", "gate", "up", "down")
ATTN_LAYERS = ("q", "k", "v", "o")
RMS_EPS = 1e-6


@dataclass(frozen=True)
class BlockSpec:
    d_model: int
    n_heads: int
    d_ff: int
    seq_len: int

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("d_model", "n_heads", "d_ff", "seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def layer_shape(self, name: str) -> tuple:
        d, f = self.d_model, self.d_ff
        return {
            "q": (d, d),
            "k": (d, d),
            "v": (d, d),
            "o": (d, d),
            "gate": (d, f),
            "up": (d, f),
            "down": (f, d),
        }[name]


@dataclass
class BlockParams:
    weights: Dict[str, np.ndarray]
    attn_scale: np.ndarray
    mlp_scale: np.ndarray

    def validate(self, spec: BlockSpec) -> None:
        for name in LAYER_NAMES:
            if name not in self.weights:
                raise ValueError(f"missing weight {name!r}")
            got = self.weights[name].shape
            want = spec.layer_shape(name)
            if got != want:
                raise ValueError(f"weight {name!r} has shape {got}, expected {want}")
        for scale, label in ((self.attn_scale, "attn_scale"), (self.mlp_scale, "mlp_scale")):
            if scale.shape != (spec.d_model,):
                raise ValueError(f"{label} has shape {scale.shape}")

    def copy(self) -> "BlockParams":
        return BlockParams(
            weights={k: v.copy() for k, v in self.weights.items()},
            attn_scale=self.attn_scale.copy(),
            mlp_scale=self.mlp_scale.copy(),
        )


@dataclass
class BlockGrads:
    weights: Dict[str, np.ndarray]
    attn_scale: np.ndarray
    mlp_scale: np.ndarray
    x: np.ndarray


def random_block_params(spec: BlockSpec, rng, weight_scale: float = None) -> BlockParams:
    """Gaussian init; default scale 1/sqrt(d_model) on every projection."""
    scale = weight_scale if weight_scale is not None else spec.d_model ** -0.5
    weights = {
        name: rng.standard_normal(spec.layer_shape(name)) * scale
        for name in LAYER_NAMES
    }
    return BlockParams(
        weights=weights,
        attn_scale=np.ones(spec.d_model),
        mlp_scale=np.ones(spec.d_model),
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _rms_forward(x: np.ndarray, scale: np.ndarray):
    rms = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + RMS_EPS)
    normed = x / rms
    return normed * scale, normed, rms


def _rms_backward(dout, normed, rms, scale):
    dn = dout * scale
    dscale = np.sum(dout * normed, axis=(0, 1))
    inner = np.mean(dn * normed, axis=-1, keepdims=True)
    dx = (dn - normed * inner) / rms
    return dx, dscale


def _split_heads(t: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, d = t.shape
    return t.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    b, h, s, hd = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, h * hd)


def block_forward(spec: BlockSpec, params: BlockParams, x: np.ndarray):
    """Run the block on ``x`` of shape (batch, seq_len, d_model).

    Returns ``(y, tape)``; the tape holds every intermediate needed by
    :func:`block_backward` plus the inputs seen by each linear layer.
    """
    params.validate(spec)
    x = as_f64(x, "block input")
    if x.ndim != 3 or x.shape[1] != spec.seq_len or x.shape[2] != spec.d_model:
        raise ValueError(
            f"input shape {x.shape} does not match (batch, {spec.seq_len}, {spec.d_model})"
        )
    w = params.weights
    nh, hd = spec.n_heads, spec.head_dim

    # overflow from extreme weights surfaces as the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        h1, normed1, rms1 = _rms_forward(x, params.attn_scale)
        q, k, v = h1 @ w["q"], h1 @ w["k"], h1 @ w["v"]
        qh, kh, vh = (_split_heads(t, nh) for t in (q, k, v))
        scores = (qh @ kh.swapaxes(-1, -2)) / np.sqrt(hd)
        seq = x.shape[1]
        causal = np.tril(np.ones((seq, seq), dtype=bool))
        scores = np.where(causal, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        expw = np.exp(scores)
        probs = expw / expw.sum(axis=-1, keepdims=True)
        ctx = probs @ vh
        concat = _merge_heads(ctx)
        attn = concat @ w["o"]
        x_mid = x + attn

        h2, normed2, rms2 = _rms_forward(x_mid, params.mlp_scale)
        gate_pre = h2 @ w["gate"]
        up_out = h2 @ w["up"]
        sig = _sigmoid(gate_pre)
        act = gate_pre * sig
        gated = act * up_out
        mlp = gated @ w["down"]
        y = x_mid + mlp

    if not np.isfinite(y).all():
        raise NumericalError("non-finite activations in block forward")

    tape = {
        "x": x, "normed1": normed1, "rms1": rms1, "h1": h1,
        "qh": qh, "kh": kh, "vh": vh, "probs": probs, "concat": concat,
        "x_mid": x_mid, "normed2": normed2, "rms2": rms2, "h2": h2,
        "gate_pre": gate_pre, "up_out": up_out, "sig": sig, "act": act,
        "gated": gated,
        "layer_inputs": {"q": h1, "k": h1, "v": h1, "o": concat,
                         "gate": h2, "up": h2, "down": gated},
    }
    return y, tape


def _weight_grad(inp: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return inp.reshape(-1, inp.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])


def block_backward(spec: BlockSpec, params: BlockParams, tape: dict, dy: np.ndarray) -> BlockGrads:
    """Exact reverse-mode gradients of :func:`block_forward`."""
    w = params.weights
    if dy.shape != tape["x"].shape:
        raise ValueError(f"dy shape {dy.shape} does not match input {tape['x'].shape}")
    grads: Dict[str, np.ndarray] = {}

    # MLP branch
    dgated = dy @ w["down"].T
    grads["down"] = _weight_grad(tape["gated"], dy)
    dact = dgated * tape["up_out"]
    dup = dgated * tape["act"]
    sig, gate_pre = tape["sig"], tape["gate_pre"]
    dgate_pre = dact * (sig * (1.0 + gate_pre * (1.0 - sig)))
    grads["up"] = _weight_grad(tape["h2"], dup)
    grads["gate"] = _weight_grad(tape["h2"], dgate_pre)
    dh2 = dup @ w["up"].T + dgate_pre @ w["gate"].T
    dx_mid_norm, dmlp_scale = _rms_backward(
        dh2, tape["normed2"], tape["rms2"], params.mlp_scale
    )
    dx_mid = dy + dx_mid_norm

    # attention branch
    dattn = dx_mid
    grads["o"] = _weight_grad(tape["concat"], dattn)
    dconcat = dattn @ w["o"].T
    dctx = _split_heads(dconcat, spec.n_heads)
    probs, vh = tape["probs"], tape["vh"]
    dprobs = dctx @ vh.swapaxes(-1, -2)
    dvh = probs.swapaxes(-1, -2) @ dctx
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dscores /= np.sqrt(spec.head_dim)
    dqh = dscores @ tape["kh"]
    dkh = dscores.swapaxes(-1, -2) @ tape["qh"]
    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    h1 = tape["h1"]
    grads["q"] = _weight_grad(h1, dq)
    grads["k"] = _weight_grad(h1, dk)
    grads["v"] = _weight_grad(h1, dv)
    dh1 = dq @ w["q"].T + dk @ w["k"].T + dv @ w["v"].T
    dx_norm, dattn_scale = _rms_backward(
        dh1, tape["normed1"], tape["rms1"], params.attn_scale
    )
    dx = dx_mid + dx_norm

    return BlockGrads(
        weights=grads, attn_scale=dattn_scale, mlp_scale=dmlp_scale, x=dx
    )


def layer_grams(tape: dict) -> Dict[str, np.ndarray]:
    """Gram matrix of each linear layer's input, accumulated over the batch."""
    out = {}
    for name, inp in tape["layer_inputs"].items():
        flat = inp.reshape(-1, inp.shape[-1])
        out[name] = flat.T @ flat
    return out
