"""Sparsity patterns, magnitude projections and support-set algebra.

Two constraint families are supported:

* ``Unstructured(keep_fraction)`` keeps the globally largest entries,
  ``k = round(keep_fraction * numel)`` of them (round half to even).
* ``SemiStructured(n, m)`` keeps the ``n`` largest entries out of every
  ``m`` consecutive entries along each row, so ``m`` must divide the
  row length.

A support is a boolean mask of the same shape as the matrix. Projections
always return a mask of popcount exactly ``k``: exact zeros are retained
when the deterministic tie-break (lowest flat index wins) selects them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Unstructured:
    keep_fraction: float

    def __post_init__(self):
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ConfigError(
                f"sparsity: keep_fraction must be in (0, 1], got {self.keep_fraction}"
            )

    def keep_count(self, shape: tuple) -> int:
        numel = int(np.prod(shape))
        # round half to even for platform-independent k
        return int(round(self.keep_fraction * numel))

    def validate_for_shape(self, shape: tuple) -> None:
        if len(shape) != 2:
            raise ValueError(f"expected a matrix shape, got {shape}")

    def __str__(self) -> str:
        return f"unstructured:{self.keep_fraction}"


@dataclass(frozen=True)
class SemiStructured:
    n: int
    m: int

    def __post_init__(self):
        if not (0 < self.n < self.m):
            raise ConfigError(f"sparsity: need 0 < N < M, got {self.n}:{self.m}")

    def keep_count(self, shape: tuple) -> int:
        numel = int(np.prod(shape))
        return self.n * numel // self.m

    def validate_for_shape(self, shape: tuple) -> None:
        if len(shape) != 2:
            raise ValueError(f"expected a matrix shape, got {shape}")
        if shape[1] % self.m != 0:
            raise ValueError(
                f"sparsity: M={self.m} does not divide row length {shape[1]}"
            )

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"


SparsityPattern = Union[Unstructured, SemiStructured]


def parse_pattern(text: str) -> SparsityPattern:
    """Parse ``"N:M"`` or ``"unstructured:FRAC"`` into a pattern."""
    text = text.strip()
    if text.startswith("unstructured:"):
        try:
            frac = float(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"sparsity: cannot parse fraction in {text!r}") from None
        return Unstructured(frac)
    if ":" in text:
        left, right = text.split(":", 1)
        try:
            n, m = int(left), int(right)
        except ValueError:
            raise ConfigError(f"sparsity: cannot parse {text!r} as N:M") from None
        return SemiStructured(n, m)
    raise ConfigError(f"sparsity: unrecognized pattern {text!r}")


def _selection_keys(a: np.ndarray, weights: Optional[np.ndarray]) -> np.ndarray:
    if weights is None:
        return np.square(a)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        if w.shape[0] != a.shape[0]:
            raise ValueError(
                f"weights vector length {w.shape[0]} does not match row count {a.shape[0]}"
            )
        w = w[:, None]
    elif w.shape != a.shape:
        raise ValueError(f"weights shape {w.shape} incompatible with {a.shape}")
    if np.any(w <= 0.0):
        raise ValueError("weights must be strictly positive")
    return np.square(w * a)


def project(
    a: np.ndarray,
    pattern: SparsityPattern,
    weights: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the sparsity set by weighted magnitude.

    Returns ``(values, support)`` where ``values`` equals ``a`` on the
    retained entries and 0 elsewhere. The retained set maximizes the sum
    of ``(w * a)**2``; ties are broken toward the lowest flat index.
    ``weights`` may be a full matrix or a per-row vector (broadcast
    across each row), and must be strictly positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={a.ndim}")
    pattern.validate_for_shape(a.shape)
    keys = _selection_keys(a, weights)

    mask = np.zeros(a.shape, dtype=bool)
    if isinstance(pattern, SemiStructured):
        rows, cols = a.shape
        grouped = keys.reshape(rows * cols // pattern.m, pattern.m)
        # stable sort on negated keys: equal keys keep ascending index order
        order = np.argsort(-grouped, axis=1, kind="stable")
        take = order[:, : pattern.n]
        gmask = np.zeros(grouped.shape, dtype=bool)
        np.put_along_axis(gmask, take, True, axis=1)
        mask = gmask.reshape(rows, cols)
    else:
        k = pattern.keep_count(a.shape)
        order = np.argsort(-keys.ravel(), kind="stable")
        flat = mask.ravel()
        flat[order[:k]] = True
        mask = flat.reshape(a.shape)
    return np.where(mask, a, 0.0), mask


def apply_support(a: np.ndarray, support: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if support.shape != a.shape:
        raise ValueError(f"support shape {support.shape} does not match {a.shape}")
    return np.where(support, a, 0.0)


def support_symmetric_difference(a: np.ndarray, b: np.ndarray) -> int:
    """Count positions retained in exactly one of the two supports."""
    if a.shape != b.shape:
        raise ValueError(f"support shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a ^ b))
