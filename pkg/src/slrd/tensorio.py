"""Bit-exact binary tensor container, run configuration and run reports.

SLRT file layout (all little-endian):

    magic   4 bytes  b"SLRT"
    version u16      currently 1
    dtype   u8       0 = float32, 1 = float64
    ndim    u8       1, 2 or 3
    shape   ndim x u64
    payload row-major contiguous values

Run configs are flat ``key = value`` text with an optional ``[tm]``
section; ``#`` starts a comment. Reports are JSON lines: one object per
iteration plus a trailing summary object.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .sparsity import SparsityPattern, parse_pattern

MAGIC = b"SLRT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {"f32": 0, "f64": 1}


def write_tensor(path, data, dtype: str = "f64") -> None:
    """Write a 1-3 dimensional array as an SLRT file.

    ``dtype`` is ``"f64"`` or ``"f32"``. Narrowing to f32 rounds to
    nearest even; finite values outside the f32 range are an error
    rather than a silent saturation.
    """
    if dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim not in (1, 2, 3):
        raise DataError(f"ndim must be 1, 2 or 3, got {arr.ndim}")
    code = _DTYPE_CODES[dtype]
    with np.errstate(over="ignore"):
        payload = arr.astype(_DTYPES[code])
    if code == 0:
        overflowed = np.isinf(payload) & np.isfinite(arr)
        if np.any(overflowed):
            raise DataError(
                f"{np.count_nonzero(overflowed)} value(s) exceed the f32 range"
            )
    header = struct.pack("<4sHBB", MAGIC, VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an SLRT file; f32 payloads are widened to f64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    magic, version, code, ndim = struct.unpack_from("<4sHBB", blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if ndim not in (1, 2, 3):
        raise FormatError(f"{path}: invalid ndim {ndim}")
    offset = 8 + 8 * ndim
    if len(blob) < offset:
        raise FormatError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 8)
    expected = int(np.prod(shape)) * _DTYPES[code].itemsize
    payload = blob[offset:]
    if len(payload) < expected:
        raise FormatError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing byte(s)")
    arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape)
    return arr.astype(np.float64)


@dataclass
class TmHyper:
    """Hyperparameters for the block-output refinement loop."""

    epochs: int = 20
    batch: int = 8
    lr: float = 2e-5
    eta_min: float = 4e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_norms: bool = False

    def validate(self) -> None:
        for name in ("epochs", "batch", "lr", "eta_min", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"tm.{name} must be positive")
        if self.eta_min > self.lr:
            raise ConfigError("tm.eta_min must not exceed tm.lr")


@dataclass
class RunConfig:
    sparsity: SparsityPattern
    rank: int
    lam: float = 0.01
    rho0: float = 0.1
    max_iters: int = 200
    seed: int = 0
    solver: str = "admm"
    steps: int = 80
    damp_diag: float = 0.005
    damp_trace: float = 0.005
    tol_abs: float = 1e-7
    tol_rel: float = 1e-6
    rho_cap: float = 1e8
    rho_schedule: str = "step"
    prune_weighting: str = "hessian"
    lowrank_mode: str = "auto"
    gram_scale: str = "raw"
    tm: TmHyper = field(default_factory=TmHyper)

    def validate(self) -> None:
        if self.rank < 0:
            raise ConfigError(f"rank must be nonnegative, got {self.rank}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.rho0 <= 0:
            raise ConfigError(f"rho0 must be positive, got {self.rho0}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.solver not in ("admm", "altmin", "oats", "eora"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.prune_weighting not in ("hessian", "diag"):
            raise ConfigError(f"unknown prune_weighting {self.prune_weighting!r}")
        if self.lowrank_mode not in ("auto", "exact", "randomized"):
            raise ConfigError(f"unknown lowrank_mode {self.lowrank_mode!r}")
        if self.gram_scale not in ("raw", "auto"):
            raise ConfigError(f"unknown gram_scale {self.gram_scale!r}")
        if self.rho_cap < self.rho0:
            raise ConfigError("rho_cap must be >= rho0")
        kind = self.rho_schedule.split(":", 1)[0]
        if kind not in ("step", "geometric", "constant"):
            raise ConfigError(f"unknown rho_schedule {self.rho_schedule!r}")
        if kind == "geometric":
            if self.geometric_factor() <= 1.0:
                raise ConfigError("geometric rho factor must exceed 1")
        self.tm.validate()

    def validate_for_shape(self, shape: tuple) -> None:
        """Shape-dependent invariants: rank bound and N:M divisibility."""
        if self.rank > min(shape):
            raise ConfigError(
                f"rank {self.rank} exceeds min dimension of shape {shape}"
            )
        try:
            self.sparsity.validate_for_shape(shape)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def geometric_factor(self) -> float:
        parts = self.rho_schedule.split(":", 1)
        if parts[0] != "geometric":
            raise ConfigError(f"{self.rho_schedule!r} is not a geometric schedule")
        try:
            return float(parts[1]) if len(parts) > 1 else 1.1
        except ValueError:
            raise ConfigError(
                f"cannot parse geometric factor in {self.rho_schedule!r}"
            ) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sparsity"] = str(self.sparsity)
        return out


_MAIN_FIELDS = {
    "sparsity": parse_pattern,
    "rank": int,
    "lambda": float,
    "rho0": float,
    "max_iters": int,
    "seed": int,
    "solver": str,
    "steps": int,
    "damp_diag": float,
    "damp_trace": float,
    "tol_abs": float,
    "tol_rel": float,
    "rho_cap": float,
    "rho_schedule": str,
    "prune_weighting": str,
    "lowrank_mode": str,
    "gram_scale": str,
}
_TM_FIELDS = {
    "epochs": int,
    "batch": int,
    "lr": float,
    "eta_min": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "train_norms": None,  # parsed as bool below
}
_FIELD_RENAMES = {"lambda": "lam"}


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    main: dict = {}
    tm: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name != "tm":
                raise ConfigError(f"{source}:{lineno}: unknown section [{name}]")
            section = "tm"
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        table = _TM_FIELDS if section == "tm" else _MAIN_FIELDS
        if key not in table:
            where = "[tm] " if section == "tm" else ""
            raise ConfigError(f"{source}:{lineno}: unknown {where}key {key!r}")
        conv = table[key]
        try:
            parsed = _parse_bool(value) if conv is None else conv(value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        except ValueError:
            raise ConfigError(
                f"{source}:{lineno}: cannot parse value {value!r} for {key!r}"
            ) from None
        if section == "tm":
            tm[key] = parsed
        else:
            main[_FIELD_RENAMES.get(key, key)] = parsed
    for required in ("sparsity", "rank"):
        if required not in main:
            raise ConfigError(f"{source}: missing required key {required!r}")
    cfg = RunConfig(tm=TmHyper(**tm), **main)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    rho: Optional[float] = None
    primal_residual: Optional[float] = None
    support_change: Optional[int] = None
    wall_ms: float = 0.0
    delta_sparse: Optional[float] = None
    delta_lowrank: Optional[float] = None
    delta_sum: Optional[float] = None
    surrogate: Optional[float] = None


@dataclass
class RunReport:
    """Per-iteration trace plus the final feasible-solution summary."""

    method: str
    records: list = field(default_factory=list)
    final_objective: float = float("nan")
    final_rank: int = 0
    final_sparsity: float = float("nan")
    meta: dict = field(default_factory=dict)

    def add(self, record: IterationRecord) -> None:
        self.records.append(record)

    def objectives(self) -> list:
        return [r.objective for r in self.records]

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.records:
            row = {"type": "iter"}
            row.update(asdict(rec))
            lines.append(json.dumps(row))
        lines.append(
            json.dumps(
                {
                    "type": "summary",
                    "method": self.method,
                    "objective": self.final_objective,
                    "rank": self.final_rank,
                    "sparsity": self.final_sparsity,
                    "iterations": len(self.records),
                    "meta": self.meta,
                }
            )
        )
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "RunReport":
        records = []
        summary = None
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("type") == "summary":
                summary = row
            else:
                row.pop("type", None)
                records.append(IterationRecord(**row))
        if summary is None:
            raise DataError("report has no summary line")
        return cls(
            method=summary["method"],
            records=records,
            final_objective=summary["objective"],
            final_rank=summary["rank"],
            final_sparsity=summary["sparsity"],
            meta=summary.get("meta", {}),
        )

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))
