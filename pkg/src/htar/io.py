"""File formats: tensor series text files, model files, preprocessing.

The series format is line-oriented and exact:

    dims: p1 p2 ... pN
    T: <count>
    <Q whitespace-separated floats or NA per line, vec order>

Models serialize to JSON with full float precision, so a round trip
reproduces predictions exactly on the writing platform.  All writes are
atomic (temp file + rename).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from htar.loadings import LoadingSpec, LoadingStack
from htar.model import CoreMatrix, HtarModel, NoiseSpec
from htar.tensor import ActionOrder, TensorSeries

__all__ = [
    "ParseError",
    "read_series",
    "write_series",
    "save_model",
    "load_model",
    "TransformRecord",
    "preprocess",
    "invert",
]

MODEL_FORMAT = "htar-model"
MODEL_VERSION = 1


class ParseError(ValueError):
    """Malformed data file; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_series(path: str) -> TensorSeries:
    """Parse a tensor series file, linearly interpolating interior NA runs."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2:
        raise ParseError("expected 'dims:' and 'T:' header lines", 1)
    if not lines[0].startswith("dims:"):
        raise ParseError(f"expected 'dims: ...', got {lines[0]!r}", 1)
    try:
        dims = tuple(int(v) for v in lines[0][len("dims:"):].split())
    except ValueError:
        raise ParseError(f"non-integer mode dimension in {lines[0]!r}", 1) from None
    if not dims or any(p < 1 for p in dims):
        raise ParseError(f"invalid dims {dims}", 1)
    if not lines[1].startswith("T:"):
        raise ParseError(f"expected 'T: <count>', got {lines[1]!r}", 2)
    try:
        t_count = int(lines[1][len("T:"):].strip())
    except ValueError:
        raise ParseError(f"non-integer record count in {lines[1]!r}", 2) from None
    if t_count < 1:
        raise ParseError(f"record count must be >= 1, got {t_count}", 2)
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != t_count:
        raise ParseError(
            f"expected {t_count} records, found {len(body)}", 3 + len(body)
        )
    q = math.prod(dims)
    values = np.empty((t_count, q))
    missing = np.zeros((t_count, q), dtype=bool)
    for i, line in enumerate(body):
        fields = line.split()
        lineno = i + 3
        if len(fields) != q:
            raise ParseError(f"expected {q} values, found {len(fields)}", lineno)
        for j, tok in enumerate(fields):
            if tok == "NA":
                missing[i, j] = True
                values[i, j] = np.nan
            else:
                try:
                    values[i, j] = float(tok)
                except ValueError:
                    raise ParseError(f"non-numeric field {tok!r}", lineno) from None
    if missing.any():
        values = _interpolate(values, missing)
    return TensorSeries(dims, values)


def _interpolate(values: np.ndarray, missing: np.ndarray) -> np.ndarray:
    out = values.copy()
    t_count = values.shape[0]
    for j in range(values.shape[1]):
        col_missing = missing[:, j]
        if not col_missing.any():
            continue
        if col_missing[0]:
            first = int(np.argmax(~col_missing)) if (~col_missing).any() else t_count
            raise ParseError(
                f"entry {j + 1} starts with a missing run; cannot interpolate", 3
            )
        if col_missing[-1]:
            raise ParseError(
                f"entry {j + 1} ends with a missing run; cannot interpolate",
                2 + t_count,
            )
        known = np.flatnonzero(~col_missing)
        gaps = np.flatnonzero(col_missing)
        out[gaps, j] = np.interp(gaps, known, values[known, j])
    return out


def write_series(path: str, series: TensorSeries) -> None:
    """Write the exact text format; floats use shortest-round-trip repr."""
    lines = [
        "dims: " + " ".join(str(p) for p in series.dims),
        f"T: {len(series)}",
    ]
    for row in series.values:
        lines.append(" ".join(repr(float(v)) for v in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _stack_payload(stack: LoadingStack) -> dict:
    return {
        "order": list(stack.order.perm),
        "ranks": list(stack.profile.ranks),
        "components": [g.tolist() for g in stack.components],
    }


def save_model(path: str, model: HtarModel) -> None:
    """Serialize to JSON; floats survive the round trip exactly."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "lag": model.lag,
        "dims_y": list(model.dims_y),
        "dims_x": list(model.dims_x),
        "response": [_stack_payload(st) for st in model.response_spec.stacks],
        "predictor": [_stack_payload(st) for st in model.predictor_spec.stacks],
        "theta": model.core.theta.tolist(),
        "noise": {
            "kind": model.noise.kind,
            "rho": model.noise.rho,
            "scale": model.noise.scale,
            "factor": None if model.noise.factor is None else model.noise.factor.tolist(),
        },
    }
    _atomic_write_text(path, json.dumps(payload))


def load_model(path: str) -> HtarModel:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a model file")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(
            f"unsupported model file version {payload.get('version')!r}"
        )

    def build(entries, dims, side):
        stacks = [
            LoadingStack(
                ActionOrder(e["order"]),
                dims,
                [np.asarray(g) for g in e["components"]],
            )
            for e in entries
        ]
        return LoadingSpec(stacks, side=side)

    dims_y = tuple(payload["dims_y"])
    dims_x = tuple(payload["dims_x"])
    noise_info = payload.get("noise") or {}
    factor = noise_info.get("factor")
    noise = NoiseSpec(
        noise_info.get("kind", "iid_gaussian"),
        factor=None if factor is None else np.asarray(factor),
        rho=noise_info.get("rho", 0.5),
        scale=noise_info.get("scale", 1.0),
    )
    return HtarModel(
        payload["lag"],
        build(payload["response"], dims_y, "response"),
        build(payload["predictor"], dims_x, "predictor"),
        CoreMatrix(np.asarray(payload["theta"]), payload["lag"]),
        noise,
    )


@dataclass
class TransformRecord:
    """Everything needed to map forecasts back to the original levels."""

    difference: bool
    center: bool
    means: np.ndarray | None
    first_level: np.ndarray | None

    def restore_step(self, last_level: np.ndarray, value: np.ndarray) -> np.ndarray:
        """Undo the transform for one forecast given the previous level."""
        out = value.copy()
        if self.center:
            out = out + self.means
        if self.difference:
            out = last_level + out
        return out


def preprocess(
    series: TensorSeries, difference: bool = True, center: bool = True
) -> tuple[TensorSeries, TransformRecord]:
    """First-order difference and/or per-entry centering."""
    values = series.values
    first_level = None
    if difference:
        if len(series) < 2:
            raise ValueError("differencing needs at least 2 observations")
        first_level = values[0].copy()
        values = np.diff(values, axis=0)
    means = None
    if center:
        means = values.mean(axis=0)
        values = values - means
    record = TransformRecord(difference, center, means, first_level)
    return TensorSeries(series.dims, values), record


def invert(record: TransformRecord, series: TensorSeries) -> TensorSeries:
    """Exact inverse of :func:`preprocess` on a whole series."""
    values = series.values
    if record.center:
        values = values + record.means
    if record.difference:
        levels = np.vstack([record.first_level, values])
        values = np.cumsum(levels, axis=0)
    return TensorSeries(series.dims, values)
