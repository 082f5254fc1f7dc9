"""Dense tensors and the index algebra underneath the factor models.

All vectorizations are mode-1-fastest (column-major over the multi-index),
and every matricization and permutation operator in this package is derived
from that single convention.  Mode numbers in the public API are 1-based;
array axes are 0-based internally.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DenseTensor",
    "ActionOrder",
    "TensorSeries",
    "vec",
    "seq_matricize",
    "mode_matricize",
    "kron",
    "permute_modes",
    "permutation_matrix",
]

# permutation_matrix materializes a P x P matrix; refuse beyond this size.
_PERMUTATION_MATRIX_CAP = 20_000


class DenseTensor:
    """Dense multiway array stored as a flat mode-1-fastest vector.

    Parameters
    ----------
    data : array-like
        Either a flat vector of length prod(shape) in mode-1-fastest order,
        or an ndarray whose shape equals ``shape`` (copied in F-order).
    shape : sequence of int
        Positive mode dimensions (p_1, ..., p_d).
    """

    __slots__ = ("shape", "data")

    def __init__(self, data, shape: Sequence[int]):
        shape = tuple(int(p) for p in shape)
        if any(p < 1 for p in shape):
            raise ValueError(f"all mode dimensions must be >= 1, got {shape}")
        arr = np.asarray(data, dtype=np.float64)
        size = math.prod(shape)
        if arr.ndim > 1:
            if arr.shape != shape:
                raise ValueError(
                    f"array of shape {arr.shape} does not match tensor shape {shape}"
                )
            flat = arr.ravel(order="F")
        else:
            if arr.size != size:
                raise ValueError(
                    f"data length {arr.size} != prod(shape) = {size} for shape {shape}"
                )
            flat = arr.copy()
        flat.flags.writeable = False
        self.shape = shape
        self.data = flat

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "DenseTensor":
        arr = np.asarray(arr, dtype=np.float64)
        shape = arr.shape if arr.ndim > 0 else (1,)
        return cls(arr.reshape(shape), shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def to_array(self) -> np.ndarray:
        """Return the tensor as an ndarray (read-only view when possible)."""
        return self.data.reshape(self.shape, order="F")

    def __getitem__(self, idx):
        return self.to_array()[idx]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DenseTensor)
            and self.shape == other.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"


class ActionOrder:
    """A permutation of the modes {1, ..., M} fixing an extraction sequence."""

    __slots__ = ("perm",)

    def __init__(self, perm: Iterable[int]):
        perm = tuple(int(v) for v in perm)
        if sorted(perm) != list(range(1, len(perm) + 1)):
            raise ValueError(f"{perm} is not a permutation of 1..{len(perm)}")
        self.perm = perm

    @classmethod
    def identity(cls, m: int) -> "ActionOrder":
        return cls(range(1, m + 1))

    def __len__(self) -> int:
        return len(self.perm)

    def __getitem__(self, m: int) -> int:
        """1-based lookup: order[m] is the original mode acted on at step m."""
        return self.perm[m - 1]

    def inverse(self) -> "ActionOrder":
        inv = [0] * len(self.perm)
        for pos, mode in enumerate(self.perm):
            inv[mode - 1] = pos + 1
        return ActionOrder(inv)

    def is_identity(self) -> bool:
        return self.perm == tuple(range(1, len(self.perm) + 1))

    def permuted_dims(self, dims: Sequence[int]) -> tuple[int, ...]:
        """Dims seen at each extraction step: (p_{order[1]}, ..., p_{order[M]})."""
        if len(dims) != len(self.perm):
            raise ValueError(
                f"order of length {len(self.perm)} does not match {len(dims)} modes"
            )
        return tuple(dims[m - 1] for m in self.perm)

    def __eq__(self, other) -> bool:
        return isinstance(other, ActionOrder) and self.perm == other.perm

    def __hash__(self) -> int:
        return hash(self.perm)

    def __repr__(self) -> str:
        return f"ActionOrder({self.perm})"


class TensorSeries:
    """A time series of equal-shape tensors, stored as a (T, Q) matrix of vecs."""

    __slots__ = ("dims", "values")

    def __init__(self, dims: Sequence[int], values: np.ndarray):
        self.dims = tuple(int(p) for p in dims)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != math.prod(self.dims):
            raise ValueError(
                f"values must be (T, {math.prod(self.dims)}) for dims {self.dims}, "
                f"got {values.shape}"
            )
        self.values = values

    @classmethod
    def from_tensors(cls, tensors: Sequence[DenseTensor]) -> "TensorSeries":
        if not tensors:
            raise ValueError("empty series")
        dims = tensors[0].shape
        for x in tensors:
            if x.shape != dims:
                raise ValueError(f"inconsistent shapes {x.shape} vs {dims}")
        return cls(dims, np.stack([x.data for x in tensors]))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, t: int) -> DenseTensor:
        return DenseTensor(self.values[t], self.dims)

    def __iter__(self):
        for t in range(len(self)):
            yield self[t]

    def __repr__(self) -> str:
        return f"TensorSeries(dims={self.dims}, T={len(self)})"


def vec(x: DenseTensor) -> np.ndarray:
    """Mode-1-fastest linearization of ``x``; length prod(shape)."""
    return x.data


def seq_matricize(x: DenseTensor, s: int) -> np.ndarray:
    """Sequential matricization [X]_s.

    Rows are indexed by modes 1..s (mode-1-fastest), columns by modes
    s+1..d (mode-(s+1)-fastest), consistent with :func:`vec`.
    """
    d = x.ndim
    if not 1 <= s <= d:
        raise ValueError(f"mode count s={s} out of range 1..{d}")
    rows = math.prod(x.shape[:s])
    return x.data.reshape((rows, -1), order="F")


def mode_matricize(x: DenseTensor, n: int) -> np.ndarray:
    """Mode-n matricization X_(n): p_n rows, remaining modes ascending in columns."""
    d = x.ndim
    if not 1 <= n <= d:
        raise ValueError(f"mode n={n} out of range 1..{d}")
    arr = x.to_array()
    moved = np.moveaxis(arr, n - 1, 0)
    return moved.reshape((x.shape[n - 1], -1), order="F")


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product of two matrices."""
    return np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def permute_modes(x: DenseTensor, order: ActionOrder) -> DenseTensor:
    """Rearrange modes so output mode m carries input mode order[m].

    The identity order returns ``x`` unchanged; for matrices the order (2, 1)
    is the transpose.
    """
    if len(order) != x.ndim:
        raise ValueError(
            f"order of length {len(order)} does not match tensor with {x.ndim} modes"
        )
    if order.is_identity():
        return x
    axes = [m - 1 for m in order.perm]
    out = np.transpose(x.to_array(), axes)
    return DenseTensor(np.asfortranarray(out), out.shape)


def permute_vec_batch(values: np.ndarray, dims: Sequence[int], order: ActionOrder) -> np.ndarray:
    """Apply :func:`permute_modes` to every row of a (n, P) matrix of vecs."""
    values = np.asarray(values, dtype=np.float64)
    if order.is_identity():
        return values
    n = values.shape[0]
    axes = [m - 1 for m in order.perm]
    tens = values.T.reshape(tuple(dims) + (n,), order="F")
    out = np.transpose(tens, axes + [len(dims)])
    return out.reshape((-1, n), order="F").T


def permutation_matrix(order: ActionOrder, dims: Sequence[int]) -> np.ndarray:
    """P x P 0/1 matrix T with vec(permute_modes(X, order)) = T @ vec(X).

    Intended for tests and small P; production paths use
    :func:`permute_modes` directly.
    """
    if len(order) != len(dims):
        raise ValueError(
            f"order of length {len(order)} does not match {len(dims)} dims"
        )
    p_total = math.prod(dims)
    if p_total > _PERMUTATION_MATRIX_CAP:
        raise ValueError(
            f"P = {p_total} exceeds the materialization cap "
            f"{_PERMUTATION_MATRIX_CAP}; use permute_modes instead"
        )
    src = permute_modes(DenseTensor(np.arange(p_total, dtype=np.float64), dims), order)
    idx = src.data.astype(np.intp)
    mat = np.zeros((p_total, p_total))
    mat[np.arange(p_total), idx] = 1.0
    return mat
