"""Sequential loading matrices built from per-level component stacks.

One loading block compresses a tensor level by level along an action order:
component m consumes the previous level's features crossed with the current
mode and emits the next feature set.  A block therefore factors as

    block^T = G_M^T (I x G_{M-1}^T) ... (I x G_1^T) T(order),

and a full loading matrix concatenates one block per action order.  The
functions here assemble, evaluate, compress, merge, and re-express such
stacks; compression and re-expression materialize the block (P x r), so they
are meant for model-sized P, not for per-sample hot paths.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from htar.tensor import ActionOrder, DenseTensor, permute_vec_batch, vec

__all__ = [
    "RankProfile",
    "LoadingStack",
    "LoadingSpec",
    "assemble_block",
    "assemble_loading",
    "extract_features",
    "extract_features_batch",
    "compress_stack",
    "merge_same_order",
    "reexpress",
    "param_count_block",
    "random_stack",
    "embed_stack",
]


class RankProfile:
    """Interim feature counts (r_0=1, r_1, ..., r_M) of one stack."""

    __slots__ = ("ranks",)

    def __init__(self, ranks: Sequence[int]):
        ranks = tuple(int(r) for r in ranks)
        if not ranks or ranks[0] != 1:
            raise ValueError(f"rank profile must start at r_0 = 1, got {ranks}")
        if any(r < 1 for r in ranks):
            raise ValueError(f"ranks must be positive, got {ranks}")
        self.ranks = ranks

    @classmethod
    def uniform(cls, depth: int, rank: int) -> "RankProfile":
        return cls((1,) + (rank,) * depth)

    @classmethod
    def uniform_capped(cls, pdims: Sequence[int], rank: int) -> "RankProfile":
        """Uniform rank capped at each step's orthonormality bound r_{m-1} p_m."""
        ranks = [1]
        for p in pdims:
            ranks.append(min(rank, ranks[-1] * p))
        return cls(ranks)

    @property
    def depth(self) -> int:
        return len(self.ranks) - 1

    @property
    def last(self) -> int:
        return self.ranks[-1]

    def __getitem__(self, m: int) -> int:
        return self.ranks[m]

    def __eq__(self, other) -> bool:
        return isinstance(other, RankProfile) and self.ranks == other.ranks

    def __repr__(self) -> str:
        return f"RankProfile{self.ranks}"


class LoadingStack:
    """Component matrices of one action order.

    components[m-1] is G_m with shape (r_{m-1} * p_{order[m]}, r_m), rows
    indexed with the previous-level feature fastest.  Components are kept
    orthonormal by construction everywhere except mid-sweep inside ALS.
    """

    __slots__ = ("order", "dims", "profile", "components")

    def __init__(
        self,
        order: ActionOrder,
        dims: Sequence[int],
        components: Sequence[np.ndarray],
    ):
        dims = tuple(int(p) for p in dims)
        if len(order) != len(dims):
            raise ValueError(
                f"order {order.perm} does not match {len(dims)} modes"
            )
        if len(components) != len(dims):
            raise ValueError(
                f"expected {len(dims)} components, got {len(components)}"
            )
        comps = []
        ranks = [1]
        pdims = order.permuted_dims(dims)
        for m, g in enumerate(components, start=1):
            g = np.asarray(g, dtype=np.float64)
            if g.ndim != 2:
                raise ValueError(f"component {m} must be a matrix")
            rows_expected = ranks[-1] * pdims[m - 1]
            if g.shape[0] != rows_expected:
                raise ValueError(
                    f"component {m} has {g.shape[0]} rows; the chain requires "
                    f"r_{m-1} * p = {ranks[-1]} * {pdims[m - 1]} = {rows_expected}"
                )
            if g.shape[1] > g.shape[0]:
                raise ValueError(
                    f"component {m} has rank {g.shape[1]} > {g.shape[0]} rows; "
                    "columns cannot be orthonormal"
                )
            ranks.append(g.shape[1])
            comps.append(g)
        self.order = order
        self.dims = dims
        self.profile = RankProfile(ranks)
        self.components = comps

    @property
    def depth(self) -> int:
        return len(self.dims)

    @property
    def out_rank(self) -> int:
        return self.profile.last

    def permuted_dims(self) -> tuple[int, ...]:
        return self.order.permuted_dims(self.dims)

    def cores(self) -> list[np.ndarray]:
        """Components reshaped to (r_{m-1}, p_{order[m]}, r_m) cores."""
        pdims = self.permuted_dims()
        return [
            g.reshape((self.profile[m - 1], pdims[m - 1], self.profile[m]), order="F")
            for m, g in enumerate(self.components, start=1)
        ]

    def is_orthonormal(self, tol: float = 1e-10) -> bool:
        return all(
            np.max(np.abs(g.T @ g - np.eye(g.shape[1]))) <= tol
            for g in self.components
        )

    def with_components(self, components: Sequence[np.ndarray]) -> "LoadingStack":
        return LoadingStack(self.order, self.dims, components)

    def __repr__(self) -> str:
        return (
            f"LoadingStack(order={self.order.perm}, dims={self.dims}, "
            f"profile={self.profile.ranks})"
        )


class LoadingSpec:
    """An ordered set of stacks forming one loading matrix (one side)."""

    __slots__ = ("stacks", "side")

    def __init__(self, stacks: Sequence[LoadingStack], side: str = "predictor"):
        if not stacks:
            raise ValueError("a loading spec needs at least one stack")
        if side not in ("predictor", "response"):
            raise ValueError(f"side must be 'predictor' or 'response', got {side!r}")
        dims = stacks[0].dims
        for st in stacks:
            if st.dims != dims:
                raise ValueError(f"stack dims {st.dims} != {dims}")
        self.stacks = list(stacks)
        self.side = side

    @property
    def dims(self) -> tuple[int, ...]:
        return self.stacks[0].dims

    @property
    def total_rank(self) -> int:
        return sum(st.out_rank for st in self.stacks)

    def rank_blocks(self) -> list[slice]:
        """Feature-index slice of each stack inside the concatenated vector."""
        out, start = [], 0
        for st in self.stacks:
            out.append(slice(start, start + st.out_rank))
            start += st.out_rank
        return out

    def __len__(self) -> int:
        return len(self.stacks)

    def __repr__(self) -> str:
        return f"LoadingSpec(side={self.side!r}, stacks={self.stacks!r})"


def _chain_matrix(stack: LoadingStack) -> np.ndarray:
    """Block in permuted coordinates: (prod p) x r_M, rows mode-1-fastest
    over (p_{order[1]}, ..., p_{order[M]})."""
    cores = stack.cores()
    w = cores[0].reshape(cores[0].shape[1] * cores[0].shape[0], -1, order="F")
    for core in cores[1:]:
        w = np.tensordot(w, core, axes=([1], [0]))
        w = w.reshape((w.shape[0] * w.shape[1], -1), order="F")
    return w


def assemble_block(stack: LoadingStack) -> np.ndarray:
    """Materialize one block of the loading matrix, shape P x r_M.

    Rows are indexed by the original (unpermuted) vectorization.  Meant for
    tests, Gram computations, and compression; per-sample evaluation should
    go through :func:`extract_features` instead.
    """
    w = _chain_matrix(stack)
    pdims = stack.permuted_dims()
    inv = stack.order.inverse()
    tens = w.reshape(pdims + (stack.out_rank,), order="F")
    axes = [inv[m] - 1 for m in range(1, stack.depth + 1)] + [stack.depth]
    back = np.transpose(tens, axes)
    return back.reshape((math.prod(stack.dims), stack.out_rank), order="F")


def assemble_loading(spec: LoadingSpec) -> np.ndarray:
    """Column-concatenation of the blocks of all stacks, shape P x r."""
    return np.concatenate([assemble_block(st) for st in spec.stacks], axis=1)


def extract_features(x: DenseTensor, stack: LoadingStack) -> np.ndarray:
    """Sequentially contract ``x`` through the stack; returns r_M features.

    Equals assemble_block(stack).T @ vec(x) without forming the block.
    """
    if x.shape != stack.dims:
        raise ValueError(f"tensor shape {x.shape} != stack dims {stack.dims}")
    return extract_features_batch(vec(x)[None, :], stack)[0]


def extract_features_batch(values: np.ndarray, stack: LoadingStack) -> np.ndarray:
    """Features for every row of a (n, P) matrix of vecs; returns (n, r_M)."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    n = values.shape[0]
    state = permute_vec_batch(values, stack.dims, stack.order).T  # (P, n)
    pdims = stack.permuted_dims()
    rest = math.prod(pdims)
    r_prev = 1
    for m, g in enumerate(stack.components, start=1):
        p = pdims[m - 1]
        rest //= p
        state = state.reshape((r_prev * p, rest * n), order="F")
        state = g.T @ state
        r_prev = g.shape[1]
    return state.reshape((r_prev, n), order="F").T


def extract_spec_features_batch(values: np.ndarray, spec: LoadingSpec) -> np.ndarray:
    """Concatenated features of all stacks for each row; returns (n, r)."""
    return np.concatenate(
        [extract_features_batch(values, st) for st in spec.stacks], axis=1
    )


def param_count_block(stack: LoadingStack) -> int:
    """Number of free entries: sum over m of r_{m-1} * r_m * p_{order[m]}."""
    pdims = stack.permuted_dims()
    prof = stack.profile
    return sum(
        prof[m - 1] * prof[m] * pdims[m - 1] for m in range(1, stack.depth + 1)
    )


def _svd_rank(s: np.ndarray, tol: float, rows: int, cols: int) -> int:
    if s.size == 0 or s[0] <= 0.0:
        return 1
    floor = max(rows, cols) * np.finfo(np.float64).eps
    thresh = max(tol, floor) * s[0]
    return max(1, int(np.sum(s > thresh)))


def _sweep(block_perm: np.ndarray, pdims: Sequence[int], tol: float) -> list[np.ndarray]:
    """Truncated sequential SVD of a (prod p) x r block in permuted coords.

    Returns components under the same mode sequence.  Interim ranks are the
    numerical ranks of the corresponding unfoldings; the trailing factor of
    the last step is kept inside G_M whenever the last unfolding has full
    numerical rank, so orthonormal inputs are reproduced exactly.
    """
    r_out = block_perm.shape[1]
    comps = []
    carry = block_perm
    r_prev = 1
    depth = len(pdims)
    for m, p in enumerate(pdims, start=1):
        carry = carry.reshape((r_prev * p, -1), order="F")
        if m == depth:
            u, s, vt = np.linalg.svd(carry, full_matrices=False)
            k = _svd_rank(s, tol, *carry.shape)
            if k >= r_out:
                comps.append(carry)
            else:
                comps.append(u[:, :k])
            break
        u, s, vt = np.linalg.svd(carry, full_matrices=False)
        k = _svd_rank(s, tol, *carry.shape)
        comps.append(u[:, :k])
        carry = s[:k, None] * vt[:k]
        r_prev = k
    return comps


def compress_stack(stack: LoadingStack, tol: float = 1e-8) -> LoadingStack:
    """Minimal-rank stack spanning the same features, up to ``tol``.

    Singular values at or below tol * (largest singular value) of each
    unfolding are discarded.  The output has orthonormal components except
    when the input block itself was reproduced exactly, in which case its
    (possibly non-orthonormal) feature coordinates are preserved too.  If
    the final unfolding is rank deficient the feature count shrinks and the
    dropped mixing matrix is the caller's to absorb (it multiplies the core
    in every use here).
    """
    comps = _sweep(_chain_matrix(stack), stack.permuted_dims(), tol)
    return LoadingStack(stack.order, stack.dims, comps)


def merge_same_order(
    a: LoadingStack, b: LoadingStack, tol: float = 1e-8
) -> LoadingStack:
    """Single stack whose block spans col([block_a, block_b]) within ``tol``.

    Built by block-embedding the two chains (which concatenates the feature
    columns exactly) and then compressing; the full-row-rank map from the
    merged features back to the concatenation is absorbed by the core matrix
    downstream, so only the column space is promised.
    """
    if a.order != b.order:
        raise ValueError(f"orders differ: {a.order.perm} vs {b.order.perm}")
    if a.dims != b.dims:
        raise ValueError(f"dims differ: {a.dims} vs {b.dims}")
    concat = np.hstack([_chain_matrix(a), _chain_matrix(b)])
    comps = _sweep(concat, a.permuted_dims(), tol)
    return LoadingStack(a.order, a.dims, comps)


def reexpress(
    stack: LoadingStack, target: ActionOrder, tol: float = 1e-8
) -> LoadingStack:
    """Equivalent stack under a different action order.

    The block is re-read as a tensor over the target mode sequence and
    re-factored by the truncated sequential SVD, so the feature column space
    (and, for orthonormal inputs of full feature rank, the block itself) is
    preserved while interim ranks become the numerical ranks under the
    target order.
    """
    if len(target) != stack.depth:
        raise ValueError(
            f"target order {target.perm} does not match {stack.depth} modes"
        )
    block = assemble_block(stack)
    tens = block.reshape(stack.dims + (stack.out_rank,), order="F")
    axes = [target[m] - 1 for m in range(1, stack.depth + 1)] + [stack.depth]
    tpdims = target.permuted_dims(stack.dims)
    perm_block = np.transpose(tens, axes).reshape(
        (math.prod(stack.dims), stack.out_rank), order="F"
    )
    comps = _sweep(perm_block, tpdims, tol)
    return LoadingStack(target, stack.dims, comps)


def random_stack(
    dims: Sequence[int],
    order: ActionOrder,
    profile: RankProfile,
    rng: np.random.Generator,
) -> LoadingStack:
    """Stack with orthonormalized Gaussian components (thin QR, signs fixed)."""
    pdims = order.permuted_dims(dims)
    comps = []
    for m in range(1, len(dims) + 1):
        rows = profile[m - 1] * pdims[m - 1]
        cols = profile[m]
        if cols > rows:
            raise ValueError(
                f"rank r_{m} = {cols} exceeds r_{m-1} * p = {rows} at step {m}"
            )
        q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        comps.append(q)
    return LoadingStack(order, dims, comps)


def embed_stack(
    stack: LoadingStack, profile: RankProfile, rng: np.random.Generator
) -> LoadingStack:
    """Grow a stack to a larger profile without changing its old features.

    Old columns are zero-padded on the new rows (the chain output on the old
    coordinates is untouched); new columns are random orthonormal directions
    orthogonal to the old ones.
    """
    if profile.depth != stack.depth:
        raise ValueError("profile depth does not match the stack")
    pdims = stack.permuted_dims()
    comps = []
    for m in range(1, stack.depth + 1):
        if profile[m] < stack.profile[m]:
            raise ValueError(f"profile shrinks rank at step {m}")
        old_core = stack.components[m - 1].reshape(
            (stack.profile[m - 1], pdims[m - 1], stack.profile[m]), order="F"
        )
        core = np.zeros((profile[m - 1], pdims[m - 1], profile[m]))
        core[: stack.profile[m - 1], :, : stack.profile[m]] = old_core
        mat = core.reshape((profile[m - 1] * pdims[m - 1], profile[m]), order="F")
        extra = profile[m] - stack.profile[m]
        if extra > 0:
            cand = rng.standard_normal((mat.shape[0], extra))
            old_cols = mat[:, : stack.profile[m]]
            cand -= old_cols @ (old_cols.T @ cand)
            q, _ = np.linalg.qr(cand)
            mat[:, stack.profile[m]:] = q[:, :extra]
        comps.append(mat)
    return LoadingStack(stack.order, stack.dims, comps)
