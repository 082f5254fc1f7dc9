"""Alternating least squares for the lagged supervised factor model.

Each sweep solves one exact least-squares subproblem per component matrix
(predictor stacks first, then response stacks), re-orthogonalizes every
stack by a QR sweep whose trailing factor is absorbed into the core, and
finishes with the closed-form core update.  All subproblems are assembled
from batched feature states, so nothing of size P x P or (T Q) x params is
ever formed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from htar.loadings import (
    LoadingSpec,
    LoadingStack,
    RankProfile,
    param_count_block,
    random_stack,
)
from htar.model import CoreMatrix, HtarModel, NoiseSpec
from htar.tensor import ActionOrder, TensorSeries, permute_vec_batch

__all__ = [
    "FitConfig",
    "FitReport",
    "loss",
    "predict_series",
    "block_ls_update",
    "ssvd_renormalize",
    "update_core",
    "fit_als",
    "model_param_count",
]

LOSS_FLOOR = 1e-300


@dataclass
class FitConfig:
    """Knobs of one ALS run.

    ``accelerate`` turns on a safeguarded extrapolation between sweeps
    (candidate steps along the last parameter change, kept only when the
    loss improves), which shortens the geometric convergence tail on
    ill-conditioned instances without breaking loss monotonicity.
    """

    max_sweeps: int = 200
    rel_loss_tol: float = 1e-7
    restarts: int = 3
    init: object = "random"  # "random" | "spectral" | HtarModel warm start
    ridge_eps: float = 1e-10
    seed: int = 0
    accelerate: bool = False
    probe_sweeps: int = 0  # >0: run restarts this far, converge only the best
    probe_fraction: float = 1.0  # probe on a leading fraction of the samples

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.rel_loss_tol <= 0:
            raise ValueError("rel_loss_tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.ridge_eps <= 0:
            raise ValueError("ridge_eps must be positive")
        if self.probe_sweeps < 0:
            raise ValueError("probe_sweeps must be >= 0")
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ValueError("probe_fraction must be in (0, 1]")


@dataclass
class FitReport:
    """Loss trajectory and fit summary of the best restart."""

    loss_trajectory: list = field(default_factory=list)
    sweeps_used: int = 0
    converged: bool = False
    final_loss: float = math.inf
    d: int = 0
    bic: float = math.inf


def model_param_count(model: HtarModel) -> int:
    """d(R): loading parameters of both sides plus L * s * r core entries."""
    d = sum(param_count_block(st) for st in model.response_spec.stacks)
    d += sum(param_count_block(st) for st in model.predictor_spec.stacks)
    d += model.lag * model.response_spec.total_rank * model.predictor_spec.total_rank
    return d


# ---------------------------------------------------------------------------
# mutable fit state


class _State:
    """Cores and core matrix of a model being fit; mutated in place."""

    __slots__ = ("dims_y", "dims_x", "lag", "y_orders", "x_orders", "y_cores", "x_cores", "theta")

    def __init__(self, model: HtarModel):
        self.dims_y = model.dims_y
        self.dims_x = model.dims_x
        self.lag = model.lag
        self.y_orders = [st.order for st in model.response_spec.stacks]
        self.x_orders = [st.order for st in model.predictor_spec.stacks]
        self.y_cores = [[c.copy() for c in st.cores()] for st in model.response_spec.stacks]
        self.x_cores = [[c.copy() for c in st.cores()] for st in model.predictor_spec.stacks]
        self.theta = model.core.theta.copy()

    def x_out_ranks(self) -> list[int]:
        return [cores[-1].shape[2] for cores in self.x_cores]

    def y_out_ranks(self) -> list[int]:
        return [cores[-1].shape[2] for cores in self.y_cores]

    @property
    def r(self) -> int:
        return sum(self.x_out_ranks())

    @property
    def s(self) -> int:
        return sum(self.y_out_ranks())

    def x_block(self, k: int) -> slice:
        start = sum(self.x_out_ranks()[:k])
        return slice(start, start + self.x_out_ranks()[k])

    def y_block(self, k: int) -> slice:
        start = sum(self.y_out_ranks()[:k])
        return slice(start, start + self.y_out_ranks()[k])

    def theta_block(self, l: int) -> np.ndarray:
        return self.theta[:, (l - 1) * self.r : l * self.r]

    def x_stack(self, k: int) -> LoadingStack:
        return _stack_from_cores(self.x_orders[k], self.dims_x, self.x_cores[k])

    def y_stack(self, k: int) -> LoadingStack:
        return _stack_from_cores(self.y_orders[k], self.dims_y, self.y_cores[k])

    def to_model(self, noise: NoiseSpec | None = None) -> HtarModel:
        response = LoadingSpec([self.y_stack(k) for k in range(len(self.y_cores))], side="response")
        predictor = LoadingSpec([self.x_stack(k) for k in range(len(self.x_cores))], side="predictor")
        return HtarModel(self.lag, response, predictor, CoreMatrix(self.theta.copy(), self.lag), noise)


def _stack_from_cores(order: ActionOrder, dims, cores: Sequence[np.ndarray]) -> LoadingStack:
    comps = [c.reshape((c.shape[0] * c.shape[1], c.shape[2]), order="F") for c in cores]
    return LoadingStack(order, dims, comps)


def _pack_state(state: _State) -> np.ndarray:
    parts = [c.ravel() for cores in state.x_cores for c in cores]
    parts += [c.ravel() for cores in state.y_cores for c in cores]
    parts.append(state.theta.ravel())
    return np.concatenate(parts)


def _unpack_state(state: _State, vec: np.ndarray) -> None:
    pos = 0
    for cores in (*state.x_cores, *state.y_cores):
        for i, core in enumerate(cores):
            n = core.size
            cores[i] = vec[pos : pos + n].reshape(core.shape)
            pos += n
    state.theta = vec[pos:].reshape(state.theta.shape)


# ---------------------------------------------------------------------------
# batched chain evaluation


def _advance(state: np.ndarray, core: np.ndarray, rest: int, n: int) -> np.ndarray:
    """Contract one core into a running chain state (r_prev, p * rest * n)."""
    r_prev, p, r_next = core.shape
    g = core.reshape((r_prev * p, r_next), order="F")
    return g.T @ state.reshape((r_prev * p, rest * n), order="F")


def _forward_full(xrows: np.ndarray, dims, order: ActionOrder, cores) -> np.ndarray:
    """Features of every row; returns (n, r_M)."""
    state = permute_vec_batch(xrows, dims, order).T
    n = xrows.shape[0]
    rest = math.prod(dims)
    for core in cores:
        rest //= core.shape[1]
        state = _advance(state, core, rest, n)
    return state.reshape((-1, n), order="F").T


def _reconstruct_rows(u: np.ndarray, dims, order: ActionOrder, cores) -> np.ndarray:
    """Rows of u (n, r_M) pushed back through the chain; returns (n, P)."""
    n = u.shape[0]
    state = u.T
    for core in reversed(cores):
        r_prev, p, r_next = core.shape
        g = core.reshape((r_prev * p, r_next), order="F")
        state = g @ state.reshape((r_next, -1), order="F")
        state = state.reshape((r_prev, -1), order="F")
    pdims = order.permuted_dims(dims)
    tens = state.reshape(tuple(pdims) + (n,), order="F")
    inv = order.inverse()
    axes = [inv[m] - 1 for m in range(1, len(dims) + 1)] + [len(dims)]
    return np.transpose(tens, axes).reshape((-1, n), order="F").T


def _chain_gram(cores_a, cores_b) -> np.ndarray:
    """Gram block_a^T block_b of two chains under the same order, (r_a x r_b)."""
    env = None
    for ca, cb in zip(cores_a, cores_b):
        if env is None:
            env = np.einsum("aib,aic->bc", ca, cb)
        else:
            env = np.einsum("ab,aic,bid->cd", env, ca, cb, optimize=True)
    return env


# ---------------------------------------------------------------------------
# data workspace


class _Workspace:
    """Aligned response rows and lagged predictor rows, plus cached moments."""

    def __init__(
        self,
        data: TensorSeries,
        lag: int,
        predictors: TensorSeries | None = None,
    ):
        if predictors is None:
            if len(data) <= lag:
                raise ValueError(
                    f"series of length {len(data)} cannot supply lag {lag} history"
                )
            self.dims_y = data.dims
            self.dims_x = data.dims
            self.Y = data.values[lag:]
            self.xrows = data.values
            # lag-l predictor of sample t is xrows[lag - l + t]
            self.offsets = [lag - l for l in range(1, lag + 1)]
        elif len(predictors) == len(data) + lag:
            # lagged exogenous mode: responses are already aligned rows and
            # sample t draws its lag-l predictor from predictors[lag - l + t]
            self.dims_y = data.dims
            self.dims_x = predictors.dims
            self.Y = data.values
            self.xrows = predictors.values
            self.offsets = [lag - l for l in range(1, lag + 1)]
        else:
            if lag != 1:
                raise ValueError(
                    "predictors must be sample-aligned (lag 1) or carry lag "
                    "extra leading rows"
                )
            if len(predictors) != len(data):
                raise ValueError(
                    f"{len(data)} responses vs {len(predictors)} predictors"
                )
            self.dims_y = data.dims
            self.dims_x = predictors.dims
            self.Y = data.values
            self.xrows = predictors.values
            self.offsets = [0]
        self.T = self.Y.shape[0]
        self.lag = lag
        self.sum_yy = float(np.sum(self.Y * self.Y))

    def lag_slice(self, arr: np.ndarray, l: int) -> np.ndarray:
        """Rows of ``arr`` (aligned with xrows) for lag l, one per sample."""
        off = self.offsets[l - 1]
        return arr[off : off + self.T]

    def stack_features_x(self, state: _State, k: int) -> np.ndarray:
        """(n_all, r_k) features of every predictor row under stack k."""
        return _forward_full(self.xrows, self.dims_x, state.x_orders[k], state.x_cores[k])

    def all_features_x(self, state: _State) -> np.ndarray:
        return np.hstack([self.stack_features_x(state, k) for k in range(len(state.x_cores))])

    def lagged_features(self, allf: np.ndarray) -> list[np.ndarray]:
        """Per-lag views of full-series features, aligned with the samples."""
        return [self.lag_slice(allf, l) for l in range(1, self.lag + 1)]

    def response_features(self, state: _State) -> np.ndarray:
        """(T, s) features of the responses under the current response stacks."""
        return np.hstack(
            [
                _forward_full(self.Y, self.dims_y, state.y_orders[k], state.y_cores[k])
                for k in range(len(state.y_cores))
            ]
        )

    def response_gram(self, state: _State) -> np.ndarray:
        s = state.s
        gram = np.empty((s, s))
        for i in range(len(state.y_cores)):
            bi = state.y_block(i)
            for j in range(len(state.y_cores)):
                bj = state.y_block(j)
                if j < i:
                    gram[bi, bj] = gram[bj, bi].T
                    continue
                if state.y_orders[i] == state.y_orders[j]:
                    gram[bi, bj] = _chain_gram(state.y_cores[i], state.y_cores[j])
                else:
                    lam_j = _reconstruct_rows(
                        np.eye(state.y_cores[j][-1].shape[2]),
                        self.dims_y,
                        state.y_orders[j],
                        state.y_cores[j],
                    )
                    gram[bi, bj] = _forward_full(
                        lam_j, self.dims_y, state.y_orders[i], state.y_cores[i]
                    ).T
        return gram

    def loss_value(self, state: _State, lag_feats=None, yf=None, gram_y=None) -> float:
        if lag_feats is None:
            lag_feats = self.lagged_features(self.all_features_x(state))
        if yf is None:
            yf = self.response_features(state)
        if gram_y is None:
            gram_y = self.response_gram(state)
        u = np.zeros((self.T, state.s))
        for l in range(1, state.lag + 1):
            u += lag_feats[l - 1] @ state.theta_block(l).T
        total = self.sum_yy - 2.0 * float(np.sum(u * yf)) + float(np.sum(u * (u @ gram_y.T)))
        return max(total / self.T, 0.0)


# ---------------------------------------------------------------------------
# block updates


def _psd_sqrt_and_isqrt(gram: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(gram)
    w = np.clip(w, 1e-14, None)
    root = v @ (np.sqrt(w)[:, None] * v.T)
    iroot = v @ ((1.0 / np.sqrt(w))[:, None] * v.T)
    return root, iroot


def _solve_predictor_block(
    ws: _Workspace,
    state: _State,
    k: int,
    m: int,
    ridge: float,
    front: np.ndarray,
    yf_res: np.ndarray,
    gram_y: np.ndarray,
) -> None:
    """Exact LS update of component m of predictor stack k, given the chain
    state ``front`` (rows_g, rest, n_all) before the component and the
    residualized response features ``yf_res`` (T, s)."""
    cores = state.x_cores[k]
    pdims = state.x_orders[k].permuted_dims(ws.dims_x)
    depth = len(pdims)
    blk = state.x_block(k)
    lag = state.lag
    t_eff = ws.T
    rows_g, rest, _ = front.shape
    r_prev = cores[m - 1].shape[0]
    p_m = pdims[m - 1]
    r_m = cores[m - 1].shape[2]

    theta_blocks = [state.theta_block(l)[:, blk] for l in range(1, lag + 1)]

    if m == depth:
        # separable path: the component is last in the chain, so the normal
        # equations factor into small lag-pair Kronecker terms
        fmats = [ws.lag_slice(front[:, 0, :].T, l) for l in range(1, lag + 1)]
        gram = np.zeros((rows_g * r_m, rows_g * r_m))
        rhs = np.zeros((rows_g, r_m))
        for a in range(lag):
            rhs += fmats[a].T @ (yf_res @ theta_blocks[a])
            for b in range(lag):
                gamma = fmats[a].T @ fmats[b]
                m_ba = theta_blocks[b].T @ gram_y @ theta_blocks[a]
                gram += np.kron(m_ba.T, gamma)
        gram /= t_eff
        rhs = rhs.ravel(order="F") / t_eff
        gram[np.diag_indices_from(gram)] += ridge
        sol = np.linalg.solve(gram, rhs)
        g_new = sol.reshape((rows_g, r_m), order="F")
    else:
        # generic path: weighted design over (sample, response-feature) rows
        root, iroot = _psd_sqrt_and_isqrt(gram_y)
        z = yf_res @ iroot.T
        r_out = cores[depth - 1].shape[2]
        ri = np.eye(r_out).reshape((r_out, 1, r_out), order="F")
        for j in range(depth - 1, m - 1, -1):
            core = cores[j]
            ri = np.einsum("aib,bro->airo", core, ri)
            ri = ri.reshape(
                (core.shape[0], core.shape[1] * ri.shape[2], ri.shape[3]), order="F"
            )
        aft = ri  # (r_m, rest, r_out)
        front_t = np.moveaxis(front, 2, 0)  # (n_all, rows_g, rest)
        dmat = np.zeros((t_eff, state.s, r_m, rows_g))
        for l in range(1, lag + 1):
            ca = np.einsum("sj,arj->sar", root @ theta_blocks[l - 1], aft)
            f_l = ws.lag_slice(front_t, l)
            dmat += np.einsum("sar,tur->tsau", ca, f_l, optimize=True)
        dmat = dmat.reshape((t_eff * state.s, r_m * rows_g))
        # column index (a, u) with u fastest == F-order vec of G
        gram = dmat.T @ dmat / t_eff
        rhs = dmat.T @ z.ravel() / t_eff
        gram[np.diag_indices_from(gram)] += ridge
        sol = np.linalg.solve(gram, rhs)
        g_new = sol.reshape((rows_g, r_m), order="F")

    state.x_cores[k][m - 1] = g_new.reshape((r_prev, p_m, r_m), order="F")


def _solve_response_block(
    ws: _Workspace,
    state: _State,
    k: int,
    n: int,
    ridge: float,
    prefix: np.ndarray,
    w_k: np.ndarray,
) -> None:
    """Exact LS update of component n of response stack k, given the prefix
    state of the residual target (r_prev, q_n, suffix, T) and the stack's
    core-mapped features w_k (T, s_k)."""
    cores = state.y_cores[k]
    qdims = state.y_orders[k].permuted_dims(ws.dims_y)
    depth = len(qdims)
    t_eff = ws.T
    r_prev, q_n, suffix, _ = prefix.shape
    s_n = cores[n - 1].shape[2]

    # suffix chain applied to the stack's feature rows: (s_n, suffix, T)
    rt = w_k.T
    for j in range(depth - 1, n - 1, -1):
        core = cores[j]
        rp, p, rn = core.shape
        g = core.reshape((rp * p, rn), order="F")
        rt = g @ rt.reshape((rn, -1), order="F")
        rt = rt.reshape((rp, -1), order="F")
    rt = rt.reshape((s_n, suffix, t_eff), order="F")

    a_gram = _chain_gram(cores[: n - 1], cores[: n - 1]) if n > 1 else np.ones((1, 1))
    # contract over (suffix, T) as one GEMM on F-contiguous panels
    rt_mat = rt.reshape((s_n, suffix * t_eff), order="F")
    prefix_mat = prefix.reshape((r_prev * q_n, suffix * t_eff), order="F")
    s_r = rt_mat @ rt_mat.T / t_eff
    c_mat = (prefix_mat @ rt_mat.T).reshape((r_prev, q_n, s_n), order="F") / t_eff

    kron_mat = np.kron(s_r, a_gram)
    kron_mat[np.diag_indices_from(kron_mat)] += ridge
    chol = np.linalg.cholesky(kron_mat)
    h_new = np.empty((r_prev, q_n, s_n))
    for i in range(q_n):
        rhs = c_mat[:, i, :].ravel(order="F")
        sol = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        h_new[:, i, :] = sol.reshape((r_prev, s_n), order="F")
    state.y_cores[k][n - 1] = h_new


def _residual_yf(
    ws: _Workspace, state: _State, k: int, lag_feats, yf: np.ndarray, gram_y: np.ndarray
) -> np.ndarray:
    """Lambda_y^T of the response minus all other stacks' contributions."""
    blk = state.x_block(k)
    u_other = np.zeros((ws.T, state.s))
    for l in range(1, state.lag + 1):
        other = lag_feats[l - 1].copy()
        other[:, blk] = 0.0
        u_other += other @ state.theta_block(l).T
    return yf - u_other @ gram_y.T


def _predictor_phase(
    ws: _Workspace,
    state: _State,
    ridge: float,
    stack_feats: list,
    yf: np.ndarray | None = None,
    gram_y: np.ndarray | None = None,
) -> None:
    """One pass of exact updates over all predictor components."""
    if yf is None:
        yf = ws.response_features(state)
    if gram_y is None:
        gram_y = ws.response_gram(state)
    n_all = ws.xrows.shape[0]
    for k in range(len(state.x_cores)):
        order = state.x_orders[k]
        pdims = order.permuted_dims(ws.dims_x)
        allf = np.hstack(
            [stack_feats[j] for j in range(len(state.x_cores))]
        )
        lag_feats = ws.lagged_features(allf)
        yf_res = _residual_yf(ws, state, k, lag_feats, yf, gram_y)
        chain = permute_vec_batch(ws.xrows, ws.dims_x, order).T
        rest = math.prod(pdims)
        r_prev = 1
        for m in range(1, len(pdims) + 1):
            p_m = pdims[m - 1]
            rest //= p_m
            front = chain.reshape((r_prev * p_m, rest, n_all), order="F")
            _solve_predictor_block(ws, state, k, m, ridge, front, yf_res, gram_y)
            core = state.x_cores[k][m - 1]
            g = core.reshape((core.shape[0] * core.shape[1], core.shape[2]), order="F")
            chain = g.T @ front.reshape((r_prev * p_m, rest * n_all), order="F")
            r_prev = core.shape[2]
        stack_feats[k] = chain.reshape((-1, n_all), order="F").T


def _response_phase(
    ws: _Workspace, state: _State, ridge: float, stack_feats: list
) -> np.ndarray | None:
    """One pass of exact updates over all response components.

    With a single response stack the final chain state is the new response
    feature matrix, which is returned so callers can skip a data pass.
    """
    allf = np.hstack(stack_feats)
    lag_feats = ws.lagged_features(allf)
    w_full = np.zeros((ws.T, state.s))
    for l in range(1, state.lag + 1):
        w_full += lag_feats[l - 1] @ state.theta_block(l).T
    new_yf = None
    for k in range(len(state.y_cores)):
        order = state.y_orders[k]
        qdims = order.permuted_dims(ws.dims_y)
        w_k = w_full[:, state.y_block(k)]
        target = ws.Y
        if len(state.y_cores) > 1:
            target = ws.Y.copy()
            for j in range(len(state.y_cores)):
                if j == k:
                    continue
                target -= _reconstruct_rows(
                    w_full[:, state.y_block(j)], ws.dims_y, state.y_orders[j], state.y_cores[j]
                )
        chain = permute_vec_batch(target, ws.dims_y, order).T
        rest = math.prod(qdims)
        r_prev = 1
        for n in range(1, len(qdims) + 1):
            q_n = qdims[n - 1]
            rest //= q_n
            prefix = chain.reshape((r_prev, q_n, rest, ws.T), order="F")
            _solve_response_block(ws, state, k, n, ridge, prefix, w_k)
            core = state.y_cores[k][n - 1]
            chain = core.reshape(
                (core.shape[0] * core.shape[1], core.shape[2]), order="F"
            ).T @ chain.reshape((r_prev * q_n, rest * ws.T), order="F")
            r_prev = core.shape[2]
        if len(state.y_cores) == 1:
            new_yf = chain.reshape((-1, ws.T), order="F").T
    return new_yf


def _ssvd(state: _State) -> tuple[list, list]:
    """QR-orthogonalize every stack left to right, absorbing factors into theta.

    Returns the per-stack trailing factors so feature caches can be rotated
    instead of recomputed: new features = old features @ inv(carry).
    """
    x_carries, y_carries = [], []
    for k, cores in enumerate(state.x_cores):
        carry = _qr_sweep(cores)
        x_carries.append(carry)
        blk = state.x_block(k)
        r = state.r
        for l in range(1, state.lag + 1):
            cols = slice((l - 1) * r + blk.start, (l - 1) * r + blk.stop)
            state.theta[:, cols] = state.theta[:, cols] @ carry.T
    for k, cores in enumerate(state.y_cores):
        carry = _qr_sweep(cores)
        y_carries.append(carry)
        blk = state.y_block(k)
        state.theta[blk, :] = carry @ state.theta[blk, :]
    return x_carries, y_carries


def _qr_sweep(cores: list[np.ndarray]) -> np.ndarray:
    """Left-to-right QR of a chain, in place; returns the trailing factor."""
    carry = None
    for j, core in enumerate(cores):
        if carry is not None:
            core = np.einsum("aA,Aib->aib", carry, core)
        rp, p, rn = core.shape
        mat = core.reshape((rp * p, rn), order="F")
        q, r = np.linalg.qr(mat)
        diag = np.diag(r)
        if np.any(np.abs(diag) <= 1e-13 * max(np.max(np.abs(diag)), 1e-30)):
            # rank-deficient block: fall back to an SVD basis, keep the chain map
            u, s, vt = np.linalg.svd(mat, full_matrices=False)
            q = u
            r = s[:, None] * vt
        else:
            signs = np.where(diag < 0, -1.0, 1.0)
            q = q * signs
            r = r * signs[:, None]
        cores[j] = q.reshape((rp, p, rn), order="F")
        carry = r
    return carry


def _theta_update(
    ws: _Workspace, state: _State, ridge: float, stack_feats=None, yf=None, gram_y=None
) -> None:
    if stack_feats is None:
        allf = ws.all_features_x(state)
    else:
        allf = np.hstack(stack_feats)
    lag_feats = ws.lagged_features(allf)
    if yf is None:
        yf = ws.response_features(state)
    if gram_y is None:
        gram_y = ws.response_gram(state)
    design = np.concatenate(lag_feats, axis=1)  # (T, r L)
    ff = design.T @ design / ws.T
    ff[np.diag_indices_from(ff)] += ridge
    cross = yf.T @ design / ws.T  # (s, r L)
    gy = gram_y.copy()
    gy[np.diag_indices_from(gy)] += ridge
    state.theta = np.linalg.solve(gy, np.linalg.solve(ff, cross.T).T)


# ---------------------------------------------------------------------------
# public operations


def loss(model: HtarModel, data: TensorSeries, predictors: TensorSeries | None = None) -> float:
    """Mean squared residual norm of the model on the aligned samples."""
    ws = _Workspace(data, model.lag, predictors)
    return ws.loss_value(_State(model))


def predict_series(
    model: HtarModel, data: TensorSeries, predictors: TensorSeries | None = None
) -> np.ndarray:
    """In-sample one-step predictions, one row per aligned sample; (T, Q)."""
    from htar.model import reconstruct_from_features

    ws = _Workspace(data, model.lag, predictors)
    state = _State(model)
    lag_feats = ws.lagged_features(ws.all_features_x(state))
    u = np.zeros((ws.T, state.s))
    for l in range(1, state.lag + 1):
        u += lag_feats[l - 1] @ state.theta_block(l).T
    return reconstruct_from_features(u, model.response_spec)


def block_ls_update(
    model: HtarModel,
    data: TensorSeries,
    index: int,
    ridge_eps: float = 1e-10,
    predictors: TensorSeries | None = None,
) -> HtarModel:
    """Replace flattened component ``index`` (1-based) by its LS minimizer.

    Components are numbered predictor stacks first: i = (k-1) M + m, then
    response stacks: i = K_x M + (k-1) N + n.  The updated component is not
    re-orthonormalized; that is ssvd_renormalize's job.
    """
    ws = _Workspace(data, model.lag, predictors)
    state = _State(model)
    n_x = len(state.x_cores) * len(state.dims_x)
    n_total = n_x + len(state.y_cores) * len(state.dims_y)
    if not 1 <= index <= n_total:
        raise ValueError(f"component index {index} outside 1..{n_total}")
    if index <= n_x:
        depth = len(state.dims_x)
        k, m0 = divmod(index - 1, depth)
        m = m0 + 1
        order = state.x_orders[k]
        pdims = order.permuted_dims(ws.dims_x)
        n_all = ws.xrows.shape[0]
        lag_feats = ws.lagged_features(ws.all_features_x(state))
        yf = ws.response_features(state)
        gram_y = ws.response_gram(state)
        yf_res = _residual_yf(ws, state, k, lag_feats, yf, gram_y)
        chain = permute_vec_batch(ws.xrows, ws.dims_x, order).T
        rest = math.prod(pdims)
        r_prev = 1
        for j in range(m - 1):
            rest //= pdims[j]
            chain = _advance(chain, state.x_cores[k][j], rest, n_all)
            r_prev = state.x_cores[k][j].shape[2]
        rest //= pdims[m - 1]
        front = chain.reshape((r_prev * pdims[m - 1], rest, n_all), order="F")
        _solve_predictor_block(ws, state, k, m, ridge_eps, front, yf_res, gram_y)
    else:
        depth = len(state.dims_y)
        k, n0 = divmod(index - n_x - 1, depth)
        n = n0 + 1
        order = state.y_orders[k]
        qdims = order.permuted_dims(ws.dims_y)
        lag_feats = ws.lagged_features(ws.all_features_x(state))
        w_full = np.zeros((ws.T, state.s))
        for l in range(1, state.lag + 1):
            w_full += lag_feats[l - 1] @ state.theta_block(l).T
        target = ws.Y
        if len(state.y_cores) > 1:
            target = ws.Y.copy()
            for j in range(len(state.y_cores)):
                if j != k:
                    target -= _reconstruct_rows(
                        w_full[:, state.y_block(j)], ws.dims_y, state.y_orders[j], state.y_cores[j]
                    )
        chain = permute_vec_batch(target, ws.dims_y, order).T
        rest = math.prod(qdims)
        r_prev = 1
        for j in range(n - 1):
            rest //= qdims[j]
            chain = _advance(chain, state.y_cores[k][j], rest, ws.T)
            r_prev = state.y_cores[k][j].shape[2]
        rest //= qdims[n - 1]
        prefix = chain.reshape((r_prev, qdims[n - 1], rest, ws.T), order="F")
        _solve_response_block(ws, state, k, n, ridge_eps, prefix, w_full[:, state.y_block(k)])
    return state.to_model(model.noise)


def ssvd_renormalize(model: HtarModel) -> HtarModel:
    """Orthonormalize all components, pushing the trailing maps into the core.

    The composite coefficient Lambda_y Theta (I x Lambda_x^T) is unchanged.
    """
    state = _State(model)
    _ssvd(state)
    return state.to_model(model.noise)


def update_core(
    model: HtarModel,
    data: TensorSeries,
    ridge_eps: float = 1e-10,
    predictors: TensorSeries | None = None,
) -> CoreMatrix:
    """Exact LS core given the current loadings."""
    ws = _Workspace(data, model.lag, predictors)
    state = _State(model)
    _theta_update(ws, state, ridge_eps)
    return CoreMatrix(state.theta, model.lag)


def _normalize_structure(structure) -> list[tuple[ActionOrder, RankProfile]]:
    if isinstance(structure, LoadingSpec):
        return [(st.order, st.profile) for st in structure.stacks]
    out = []
    for order, profile in structure:
        order = order if isinstance(order, ActionOrder) else ActionOrder(order)
        profile = profile if isinstance(profile, RankProfile) else RankProfile(profile)
        out.append((order, profile))
    return out


def _spectral_basis(rows: np.ndarray, width: int, rng, against: np.ndarray | None = None) -> np.ndarray:
    """Orthonormal basis approximating the top row space of ``rows``; (P, width).

    With ``against`` given, the range of the cross moment rows^T against is
    sketched instead, which points the basis at the predictable directions.
    """
    probe = rng.standard_normal((rows.shape[0], width + 2))
    if against is not None:
        probe = against @ (against.T @ probe)
    sketch = rows.T @ probe
    q, _ = np.linalg.qr(sketch)
    return q[:, :width]


def _capped_sweep(block: np.ndarray, pdims, profile: RankProfile, rng) -> list[np.ndarray]:
    """Sequential SVD with ranks forced to the profile (padding if needed)."""
    comps = []
    carry = block
    r_prev = 1
    for m, p in enumerate(pdims, start=1):
        want = profile[m]
        carry = carry.reshape((r_prev * p, -1), order="F")
        u, s, vt = np.linalg.svd(carry, full_matrices=False)
        have = min(u.shape[1], want)
        g = u[:, :have]
        if have < want:
            extra = rng.standard_normal((g.shape[0], want - have))
            extra -= g @ (g.T @ extra)
            qe, _ = np.linalg.qr(extra)
            g = np.hstack([g, qe[:, : want - have]])
        comps.append(g)
        carry = g.T @ carry
        r_prev = want
    return comps


def _init_state(
    ws: _Workspace,
    y_structure,
    x_structure,
    lag: int,
    how,
    ridge: float,
    rng,
) -> _State:
    if isinstance(how, HtarModel):
        return _State(how)
    if how == "spectral":
        y_stacks, x_stacks = [], []
        x_lead = ws.lag_slice(ws.xrows, 1)
        for order, profile in y_structure:
            basis = _spectral_basis(ws.Y, profile.last, rng, against=x_lead)
            perm = permute_vec_batch(basis.T, ws.dims_y, order).T
            comps = _capped_sweep(perm, order.permuted_dims(ws.dims_y), profile, rng)
            y_stacks.append(LoadingStack(order, ws.dims_y, comps))
        for order, profile in x_structure:
            basis = _spectral_basis(x_lead, profile.last, rng, against=ws.Y)
            perm = permute_vec_batch(basis.T, ws.dims_x, order).T
            comps = _capped_sweep(perm, order.permuted_dims(ws.dims_x), profile, rng)
            x_stacks.append(LoadingStack(order, ws.dims_x, comps))
    elif how == "random":
        y_stacks = [random_stack(ws.dims_y, o, p, rng) for o, p in y_structure]
        x_stacks = [random_stack(ws.dims_x, o, p, rng) for o, p in x_structure]
    else:
        raise ValueError(f"unknown init {how!r}")
    response = LoadingSpec(y_stacks, side="response")
    predictor = LoadingSpec(x_stacks, side="predictor")
    s, r = response.total_rank, predictor.total_rank
    model = HtarModel(lag, response, predictor, CoreMatrix(np.zeros((s, r * lag)), lag))
    state = _State(model)
    _theta_update(ws, state, ridge)
    return state


class _SweepRunner:
    """One restart's sweep loop with feature caches and optional acceleration."""

    def __init__(self, ws: _Workspace, state: _State, config: FitConfig):
        self.ws = ws
        self.state = state
        self.config = config
        self.converged = False
        self.extrapolated = False
        self.prev_vec = None
        self.sweeps_done = 0
        self.stack_feats, self.yf, self.gram_y = self._refresh()
        self.trajectory = [self._loss()]

    def _refresh(self):
        ws, state = self.ws, self.state
        feats = [ws.stack_features_x(state, k) for k in range(len(state.x_cores))]
        return feats, ws.response_features(state), ws.response_gram(state)

    def _loss(self) -> float:
        return self.ws.loss_value(
            self.state,
            self.ws.lagged_features(np.hstack(self.stack_feats)),
            self.yf,
            self.gram_y,
        )

    def _rotate_cache(self, phase_yf, x_carries, y_carries):
        # new features = old @ inv(carry); bail out on ill-conditioned carries
        for carry in x_carries + y_carries:
            diag = np.abs(np.diag(carry))
            if diag.min() <= 1e-10 * max(diag.max(), 1e-300):
                raise np.linalg.LinAlgError("near-singular ssvd carry")
        for k, carry in enumerate(x_carries):
            self.stack_feats[k] = np.linalg.solve(carry.T, self.stack_feats[k].T).T
        yf_mat = phase_yf
        for k, carry in enumerate(y_carries):
            blk = self.state.y_block(k)
            yf_mat[:, blk] = np.linalg.solve(carry.T, yf_mat[:, blk].T).T
        self.yf = yf_mat
        self.gram_y = self.ws.response_gram(self.state)

    def sweep(self, budget: int, check_tol: bool) -> None:
        ws, state, config = self.ws, self.state, self.config
        for _ in range(budget):
            _predictor_phase(ws, state, config.ridge_eps, self.stack_feats, self.yf, self.gram_y)
            phase_yf = _response_phase(ws, state, config.ridge_eps, self.stack_feats)
            x_carries, y_carries = _ssvd(state)
            self.sweeps_done += 1
            if phase_yf is not None and self.sweeps_done % 8 != 7:
                try:
                    self._rotate_cache(phase_yf, x_carries, y_carries)
                except np.linalg.LinAlgError:
                    self.stack_feats, self.yf, self.gram_y = self._refresh()
            else:
                self.stack_feats, self.yf, self.gram_y = self._refresh()
            _theta_update(ws, state, config.ridge_eps, self.stack_feats, self.yf, self.gram_y)
            current = self._loss()
            self.extrapolated = False
            traj = self.trajectory
            slow_tail = (
                len(traj) >= 3
                and traj[-2] - traj[-1] > 0
                and traj[-1] - current > 0.5 * (traj[-2] - traj[-1])
            )
            if config.accelerate and slow_tail and self.prev_vec is not None:
                cur_vec = _pack_state(state)
                if cur_vec.shape == self.prev_vec.shape:
                    best = None
                    step = cur_vec - self.prev_vec
                    for beta in (1.0, 3.0):
                        _unpack_state(state, cur_vec + beta * step)
                        cand_feats, cand_yf, cand_gram = self._refresh()
                        cand_loss = ws.loss_value(
                            state,
                            ws.lagged_features(np.hstack(cand_feats)),
                            cand_yf,
                            cand_gram,
                        )
                        if cand_loss < current:
                            best = (cur_vec + beta * step, cand_feats, cand_yf, cand_gram)
                            current = cand_loss
                        elif beta == 1.0:
                            break  # longer steps will not help either
                    if best is None:
                        _unpack_state(state, cur_vec)
                    else:
                        _unpack_state(state, best[0])
                        self.stack_feats, self.yf, self.gram_y = best[1], best[2], best[3]
                        self.extrapolated = True
            if config.accelerate:
                self.prev_vec = _pack_state(state)
            self.trajectory.append(current)
            previous = self.trajectory[-2]
            if check_tol and abs(previous - current) <= config.rel_loss_tol * max(
                previous, LOSS_FLOOR
            ):
                self.converged = True
                break

    def finalize(self) -> None:
        """Leave the state orthonormalized if the last step extrapolated."""
        if not self.extrapolated:
            return
        _ssvd(self.state)
        self.stack_feats, self.yf, self.gram_y = self._refresh()
        _theta_update(
            self.ws, self.state, self.config.ridge_eps, self.stack_feats, self.yf, self.gram_y
        )
        self.trajectory.append(self._loss())
        self.extrapolated = False


def fit_als(
    data: TensorSeries,
    response_structure,
    predictor_structure,
    lag: int = 1,
    config: FitConfig | None = None,
    predictors: TensorSeries | None = None,
) -> tuple[HtarModel, FitReport]:
    """Estimate the model by ALS with restarts; returns the best-loss fit.

    ``data`` is the response series; leave ``predictors`` unset for the
    autoregressive case, where lagged responses form the design.  Structures
    are (action order, rank profile) pairs or a LoadingSpec to copy.  With
    ``probe_sweeps`` set, every restart runs that many sweeps first and only
    the best probe is swept to convergence.
    """
    config = config or FitConfig()
    ws = _Workspace(data, lag, predictors)
    y_structure = _normalize_structure(response_structure)
    x_structure = _normalize_structure(predictor_structure)

    probing = config.probe_sweeps > 0 and config.restarts > 1
    ws_probe = ws
    if probing and config.probe_fraction < 1.0:
        keep = max(lag + 20, int(round(config.probe_fraction * len(data))))
        if keep < len(data):
            probe_data = TensorSeries(data.dims, data.values[:keep])
            probe_pred = (
                None
                if predictors is None
                else TensorSeries(
                    predictors.dims,
                    predictors.values[: keep if len(predictors) == len(data) else keep + lag],
                )
            )
            ws_probe = _Workspace(probe_data, lag, probe_pred)

    runs = []
    warned = False
    for restart in range(config.restarts):
        rng = np.random.default_rng([config.seed, restart])
        how = config.init if restart == 0 else "random"
        init_ws = ws_probe if probing else ws
        state = _init_state(init_ws, y_structure, x_structure, lag, how, config.ridge_eps, rng)
        if not warned:
            warned = True
            d_count = model_param_count(state.to_model())
            q_dim = math.prod(ws.dims_y)
            if ws.T <= d_count / q_dim:
                warnings.warn(
                    f"T = {ws.T} samples for d = {d_count} parameters", stacklevel=2
                )
        if probing:
            run = _SweepRunner(ws_probe, state, config)
            run.sweep(config.probe_sweeps, check_tol=False)
        else:
            run = _SweepRunner(ws, state, config)
            run.sweep(config.max_sweeps, check_tol=True)
        runs.append(run)

    finite = [r for r in runs if math.isfinite(r.trajectory[-1])]
    if not finite:
        raise FloatingPointError("all restarts diverged to non-finite loss")
    best = min(finite, key=lambda r: r.trajectory[-1])
    if probing:
        best.finalize()
        if ws_probe is not ws:
            best = _SweepRunner(ws, best.state, config)
        best.sweep(config.max_sweeps, check_tol=True)
    best.finalize()

    state = best.state
    d_count = model_param_count(state.to_model())
    final = best.trajectory[-1]
    report = FitReport(
        loss_trajectory=best.trajectory,
        sweeps_used=len(best.trajectory) - 1,
        converged=best.converged,
        final_loss=final,
        d=d_count,
        bic=ws.T * math.log(max(final, LOSS_FLOOR)) + d_count * math.log(ws.T),
    )
    return state.to_model(), report
