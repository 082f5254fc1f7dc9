"""Autoregressive factor models: assembly, prediction, stationarity, DGP.

A model ties together a response loading, a predictor loading, and a small
core matrix with one block per lag; the implied coefficient satisfies
[A]_N = Lambda_y Theta (I_L x Lambda_x^T).  Everything here works through
the loading stacks, so the Q x QL coefficient is only materialized on
request for small problems.
"""

from __future__ import annotations

import math
import warnings
from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import lfilter

from htar.loadings import (
    LoadingSpec,
    LoadingStack,
    RankProfile,
    assemble_loading,
    extract_spec_features_batch,
    random_stack,
)
from htar.tensor import ActionOrder, DenseTensor, TensorSeries, vec

__all__ = [
    "CoreMatrix",
    "NoiseSpec",
    "HtarModel",
    "StationarityReport",
    "coefficient_matrix",
    "predict",
    "is_stationary",
    "rescale_to_stationary",
    "simulate",
    "random_model",
]

# coefficient_matrix materializes Q x (Q L); refuse beyond this entry count.
_COEFFICIENT_CAP = 30_000_000

_NOISE_KINDS = ("iid_gaussian", "iid_uniform", "correlated_gaussian")


class NoiseSpec:
    """Innovation distribution for simulation.

    ``correlated_gaussian`` uses cov = factor @ factor.T when a factor is
    given, and otherwise the 0.5^|i-j| Toeplitz correlation on the
    vectorized index.  ``scale`` multiplies every draw.
    """

    __slots__ = ("kind", "factor", "rho", "scale")

    def __init__(
        self,
        kind: str = "iid_gaussian",
        factor: np.ndarray | None = None,
        rho: float = 0.5,
        scale: float = 1.0,
    ):
        if kind not in _NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {_NOISE_KINDS}, got {kind!r}")
        if factor is not None:
            factor = np.asarray(factor, dtype=np.float64)
            if factor.ndim != 2 or factor.shape[0] != factor.shape[1]:
                raise ValueError("covariance factor must be square")
            if np.linalg.matrix_rank(factor) < factor.shape[0]:
                raise ValueError("covariance factor must be nonsingular")
        if not 0.0 <= rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {rho}")
        self.kind = kind
        self.factor = factor
        self.rho = rho
        self.scale = float(scale)

    def sample(self, rng: np.random.Generator, n: int, q: int) -> np.ndarray:
        if self.kind == "iid_uniform":
            half = math.sqrt(3.0)  # unit variance
            e = rng.uniform(-half, half, size=(n, q))
        elif self.kind == "iid_gaussian":
            e = rng.standard_normal((n, q))
        else:
            xi = rng.standard_normal((n, q))
            if self.factor is not None:
                if self.factor.shape[0] != q:
                    raise ValueError(
                        f"factor is {self.factor.shape[0]} x {self.factor.shape[0]}, "
                        f"need {q}"
                    )
                e = xi @ self.factor.T
            else:
                # AR(1) recursion across the vec index gives cov rho^|i-j|
                c = math.sqrt(1.0 - self.rho**2)
                xi[:, 0] /= c
                e = lfilter([c], [1.0, -self.rho], xi, axis=1)
        return self.scale * e

    def covariance(self, q: int) -> np.ndarray:
        if self.kind in ("iid_gaussian", "iid_uniform"):
            cov = np.eye(q)
        elif self.factor is not None:
            cov = self.factor @ self.factor.T
        else:
            idx = np.arange(q)
            cov = self.rho ** np.abs(idx[:, None] - idx[None, :])
        return self.scale**2 * cov

    def __repr__(self) -> str:
        return f"NoiseSpec(kind={self.kind!r}, scale={self.scale})"


class CoreMatrix:
    """Core coefficient Theta = [Theta_1, ..., Theta_L], shape s x (r L)."""

    __slots__ = ("theta", "lag")

    def __init__(self, theta: np.ndarray, lag: int):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 2:
            raise ValueError("theta must be a matrix")
        if lag < 1 or theta.shape[1] % lag != 0:
            raise ValueError(
                f"theta has {theta.shape[1]} columns, not divisible by lag {lag}"
            )
        self.theta = theta
        self.lag = int(lag)

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]) -> "CoreMatrix":
        return cls(np.hstack([np.asarray(b, dtype=np.float64) for b in blocks]), len(blocks))

    @property
    def n_response(self) -> int:
        return self.theta.shape[0]

    @property
    def n_predictor(self) -> int:
        return self.theta.shape[1] // self.lag

    def block(self, l: int) -> np.ndarray:
        """Theta_l for lag l (1-based)."""
        r = self.n_predictor
        return self.theta[:, (l - 1) * r : l * r]

    def scaled(self, c: float) -> "CoreMatrix":
        return CoreMatrix(c * self.theta, self.lag)


class HtarModel:
    """Lagged supervised factor model with shared loadings across lags."""

    __slots__ = ("lag", "response_spec", "predictor_spec", "core", "noise")

    def __init__(
        self,
        lag: int,
        response_spec: LoadingSpec,
        predictor_spec: LoadingSpec,
        core: CoreMatrix,
        noise: NoiseSpec | None = None,
    ):
        if lag < 1:
            raise ValueError(f"lag must be >= 1, got {lag}")
        if core.lag != lag:
            raise ValueError(f"core has lag {core.lag}, model has {lag}")
        if core.n_response != response_spec.total_rank:
            raise ValueError(
                f"core has {core.n_response} rows, response features are "
                f"{response_spec.total_rank}"
            )
        if core.n_predictor != predictor_spec.total_rank:
            raise ValueError(
                f"core lag blocks have {core.n_predictor} columns, predictor "
                f"features are {predictor_spec.total_rank}"
            )
        self.lag = int(lag)
        self.response_spec = response_spec
        self.predictor_spec = predictor_spec
        self.core = core
        self.noise = noise if noise is not None else NoiseSpec()

    @property
    def dims_y(self) -> tuple[int, ...]:
        return self.response_spec.dims

    @property
    def dims_x(self) -> tuple[int, ...]:
        return self.predictor_spec.dims

    @property
    def is_autoregressive(self) -> bool:
        return self.dims_y == self.dims_x

    def with_core(self, core: CoreMatrix) -> "HtarModel":
        return HtarModel(self.lag, self.response_spec, self.predictor_spec, core, self.noise)

    def __repr__(self) -> str:
        return (
            f"HtarModel(lag={self.lag}, dims={self.dims_y}, "
            f"s={self.response_spec.total_rank}, r={self.predictor_spec.total_rank})"
        )


class StationarityReport(NamedTuple):
    stationary: bool
    spectral_radius: float


def coefficient_matrix(model: HtarModel, cap: int = _COEFFICIENT_CAP) -> np.ndarray:
    """Materialize ([A_1]_N, ..., [A_L]_N), shape Q x (P L); small models only."""
    q = math.prod(model.dims_y)
    p = math.prod(model.dims_x)
    if q * p * model.lag > cap:
        raise ValueError(
            f"coefficient matrix has {q * p * model.lag} entries, above the "
            f"materialization cap {cap}"
        )
    lam_y = assemble_loading(model.response_spec)
    lam_x = assemble_loading(model.predictor_spec)
    blocks = [lam_y @ model.core.block(l) @ lam_x.T for l in range(1, model.lag + 1)]
    return np.hstack(blocks)


def coefficient_inner(a: HtarModel, b: HtarModel) -> float:
    """Frobenius inner product of two coefficient matricizations.

    Computed through the small cross Grams of the loadings, so the Q x QL
    matrices are never formed:

        <A, B> = sum_l tr(Theta_a_l^T (Ly_a^T Ly_b) Theta_b_l (Lx_b^T Lx_a)).
    """
    if a.dims_y != b.dims_y or a.dims_x != b.dims_x or a.lag != b.lag:
        raise ValueError("models must share dims and lag")
    lam_y_b = assemble_loading(b.response_spec)
    gy = extract_spec_features_batch(lam_y_b.T, a.response_spec).T  # s_a x s_b
    lam_x_a = assemble_loading(a.predictor_spec)
    gx = extract_spec_features_batch(lam_x_a.T, b.predictor_spec).T  # r_b x r_a
    total = 0.0
    for l in range(1, a.lag + 1):
        total += float(np.trace(a.core.block(l).T @ gy @ b.core.block(l) @ gx))
    return total


def coefficient_distance(a: HtarModel, b: HtarModel) -> float:
    """Frobenius distance between coefficient matricizations, Gram-based."""
    sq = (
        coefficient_inner(a, a)
        - 2.0 * coefficient_inner(a, b)
        + coefficient_inner(b, b)
    )
    return math.sqrt(max(sq, 0.0))


def predict(model: HtarModel, history: Sequence[DenseTensor]) -> DenseTensor:
    """One-step-ahead mean given [Y_{t-1}, ..., Y_{t-L}], newest first.

    Evaluated by sequential feature extraction; the coefficient matrix is
    never formed.
    """
    if len(history) != model.lag:
        raise ValueError(f"need {model.lag} lagged tensors, got {len(history)}")
    out = np.zeros(math.prod(model.dims_y))
    for l, x in enumerate(history, start=1):
        if x.shape != model.dims_x:
            raise ValueError(f"history entry has shape {x.shape}, want {model.dims_x}")
        f = extract_spec_features_batch(vec(x)[None, :], model.predictor_spec)[0]
        u = model.core.block(l) @ f
        out += reconstruct_from_features(u[None, :], model.response_spec)[0]
    return DenseTensor(out, model.dims_y)


def reconstruct_from_features(u: np.ndarray, spec: LoadingSpec) -> np.ndarray:
    """Rows of u (n, s) mapped back through the loading: returns (n, Q)."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    n = u.shape[0]
    out = np.zeros((n, math.prod(spec.dims)))
    for st, blk in zip(spec.stacks, spec.rank_blocks()):
        out += _reconstruct_stack(u[:, blk], st)
    return out


def _reconstruct_stack(w: np.ndarray, stack: LoadingStack) -> np.ndarray:
    """block @ w.T for each row of w, evaluated by the reverse chain; (n, P)."""
    n = w.shape[0]
    cores = stack.cores()
    state = w.T  # (r_M, n)
    for core in reversed(cores):
        r_prev, p, _ = core.shape
        g = core.reshape((r_prev * p, -1), order="F")
        state = g @ state.reshape((core.shape[2], -1), order="F")
        state = state.reshape((r_prev, -1), order="F")
    # state is (1, P_perm * n) with permuted modes fastest; undo the permutation
    pdims = stack.permuted_dims()
    tens = state.reshape(pdims + (n,), order="F")
    inv = stack.order.inverse()
    axes = [inv[m] - 1 for m in range(1, stack.depth + 1)] + [stack.depth]
    back = np.transpose(tens, axes)
    return back.reshape((-1, n), order="F").T


def feature_companion(model: HtarModel) -> np.ndarray:
    """Companion matrix of the predictor-feature recursion, shape (r L, r L).

    Its nonzero eigenvalues coincide with those of the full Q L companion,
    because every nonzero eigenvector of the full system passes through the
    predictor features.
    """
    if not model.is_autoregressive:
        raise ValueError("stationarity is defined for autoregressive models only")
    lam_y = assemble_loading(model.response_spec)
    cross = extract_spec_features_batch(lam_y.T, model.predictor_spec).T  # r x s
    r, lag = model.predictor_spec.total_rank, model.lag
    comp = np.zeros((r * lag, r * lag))
    for l in range(1, lag + 1):
        comp[:r, (l - 1) * r : l * r] = cross @ model.core.block(l)
    if lag > 1:
        comp[r:, : r * (lag - 1)] = np.eye(r * (lag - 1))
    return comp


def full_companion(model: HtarModel, cap: int = _COEFFICIENT_CAP) -> np.ndarray:
    """The literal Q L x Q L companion; for tests and small models."""
    coef = coefficient_matrix(model, cap=cap)
    q = math.prod(model.dims_y)
    ql = q * model.lag
    comp = np.zeros((ql, ql))
    comp[:q] = coef
    if model.lag > 1:
        comp[q:, : q * (model.lag - 1)] = np.eye(q * (model.lag - 1))
    return comp


def spectral_radius(model: HtarModel) -> float:
    comp = feature_companion(model)
    if comp.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def is_stationary(model: HtarModel, margin: float = 0.02) -> StationarityReport:
    """Spectral-radius test of the lifted AR(1) system: rho(B) <= 1 - margin."""
    rho = spectral_radius(model)
    return StationarityReport(rho <= 1.0 - margin, rho)


def rescale_to_stationary(model: HtarModel, target_rho: float = 0.8) -> HtarModel:
    """Scale the core so the companion spectral radius hits ``target_rho``.

    For one lag the radius is homogeneous in the core, so a single rescale
    is exact; for more lags we bisect on the scalar multiplier.
    """
    if not 0.0 < target_rho < 1.0:
        raise ValueError(f"target radius must be in (0, 1), got {target_rho}")
    rho = spectral_radius(model)
    if rho == 0.0:
        raise ValueError("cannot rescale a model with zero spectral radius")
    if model.lag == 1:
        return model.with_core(model.core.scaled(target_rho / rho))

    def radius(c: float) -> float:
        return spectral_radius(model.with_core(model.core.scaled(c)))

    lo, hi = 0.0, target_rho / rho
    while radius(hi) < target_rho:
        lo, hi = hi, hi * 2.0
        if hi > 1e8:
            raise RuntimeError("bisection bracket expansion failed")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        r_mid = radius(mid)
        if abs(r_mid - target_rho) <= 1e-6:
            return model.with_core(model.core.scaled(mid))
        if r_mid < target_rho:
            lo = mid
        else:
            hi = mid
    raise RuntimeError(
        f"bisection did not reach |rho - {target_rho}| <= 1e-6 in 100 iterations"
    )


def simulate(
    model: HtarModel, length: int, burn_in: int = 200, seed: int = 0
) -> TensorSeries:
    """Generate Y_{1-L}, ..., Y_T by iterating the recursion; deterministic in seed.

    The state is propagated in predictor-feature space (exact, since the
    features are a closed linear system) and the observed tensors are
    reconstructed in one batched pass.
    """
    if not model.is_autoregressive:
        raise ValueError("simulate requires response dims == predictor dims")
    report = is_stationary(model)
    if not report.stationary:
        warnings.warn(
            f"simulating a model with spectral radius {report.spectral_radius:.4f}",
            stacklevel=2,
        )
    lag = model.lag
    q = math.prod(model.dims_y)
    n_total = burn_in + length + lag
    rng = np.random.default_rng(seed)
    noise = model.noise.sample(rng, n_total, q)

    lam_y = assemble_loading(model.response_spec)
    cross = extract_spec_features_batch(lam_y.T, model.predictor_spec).T  # r x s
    trans = [cross @ model.core.block(l) for l in range(1, lag + 1)]  # r x r each
    noise_feats = extract_spec_features_batch(noise, model.predictor_spec)  # n x r

    r = model.predictor_spec.total_rank
    phi = np.zeros((n_total, r))
    hist = [np.zeros(r) for _ in range(lag)]  # newest first
    for t in range(n_total):
        mean = np.zeros(r)
        for l in range(lag):
            mean += trans[l] @ hist[l]
        phi[t] = mean + noise_feats[t]
        hist = [phi[t]] + hist[: lag - 1]
    if not np.all(np.isfinite(phi)):
        raise FloatingPointError(
            f"simulation exploded (spectral radius {report.spectral_radius:.4f})"
        )

    keep = slice(burn_in, n_total)
    phi_pad = np.vstack([np.zeros((lag, r)), phi])  # zero pre-sample history
    u = np.zeros((length + lag, model.response_spec.total_rank))
    for l in range(1, lag + 1):
        rows = slice(burn_in + lag - l, n_total + lag - l)
        u += phi_pad[rows] @ model.core.block(l).T
    values = reconstruct_from_features(u, model.response_spec) + noise[keep]
    if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > 1e9:
        raise FloatingPointError(
            f"simulation exploded (spectral radius {report.spectral_radius:.4f})"
        )
    return TensorSeries(model.dims_y, values)


def random_model(
    dims: Sequence[int],
    lag: int,
    y_structure: Sequence[tuple[Sequence[int], Sequence[int]]],
    x_structure: Sequence[tuple[Sequence[int], Sequence[int]]],
    noise: NoiseSpec | None = None,
    target_rho: float = 0.8,
    seed: int = 0,
    core_spectrum: tuple[float, float] | None = None,
) -> HtarModel:
    """Model with orthonormalized Gaussian loadings and a rescaled N(0,1) core.

    Each structure entry is (action order, rank profile), e.g.
    ((1, 2, 3), (1, 2, 2, 2)).  ``core_spectrum`` = (lo, hi) replaces the
    core's singular values with an evenly spaced, well-conditioned spectrum
    (random singular vectors kept); simulation studies use it so every draw
    satisfies the boundedness the error-rate theory assumes.
    """
    rng = np.random.default_rng(seed)
    y_stacks = [
        random_stack(dims, ActionOrder(order), RankProfile(profile), rng)
        for order, profile in y_structure
    ]
    x_stacks = [
        random_stack(dims, ActionOrder(order), RankProfile(profile), rng)
        for order, profile in x_structure
    ]
    response = LoadingSpec(y_stacks, side="response")
    predictor = LoadingSpec(x_stacks, side="predictor")
    s, r = response.total_rank, predictor.total_rank
    theta = rng.standard_normal((s, r * lag))
    if core_spectrum is not None:
        lo, hi = core_spectrum
        u, sv, vt = np.linalg.svd(theta, full_matrices=False)
        sv_new = np.linspace(hi, lo, sv.size)
        theta = u @ (sv_new[:, None] * vt)
    core = CoreMatrix(theta, lag)
    model = HtarModel(lag, response, predictor, core, noise)
    return rescale_to_stationary(model, target_rho)
