"""Hyperparameter selection: BIC-guided boosting over action-order pairs.

The selector grows the model one rank at a time.  Every boosting iteration
fits an all-ranks-1 weak learner for each candidate (response order,
predictor order) pair on the current residuals, keeps the pair with the
lowest BIC, refits the full model at the incremented rank counts, and stops
as soon as the full-model BIC worsens.  A rank-reduction pass then searches
for an equivalent loading representation with fewer parameters, and the lag
is chosen by a grid search over the same procedure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from htar.als import (
    FitConfig,
    FitReport,
    LOSS_FLOOR,
    fit_als,
    model_param_count,
    predict_series,
    update_core,
)
from htar.loadings import (
    LoadingSpec,
    RankProfile,
    embed_stack,
    merge_same_order,
    param_count_block,
    reexpress,
)
from htar.model import CoreMatrix, HtarModel
from htar.tensor import ActionOrder, TensorSeries

__all__ = [
    "SelectionConfig",
    "ActionSetState",
    "SelectionResult",
    "bic",
    "param_count",
    "fit_weak_learner",
    "boost_select",
    "rank_reduce",
    "select_lag",
    "select_model",
]


def bic(loss_value: float, d: int, t: int, phi: float = 1.0) -> float:
    """T log(loss) + phi d log T."""
    if t < 2:
        raise ValueError(f"BIC needs T >= 2, got {t}")
    if loss_value <= 0.0:
        raise ValueError(
            "BIC is undefined at loss <= 0; substitute a loss floor first"
        )
    return t * math.log(loss_value) + phi * d * math.log(t)


def param_count(
    dims: Sequence[int],
    y_structure: Sequence[tuple[ActionOrder, RankProfile]],
    x_structure: Sequence[tuple[ActionOrder, RankProfile]],
    lag: int,
) -> int:
    """d(R) for a hyperparameter configuration, with per-step permuted dims."""
    total = 0
    for order, profile in list(y_structure) + list(x_structure):
        order = order if isinstance(order, ActionOrder) else ActionOrder(order)
        profile = profile if isinstance(profile, RankProfile) else RankProfile(profile)
        pdims = order.permuted_dims(dims)
        total += sum(
            profile[m - 1] * profile[m] * pdims[m - 1]
            for m in range(1, len(dims) + 1)
        )
    s_tot = sum(
        (p.last if isinstance(p, RankProfile) else p[-1]) for _, p in y_structure
    )
    r_tot = sum(
        (p.last if isinstance(p, RankProfile) else p[-1]) for _, p in x_structure
    )
    return total + lag * s_tot * r_tot


@dataclass
class SelectionConfig:
    """Knobs of the boosting selector."""

    phi: float = 1.0
    v_max: int = 10
    l_max: int = 3
    weak_config: FitConfig = field(
        default_factory=lambda: FitConfig(max_sweeps=40, rel_loss_tol=1e-6, restarts=2)
    )
    full_config: FitConfig = field(
        default_factory=lambda: FitConfig(max_sweeps=60, rel_loss_tol=1e-6, restarts=1)
    )
    rank_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.phi < 0:
            raise ValueError("phi must be >= 0")
        if self.v_max < 1 or self.l_max < 1:
            raise ValueError("v_max and l_max must be >= 1")


@dataclass
class ActionSetState:
    """Selected-so-far counts per candidate order, one per side."""

    y_candidates: list
    x_candidates: list
    y_counts: list
    x_counts: list
    iteration: int = 0

    def active_y(self) -> list[tuple[ActionOrder, int]]:
        return [(o, c) for o, c in zip(self.y_candidates, self.y_counts) if c > 0]

    def active_x(self) -> list[tuple[ActionOrder, int]]:
        return [(o, c) for o, c in zip(self.x_candidates, self.x_counts) if c > 0]

    def structures(self, dims: Sequence[int]):
        y_struct = [
            (o, RankProfile.uniform_capped(o.permuted_dims(dims), c))
            for o, c in self.active_y()
        ]
        x_struct = [
            (o, RankProfile.uniform_capped(o.permuted_dims(dims), c))
            for o, c in self.active_x()
        ]
        return y_struct, x_struct


@dataclass
class SelectionResult:
    state: ActionSetState
    model: HtarModel | None
    bic: float
    report: FitReport | None
    history: list


def _normalize_orders(candidates) -> list[ActionOrder]:
    out = []
    for c in candidates:
        out.append(c if isinstance(c, ActionOrder) else ActionOrder(c))
    if not out:
        raise ValueError("candidate set is empty")
    return out


def fit_weak_learner(
    residuals: TensorSeries,
    data: TensorSeries,
    beta: ActionOrder,
    alpha: ActionOrder,
    lag: int,
    config: FitConfig,
    phi: float = 1.0,
) -> tuple[HtarModel, float]:
    """All-ranks-1 model for one order pair, fit on the residual series.

    ``residuals`` holds one row per sample, aligned so sample t regresses on
    the lag rows of ``data``; returns the fitted model and its training BIC.
    """
    n_modes = len(residuals.dims)
    ones = RankProfile.uniform(n_modes, 1)
    model, report = fit_als(
        residuals,
        [(beta, ones)],
        [(alpha, ones)],
        lag=lag,
        config=config,
        predictors=data,
    )
    d = param_count(residuals.dims, [(beta, ones)], [(alpha, ones)], lag)
    score = bic(max(report.final_loss, LOSS_FLOOR), d, len(residuals), phi)
    return model, score


def _warm_model(
    previous: HtarModel | None,
    dims,
    lag: int,
    y_struct,
    x_struct,
    rng,
) -> HtarModel | None:
    """Embed the previous fit into the incremented rank structure."""
    if previous is None:
        return None
    from htar.loadings import random_stack

    def build(side_structs, old_spec, side):
        stacks, blocks = [], []
        old_by_order = {st.order: (st, blk) for st, blk in zip(old_spec.stacks, old_spec.rank_blocks())}
        for order, profile in side_structs:
            if order in old_by_order:
                st, blk = old_by_order[order]
                stacks.append(embed_stack(st, profile, rng))
                blocks.append(blk)
            else:
                stacks.append(random_stack(dims, order, profile, rng))
                blocks.append(None)
        return stacks, blocks

    y_stacks, y_old = build(y_struct, previous.response_spec, "response")
    x_stacks, x_old = build(x_struct, previous.predictor_spec, "predictor")
    response = LoadingSpec(y_stacks, side="response")
    predictor = LoadingSpec(x_stacks, side="predictor")
    s, r = response.total_rank, predictor.total_rank
    theta = np.zeros((s, r * lag))
    old_r = previous.predictor_spec.total_rank
    y_blocks = response.rank_blocks()
    x_blocks = predictor.rank_blocks()
    for i, (ob, nb) in enumerate(zip(y_old, y_blocks)):
        if ob is None:
            continue
        for j, (obx, nbx) in enumerate(zip(x_old, x_blocks)):
            if obx is None:
                continue
            for l in range(lag):
                old_cols = slice(l * old_r + obx.start, l * old_r + obx.stop)
                new_cols = slice(
                    l * r + nbx.start, l * r + nbx.start + (obx.stop - obx.start)
                )
                theta[
                    nb.start : nb.start + (ob.stop - ob.start), new_cols
                ] = previous.core.theta[ob, old_cols]
    return HtarModel(lag, response, predictor, CoreMatrix(theta, lag))


def boost_select(
    data: TensorSeries,
    y_candidates,
    x_candidates,
    lag: int = 1,
    config: SelectionConfig | None = None,
) -> SelectionResult:
    """Grow rank counts by boosted weak learners until the BIC worsens.

    Returns the last state whose full-model BIC improved, together with its
    fitted model; an all-zero state (no dynamics preferred) is possible.
    """
    config = config or SelectionConfig()
    y_candidates = _normalize_orders(y_candidates)
    x_candidates = _normalize_orders(x_candidates)
    t_eff = len(data) - lag
    if t_eff < 2:
        raise ValueError(f"series of length {len(data)} too short for lag {lag}")
    samples = TensorSeries(data.dims, data.values[lag:])
    null_loss = float(np.mean(np.sum(samples.values**2, axis=1)))

    state = ActionSetState(
        y_candidates, x_candidates, [0] * len(y_candidates), [0] * len(x_candidates)
    )
    best = SelectionResult(
        state=state,
        model=None,
        bic=bic(max(null_loss, LOSS_FLOOR), 0, t_eff, config.phi),
        report=None,
        history=[],
    )
    residual_rows = samples.values
    current_model = None

    for v in range(1, config.v_max + 1):
        residuals = TensorSeries(data.dims, residual_rows)
        scores = []
        for i, beta in enumerate(y_candidates):
            for j, alpha in enumerate(x_candidates):
                weak_seed = config.seed + 1009 * v + 31 * (i * len(x_candidates) + j)
                weak_cfg = replace(config.weak_config, seed=weak_seed)
                _, score = fit_weak_learner(
                    residuals, data, beta, alpha, lag, weak_cfg, config.phi
                )
                scores.append((score, i, j))
        _, best_i, best_j = min(scores, key=lambda t: (t[0], t[1], t[2]))

        y_counts = list(best.state.y_counts)
        x_counts = list(best.state.x_counts)
        y_counts[best_i] += 1
        x_counts[best_j] += 1
        trial = ActionSetState(y_candidates, x_candidates, y_counts, x_counts, v)
        y_struct, x_struct = trial.structures(data.dims)

        rng = np.random.default_rng([config.seed, v])
        warm = _warm_model(current_model, data.dims, lag, y_struct, x_struct, rng)
        full_cfg = replace(
            config.full_config,
            seed=config.seed + 7919 * v,
            init=warm if warm is not None else config.full_config.init,
        )
        model, report = fit_als(data, y_struct, x_struct, lag=lag, config=full_cfg)
        d = param_count(data.dims, y_struct, x_struct, lag)
        score = bic(max(report.final_loss, LOSS_FLOOR), d, t_eff, config.phi)
        best.history.append(
            {"iteration": v, "pair": (best_i, best_j), "bic": score, "d": d}
        )
        if score >= best.bic:
            break
        best = SelectionResult(trial, model, score, report, best.history)
        current_model = model
        residual_rows = samples.values - predict_series(model, data)
    return best


def rank_reduce(
    y_spec: LoadingSpec,
    x_spec: LoadingSpec,
    tol: float = 1e-8,
) -> tuple[LoadingSpec, LoadingSpec]:
    """Search for an equivalent loading representation with fewer parameters.

    Every stack is re-expressed under each other active order on its side;
    when the re-expression is cheaper, it is either merged into that order's
    stack or kept, whichever costs fewer parameters in total.  The total
    parameter count never increases and the feature column spaces are
    preserved to ``tol`` (the core is refit afterwards to absorb the maps).
    """

    def reduce_side(spec: LoadingSpec) -> LoadingSpec:
        stacks = list(spec.stacks)
        k = 0
        while k < len(stacks):
            if len(stacks) == 1:
                break
            stack = stacks[k]
            own_cost = param_count_block(stack)
            best_plan = None
            for j, other in enumerate(stacks):
                if j == k:
                    continue
                same_order = other.order == stack.order
                re_k = stack if same_order else reexpress(stack, other.order, tol)
                if not same_order and param_count_block(re_k) >= own_cost:
                    continue
                merged = merge_same_order(other, re_k, tol)
                keep_cost = own_cost + param_count_block(other)
                merge_cost = param_count_block(merged)
                if merge_cost < keep_cost and (
                    best_plan is None or merge_cost < best_plan[0]
                ):
                    best_plan = (merge_cost, j, merged)
            if best_plan is None:
                k += 1
                continue
            _, j, merged = best_plan
            stacks[j] = merged
            del stacks[k]
            # restart the scan: indices shifted and the merged stack changed
            k = 0
        return LoadingSpec(stacks, side=spec.side)

    return reduce_side(y_spec), reduce_side(x_spec)


def select_lag(
    data: TensorSeries,
    y_candidates,
    x_candidates,
    config: SelectionConfig | None = None,
) -> int:
    """Grid-search the lag in 1..l_max by the boosted selector's final BIC.

    Each lag is scored on its own usable sample range; ties break toward
    the smaller lag.
    """
    config = config or SelectionConfig()
    best_lag, best_bic = 1, math.inf
    for lag in range(1, config.l_max + 1):
        result = boost_select(data, y_candidates, x_candidates, lag, config)
        if result.bic < best_bic:
            best_lag, best_bic = lag, result.bic
    return best_lag


def select_model(
    data: TensorSeries,
    y_candidates,
    x_candidates,
    config: SelectionConfig | None = None,
    lag: int | None = None,
) -> SelectionResult:
    """Full pipeline: lag search, boosting, rank reduction, final refit."""
    config = config or SelectionConfig()
    if lag is None:
        lag = select_lag(data, y_candidates, x_candidates, config)
    result = boost_select(data, y_candidates, x_candidates, lag, config)
    if result.model is None:
        return result
    y_spec, x_spec = rank_reduce(
        result.model.response_spec, result.model.predictor_spec, config.rank_tol
    )
    d_before = model_param_count(result.model)
    d_after = param_count(
        data.dims,
        [(st.order, st.profile) for st in y_spec.stacks],
        [(st.order, st.profile) for st in x_spec.stacks],
        lag,
    )
    if d_after < d_before:
        warm = HtarModel(
            lag,
            y_spec,
            x_spec,
            CoreMatrix(
                np.zeros((y_spec.total_rank, x_spec.total_rank * lag)), lag
            ),
        )
        warm = warm.with_core(update_core(warm, data))
        full_cfg = replace(config.full_config, init=warm, seed=config.seed + 104729)
        model, report = fit_als(
            data,
            [(st.order, st.profile) for st in y_spec.stacks],
            [(st.order, st.profile) for st in x_spec.stacks],
            lag=lag,
            config=full_cfg,
        )
        t_eff = len(data) - lag
        score = bic(max(report.final_loss, LOSS_FLOOR), d_after, t_eff, config.phi)
        return SelectionResult(result.state, model, score, report, result.history)
    return result
