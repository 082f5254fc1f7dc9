"""Supervised factor models for partially hierarchical tensor time series.

Loading matrices are built sequentially along "action orders" (mode
permutations), estimated by alternating least squares, and selected by
BIC-guided boosting with a rank-reduction step; simulation studies and
rolling forecasting sit on top.
"""

from htar.tensor import (
    ActionOrder,
    DenseTensor,
    TensorSeries,
    kron,
    mode_matricize,
    permutation_matrix,
    permute_modes,
    seq_matricize,
    vec,
)
from htar.loadings import (
    LoadingSpec,
    LoadingStack,
    RankProfile,
    assemble_block,
    assemble_loading,
    compress_stack,
    extract_features,
    merge_same_order,
    param_count_block,
    random_stack,
    reexpress,
)
from htar.model import (
    CoreMatrix,
    HtarModel,
    NoiseSpec,
    coefficient_distance,
    coefficient_matrix,
    is_stationary,
    predict,
    random_model,
    rescale_to_stationary,
    simulate,
)
from htar.als import (
    FitConfig,
    FitReport,
    block_ls_update,
    fit_als,
    loss,
    model_param_count,
    predict_series,
    ssvd_renormalize,
    update_core,
)
from htar.selection import (
    ActionSetState,
    SelectionConfig,
    SelectionResult,
    bic,
    boost_select,
    fit_weak_learner,
    param_count,
    rank_reduce,
    select_lag,
    select_model,
)
from htar.experiments import (
    StudyResult,
    StudySpec,
    fit_rate_slope,
    run_misspec_study,
    run_scaling_study,
)
from htar.io import (
    ParseError,
    TransformRecord,
    invert,
    load_model,
    preprocess,
    read_series,
    save_model,
    write_series,
)
from htar.forecast import ForecastReport, rolling_forecast

__version__ = "0.1.0"
