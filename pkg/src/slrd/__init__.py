"""Layer-wise sparse-plus-low-rank weight decomposition toolkit."""

from .errors import ConfigError, DataError, FormatError, NumericalError, SlrdError
from .linalg import (
    HOperator,
    SymEig,
    numerical_rank,
    randomized_svd,
    rank_r_project,
    rank_r_weighted_fit,
    shifted_inverse_apply,
    sym_eig,
    truncated_svd,
)
from .sparsity import (
    SemiStructured,
    SparsityPattern,
    Unstructured,
    apply_support,
    parse_pattern,
    project,
    support_symmetric_difference,
)
from .solver import (
    AdmmState,
    LayerProblem,
    admm_step,
    build_hessian,
    init_state,
    objective,
    solve_admm,
    update_rho,
)
from .baselines import AltMinConfig, alt_min, eora, oats
from .block import (
    BlockGrads,
    BlockParams,
    BlockSpec,
    block_backward,
    block_forward,
    layer_grams,
    random_block_params,
)
from .tm import (
    Adam,
    CompressedBlock,
    DecomposedLayer,
    cascade_compress,
    compress_block,
    factor_lowrank,
    matching_loss,
    tm_refine,
)
from .tensorio import (
    IterationRecord,
    RunConfig,
    RunReport,
    TmHyper,
    load_config,
    parse_config,
    read_tensor,
    write_tensor,
)

__version__ = "0.1.0"
