from .dataset import (
    CLASSIFICATION,
    REGRESSION,
    Dataset,
    load_dataset,
    load_dataset_binary,
    save_dataset,
    save_dataset_binary,
)
from .discrete import (
    DiscreteWorld,
    DiscreteWorldSpec,
    Propensity,
    channel_world,
    copy_channel,
    enumerate_assignments,
    independent_channel,
    sample_copy_world,
    sample_discrete_world,
    symmetric_channel,
)
from .missingness import (
    MissingnessConfig,
    NormStats,
    apply_missingness,
    feature_stats,
    normalize_per_sequence,
    sample_mar_propensity,
)
from .priors import (
    BNNPriorConfig,
    GPPriorConfig,
    cholesky_with_jitter,
    kernel_matrix,
    sample_bnn_task,
    sample_gp_task,
)
from .sources import BNNTaskSource, CopyWorldSource, DiscreteWorldSource, GPTaskSource
