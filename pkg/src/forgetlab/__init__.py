"""Task-incremental training with loss-landscape probes.

Train small multi-head MLPs over task streams with forgetting-mitigation
methods, then measure what the minima look like: forgetting metrics, box
sharpness, interpolation paths, contour sections, and curvature bounds.
"""

from .landscape import (
    BoundReport,
    ContourGrid,
    CurvatureEstimate,
    LandscapePlane,
    SharpnessConfig,
    SharpnessResult,
    build_plane,
    contour_grid,
    hessian_vector_product,
    interpolate,
    max_eigenvalue,
    sharpness,
    verify_forgetting_bound,
)
from .methods import (
    EwcAnchor,
    MethodConfig,
    ReplayBuffer,
    StableSgdConfig,
    TrainLog,
    TrainingDivergedError,
    agem_project,
    er_step,
    er_update,
    ewc_fisher_diag,
    ewc_penalty,
    replay_loss_and_grad,
    stable_sgd_lr,
    train_sequence,
    warm_start,
)
from .metrics import (
    MetricsReport,
    ScoreMatrix,
    SequenceMetrics,
    aggregate,
    average_accuracy,
    compute_metrics,
    forgetting,
    learning_accuracy,
)
from .model import (
    Batch,
    MissingHeadError,
    MlpSpec,
    ModelState,
    accuracy,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grad,
    loss_at,
    make_grad_at,
    make_loss_and_grad_at,
    make_loss_at,
    predict_logits,
    predict_proba,
    save_checkpoint,
)
from .numcore import (
    DegeneratePlaneError,
    LayoutMismatchError,
    ParamVector,
    RngStream,
    flatten,
    gram_schmidt_pair,
    least_squares_apply,
    unflatten,
)
from .sam import SamConfig, SamNonFiniteError, sam_gradient, sam_perturbation, sam_sharpness_gap
from .tasks import (
    BlobMeta,
    CsvSchema,
    Split,
    StreamFormatError,
    TaskSpec,
    TaskStream,
    WarmStartCorpus,
    gen_permuted_tasks,
    gen_split_blobs,
    gen_warm_start_corpus,
    load_csv,
    load_stream,
    reorder_stream,
    save_stream,
    shuffle_sequences,
)

__version__ = "0.1.0"
