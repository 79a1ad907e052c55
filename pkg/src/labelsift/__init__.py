"""labelsift: find mislabeled training samples with influence scores, then repair the model."""

from .data import (
    DataFormatError,
    LabeledDataset,
    NoiseSpec,
    Sample,
    ValidationSet,
    generate_blobs,
    generate_toy,
    inject_noise,
    load_csv,
    load_dataset,
    save_csv,
    split_validation,
    toy_rule,
)
from .influence import (
    CgBreakdownError,
    HessianOperator,
    InfluenceOnData,
    InfluenceVector,
    bag_influence,
    cg_solve,
    cg_solve_batch,
    final_layer_hessian,
    influence_on_data,
    influence_on_model,
    influence_vectors,
)
from .network import FeedforwardClassifier, TrainConfig, init_layer_params
from .posttrain import (
    AuditReport,
    PostTrainConfig,
    PostTrainer,
    RoundReport,
    detection_metrics,
    final_retrain,
    post_train,
    refine_labels,
    small_loss_select,
)
from .scoring import (
    GmmFit,
    InfluenceAuditor,
    ScoreTable,
    SelectionConfig,
    compute_osd,
    compute_osm,
    compute_score_table,
    default_gamma,
    fit_gmm_2,
    select_noisy,
    zscore,
)

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "CgBreakdownError",
    "DataFormatError",
    "FeedforwardClassifier",
    "GmmFit",
    "HessianOperator",
    "InfluenceAuditor",
    "InfluenceOnData",
    "InfluenceVector",
    "LabeledDataset",
    "NoiseSpec",
    "PostTrainConfig",
    "PostTrainer",
    "RoundReport",
    "Sample",
    "ScoreTable",
    "SelectionConfig",
    "TrainConfig",
    "ValidationSet",
    "bag_influence",
    "cg_solve",
    "cg_solve_batch",
    "compute_osd",
    "compute_osm",
    "compute_score_table",
    "default_gamma",
    "detection_metrics",
    "final_layer_hessian",
    "final_retrain",
    "fit_gmm_2",
    "generate_blobs",
    "generate_toy",
    "init_layer_params",
    "inject_noise",
    "influence_on_data",
    "influence_on_model",
    "influence_vectors",
    "load_csv",
    "load_dataset",
    "post_train",
    "refine_labels",
    "save_csv",
    "select_noisy",
    "small_loss_select",
    "split_validation",
    "toy_rule",
    "zscore",
]
