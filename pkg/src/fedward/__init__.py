"""Deterministic federated-learning simulator with a collision-watermark
backdoor defense, proactive/passive baselines, and attack strategies."""

from .attacks import (
    AdaptiveContext,
    AttackSpec,
    adaptive_guess_label,
    build_coordination,
    malicious_train,
    neurotoxin_mask,
    pgd_project,
)
from .config import ExperimentConfig, config_hash, load_config
from .data import (
    ClientPartition,
    LabeledImageSet,
    PlantingSet,
    build_planting_set,
    dirichlet_partition,
    make_noise_set,
    make_shapes_dataset,
    skew_report,
)
from .defenses import (
    DefenseVerdict,
    IndicatorSpec,
    WatermarkSpec,
    base_mapping,
    build_watermark_material,
    coward_detect,
    coward_inject,
    deepsight_lite,
    flame,
    foolsgold,
    indicator_inject,
    indicator_inspect,
    multikrum,
    rflbat,
    watermark_accuracy,
)
from .errors import (
    ArchitectureError,
    ConfigurationError,
    FedwardError,
    InputError,
    ParameterError,
    TrainingDivergenceError,
    UnsupportedTriggerError,
)
from .flcore import ExperimentResult, aggregate, run_experiment, sample_clients
from .metrics import (
    compute_asr,
    compute_ba,
    compute_detection_metrics,
    gradient_norm_stats,
    ood_bias,
    pca_projection,
)
from .models import (
    Classifier,
    ModelState,
    TrainConfig,
    build_model,
    delta,
    sgd_train,
    state_from_bytes,
    state_to_bytes,
)
from .records import RoundRecord, load_stream
from .triggers import DbaDecomposition, TriggerSpec, apply_trigger, decompose_dba, poison_batch

__version__ = "0.1.0"
