"""Sample-level adversarial-vulnerability trust scores for numpy classifiers."""

from .attacks import (
    AttackConfig,
    attack_batch,
    deepfool_attack,
    estimate_ddb,
    estimate_ddb_batch,
    pgd_attack,
    pgd_batch,
    rank_correlation,
    steps_profile,
)
from .data import Dataset, load_cifar10, split, synth_shapes
from .distill import DistillConfig, distill, kd_loss, select_transfer_set
from .errors import AdvTrustError
from .nn import ModelSpec, Network, gradient_check
from .spectral import (
    avg_hf_band_requirement,
    band_sweep_accuracy,
    dct2,
    flipping_frequency,
    idct2,
    lowpass_keep,
)
from .training import TrainConfig, adversarial_train, load_model, save_model, train
from .vulnerability import (
    NormalizationStats,
    fit_normalization,
    flagging_accuracy,
    kmeans2,
    normalize_ddb,
    normalize_flipfreq,
    score_sample,
    trust_score,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
