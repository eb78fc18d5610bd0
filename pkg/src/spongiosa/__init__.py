"""Synthetic trabecular bone volumes: morphometry, progressive 3D GANs and latent style steering."""
__version__ = "0.1.0"

from .volcore import CalibrationRange, DensityNormalizer, DensityVolume, read_svol, write_svol
from .morphometry import MorphometryTransformer, ParamVector, compute_all
from .diffmorph import SmoothParams, StyleVectorTransformer, p_vector
from .datapipe import Augmenter16, PatchExtractor, PatchSpec, PhantomSpec, phantom_volume
from .genmodels import Checkpoint, generate, load_checkpoint, save_checkpoint
from .training import ProgressiveWGAN, TrainConfig, train_progressive
from .styletransfer import LatentStyleOptimizer, StyleTarget, optimize_latent
from .evalsuite import GroupSample, ParamPCA, summary_report, tukey_test

__all__ = [
    "Augmenter16", "CalibrationRange", "Checkpoint", "DensityNormalizer", "DensityVolume", "GroupSample",
    "LatentStyleOptimizer", "MorphometryTransformer", "ParamPCA", "ParamVector", "PatchExtractor",
    "PatchSpec", "PhantomSpec", "ProgressiveWGAN", "SmoothParams", "StyleTarget", "StyleVectorTransformer",
    "TrainConfig", "compute_all", "generate", "load_checkpoint", "optimize_latent", "p_vector",
    "phantom_volume", "read_svol", "save_checkpoint", "summary_report", "train_progressive", "tukey_test",
    "write_svol",
]
