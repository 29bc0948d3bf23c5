"""signglyph: a from-scratch convolutional network for static hand-gesture images."""

__version__ = "0.1.0"

from .datapipe import AugmentPolicy, DatasetManifest, make_batches, prepare_manifest  # noqa: E402
from .model import ModelConfig, build_model, load_checkpoint, predict, save_checkpoint  # noqa: E402
from .training import SgdConfig, cross_entropy, evaluate, fit  # noqa: E402

__all__ = [
    "AugmentPolicy",
    "DatasetManifest",
    "ModelConfig",
    "SgdConfig",
    "build_model",
    "cross_entropy",
    "evaluate",
    "fit",
    "load_checkpoint",
    "make_batches",
    "predict",
    "prepare_manifest",
    "save_checkpoint",
]
