"""Spoken-digit classification from Mel spectrogram, MFCC and ZCR feature maps,
with one small CNN per feature and probability-averaging ensembles."""

from ._kernels import get_backend, set_backend, use_backend
from .audio_io import (
    AudioClip,
    DatasetManifest,
    Layout,
    ManifestEntry,
    SplitSpec,
    fix_duration,
    load_dataset,
    parse_wav,
    read_wav,
    split_dataset,
    write_wav,
)
from .ensemble import (
    EnsembleMember,
    EnsembleSpec,
    average_probabilities,
    ensemble_predict,
    predict_label,
)
from .features import DspConfig, FeatureKind, extract, normalize_map

__version__ = "0.1.0"

__all__ = [
    "get_backend", "set_backend", "use_backend",
    "AudioClip", "DatasetManifest", "Layout", "ManifestEntry", "SplitSpec", "fix_duration",
    "load_dataset", "parse_wav", "read_wav", "split_dataset", "write_wav",
    "EnsembleMember", "EnsembleSpec", "average_probabilities", "ensemble_predict", "predict_label",
    "DspConfig", "FeatureKind", "extract", "normalize_map",
]
