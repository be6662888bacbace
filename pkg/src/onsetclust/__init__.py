"""Seizure-onset detection: a channel-logit classifier followed by
block-Toeplitz subsequence clustering of the logit series."""
from .core import (Epoch, InputError, InvariantError, LabelSequence, NumericalError, Recording,
                   segment_recording)
from .segmenter import Segmentation, bic_select, em_fit, viterbi_assign, viterbi_path
from .ticc import ClusterModel, GlassoConfig, fit_cluster, stack_windows

__version__ = "0.1.0"

__all__ = [
    "ClusterModel", "Epoch", "GlassoConfig", "InputError", "InvariantError", "LabelSequence",
    "NumericalError", "Recording", "Segmentation", "bic_select", "em_fit", "fit_cluster",
    "segment_recording", "stack_windows", "viterbi_assign", "viterbi_path",
]
