"""Hyperspectral pixel classification with grouped selective state-space scans
over spatial and spectral token sequences, built on a small numpy autodiff core."""

from .data import Cube, LabelMap, stratified_split, synth_scene
from .errors import (ConfigurationError, DimensionError, DivergenceError, FormatError,
                     HSMambaError, ModeError, NonFiniteError, ParameterError, SplitError)
from .network import HSMamba, ModelConfig, load_model, save_model
from .tensor import Parameter, Tensor, no_grad
from .train import TrainConfig, compute_metrics, multi_run, train

__version__ = "0.1.0"
