"""QEEGNet: an EEGNet feature extractor followed by a simulated variational quantum circuit."""
from .errors import (
    ArchitectureMismatchError, BuildError, ConfigurationError, CorruptionError, FormatError,
    QEEGError, ShapeError, StateError, TrainingError, UnsupportedOperationError,
)
from .model import ModelConfig, build_eegnet, build_model, build_qeegnet, complexity_report
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train_loop
from .vqc import VqcConfig, VqcParams, vqc_forward, vqc_param_shift_grad

__version__ = "0.1.0"
