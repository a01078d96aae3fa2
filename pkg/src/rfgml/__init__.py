"""Reference-free generative listening model for perceptual audio quality.

The package predicts a logistic distribution over MUSHRA listener scores
from a Gammatone spectrogram of the degraded signal alone, optionally
initialised from a full-reference model that sees reference and degraded
audio side by side.
"""

from .distribution import ScoreDistribution, confidence_interval, nll, sample, std_of, t_quantile
from .frontend import AudioBuffer, FrontendConfig, Spectrogram, gammatone_spectrogram, load_wav, lowpass
from .model import ListenerNet, ModelConfig, build_model, load_checkpoint, predict_file, save_checkpoint
from .training import TrainConfig, read_manifest, train

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "FrontendConfig",
    "ListenerNet",
    "ModelConfig",
    "ScoreDistribution",
    "Spectrogram",
    "TrainConfig",
    "build_model",
    "confidence_interval",
    "gammatone_spectrogram",
    "load_checkpoint",
    "load_wav",
    "lowpass",
    "nll",
    "predict_file",
    "read_manifest",
    "sample",
    "save_checkpoint",
    "std_of",
    "t_quantile",
    "train",
]
