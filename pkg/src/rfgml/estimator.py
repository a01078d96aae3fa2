"""scikit-learn style wrappers around the front end and the listener network.

``GammatoneFeaturizer`` turns audio into model-ready segment arrays and
``GenerativeListener`` fits/predicts on such arrays, so both compose with
``sklearn.pipeline`` and ``sklearn.base.clone``.
"""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import CutMixConfig
from .distribution import ScoreDistribution
from .frontend import AudioBuffer, FrontendConfig, gammatone_spectrogram, load_wav, segment_spectrogram
from .model import FULL_REFERENCE, REFERENCE_FREE, ListenerNet, ModelConfig, build_model
from .training import TrainConfig, fit_segments


def _as_buffer(item) -> AudioBuffer:
    if isinstance(item, AudioBuffer):
        return item.as_stereo()
    if isinstance(item, (str, bytes)) or hasattr(item, "__fspath__"):
        return load_wav(item).as_stereo()
    return AudioBuffer(np.asarray(item, dtype=np.float64)).as_stereo()


class GammatoneFeaturizer(TransformerMixin, BaseEstimator):
    """Audio -> stacked ``(n_segments, 4, bands, frames)`` raw spectrogram segments.

    Inputs may be AudioBuffers, WAV paths or ``(channels, n)`` sample arrays
    at 48 kHz.  Mono input becomes dual-mono.  With ``first_segment_only``
    every input yields exactly one row, which keeps rows aligned with labels.
    """

    def __init__(self, bands=64, fmin=50.0, fmax=23000.0, window=2048, hop=1024, floor_db=-80.0,
                 frames=240, first_segment_only=False):
        self.bands = bands
        self.fmin = fmin
        self.fmax = fmax
        self.window = window
        self.hop = hop
        self.floor_db = floor_db
        self.frames = frames
        self.first_segment_only = first_segment_only

    def _config(self) -> FrontendConfig:
        return FrontendConfig(bands=self.bands, fmin=self.fmin, fmax=self.fmax, window=self.window,
                              hop=self.hop, floor_db=self.floor_db)

    def fit(self, X, y=None):
        self.frontend_config_ = self._config()
        self.config_hash_ = self.frontend_config_.hash()
        return self

    def transform_grouped(self, X) -> list[np.ndarray]:
        """One ``(n_seg, 4, B, T)`` array per input."""
        check_is_fitted(self, "frontend_config_")
        out = []
        for item in X:
            spec = gammatone_spectrogram(_as_buffer(item), self.frontend_config_)
            segs, _ = segment_spectrogram(spec, self.frames)
            out.append(segs[:1] if self.first_segment_only else segs)
        return out

    def transform(self, X) -> np.ndarray:
        groups = self.transform_grouped(X)
        if not groups:
            return np.zeros((0, 4, self.bands, self.frames), dtype=np.float32)
        return np.concatenate(groups)


class GenerativeListener(RegressorMixin, BaseEstimator):
    """Logistic-output listener network trained with the per-listener NLL.

    ``X`` holds raw segments ``(n, C, bands, frames)`` (C = 4, or 8 for a
    full-reference model with reference planes first).  ``y`` holds one
    listener score per row, so a condition rated by ten listeners appears as
    ten rows.  ``predict`` returns the location ``mu``; ``predict_dist``
    returns the full distributions.  ``blocks`` overrides the inception
    block specs (see ``rfgml.model.inception_a`` and friends).
    """

    def __init__(self, variant=REFERENCE_FREE, init_mode="def", donor=None, lr=1e-4, batch=8,
                 epochs_per_fold=10, folds=5, cutmix_alpha=0.7, cutmix_prob=0.5, cutmix=True,
                 swap_lr_augment=True, min_scale=0.5, blocks=None, fc_widths=(64, 32), random_state=0,
                 dtype="float32"):
        self.variant = variant
        self.init_mode = init_mode
        self.donor = donor
        self.lr = lr
        self.batch = batch
        self.epochs_per_fold = epochs_per_fold
        self.folds = folds
        self.cutmix_alpha = cutmix_alpha
        self.cutmix_prob = cutmix_prob
        self.cutmix = cutmix
        self.swap_lr_augment = swap_lr_augment
        self.min_scale = min_scale
        self.blocks = blocks
        self.fc_widths = fc_widths
        self.random_state = random_state
        self.dtype = dtype

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch=self.batch, epochs_per_fold=self.epochs_per_fold, folds=self.folds,
                           cutmix=CutMixConfig(self.cutmix_alpha, self.cutmix, self.cutmix_prob),
                           swap_lr_augment=self.swap_lr_augment, seed=self.random_state, dtype=self.dtype)

    @staticmethod
    def _check_X(X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1] not in (4, 8):
            raise ValueError(f"X must have shape (n, 4 or 8, bands, frames), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        return X

    def fit(self, X, y, groups=None, keys=None):
        """Train on rows of ``X`` with listener scores ``y``.

        ``groups`` (excerpt ids) drive the excerpt-grouped folds; without them
        every distinct row is its own group.  ``keys`` mark rows belonging to
        one (excerpt, system) point for the validation correlations.
        """
        X = self._check_X(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
        if np.any((y < 0) | (y > 100)):
            raise ValueError("scores must lie in [0, 100]")
        if groups is None:
            _, groups = np.unique(X.reshape(len(X), -1), axis=0, return_inverse=True)
        groups = list(np.asarray(groups).ravel())
        if keys is None:
            keys = groups
        _, first = np.unique(X.reshape(len(X), -1), axis=0, return_index=True)
        arch = {"blocks": copy.deepcopy(list(self.blocks))} if self.blocks is not None else {}
        config = ModelConfig(variant=self.variant, bands=X.shape[2], frames=X.shape[3], min_scale=self.min_scale,
                             fc_widths=self.fc_widths, **arch)
        if config.in_channels != X.shape[1]:
            raise ValueError(f"variant {self.variant!r} needs {config.in_channels} input planes, got {X.shape[1]}")
        donor = self.donor.model_ if isinstance(self.donor, GenerativeListener) else self.donor
        model = build_model(config, self.init_mode, donor=donor, seed=self.random_state, dtype=np.dtype(self.dtype))
        result = fit_segments(model, [x[None] for x in X], y, groups, keys, self._train_config(),
                              norm_segments=X[np.sort(first)][:, -4:])
        self.model_ = result.model
        self.history_ = result.log
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _mu_log_a(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_segments(self._check_X(X))

    def predict(self, X) -> np.ndarray:
        return self._mu_log_a(X)[0]

    def predict_dist(self, X) -> list[ScoreDistribution]:
        mu, la = self._mu_log_a(X)
        return [ScoreDistribution(float(m), float(a)) for m, a in zip(mu, la)]

    @classmethod
    def from_model(cls, model: ListenerNet, **params) -> "GenerativeListener":
        """Wrap an already trained network (e.g. a loaded checkpoint)."""
        est = cls(variant=model.config.variant, **params)
        est.model_ = model
        est.history_ = []
        est.n_features_in_ = model.config.in_channels * model.config.bands * model.config.frames
        return est


__all__ = ["GammatoneFeaturizer", "GenerativeListener", "FULL_REFERENCE", "REFERENCE_FREE"]
