"""Listening-test datasets, fold schedule and the NLL training loop."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import CutMixConfig, cutmix, sample_beta
from .distribution import ScoreDistribution
from .evaluation import SystemScore, aggregate_mushra, fmt, pearson, safe_corr, spearman
from .frontend import FrontendConfig, gammatone_spectrogram, load_wav, segment_spectrogram
from .model import FULL_REFERENCE, ListenerNet, file_distribution

log = logging.getLogger(__name__)

HIDDEN_REFERENCE = "hidden_reference"
MANIFEST_HEADER = ("excerpt_id", "system_id", "listener_id", "score", "audio_path")
METRICS_HEADER = ("epoch", "fold", "train_nll", "val_nll", "val_rp", "val_rs")


class ManifestError(ValueError):
    """Manifest content violates the dataset contract."""


class TrainingDivergedError(FloatingPointError):
    """Loss became non-finite; ``model`` holds the last good weights."""

    def __init__(self, message: str, model: ListenerNet):
        super().__init__(message)
        self.model = model


@dataclass(frozen=True)
class ListeningRecord:
    excerpt_id: str
    system_id: str
    listener_id: str
    score: float
    audio_path: str

    def __post_init__(self):
        if not (self.excerpt_id and self.system_id and self.listener_id and self.audio_path):
            raise ManifestError(f"empty identifier in record {self}")
        if not (0.0 <= self.score <= 100.0):
            raise ManifestError(f"score {self.score} outside [0, 100] for {self.excerpt_id}/{self.system_id}")


@dataclass
class DatasetManifest:
    records: list
    root: Path = Path(".")
    frontend_hash: str | None = None
    notes: str = ""

    def resolve(self, audio_path: str) -> Path:
        p = Path(audio_path)
        return p if p.is_absolute() else self.root / p

    def validate(self) -> None:
        if not self.records:
            raise ManifestError("manifest has no records")
        for path in sorted({r.audio_path for r in self.records}):
            if not self.resolve(path).is_file():
                raise ManifestError(f"audio file not found: {self.resolve(path)}")

    def excerpts(self) -> list[str]:
        return sorted({r.excerpt_id for r in self.records})

    def items(self) -> "OrderedDict[tuple, list]":
        """(excerpt, system) -> records, in first-seen order."""
        out: OrderedDict[tuple, list] = OrderedDict()
        for r in self.records:
            out.setdefault((r.excerpt_id, r.system_id), []).append(r)
        return out

    def reference_path(self, excerpt_id: str) -> str:
        for r in self.records:
            if r.excerpt_id == excerpt_id and r.system_id == HIDDEN_REFERENCE:
                return r.audio_path
        raise ManifestError(f"excerpt {excerpt_id} has no hidden_reference record")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            try:
                score = float(row[3])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: score {row[3]!r} is not a number") from None
            records.append(ListeningRecord(row[0], row[1], row[2], score, row[4]))
    manifest = DatasetManifest(records, root=path.parent)
    manifest.validate()
    return manifest


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow((r.excerpt_id, r.system_id, r.listener_id, f"{r.score:.6f}", r.audio_path))


# --------------------------------------------------------------------------- configuration


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 8
    epochs_per_fold: int = 10
    folds: int = 5
    cutmix: CutMixConfig = field(default_factory=CutMixConfig)
    swap_lr_augment: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.cutmix, dict):
            self.cutmix = CutMixConfig(**self.cutmix)
        if self.lr < 0 or self.batch < 1 or self.epochs_per_fold < 1:
            raise ValueError("lr must be >= 0 and batch, epochs_per_fold must be positive")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- folds / normalization


def fold_assignment(groups, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per item, keeping every group (excerpt) inside one fold.

    Groups are shuffled and dealt round-robin, so fold sizes in groups differ
    by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    groups = list(groups)
    uniq = sorted(set(groups))
    if len(uniq) < k:
        raise ValueError(f"{len(uniq)} excerpts cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(uniq))
    fold_of = {uniq[j]: i % k for i, j in enumerate(order)}
    return np.array([fold_of[g] for g in groups], dtype=int)


def split_folds(manifest, k: int, seed: int = 0) -> list[list[int]]:
    """Partition record indices into ``k`` excerpt-grouped folds."""
    records = manifest.records if isinstance(manifest, DatasetManifest) else list(manifest)
    assign = fold_assignment([r.excerpt_id for r in records], k, seed)
    return [np.nonzero(assign == f)[0].tolist() for f in range(k)]


def compute_normalization(segments, std_floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Per-(plane, band) mean and std over all segments and frames."""
    x = np.asarray(segments, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] < 1:
        raise ValueError("need at least one segment")
    mean = x.mean(axis=(0, 3))
    std = np.maximum(x.std(axis=(0, 3)), std_floor)
    return mean, std


def apply_normalization(segments, mean, std) -> np.ndarray:
    return (np.asarray(segments, dtype=np.float64) - mean[:, :, None]) / std[:, :, None]


# --------------------------------------------------------------------------- features


class FeatureStore:
    """Caches raw (un-normalized) segments per audio file."""

    def __init__(self, manifest: DatasetManifest, frontend: FrontendConfig | None = None, frames: int = 240):
        self.manifest = manifest
        self.frontend = frontend or FrontendConfig()
        self.frames = frames
        self._cache: dict[str, np.ndarray] = {}

    def segments(self, audio_path: str) -> np.ndarray:
        if audio_path not in self._cache:
            buf = load_wav(self.manifest.resolve(audio_path)).as_stereo()
            spec = gammatone_spectrogram(buf, self.frontend)
            self._cache[audio_path], _ = segment_spectrogram(spec, self.frames)
        return self._cache[audio_path]

    def model_input(self, record: ListeningRecord, variant: str) -> np.ndarray:
        """``(n_seg, C, B, T)`` input for a record; FR inputs prepend the reference planes."""
        deg = self.segments(record.audio_path)
        if variant != FULL_REFERENCE:
            return deg
        ref = self.segments(self.manifest.reference_path(record.excerpt_id))
        n = min(len(ref), len(deg))
        return np.concatenate([ref[:n], deg[:n]], axis=1)


def _swap(x: np.ndarray) -> np.ndarray:
    # swap L and R inside every group of 4 planes
    idx = np.arange(x.shape[-3])
    idx = idx.reshape(-1, 4)[:, [1, 0, 2, 3]].reshape(-1)
    return x[..., idx, :, :]


# --------------------------------------------------------------------------- loss / training


def batch_loss(model: ListenerNet, x_raw: np.ndarray, scores) -> T.Tensor:
    """Mean logistic NLL of a batch of raw segments against listener scores."""
    mu, log_a = model.forward_tensor(model.normalize(x_raw))
    y = np.asarray(scores, dtype=model.dtype)
    return T.tensor_mean(T.logistic_nll(mu, log_a, y))


@dataclass
class TrainResult:
    model: ListenerNet
    log: list

    def metrics_csv(self) -> str:
        lines = [",".join(METRICS_HEADER)]
        for row in self.log:
            lines.append(",".join(fmt(row[k]) if k not in ("epoch", "fold") else str(row[k]) for k in METRICS_HEADER))
        return "\n".join(lines) + "\n"


def fit_segments(model: ListenerNet, inputs, scores, groups, keys=None, config: TrainConfig | None = None,
                 norm_segments=None, access_log: list | None = None, progress=None) -> TrainResult:
    """Fold-rotation NLL training on per-listener items.

    ``inputs[i]`` is the raw ``(n_seg, C, B, T)`` input of item ``i`` (one
    listener's rating), ``scores[i]`` its score and ``groups[i]`` its excerpt.
    Items sharing ``keys[i]`` are one (excerpt, system) point for the
    validation correlations.  For fold ``f`` the model trains
    ``epochs_per_fold`` epochs on the other folds and validates on fold ``f``;
    the same instance carries over between folds.  Normalization statistics
    come from ``norm_segments`` (default: every input).
    """
    config = config or TrainConfig()
    dtype = np.dtype(config.dtype)
    model = model.astype(dtype) if model.dtype != dtype else model.copy()
    inputs = [np.asarray(x) for x in inputs]
    scores = np.asarray(scores, dtype=np.float64)
    keys = list(range(len(inputs))) if keys is None else list(keys)
    if not (len(inputs) == len(scores) == len(groups) == len(keys)) or not inputs:
        raise ValueError("inputs, scores, groups and keys must be non-empty and of equal length")
    if norm_segments is None:
        norm_segments = np.concatenate([x[:, -4:] for x in inputs])
    model.norm_mean, model.norm_std = compute_normalization(norm_segments)

    fold_of = fold_assignment(groups, config.folds, config.seed)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    mix_rng = np.random.default_rng(seeds[1])
    params = list(model.params.values())
    state = T.AdamState(params, lr=config.lr)
    frozen_idx = [i for i, name in enumerate(model.params) if name in model.frozen]
    variants = (False, True) if config.swap_lr_augment else (False,)
    units = [(i, si) for i, x in enumerate(inputs) for si in range(len(x))]

    history = []
    epoch = 0
    for fold in range(config.folds):
        train_units = [(i, si, sw) for i, si in units if fold_of[i] != fold for sw in variants]
        val_idx = np.nonzero(fold_of == fold)[0]
        for _ in range(config.epochs_per_fold):
            epoch += 1
            good = model.state()
            perm = order_rng.permutation(len(train_units))
            losses = []
            for start in range(0, len(perm), config.batch):
                chunk = [train_units[j] for j in perm[start : start + config.batch]]
                idx = [i for i, _, _ in chunk]
                if access_log is not None:
                    access_log.append((fold, idx))
                x = np.stack([_swap(inputs[i][si]) if sw else inputs[i][si] for i, si, sw in chunk])
                y = scores[idx]
                if config.cutmix.enabled and len(chunk) > 1:
                    x, y = _apply_cutmix(x, y, config.cutmix, mix_rng)
                model.zero_grad()
                loss = batch_loss(model, x, y)
                if not np.isfinite(loss.data):
                    model.load_state(good)
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch} (fold {fold}); weights reset to epoch start", model
                    )
                T.backward(loss)
                grads = [p.grad for p in params]
                for i in frozen_idx:
                    grads[i] = np.zeros_like(params[i].data)
                T.adam_step(params, grads, state)
                losses.append(float(loss.data))
            val_nll, rp, rs = _validate(model, inputs, scores, keys, val_idx)
            row = {"epoch": epoch, "fold": fold, "train_nll": float(np.mean(losses)), "val_nll": val_nll,
                   "val_rp": rp, "val_rs": rs}
            history.append(row)
            log.info("epoch %d fold %d train_nll %.4f val_nll %.4f rp %.3f rs %.3f", epoch, fold,
                     row["train_nll"], val_nll, rp, rs)
            if progress is not None:
                progress(row)
    model.metadata.update({"train_config": config.to_dict(), "epochs": epoch, "folds": config.folds,
                           "cutmix_prob": config.cutmix.prob, "cutmix_pairing": "within-batch"})
    return TrainResult(model, history)


def _validate(model, inputs, scores, keys, val_idx):
    preds = {}
    for i in val_idx:
        if keys[i] not in preds:
            preds[keys[i]] = model.predict_segments(inputs[i])
    losses = []
    by_key: dict = {}
    for i in val_idx:
        mu, la = preds[keys[i]]
        losses.extend(T.logistic_nll(T.Tensor(mu), T.Tensor(la), np.full(mu.shape, scores[i])).data.tolist())
        by_key.setdefault(keys[i], []).append(scores[i])
    pm = [float(np.mean(preds[k][0])) for k in by_key]
    sm = [float(np.mean(v)) for v in by_key.values()]
    return float(np.mean(losses)), safe_corr(pearson, pm, sm), safe_corr(spearman, pm, sm)


def train(model: ListenerNet, manifest: DatasetManifest, config: TrainConfig | None = None,
          store: FeatureStore | None = None, access_log: list | None = None, progress=None) -> TrainResult:
    """Train on every per-listener record of ``manifest`` (see ``fit_segments``).

    Full-reference models get the excerpt's hidden reference prepended to
    each input.  Normalization uses each distinct audio file once.
    """
    store = store or FeatureStore(manifest, frames=model.config.frames)
    recs = manifest.records
    inputs = [store.model_input(r, model.config.variant) for r in recs]
    files = list(OrderedDict.fromkeys(r.audio_path for r in recs))
    norm = np.concatenate([store.segments(f) for f in files])
    return fit_segments(model, inputs, [r.score for r in recs], [r.excerpt_id for r in recs],
                        [(r.excerpt_id, r.system_id) for r in recs], config, norm, access_log, progress)


def _apply_cutmix(x: np.ndarray, y: np.ndarray, cfg: CutMixConfig, rng: np.random.Generator):
    x_out, y_out = x.copy(), y.copy()
    n = len(x)
    for i in range(n):
        if rng.random() >= cfg.prob:
            continue
        j = int(rng.integers(0, n - 1))
        j += j >= i
        lam = sample_beta(cfg.alpha, rng)
        x_out[i], y_out[i], _ = cutmix(x[i], y[i], x[j], y[j], lam, rng)
    return x_out, y_out


# --------------------------------------------------------------------------- scoring


def score_manifest(model: ListenerNet, manifest: DatasetManifest, store: FeatureStore | None = None) -> list[SystemScore]:
    """Predicted distribution and subjective aggregate for every (excerpt, system)."""
    store = store or FeatureStore(manifest, frames=model.config.frames)
    out = []
    for (ex, sys_id), recs in manifest.items().items():
        mu, la = model.predict_segments(store.model_input(recs[0], model.config.variant))
        mean, ci, n = aggregate_mushra([r.score for r in recs])
        out.append(SystemScore(ex, sys_id, file_distribution(mu, la), mean, ci or (math.nan, math.nan), n))
    return out
