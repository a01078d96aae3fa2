"""Inception/SE listener network, weight transfer and checkpoint files."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .distribution import ScoreDistribution
from .frontend import AudioBuffer, FrontendConfig, gammatone_spectrogram, segment_spectrogram

FULL_REFERENCE = "full_reference"
REFERENCE_FREE = "reference_free"
INIT_MODES = ("def", "deg", "degF", "all")
FR_CHANNEL_ORDER = ("ref_L", "ref_R", "ref_M", "ref_S", "deg_L", "deg_R", "deg_M", "deg_S")

_CKPT_MAGIC = b"RFGM"
_CKPT_VERSION = 1
_DTYPE_CODES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible."""


def _branch(width: int, *kernels, pool: bool = False) -> dict:
    return {"pool": pool, "kernels": [list(k) for k in kernels], "width": width}


def inception_a(width: int) -> dict:
    return {
        "name": "In-A",
        "branches": [
            _branch(width, (1, 1)),
            _branch(width, (1, 1), (3, 3)),
            _branch(width, (1, 1), (5, 5)),
            _branch(width, (1, 1), pool=True),
        ],
    }


def inception_b(width: int) -> dict:
    return {
        "name": "In-B",
        "branches": [
            _branch(width, (1, 1)),
            _branch(width, (1, 1), (1, 7), (7, 1)),
            _branch(width, (1, 1), (7, 1), (1, 7)),
            _branch(width, (1, 1), pool=True),
        ],
    }


def inception_c(width: int) -> dict:
    return {
        "name": "In-C",
        "branches": [
            _branch(width, (1, 1)),
            _branch(width, (1, 1), (1, 3)),
            _branch(width, (1, 1), (3, 1)),
            _branch(width, (1, 1), pool=True),
        ],
    }


def _default_blocks() -> list:
    return [inception_a(10), inception_a(20), inception_b(32), inception_c(64)]


@dataclass
class ModelConfig:
    """Architecture description; everything shape-related lives here.

    The block sequence is always In-A, SE, In-A, SE, In-B, SE, In-C, global
    pooling, then three fully connected layers, the last one emitting
    ``(mu_raw, scale_raw)``.  ``mu = 100 sigmoid(mu_raw)`` and
    ``a = min_scale + exp(scale_raw)``; the floor keeps the likelihood bounded
    when many listener scores sit exactly at the scale ends.
    """

    variant: str = REFERENCE_FREE
    bands: int = 64
    frames: int = 240
    input_pool: tuple = (2, 4)
    block_pool: tuple = (2, 2)
    blocks: list = field(default_factory=_default_blocks)
    se_reduction: int = 4
    fc_widths: tuple = (64, 32)
    min_scale: float = 0.5
    channel_order: tuple = ()

    def __post_init__(self):
        if self.variant not in (FULL_REFERENCE, REFERENCE_FREE):
            raise ValueError(f"unknown variant {self.variant!r}")
        if [b["name"] for b in self.blocks] != ["In-A", "In-A", "In-B", "In-C"]:
            raise ValueError("block sequence must be In-A, In-A, In-B, In-C")
        self.input_pool = tuple(self.input_pool)
        self.block_pool = tuple(self.block_pool)
        self.fc_widths = tuple(self.fc_widths)
        if not self.channel_order:
            self.channel_order = FR_CHANNEL_ORDER if self.variant == FULL_REFERENCE else FR_CHANNEL_ORDER[4:]
        self.channel_order = tuple(self.channel_order)

    @property
    def in_channels(self) -> int:
        return 8 if self.variant == FULL_REFERENCE else 4

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def with_variant(self, variant: str) -> "ModelConfig":
        d = json.loads(self.to_json())
        d["variant"] = variant
        d["channel_order"] = ()
        return ModelConfig(**d)


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """Name -> shape for every learned tensor, in canonical order."""
    shapes: OrderedDict[str, tuple] = OrderedDict()
    c_in = config.in_channels
    for bi, block in enumerate(config.blocks):
        c_out = 0
        for ji, br in enumerate(block["branches"]):
            prev = c_in
            for ki, (kh, kw) in enumerate(br["kernels"]):
                shapes[f"blocks.{bi}.b{ji}.conv{ki}.weight"] = (br["width"], prev, kh, kw)
                shapes[f"blocks.{bi}.b{ji}.conv{ki}.bias"] = (br["width"],)
                prev = br["width"]
            c_out += br["width"]
        if bi < 3:
            hidden = max(1, c_out // config.se_reduction)
            shapes[f"se.{bi}.fc1.weight"] = (hidden, c_out)
            shapes[f"se.{bi}.fc1.bias"] = (hidden,)
            shapes[f"se.{bi}.fc2.weight"] = (c_out, hidden)
            shapes[f"se.{bi}.fc2.bias"] = (c_out,)
        c_in = c_out
    prev = c_in
    for fi, width in enumerate(tuple(config.fc_widths) + (2,)):
        shapes[f"fc.{fi}.weight"] = (width, prev)
        shapes[f"fc.{fi}.bias"] = (width,)
        prev = width
    return shapes


def param_count(config: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(config).values()))


def _fan_in(name: str, shapes) -> int:
    w = shapes[name.rsplit(".", 1)[0] + ".weight"]
    return int(math.prod(w[1:]))


def first_block_input_params(config: ModelConfig) -> list[str]:
    """Names of the first block's input-facing kernels and their biases."""
    names = []
    for ji, _ in enumerate(config.blocks[0]["branches"]):
        names += [f"blocks.0.b{ji}.conv0.weight", f"blocks.0.b{ji}.conv0.bias"]
    return names


class ListenerNet:
    """The listener network: parameters plus normalization statistics."""

    def __init__(self, config: ModelConfig, params, norm_mean=None, norm_std=None, frozen=(), metadata=None):
        self.config = config
        self.params: OrderedDict[str, T.Tensor] = OrderedDict(
            (k, v if isinstance(v, T.Tensor) else T.Tensor(v, requires_grad=True, name=k)) for k, v in params.items()
        )
        for k, p in self.params.items():
            p.requires_grad = True
            p.name = k
        self.norm_mean = None if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = None if norm_std is None else np.asarray(norm_std, dtype=np.float64)
        self.frozen = frozenset(frozen)
        self.metadata = dict(metadata or {})
        expected = param_shapes(config)
        if list(expected) != list(self.params):
            missing = set(expected) ^ set(self.params)
            raise CheckpointError(f"parameter set does not match config: {sorted(missing)[:5]}")
        for k, shape in expected.items():
            if self.params[k].shape != tuple(shape):
                raise CheckpointError(f"parameter {k} has shape {self.params[k].shape}, config expects {tuple(shape)}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def astype(self, dtype) -> "ListenerNet":
        params = OrderedDict((k, p.data.astype(dtype)) for k, p in self.params.items())
        return ListenerNet(self.config, params, self.norm_mean, self.norm_std, self.frozen, self.metadata)

    def copy(self) -> "ListenerNet":
        return self.astype(self.dtype)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state(self, state) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------------ forward

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Standardize raw planes per (plane, band); FR inputs reuse the 4-plane stats."""
        if self.norm_mean is None:
            raise ValueError("model has no normalization statistics")
        reps = self.config.in_channels // 4
        mean = np.tile(self.norm_mean, (reps, 1))[:, :, None]
        std = np.tile(self.norm_std, (reps, 1))[:, :, None]
        return ((x - mean) / std).astype(self.dtype)

    def _check_input(self, x: np.ndarray) -> None:
        c = self.config
        want = (c.in_channels, c.bands, c.frames)
        if x.shape[-3:] != want:
            raise T.ShapeError(f"input segment shape {x.shape[-3:]} does not match model {want}")

    def first_block_preactivations(self, x) -> list[T.Tensor]:
        """Outputs of the first block's input-facing convolutions before ReLU."""
        h = self._stem(T.Tensor(x))
        outs = []
        for ji, br in enumerate(self.config.blocks[0]["branches"]):
            inp = T.avg_pool2d(h, 3, 1, 1) if br["pool"] else h
            outs.append(self._conv(inp, f"blocks.0.b{ji}.conv0", br["kernels"][0]))
        return outs

    def _stem(self, x: T.Tensor) -> T.Tensor:
        ph, pw = self.config.input_pool
        if (ph, pw) == (1, 1):
            return x
        return T.avg_pool2d(x, (ph, pw), (ph, pw))

    def _conv(self, x: T.Tensor, prefix: str, kernel) -> T.Tensor:
        kh, kw = kernel
        return T.conv2d(x, self.params[prefix + ".weight"], self.params[prefix + ".bias"], 1, (kh // 2, kw // 2))

    def _block(self, x: T.Tensor, bi: int) -> T.Tensor:
        outs = []
        for ji, br in enumerate(self.config.blocks[bi]["branches"]):
            h = T.avg_pool2d(x, 3, 1, 1) if br["pool"] else x
            for ki, k in enumerate(br["kernels"]):
                h = T.relu(self._conv(h, f"blocks.{bi}.b{ji}.conv{ki}", k))
            outs.append(h)
        return T.concat_channels(outs)

    def _se(self, x: T.Tensor, i: int) -> T.Tensor:
        p = self.params
        s = T.global_avg_pool(x)
        s = T.relu(T.linear(s, p[f"se.{i}.fc1.weight"], p[f"se.{i}.fc1.bias"]))
        s = T.sigmoid(T.linear(s, p[f"se.{i}.fc2.weight"], p[f"se.{i}.fc2.bias"]))
        return T.scale_channels(x, s)

    def forward_tensor(self, x_norm) -> tuple[T.Tensor, T.Tensor]:
        """Normalized batch ``(N, C, B, T)`` -> ``(mu, log_a)`` tensors of length N."""
        x = x_norm if isinstance(x_norm, T.Tensor) else T.Tensor(x_norm)
        self._check_input(x.data)
        h = self._stem(x)
        pool = self.config.block_pool
        for bi in range(4):
            h = self._block(h, bi)
            if bi < 3:
                h = self._se(h, bi)
                if tuple(pool) != (1, 1) and min(h.shape[-2:]) >= max(pool):
                    h = T.avg_pool2d(h, pool, pool)
        h = T.global_avg_pool(h)
        n_fc = len(self.config.fc_widths) + 1
        for fi in range(n_fc):
            h = T.linear(h, self.params[f"fc.{fi}.weight"], self.params[f"fc.{fi}.bias"])
            if fi < n_fc - 1:
                h = T.relu(h)
        mu = T.mul_scalar(T.sigmoid(T.select(h, 0)), 100.0)
        log_a = T.select(h, 1)
        if self.config.min_scale > 0:
            log_a = T.log_add_exp(log_a, math.log(self.config.min_scale))
        return mu, log_a

    def predict_segments(self, segments: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Raw (un-normalized) segments -> ``(mu, log_a)`` arrays."""
        segments = np.asarray(segments)
        if segments.ndim == 3:
            segments = segments[None]
        self._check_input(segments)
        mus, las = [], []
        for i in range(0, len(segments), batch_size):
            mu, la = self.forward_tensor(self.normalize(segments[i : i + batch_size]))
            mus.append(mu.data)
            las.append(la.data)
        return np.concatenate(mus).astype(np.float64), np.concatenate(las).astype(np.float64)

    # ------------------------------------------------------------------ persistence

    def to_checkpoint(self) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            params=self.state(),
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            metadata={**self.metadata, "frozen": sorted(self.frozen)},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "ListenerNet":
        meta = dict(ckpt.metadata)
        frozen = meta.pop("frozen", ())
        return cls(ckpt.config, ckpt.params, ckpt.norm_mean, ckpt.norm_std, frozen, meta)

    def save(self, path) -> None:
        save_checkpoint(path, self.to_checkpoint())

    @classmethod
    def load(cls, path) -> "ListenerNet":
        return cls.from_checkpoint(load_checkpoint(path))


def forward(model: ListenerNet, segment: np.ndarray) -> ScoreDistribution:
    """Score distribution for one raw segment ``(C, B, T)``."""
    mu, la = model.predict_segments(np.asarray(segment)[None])
    return ScoreDistribution(float(mu[0]), float(la[0]))


def predict_file(model: ListenerNet, buffer: AudioBuffer, frontend: FrontendConfig | None = None) -> ScoreDistribution:
    """Whole-file distribution from a reference-free model.

    Mono input is scored as dual-mono.  The file-level location is the mean
    segment ``mu`` and the file-level scale the mean segment ``a``.
    """
    if model.config.variant != REFERENCE_FREE:
        raise ValueError("predict_file needs a reference-free model")
    spec = gammatone_spectrogram(buffer.as_stereo(), frontend)
    segments, _ = segment_spectrogram(spec, model.config.frames)
    return file_distribution(*model.predict_segments(segments))


def file_distribution(mu: np.ndarray, log_a: np.ndarray) -> ScoreDistribution:
    """Pool per-segment outputs: mean ``mu`` and mean ``a`` (as a log)."""
    top = float(np.max(log_a))
    return ScoreDistribution(float(np.mean(mu)), top + float(np.log(np.mean(np.exp(log_a - top)))))


# --------------------------------------------------------------------------- construction


def _feeds_relu(name: str, config: ModelConfig) -> bool:
    last_fc = f"fc.{len(config.fc_widths)}."
    return name.endswith(".weight") and not name.startswith(last_fc) and ".fc2." not in name


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """Uniform draws in canonical order.

    Weights followed by a ReLU use the He bound ``sqrt(6 / fan_in)`` so the
    signal keeps its scale through the stack; biases and the weights feeding
    a sigmoid or the output use ``1 / sqrt(fan_in)``.
    """
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    out = OrderedDict()
    for name, shape in shapes.items():
        fan_in = _fan_in(name, shapes)
        bound = math.sqrt(6.0 / fan_in) if _feeds_relu(name, config) else 1.0 / math.sqrt(fan_in)
        out[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return out


def transfer_first_block(donor_kernels: np.ndarray) -> np.ndarray:
    """Degraded-input slice (channels 4..7) of a full-reference first-block kernel."""
    k = np.asarray(donor_kernels.data if isinstance(donor_kernels, T.Tensor) else donor_kernels)
    if k.ndim != 4 or k.shape[1] != 8:
        raise T.ShapeError(f"donor kernels must be C_out x 8 x kH x kW, got shape {k.shape}")
    return k[:, 4:8].copy()


def _donor_params(donor) -> "OrderedDict[str, np.ndarray]":
    if isinstance(donor, ListenerNet):
        return donor.state()
    if isinstance(donor, Checkpoint):
        return donor.params
    raise TypeError(f"donor must be a ListenerNet or Checkpoint, got {type(donor).__name__}")


def _donor_config(donor) -> ModelConfig:
    return donor.config


def build_model(config: ModelConfig, mode: str = "def", donor=None, seed: int = 0, dtype=np.float32) -> ListenerNet:
    """Fresh or transfer-initialized listener network.

    ``def`` draws every tensor fresh.  ``deg`` copies the degraded-channel
    slice of the donor's first-block input kernels (and their biases);
    ``degF`` additionally freezes them.  ``all`` copies every inception and
    SE tensor, slicing the input kernels, and leaves the dense head fresh.
    """
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    params = init_params(config, seed, dtype)
    frozen: tuple = ()
    norm_mean = norm_std = None
    if mode != "def":
        if donor is None:
            raise ValueError(f"init mode {mode!r} needs a full-reference donor checkpoint")
        dconf = _donor_config(donor)
        if dconf.variant != FULL_REFERENCE:
            raise ValueError(f"donor must be a {FULL_REFERENCE} model, got {dconf.variant}")
        if config.variant != REFERENCE_FREE:
            raise ValueError("transfer initialization targets a reference-free model")
        dparams = _donor_params(donor)
        first = first_block_input_params(config)
        if mode in ("deg", "degF"):
            names = first
        else:
            names = [n for n in params if n.startswith(("blocks.", "se."))]
        for name in names:
            if name not in dparams:
                raise ValueError(f"donor lacks parameter {name}")
            src = np.asarray(dparams[name])
            if name in first and name.endswith(".weight"):
                src = transfer_first_block(src)
            if src.shape != params[name].shape:
                raise ValueError(f"donor parameter {name} has shape {src.shape}, expected {params[name].shape}")
            params[name] = src.astype(dtype)
        if mode == "degF":
            frozen = tuple(first)
        norm_mean = getattr(donor, "norm_mean", None)
        norm_std = getattr(donor, "norm_std", None)
    meta = {"init_mode": mode, "seed": int(seed)}
    return ListenerNet(config, params, norm_mean, norm_std, frozen, meta)


# --------------------------------------------------------------------------- checkpoint file


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise CheckpointError(f"unsupported parameter dtype {arr.dtype}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(_CKPT_MAGIC)
    out += struct.pack("<I", _CKPT_VERSION)
    conf = ckpt.config.to_json().encode()
    out += struct.pack("<I", len(conf)) + conf
    out += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + code.encode()
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    if ckpt.norm_mean is None:
        out += struct.pack("<B", 0)
    else:
        mean = np.ascontiguousarray(ckpt.norm_mean, dtype="<f8")
        std = np.ascontiguousarray(ckpt.norm_std, dtype="<f8")
        out += struct.pack("<BII", 1, *mean.shape) + mean.tobytes() + std.tobytes()
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<I", len(meta)) + meta
    return bytes(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (version,) = r.unpack("<I")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (need {_CKPT_VERSION})")
    (n,) = r.unpack("<I")
    try:
        config = ModelConfig.from_json(r.take(n).decode())
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid config block ({exc})") from exc
    expected = param_shapes(config)
    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        code = r.take(2).decode()
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: parameter {name} has unknown dtype code {code!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPE_CODES[code]
        size = int(math.prod(shape)) * dt.itemsize
        arr = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected parameter {name}")
        if tuple(shape) != tuple(expected[name]):
            raise CheckpointError(f"{path}: parameter {name} has shape {tuple(shape)}, config expects {expected[name]}")
        params[name] = arr
    missing = [k for k in expected if k not in params]
    if missing:
        raise CheckpointError(f"{path}: missing parameter {missing[0]}")
    (has_norm,) = r.unpack("<B")
    norm_mean = norm_std = None
    if has_norm:
        planes, bands = r.unpack("<II")
        norm_mean = np.frombuffer(r.take(8 * planes * bands), dtype="<f8").reshape(planes, bands).copy()
        norm_std = np.frombuffer(r.take(8 * planes * bands), dtype="<f8").reshape(planes, bands).copy()
    (ln,) = r.unpack("<I")
    metadata = json.loads(r.take(ln).decode())
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config, params, norm_mean, norm_std, metadata)
