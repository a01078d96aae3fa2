"""Audio front end: WAV ingestion, Gammatone spectrograms and signal utilities."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 48000
PLANES = ("L", "R", "M", "S")
SEGMENT_FRAMES = 240

_BLOB_MAGIC = b"RFGS"
_BLOB_VERSION = 1


class AudioFormatError(ValueError):
    """Input audio violates the ingestion contract."""


@dataclass
class AudioBuffer:
    samples: np.ndarray  # (channels, n) float64 in [-1, 1]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise AudioFormatError(f"channels must be 1 or 2, got array of shape {s.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"unsupported sample rate {self.sample_rate} Hz (need {SAMPLE_RATE})")
        self.samples = s

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate

    def as_stereo(self) -> "AudioBuffer":
        """Dual-mono copy (L = R) for mono input; stereo is returned unchanged."""
        if self.channels == 2:
            return self
        return AudioBuffer(np.vstack([self.samples[0], self.samples[0]]), self.sample_rate)


@dataclass(frozen=True)
class FrontendConfig:
    bands: int = 64
    fmin: float = 50.0
    fmax: float = 23000.0
    window: int = 2048
    hop: int = 1024
    order: int = 4
    floor_db: float = -80.0

    def __post_init__(self):
        if self.bands < 4:
            raise ValueError(f"bands must be >= 4, got {self.bands}")
        if not (0 < self.hop <= self.window):
            raise ValueError(f"need window >= hop > 0, got window={self.window} hop={self.hop}")
        if not (0 < self.fmin < self.fmax < SAMPLE_RATE / 2):
            raise ValueError(f"need 0 < fmin < fmax < {SAMPLE_RATE // 2}, got {self.fmin}, {self.fmax}")

    @property
    def hop_seconds(self) -> float:
        return self.hop / SAMPLE_RATE

    def hash(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha1(text.encode()).hexdigest()[:12]


@dataclass
class Spectrogram:
    """Four log-energy planes (L, R, M, S), each ``bands x frames``.

    Values are dB above the configured floor, so silence is 0 everywhere.
    """

    planes: np.ndarray  # (4, B, T) float32
    band_centers: np.ndarray
    hop: float
    config_hash: str | None = None
    padded: bool = field(default=False)

    @property
    def bands(self) -> int:
        return self.planes.shape[1]

    @property
    def frames(self) -> int:
        return self.planes.shape[2]


# --------------------------------------------------------------------------- WAV IO


def load_wav(path) -> AudioBuffer:
    """Read a 48 kHz PCM16/PCM24/float32 WAV file into [-1, 1] floats."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: unsupported WAV format ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: unsupported sample rate {rate} Hz (need {SAMPLE_RATE})")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples in int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 1:
        x = x[None]
    else:
        x = x.T
    if x.shape[0] not in (1, 2):
        raise AudioFormatError(f"{path}: unsupported channel count {x.shape[0]}")
    return AudioBuffer(x, rate)


def save_wav(path, buffer: AudioBuffer) -> None:
    """Write float32 WAV; float32 keeps ``load_wav`` round-trips exact."""
    wavfile.write(path, buffer.sample_rate, buffer.samples.T.astype(np.float32))


# --------------------------------------------------------------------------- signal utilities


def mid_side(buffer: AudioBuffer) -> tuple[np.ndarray, np.ndarray]:
    if buffer.channels != 2:
        raise AudioFormatError("mid_side needs a stereo buffer; duplicate mono input to dual-mono first")
    left, right = buffer.samples
    return (left + right) / 2.0, (left - right) / 2.0


def erb_space(fmin: float, fmax: float, n: int) -> np.ndarray:
    """``n`` centre frequencies equally spaced on the ERB-number scale."""
    to_erb = lambda f: 21.4 * np.log10(1.0 + 0.00437 * f)  # noqa: E731
    e = np.linspace(to_erb(fmin), to_erb(fmax), n)
    return (10.0 ** (e / 21.4) - 1.0) / 0.00437


def gammatone_weights(config: FrontendConfig) -> tuple[np.ndarray, np.ndarray]:
    """Power weighting matrix ``(bands, window//2 + 1)`` and band centres.

    Row ``k`` is the squared magnitude response of an order-``config.order``
    gammatone filter centred at ``fc_k``,
    ``|H(f)|^2 = (1 + ((f - fc) / b)^2) ** -order`` with ``b = 1.019 ERB(fc)``.
    """
    centers = erb_space(config.fmin, config.fmax, config.bands)
    freqs = np.fft.rfftfreq(config.window, 1.0 / SAMPLE_RATE)
    erb = 24.7 * (4.37 * centers / 1000.0 + 1.0)
    b = 1.019 * erb
    ratio = (freqs[None, :] - centers[:, None]) / b[:, None]
    return (1.0 + ratio**2) ** (-float(config.order)), centers


def _power_frames(x: np.ndarray, config: FrontendConfig, win: np.ndarray) -> np.ndarray:
    n_frames = 1 + (x.size - config.window) // config.hop
    frames = np.lib.stride_tricks.sliding_window_view(x, config.window)[:: config.hop][:n_frames]
    spec = np.fft.rfft(frames * win, axis=1)
    return spec.real**2 + spec.imag**2  # (T, bins)


def gammatone_spectrogram(buffer: AudioBuffer, config: FrontendConfig | None = None) -> Spectrogram:
    """Compute the (L, R, M, S) Gammatone spectrogram of a stereo buffer.

    A full-scale sine centred on a band reads about 0 dB before the floor
    offset is added.
    """
    config = config or FrontendConfig()
    if buffer.channels != 2:
        raise AudioFormatError("gammatone_spectrogram needs stereo input; use as_stereo() for mono")
    if buffer.samples.shape[1] < config.window:
        raise AudioFormatError(
            f"input of {buffer.samples.shape[1]} samples is shorter than one window ({config.window})"
        )
    weights, centers = gammatone_weights(config)
    win = np.hanning(config.window + 1)[:-1]
    ref_power = (win.sum() / 2.0) ** 2
    floor_power = ref_power * 10.0 ** (config.floor_db / 10.0)
    mid, side = mid_side(buffer)
    planes = []
    for x in (buffer.samples[0], buffer.samples[1], mid, side):
        band_power = _power_frames(x, config, win) @ weights.T  # (T, B)
        db = 10.0 * np.log10(np.maximum(band_power, floor_power) / ref_power)
        planes.append((db - config.floor_db).T)
    return Spectrogram(
        planes=np.stack(planes).astype(np.float32),
        band_centers=centers,
        hop=config.hop_seconds,
        config_hash=config.hash(),
    )


def _lowpass_taps(cutoff: float) -> np.ndarray:
    nyq = SAMPLE_RATE / 2.0
    # transition band [cutoff, 1.1 cutoff], designed for 80 dB rejection
    stop = min(1.1 * cutoff, nyq)
    width = stop - cutoff
    numtaps, beta = signal.kaiserord(80.0, width / nyq)
    numtaps |= 1  # odd length -> integer group delay
    return signal.firwin(numtaps, (cutoff + stop) / 2.0, window=("kaiser", beta), fs=SAMPLE_RATE)


def lowpass(buffer: AudioBuffer, cutoff: float) -> AudioBuffer:
    """Linear-phase FIR low-pass with the filter delay removed."""
    if not (0 < cutoff < SAMPLE_RATE / 2):
        raise ValueError(f"cutoff must lie in (0, {SAMPLE_RATE // 2}) Hz, got {cutoff}")
    taps = _lowpass_taps(float(cutoff))
    delay = (taps.size - 1) // 2
    n = buffer.samples.shape[1]
    out = signal.fftconvolve(buffer.samples, taps[None, :], mode="full", axes=1)[:, delay : delay + n]
    return AudioBuffer(out, buffer.sample_rate)


def swap_lr(spec: Spectrogram) -> Spectrogram:
    planes = spec.planes[[1, 0, 2, 3]]
    return replace(spec, planes=planes)


def estimate_bandwidth(buffer: AudioBuffer, threshold_db: float = 60.0) -> float:
    """Highest frequency whose long-term power is within ``threshold_db`` of the peak."""
    nper = min(4096, buffer.samples.shape[1])
    freqs, psd = signal.welch(buffer.samples, fs=buffer.sample_rate, window="blackmanharris", nperseg=nper, axis=1)
    ltas = psd.mean(axis=0)
    peak = ltas.max()
    if peak <= 0:
        return 0.0
    above = np.nonzero(ltas >= peak * 10.0 ** (-threshold_db / 10.0))[0]
    return float(freqs[above[-1]])


# --------------------------------------------------------------------------- segments


def segment_spectrogram(spec: Spectrogram, frames: int = SEGMENT_FRAMES, min_tail: float = 0.5):
    """Cut into non-overlapping ``frames``-long segments.

    Returns ``(segments, padded)`` where ``segments`` is ``(n, 4, B, frames)``.
    A tail of at least ``min_tail * frames`` frames is padded with the floor
    value (0) and flagged; shorter tails are dropped.
    """
    total = spec.frames
    n_full = total // frames
    tail = total - n_full * frames
    segs = [spec.planes[:, :, i * frames : (i + 1) * frames] for i in range(n_full)]
    padded = [False] * n_full
    if tail and tail >= min_tail * frames:
        seg = np.zeros(spec.planes.shape[:2] + (frames,), dtype=spec.planes.dtype)
        seg[:, :, :tail] = spec.planes[:, :, n_full * frames :]
        segs.append(seg)
        padded.append(True)
    if not segs:
        raise AudioFormatError(f"spectrogram of {total} frames is shorter than one segment ({frames} frames)")
    return np.stack(segs), np.array(padded)


def segment_samples(config: FrontendConfig | None = None, frames: int = SEGMENT_FRAMES) -> int:
    """Sample count that yields exactly ``frames`` spectrogram frames."""
    config = config or FrontendConfig()
    return config.window + (frames - 1) * config.hop


# --------------------------------------------------------------------------- blob IO


def save_spectrogram(path, spec: Spectrogram) -> None:
    """Write the RFGS blob: header, float64 band centres, float32 planes."""
    b, t = spec.bands, spec.frames
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<IIId", _BLOB_VERSION, b, t, spec.hop))
        fh.write(np.asarray(spec.band_centers, dtype="<f8").tobytes())
        fh.write(np.asarray(spec.planes, dtype="<f4").tobytes(order="C"))


def load_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if raw[:4] != _BLOB_MAGIC:
        raise ValueError(f"{path}: bad spectrogram magic {raw[:4]!r}")
    head = struct.calcsize("<IIId")
    version, b, t, hop = struct.unpack_from("<IIId", raw, 4)
    if version != _BLOB_VERSION:
        raise ValueError(f"{path}: unsupported spectrogram version {version}")
    off = 4 + head
    need = off + 8 * b + 4 * 4 * b * t
    if len(raw) != need:
        raise ValueError(f"{path}: truncated spectrogram blob ({len(raw)} of {need} bytes)")
    centers = np.frombuffer(raw, dtype="<f8", count=b, offset=off).copy()
    planes = np.frombuffer(raw, dtype="<f4", count=4 * b * t, offset=off + 8 * b).reshape(4, b, t).copy()
    return Spectrogram(planes=planes.astype(np.float32), band_centers=centers, hop=hop)
