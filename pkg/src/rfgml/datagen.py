"""Synthetic listening-test corpus: source excerpts, degradations, simulated listeners."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distribution import ScoreDistribution, sample
from .frontend import SAMPLE_RATE, AudioBuffer, FrontendConfig, lowpass, save_wav, segment_samples

HIDDEN_REFERENCE = "hidden_reference"
ANCHOR_35 = "anchor_3.5k"
ANCHOR_7 = "anchor_7k"
MANIFEST_HEADER = ("excerpt_id", "system_id", "listener_id", "score", "audio_path")


@dataclass(frozen=True)
class DegradationSpec:
    level: int
    cutoff: float
    noise_snr: float
    label: str


DEFAULT_LADDER = (
    DegradationSpec(0, 23000.0, math.inf, "level0"),
    DegradationSpec(1, 14000.0, 45.0, "level1"),
    DegradationSpec(2, 10000.0, 35.0, "level2"),
    DegradationSpec(3, 7000.0, 28.0, "level3"),
    DegradationSpec(4, 5000.0, 22.0, "level4"),
)
DEFAULT_QUALITY = {
    HIDDEN_REFERENCE: 100.0,
    "level0": 100.0,
    "level1": 85.0,
    "level2": 65.0,
    "level3": 45.0,
    "level4": 30.0,
    ANCHOR_7: 25.0,
    ANCHOR_35: 15.0,
}


def check_ladder(ladder) -> None:
    for prev, cur in zip(ladder, ladder[1:]):
        if cur.level <= prev.level or cur.cutoff > prev.cutoff or cur.noise_snr > prev.noise_snr:
            raise ValueError(f"ladder must have increasing level with nonincreasing cutoff and SNR: {prev} -> {cur}")


@dataclass
class ListenerModel:
    true_quality: dict = field(default_factory=lambda: dict(DEFAULT_QUALITY))
    spread_a: dict = field(default_factory=dict)
    n_listeners: int = 10
    default_spread: float = 4.0

    def __post_init__(self):
        if self.true_quality.get(HIDDEN_REFERENCE) != 100.0:
            raise ValueError("hidden reference true quality must be 100")

    def spread(self, condition: str) -> float:
        return self.spread_a.get(condition, self.default_spread)


def synth_codec(buffer: AudioBuffer, spec: DegradationSpec, rng: np.random.Generator) -> AudioBuffer:
    """Band-limit, then add noise at ``spec.noise_snr``; level 0 passes through.

    The noise is white inside the coded band and filtered like the signal, so
    it never widens the estimated bandwidth.
    """
    if spec.level == 0:
        return AudioBuffer(buffer.samples.copy(), buffer.sample_rate)
    limited = spec.cutoff < SAMPLE_RATE / 2
    out = lowpass(buffer, spec.cutoff) if limited else buffer
    x = out.samples
    if math.isfinite(spec.noise_snr):
        noise = rng.standard_normal(x.shape)
        if limited:
            noise = lowpass(AudioBuffer(noise, buffer.sample_rate), spec.cutoff).samples
        p_sig = float(np.mean(x**2))
        p_noise = float(np.mean(noise**2))
        if p_noise > 0:
            x = x + noise * math.sqrt(p_sig * 10.0 ** (-spec.noise_snr / 10.0) / p_noise)
    return AudioBuffer(np.clip(x, -1.0, 1.0), buffer.sample_rate)


def synth_listener_scores(model: ListenerModel, condition: str, rng: np.random.Generator, n: int | None = None):
    """Clipped logistic listener scores around the condition's true quality."""
    if condition not in model.true_quality:
        raise KeyError(f"unknown condition {condition!r}")
    n = model.n_listeners if n is None else n
    q = model.true_quality[condition]
    a = model.spread(condition)
    if a <= 0:
        return np.full(n, float(np.clip(q, 0.0, 100.0)))
    return np.clip(sample(ScoreDistribution(q, math.log(a)), n, rng), 0.0, 100.0)


# --------------------------------------------------------------------------- source material


def _bandlimited_noise(rng, n, tilt_db_per_oct: float) -> np.ndarray:
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    gain = np.ones_like(f)
    nz = f > 0
    gain[nz] = (np.maximum(f[nz], 100.0) / 1000.0) ** (tilt_db_per_oct / (20.0 * math.log10(2.0)))
    gain[~nz] = 0.0
    x = np.fft.irfft(spec * gain, n)
    return x / (np.std(x) + 1e-12)


def synth_source(kind: str, n: int, rng: np.random.Generator) -> AudioBuffer:
    """Full-band stereo test material of ``n`` samples.

    ``kind`` is ``noise`` (bursts of tilted noise), ``tones`` (harmonic
    complexes over a noise bed) or ``am`` (amplitude-modulated noise).
    """
    t = np.arange(n) / SAMPLE_RATE
    chans = []
    width = rng.uniform(0.2, 0.8)
    common = _bandlimited_noise(rng, n, rng.uniform(-4.0, -1.5))
    if kind == "noise":
        env = np.zeros(n)
        pos = 0
        while pos < n:
            length = int(rng.uniform(0.15, 0.6) * SAMPLE_RATE)
            env[pos : pos + length] = rng.uniform(0.3, 1.0)
            pos += length + int(rng.uniform(0.02, 0.2) * SAMPLE_RATE)
        env = np.convolve(env, np.hanning(481) / np.hanning(481).sum(), mode="same")
        base = common * env
    elif kind == "tones":
        f0 = rng.uniform(80.0, 600.0)
        base = np.zeros(n)
        k = 1
        while k * f0 < 22000.0:
            base += rng.uniform(0.3, 1.0) / k**0.7 * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
            k += 1
        base = base / np.std(base) + 0.3 * common
    elif kind == "am":
        rate = rng.uniform(2.0, 8.0)
        base = common * (0.6 + 0.4 * np.sin(2 * np.pi * rate * t))
    else:
        raise ValueError(f"unknown source kind {kind!r}")
    for _ in range(2):
        own = _bandlimited_noise(rng, n, rng.uniform(-4.0, -1.5))
        chans.append((1.0 - width) * base + width * own * np.std(base))
    x = np.vstack(chans)
    x *= rng.uniform(0.15, 0.35) / (np.max(np.abs(x)) + 1e-12)
    return AudioBuffer(x)


# --------------------------------------------------------------------------- corpus


@dataclass
class CorpusCondition:
    system_id: str
    make: object  # callable(buffer, rng) -> AudioBuffer


def corpus_conditions(ladder) -> list[CorpusCondition]:
    """Hidden reference, both anchors, then each coded ladder level (level 0 excluded)."""
    check_ladder(ladder)
    conds = [
        CorpusCondition(HIDDEN_REFERENCE, lambda b, r: AudioBuffer(b.samples.copy())),
        CorpusCondition(ANCHOR_7, lambda b, r: lowpass(b, 7000.0)),
        CorpusCondition(ANCHOR_35, lambda b, r: lowpass(b, 3500.0)),
    ]
    for spec in ladder:
        if spec.level == 0:
            continue
        conds.append(CorpusCondition(spec.label, lambda b, r, s=spec: synth_codec(b, s, r)))
    return conds


def generate_corpus(out_dir, n_excerpts: int = 20, ladder=DEFAULT_LADDER[1:4], listener_model: ListenerModel | None = None,
                    seed: int = 0, sources=None, segments: int = 1, excerpt_prefix: str = "ex"):
    """Write degraded WAVs plus ``manifest.csv`` and return the manifest path.

    ``sources`` optionally gives one AudioBuffer per excerpt; otherwise
    synthetic material cycling through noise, tone and AM kinds is generated.
    """
    listener_model = listener_model or ListenerModel()
    if sources is not None:
        sources = list(sources)
        n_excerpts = len(sources)
    if n_excerpts < 2:
        raise ValueError(f"need at least 2 source excerpts, got {n_excerpts}")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    conds = corpus_conditions(list(ladder))
    n_samples = segment_samples(FrontendConfig()) + (segments - 1) * 240 * FrontendConfig().hop
    kinds = ("noise", "tones", "am")
    rows = []
    root = np.random.SeedSequence(seed)
    for ei, ss in enumerate(root.spawn(n_excerpts)):
        rng = np.random.default_rng(ss)
        ex = f"{excerpt_prefix}{ei:03d}"
        src = sources[ei] if sources is not None else synth_source(kinds[ei % 3], n_samples, rng)
        for cond in conds:
            audio = cond.make(src, rng)
            rel = f"audio/{ex}_{cond.system_id}.wav"
            save_wav(out_dir / rel, audio)
            scores = synth_listener_scores(listener_model, cond.system_id, rng)
            for li, s in enumerate(scores):
                rows.append((ex, cond.system_id, f"L{li:02d}", f"{s:.6f}", rel))
    path = out_dir / "manifest.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return path
