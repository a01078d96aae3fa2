import math

import numpy as np
import pytest

from rfgml.datagen import (
    DEFAULT_LADDER,
    DegradationSpec,
    ListenerModel,
    check_ladder,
    corpus_conditions,
    generate_corpus,
    synth_codec,
    synth_listener_scores,
    synth_source,
)
from rfgml.frontend import AudioBuffer, estimate_bandwidth, load_wav
from rfgml.training import read_manifest

N = 48000


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return generate_corpus(out, n_excerpts=5, seed=3)


class TestCodec:
    def test_level0_passthrough(self, rng):
        buf = synth_source("noise", N, rng)
        out = synth_codec(buf, DEFAULT_LADDER[0], rng)
        assert out.samples.tobytes() == buf.samples.tobytes()

    def test_cutoff_bandwidth(self, rng):
        buf = synth_source("noise", N, rng)
        out = synth_codec(buf, DegradationSpec(5, 3500.0, 30.0, "lp"), rng)
        assert 3300.0 <= estimate_bandwidth(out) <= 3900.0

    def test_ladder_bandwidth_nonincreasing(self, rng):
        buf = synth_source("tones", N, rng)
        bw = [estimate_bandwidth(synth_codec(buf, spec, np.random.default_rng(0))) for spec in DEFAULT_LADDER[1:]]
        assert all(b2 <= b1 for b1, b2 in zip(bw, bw[1:]))

    def test_deterministic(self):
        buf = synth_source("am", N, np.random.default_rng(1))
        a = synth_codec(buf, DEFAULT_LADDER[2], np.random.default_rng(9))
        b = synth_codec(buf, DEFAULT_LADDER[2], np.random.default_rng(9))
        assert np.array_equal(a.samples, b.samples)

    def test_bad_ladder(self):
        with pytest.raises(ValueError):
            check_ladder([DEFAULT_LADDER[2], DEFAULT_LADDER[1]])

    def test_unknown_source(self, rng):
        with pytest.raises(ValueError):
            synth_source("speech", N, rng)


class TestListeners:
    def test_zero_spread(self, rng):
        lm = ListenerModel(spread_a={"level2": 0.0})
        assert np.all(synth_listener_scores(lm, "level2", rng) == 65.0)

    def test_mean(self, rng):
        lm = ListenerModel(true_quality={"hidden_reference": 100.0, "x": 60.0}, spread_a={"x": 5.0})
        s = synth_listener_scores(lm, "x", rng, n=10_000)
        assert abs(s.mean() - 60.0) <= 0.5

    def test_clipped(self, rng):
        s = synth_listener_scores(ListenerModel(default_spread=30.0), "hidden_reference", rng, n=2000)
        assert s.min() >= 0.0 and s.max() <= 100.0 and s.max() == 100.0

    def test_unknown_condition(self, rng):
        with pytest.raises(KeyError):
            synth_listener_scores(ListenerModel(), "mp3_64k", rng)

    def test_reference_must_be_100(self):
        with pytest.raises(ValueError):
            ListenerModel(true_quality={"hidden_reference": 90.0})

    def test_anchors_below_coded(self):
        q = ListenerModel().true_quality
        coded = [q[s.label] for s in DEFAULT_LADDER[1:]]
        assert q["anchor_7k"] < min(coded[:3]) and q["anchor_3.5k"] < q["anchor_7k"]


class TestCorpus:
    def test_record_count(self, corpus):
        m = read_manifest(corpus)
        assert len(m.records) == 5 * (1 + 2 + 3) * 10
        assert len(m.items()) == 30 and all(len(v) == 10 for v in m.items().values())

    def test_same_seed_byte_identical(self, corpus, tmp_path):
        again = generate_corpus(tmp_path, n_excerpts=5, seed=3)
        assert again.read_bytes() == corpus.read_bytes()
        rel = "audio/ex002_level2.wav"
        assert (tmp_path / rel).read_bytes() == (corpus.parent / rel).read_bytes()

    def test_new_seed_keeps_structure(self, corpus, tmp_path):
        other = read_manifest(generate_corpus(tmp_path, n_excerpts=5, seed=4))
        base = read_manifest(corpus)
        assert list(other.items()) == list(base.items())
        assert [r.score for r in other.records] != [r.score for r in base.records]

    def test_ladder_means_nonincreasing(self, corpus):
        m = read_manifest(corpus)
        order = ["hidden_reference", "level1", "level2", "level3"]
        for ex in m.excerpts():
            means = [np.mean([r.score for r in m.items()[(ex, c)]]) for c in order]
            assert all(b <= a + 2.0 for a, b in zip(means, means[1:]))

    def test_audio_round_trip(self, corpus):
        m = read_manifest(corpus)
        for path in sorted({r.audio_path for r in m.records})[:6]:
            buf = load_wav(m.resolve(path))
            assert buf.samples.shape[0] == 2 and np.all(np.abs(buf.samples) <= 1.0)

    def test_conditions(self):
        names = [c.system_id for c in corpus_conditions(DEFAULT_LADDER)]
        assert names == ["hidden_reference", "anchor_7k", "anchor_3.5k", "level1", "level2", "level3", "level4"]

    def test_needs_two_sources(self, tmp_path):
        with pytest.raises(ValueError):
            generate_corpus(tmp_path, n_excerpts=1)

    def test_explicit_sources(self, tmp_path, rng):
        src = [AudioBuffer(0.1 * rng.standard_normal((2, N))) for _ in range(2)]
        m = read_manifest(generate_corpus(tmp_path, sources=src, ladder=DEFAULT_LADDER[1:2]))
        assert m.excerpts() == ["ex000", "ex001"]
        assert np.allclose(load_wav(m.resolve("audio/ex000_hidden_reference.wav")).samples, src[0].samples, atol=1e-7)
