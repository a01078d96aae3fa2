import numpy as np
import pytest
from conftest import small_config

from rfgml import tensor as T
from rfgml.augment import CutMixConfig
from rfgml.datagen import generate_corpus
from rfgml.distribution import ScoreDistribution, nll
from rfgml.model import FULL_REFERENCE, build_model
from rfgml.training import (
    METRICS_HEADER,
    DatasetManifest,
    FeatureStore,
    ListeningRecord,
    ManifestError,
    TrainConfig,
    TrainingDivergedError,
    _swap,
    apply_normalization,
    batch_loss,
    compute_normalization,
    fit_segments,
    read_manifest,
    score_manifest,
    split_folds,
    train,
    write_manifest,
)

HEADER = "excerpt_id,system_id,listener_id,score,audio_path\n"


def toy_data(n_excerpts=5, per_excerpt=4, seed=0):
    """Items whose score follows the mean level of the input, so a model can fit it."""
    r = np.random.default_rng(seed)
    inputs, scores, groups, keys = [], [], [], []
    for e in range(n_excerpts):
        for s in range(per_excerpt):
            q = r.uniform(10, 90)
            inputs.append(r.standard_normal((1, 4, 8, 16)) + (q - 50) / 20)
            scores.append(q)
            groups.append(f"e{e}")
            keys.append((f"e{e}", f"s{s}"))
    return inputs, np.array(scores), groups, keys


def cfg(**kw):
    base = dict(lr=1e-3, batch=4, epochs_per_fold=1, folds=5, seed=0, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


class TestManifest:
    def _write(self, tmp_path, body, audio=True):
        if audio:
            (tmp_path / "a.wav").write_bytes(b"")
        p = tmp_path / "m.csv"
        p.write_text(body, encoding="utf-8")
        return p

    def test_roundtrip(self, tmp_path):
        p = self._write(tmp_path, HEADER + "e1,hidden_reference,L1,99.5,a.wav\ne1,level1,L1,70,a.wav\n")
        m = read_manifest(p)
        assert len(m.records) == 2 and m.records[0].score == 99.5
        write_manifest(tmp_path / "n.csv", m)
        assert read_manifest(tmp_path / "n.csv").records == m.records

    def test_bad_header(self, tmp_path):
        with pytest.raises(ManifestError, match="header"):
            read_manifest(self._write(tmp_path, "a,b,c,d,e\n"))

    def test_score_range(self, tmp_path):
        with pytest.raises(ManifestError, match="outside"):
            read_manifest(self._write(tmp_path, HEADER + "e1,s,L1,101,a.wav\n"))

    def test_score_not_number(self, tmp_path):
        with pytest.raises(ManifestError, match="not a number"):
            read_manifest(self._write(tmp_path, HEADER + "e1,s,L1,7o,a.wav\n"))

    def test_missing_audio(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            read_manifest(self._write(tmp_path, HEADER + "e1,s,L1,50,b.wav\n"))

    def test_empty(self, tmp_path):
        with pytest.raises(ManifestError):
            read_manifest(self._write(tmp_path, HEADER))

    def test_empty_id(self):
        with pytest.raises(ManifestError):
            ListeningRecord("", "s", "L", 50.0, "a.wav")

    def test_missing_reference(self):
        m = DatasetManifest([ListeningRecord("e", "s", "L", 50.0, "a.wav")])
        with pytest.raises(ManifestError, match="hidden_reference"):
            m.reference_path("e")


class TestFolds:
    def _records(self, n_excerpts, per=3):
        return [ListeningRecord(f"x{e:03d}", "s", f"L{i}", 50.0, "a.wav") for e in range(n_excerpts) for i in range(per)]

    def test_hundred_excerpts(self):
        recs = self._records(100)
        folds = split_folds(recs, 5, seed=1)
        assert [len({recs[i].excerpt_id for i in f}) for f in folds] == [20] * 5
        flat = sorted(i for f in folds for i in f)
        assert flat == list(range(len(recs)))

    def test_grouped_and_balanced(self):
        recs = self._records(23, per=2)
        folds = split_folds(recs, 5, seed=0)
        owner = {}
        for k, f in enumerate(folds):
            for i in f:
                assert owner.setdefault(recs[i].excerpt_id, k) == k
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 2  # one excerpt of two records

    def test_deterministic(self):
        recs = self._records(12)
        assert split_folds(recs, 4, seed=5) == split_folds(recs, 4, seed=5)
        assert split_folds(recs, 4, seed=5) != split_folds(recs, 4, seed=6)

    def test_errors(self):
        with pytest.raises(ValueError):
            split_folds(self._records(3), 5)
        with pytest.raises(ValueError):
            split_folds(self._records(10), 1)
        with pytest.raises(ValueError):
            TrainConfig(folds=1)


class TestNormalization:
    def test_standardizes(self, rng):
        x = rng.normal(3.0, 5.0, (10, 4, 6, 20))
        mean, std = compute_normalization(x)
        y = apply_normalization(x, mean, std)
        assert np.all(np.abs(y.mean(axis=(0, 3))) <= 1e-6)
        assert np.all(np.abs(y.std(axis=(0, 3)) - 1.0) <= 1e-3)

    def test_constant_band(self, rng):
        x = rng.standard_normal((3, 4, 6, 20))
        x[:, 2, 3, :] = 7.0
        mean, std = compute_normalization(x)
        assert std[2, 3] == 1e-6
        assert np.all(apply_normalization(x, mean, std)[:, 2, 3] == 0.0)

    def test_order_independent(self, rng):
        x = rng.standard_normal((8, 4, 6, 10))
        m1, s1 = compute_normalization(x)
        m2, s2 = compute_normalization(x[::-1])
        assert np.allclose(m1, m2, atol=1e-14) and np.allclose(s1, s2, atol=1e-14)

    def test_fit_uses_given_segments(self):
        inputs, scores, groups, keys = toy_data()
        norm = np.random.default_rng(3).standard_normal((6, 4, 8, 16))
        res = fit_segments(build_model(small_config(), seed=0), inputs, scores, groups, keys, cfg(lr=0.0), norm)
        assert np.array_equal(res.model.norm_mean, compute_normalization(norm)[0])


class TestSwap:
    def test_swaps_lr_only(self, rng):
        x = rng.standard_normal((2, 8, 4, 5))
        y = _swap(x)
        assert np.array_equal(y[:, [0, 1, 2, 3, 4, 5, 6, 7]], x[:, [1, 0, 2, 3, 5, 4, 6, 7]])
        assert np.array_equal(_swap(y), x)

    def test_labels_preserved(self):
        # each swapped unit reuses its source item's index, hence its score
        inputs, scores, groups, keys = toy_data()
        log = []
        fit_segments(build_model(small_config(), seed=0), inputs, scores, groups, keys,
                     cfg(lr=0.0, cutmix=CutMixConfig(enabled=False)), access_log=log)
        per_fold = {}
        for fold, idx in log:
            per_fold.setdefault(fold, []).extend(idx)
        for idx in per_fold.values():
            counts = np.bincount(idx)
            assert set(counts[counts > 0]) == {2}


class TestLoop:
    def test_no_validation_access(self):
        inputs, scores, groups, keys = toy_data()
        log = []
        fit_segments(build_model(small_config(), seed=0), inputs, scores, groups, keys, cfg(), access_log=log)
        fold_of = {}
        for fold, idx in log:
            for i in idx:
                fold_of.setdefault(groups[i], set()).add(fold)
        # every excerpt is visited in exactly four of the five rotations: all but its own
        assert all(len(f) == 4 for f in fold_of.values())
        assert len({f for fs in fold_of.values() for f in fs}) == 5
        held = {g: ({0, 1, 2, 3, 4} - f).pop() for g, f in fold_of.items()}
        assert sorted(held.values()) == [0, 1, 2, 3, 4]

    def test_lr_zero_is_pure_evaluation(self):
        inputs, scores, groups, keys = toy_data()
        m = build_model(small_config(), seed=0, dtype=np.float64)
        before = {k: v.copy() for k, v in m.state().items()}
        res = fit_segments(m, inputs, scores, groups, keys,
                           cfg(lr=0.0, epochs_per_fold=2, cutmix=CutMixConfig(enabled=False)))
        after = res.model.state()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)
        for fold in range(5):
            rows = [r for r in res.log if r["fold"] == fold]
            assert rows[0]["val_nll"] == rows[1]["val_nll"]
            assert rows[0]["train_nll"] == pytest.approx(rows[1]["train_nll"], rel=1e-12)

    def test_input_model_untouched(self):
        inputs, scores, groups, keys = toy_data()
        m = build_model(small_config(), seed=0, dtype=np.float64)
        snap = {k: v.copy() for k, v in m.state().items()}
        fit_segments(m, inputs, scores, groups, keys, cfg())
        assert all(np.array_equal(snap[k], v) for k, v in m.state().items())

    def test_overfit_probe(self):
        inputs, scores, groups, keys = toy_data(n_excerpts=5, per_excerpt=4, seed=2)
        config = cfg(lr=3e-3, batch=8, epochs_per_fold=10, swap_lr_augment=False, cutmix=CutMixConfig(enabled=False))
        # 16 training items per fold, 2 batches per epoch, 50 epochs: 100 steps; then 100 more
        res = fit_segments(build_model(small_config(), seed=0), inputs, scores, groups, keys, config)
        res2 = fit_segments(res.model, inputs, scores, groups, keys, config)
        steps = 2 * len(res.log) + 2 * len(res2.log)
        assert steps == 200
        assert res2.log[-1]["train_nll"] < res.log[0]["train_nll"]

    def test_deterministic(self):
        inputs, scores, groups, keys = toy_data()
        a = fit_segments(build_model(small_config(), seed=0), inputs, scores, groups, keys, cfg())
        b = fit_segments(build_model(small_config(), seed=0), inputs, scores, groups, keys, cfg())
        assert a.metrics_csv() == b.metrics_csv()
        assert all(a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes() for k in a.model.params)

    def test_frozen_params_unchanged(self):
        inputs, scores, groups, keys = toy_data()
        donor = build_model(small_config(FULL_REFERENCE), seed=1)
        m = build_model(small_config(), "degF", donor=donor, seed=2)
        res = fit_segments(m, inputs, scores, groups, keys, cfg())
        for name in m.frozen:
            assert np.array_equal(res.model.params[name].data, m.params[name].data.astype(np.float64))
        moved = [k for k in m.params if k not in m.frozen
                 and not np.array_equal(res.model.params[k].data, m.params[k].data.astype(np.float64))]
        assert moved

    def test_divergence(self):
        inputs, scores, groups, keys = toy_data()
        scores[:] = np.nan
        m = build_model(small_config(), seed=0)
        with pytest.raises(TrainingDivergedError, match="non-finite") as info:
            fit_segments(m, inputs, scores, groups, keys, cfg(batch=40, cutmix=CutMixConfig(enabled=False)))
        # one batch per epoch and it diverged: the returned weights are the epoch-start (initial) ones
        got = info.value.model
        assert all(np.array_equal(got.params[k].data, m.params[k].data.astype(np.float64)) for k in m.params)

    def test_loss_matches_oracle(self, rng):
        m = build_model(small_config(), seed=3, dtype=np.float64)
        m.norm_mean, m.norm_std = compute_normalization(rng.standard_normal((4, 4, 8, 16)))
        for _ in range(5):
            x = rng.standard_normal((8, 4, 8, 16))
            y = rng.uniform(0, 100, 8)
            loss = float(batch_loss(m, x, y).data)
            mu, la = m.forward_tensor(m.normalize(x))
            oracle = np.mean([nll(ScoreDistribution(a, b), s) for a, b, s in zip(mu.data, la.data, y)])
            assert abs(loss - oracle) <= 1e-9

    def test_metrics_csv(self):
        inputs, scores, groups, keys = toy_data()
        res = fit_segments(build_model(small_config(), seed=0), inputs, scores, groups, keys, cfg(epochs_per_fold=2))
        lines = res.metrics_csv().splitlines()
        assert lines[0] == ",".join(METRICS_HEADER) and len(lines) == 11
        assert [int(line.split(",")[0]) for line in lines[1:]] == list(range(1, 11))
        assert res.model.metadata["cutmix_prob"] == 0.5

    def test_length_mismatch(self):
        inputs, scores, groups, keys = toy_data()
        with pytest.raises(ValueError):
            fit_segments(build_model(small_config(), seed=0), inputs, scores[:-1], groups, keys, cfg())


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return read_manifest(generate_corpus(tmp_path_factory.mktemp("c"), n_excerpts=5, seed=0, ladder=[]))


class TestOnCorpus:
    def test_train_and_score(self, manifest):
        small = small_config(bands=64, frames=240)
        store = FeatureStore(manifest)
        log = []
        res = train(build_model(small, seed=0), manifest, cfg(batch=8), store=store, access_log=log)
        assert len(res.log) == 5 and all(np.isfinite(r["train_nll"]) for r in res.log)
        assert len(log) > 0
        scores = score_manifest(res.model, manifest, store)
        assert len(scores) == 15
        assert all(s.subjective_ci[0] <= s.subjective_mean <= s.subjective_ci[1] for s in scores)

    def test_full_reference_inputs(self, manifest):
        store = FeatureStore(manifest)
        rec = next(r for r in manifest.records if r.system_id == "anchor_7k")
        x = store.model_input(rec, FULL_REFERENCE)
        ref = store.segments(manifest.reference_path(rec.excerpt_id))
        assert x.shape[1] == 8 and np.array_equal(x[:, :4], ref[: len(x)])
