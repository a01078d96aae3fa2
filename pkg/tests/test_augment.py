import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfgml.augment import CutMixConfig, cut_box, cutmix, sample_beta


class TestBeta:
    def test_moments(self):
        rng = np.random.default_rng(0)
        lam = np.array([sample_beta(0.7, rng) for _ in range(100_000)])
        assert abs(lam.mean() - 0.5) <= 0.01
        assert lam.var() == pytest.approx(1.0 / (4.0 * (2 * 0.7 + 1.0)), rel=0.05)
        assert np.all((lam > 0) & (lam < 1))

    def test_deterministic(self):
        a = [sample_beta(0.7, np.random.default_rng(5)) for _ in range(3)]
        assert a[0] == a[1] == a[2]

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ValueError):
            sample_beta(alpha, np.random.default_rng(0))
        with pytest.raises(ValueError):
            CutMixConfig(alpha=alpha)

    def test_bad_prob(self):
        with pytest.raises(ValueError):
            CutMixConfig(prob=1.5)


class TestCutMix:
    def test_lambda_one_identity(self, rng):
        a, b = rng.standard_normal((2, 4, 8, 16))
        out, y, lam = cutmix(a, 80.0, b, 40.0, 1.0, rng)
        assert np.array_equal(out, a) and y == 80.0 and lam == 1.0

    def test_label_arithmetic(self, rng):
        a, b = rng.standard_normal((2, 4, 8, 8))
        # 4x8 box on an 8x8 plane leaves exactly 0.5 of A; pick a box giving 0.25
        out, y, lam = cutmix(a, 80.0, b, 40.0, 0.25, box=(0, 8, 0, 6))
        assert lam == 0.25 and y == pytest.approx(0.25 * 80 + 0.75 * 40)
        assert y == pytest.approx(50.0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            cutmix(np.zeros((4, 8, 8)), 1.0, np.zeros((4, 8, 9)), 1.0, 0.5, rng)

    def test_lambda_range(self, rng):
        with pytest.raises(ValueError):
            cutmix(np.zeros((4, 8, 8)), 1.0, np.zeros((4, 8, 8)), 1.0, 1.2, rng)

    @settings(max_examples=200, deadline=None)
    @given(lam=st.floats(0.0, 1.0), seed=st.integers(0, 2**31), bands=st.integers(1, 40), frames=st.integers(1, 60))
    def test_geometry(self, lam, seed, bands, frames):
        r = np.random.default_rng(seed)
        a = r.standard_normal((4, bands, frames))
        b = a + 1000.0
        out, y, lam_r = cutmix(a, 90.0, b, 10.0, lam, r)
        from_b = out > 500.0
        # every cell comes from A or B, and all planes share one rectangle
        assert np.all(np.where(from_b, out == b, out == a))
        assert np.all(from_b == from_b[0])
        assert 1.0 - from_b[0].mean() == pytest.approx(lam_r, abs=1e-12)
        assert y == pytest.approx(lam_r * 90.0 + (1 - lam_r) * 10.0, abs=1e-9)
        if lam < 1.0:
            rows, cols = np.nonzero(from_b[0])
            h, w = rows.max() - rows.min() + 1, cols.max() - cols.min() + 1
            assert h * w == from_b[0].sum()
            side = np.sqrt(1.0 - lam)
            assert abs(h - side * bands) <= 1.0 and abs(w - side * frames) <= 1.0

    def test_mirrored_symmetry(self, rng):
        a, b = rng.standard_normal((2, 4, 8, 8))
        _, y1, l1 = cutmix(a, 70.0, b, 20.0, 0.25, box=(0, 8, 0, 6))
        _, y2, l2 = cutmix(b, 20.0, a, 70.0, 0.75, box=(0, 8, 6, 8))
        assert l1 == 1 - l2
        assert y1 == pytest.approx(y2, abs=1e-12)

    def test_box_contained(self, rng):
        for lam in np.linspace(0, 1, 21):
            f0, f1, t0, t1 = cut_box((7, 13), lam, rng)
            assert 0 <= f0 < f1 <= 7 and 0 <= t0 < t1 <= 13
