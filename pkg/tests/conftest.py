import numpy as np
import pytest

from rfgml.model import REFERENCE_FREE, ModelConfig, inception_a, inception_b, inception_c


def small_blocks():
    return [inception_a(2), inception_a(2), inception_b(4), inception_c(4)]


def small_config(variant=REFERENCE_FREE, **kw):
    """Narrow network for fast tests; ``bands``/``frames`` default to 8/16."""
    kw.setdefault("bands", 8)
    kw.setdefault("frames", 16)
    kw.setdefault("blocks", small_blocks())
    kw.setdefault("fc_widths", (8, 4))
    return ModelConfig(variant=variant, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
