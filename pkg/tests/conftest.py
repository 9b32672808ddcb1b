import numpy as np
import pytest

from longtail_lab import synthdata
from longtail_lab.synthdata import SynthConfig

SMALL = SynthConfig(
    num_foreground=12,
    feature_dim=8,
    zipf_exponent=2.3,
    min_count=5,
    max_count=1500,
    proposals_per_image=8,
    bg_fraction=0.5,
    eval_per_class=4,
    seed=3,
)


def numeric_grad(f, z, eps=1e-5):
    """Central finite differences of a scalar function of an array."""
    z = np.array(z, dtype=np.float64)
    g = np.zeros_like(z)
    it = np.nditer(z, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        zp, zm = z.copy(), z.copy()
        zp[i] += eps
        zm[i] -= eps
        g[i] = (f(zp) - f(zm)) / (2 * eps)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="session")
def small_dataset():
    return synthdata.generate(SMALL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
