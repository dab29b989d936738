import sys
from pathlib import Path
from typing import Optional

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from lib.batching import BatchSpec, build_batch
from lib.datasets import make_two_moons, select_labeled
from lib.networks import MlpSpec, init_model_state, toy_feature_specs


def small_similarity_spec(latent_dim: int, hidden: int = 6) -> MlpSpec:
    return MlpSpec(
        widths=[2 * latent_dim, hidden, 2],
        activations=["leaky_relu", "identity"],
        head="softmax",
    )


@pytest.fixture
def moons():
    """40-point two moons with 6 labels."""
    return select_labeled(make_two_moons(40, 0.1, seed=3), 6, seed=3)


@pytest.fixture
def small_state():
    """Feature net 2 -> 4 -> 2 and a 8 -> 6 -> 2 similarity net, with a shadow that differs from alpha."""
    g, h = toy_feature_specs(2, 4, 2)
    state = init_model_state(g, h, small_similarity_spec(4), seed=11)
    rng = np.random.default_rng(5)
    for key, arr in state.alpha_ema.items():
        arr += 0.1 * rng.standard_normal(arr.shape)
    for key, arr in state.theta.items():
        if key.endswith(".b"):
            arr += 0.05 * rng.standard_normal(arr.shape)
    return state


@pytest.fixture
def mini_batch(moons):
    """|B1|=4, |B2|=2, |B3|=2."""
    return build_batch(moons, BatchSpec(4, 2), aug_sigma=0.05, rng=np.random.default_rng(21))


def finite_difference_check(loss_fn, params, grads, rng=None, entries: Optional[int] = 4, h: float = 1e-5):
    """Largest relative error between analytic grads and central differences.

    ``entries`` random entries per array are checked; ``None`` checks every entry.
    """
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if entries is None:
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        for i in picks:
            original = flat[i]
            flat[i] = original + h
            up = loss_fn()
            flat[i] = original - h
            down = loss_fn()
            flat[i] = original
            numeric = (up - down) / (2 * h)
            analytic = grads[name].reshape(-1)[i]
            scale = max(abs(numeric), abs(analytic), 1e-3)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst
