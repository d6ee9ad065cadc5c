import numpy as np
import pytest

from viewgrasp.density import Bandwidth, KernelSet
from viewgrasp.geometry import random_quats


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_kernel_set(rng, n=20, dim_r=2, spread=0.05, bw=None, normalized=True):
    bw = bw or Bandwidth(0.01, 8.0, 0.5)
    w = rng.random(n) + 0.1
    if normalized:
        w = w / w.sum()
    return KernelSet(rng.normal(scale=spread, size=(n, 3)), random_quats(rng, n), rng.normal(size=(n, dim_r)), w, bw)


@pytest.fixture(scope="session")
def pinch():
    """Single-view box pinch: (demo, scene, hand, merged store)."""
    from viewgrasp.hand import default_hand
    from viewgrasp.pipeline import merge, train
    from viewgrasp.store import Params
    from viewgrasp.synthetic import box_pinch_demo

    demo, scene = box_pinch_demo()
    hand = default_hand()
    store = train([demo], hand, Params(h1=2000))
    merge(store)
    return demo, scene, hand, store


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
