import math

import numpy as np
import pytest

from flyt.model import DownstreamSet, Pool, ReferenceParams


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_clip(u, v, tau):
    """Double-loop symmetric contrastive loss."""
    b = len(u)
    total = 0.0
    for i in range(b):
        row = [tau * float(np.dot(u[i], v[j])) for j in range(b)]
        col = [tau * float(np.dot(u[j], v[i])) for j in range(b)]
        total += -math.log(math.exp(row[i]) / sum(math.exp(r) for r in row))
        total += -math.log(math.exp(col[i]) / sum(math.exp(c) for c in col))
    return total / 2


def brute_weighted_clip(u, v, w, tau):
    b = len(u)
    total = 0.0
    for i in range(b):
        if w[i] == 0:
            continue
        row = sum(w[j] * math.exp(tau * float(np.dot(u[i], v[j]))) for j in range(b))
        col = sum(w[j] * math.exp(tau * float(np.dot(u[j], v[i]))) for j in range(b))
        num = w[i] * math.exp(tau * float(np.dot(u[i], v[i])))
        total += -w[i] * math.log(num / row) - w[i] * math.log(num / col)
    return total / 2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_setup():
    r = np.random.default_rng(5)
    theta = ReferenceParams.init(4, 3, seed=3)
    pool = Pool(tuple(f"p{i}" for i in range(6)), r.standard_normal((6, 4)), r.standard_normal((6, 4)))
    ds = DownstreamSet(r.standard_normal((5, 4)), np.array([0, 1, 2, 1, 0]),
                       tuple(r.standard_normal((2, 4)) for _ in range(3)))
    return theta, pool, ds


def pytest_terminal_summary(terminalreporter):
    import sys

    scen = sys.modules.get("scenarios")
    if scen is None or not scen.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(scen.ACCEPTANCE):
        terminalreporter.write_line(line)
