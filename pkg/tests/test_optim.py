import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flyt.exceptions import InvalidInputError
from flyt.optim import OptimizerSpec, adamw_update, apply_update, sgd_update


def straight_line_adamw(theta, grads, lr, b1, b2, eps, wd):
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            theta[i] = theta[i] - lr * (mh / (math.sqrt(vh) + eps) + wd * theta[i])
    return theta


def test_sgd_examples():
    np.testing.assert_allclose(sgd_update([1.0, 2.0], [0.5, -1.0], 0.1), [0.95, 2.1], atol=1e-15)
    np.testing.assert_array_equal(sgd_update([1.0, 2.0], [0.0, 0.0], 0.1), [1.0, 2.0])
    np.testing.assert_array_equal(sgd_update([1.0, 2.0], [3.0, 4.0], 0.0), [1.0, 2.0])


def test_adamw_first_step():
    spec = OptimizerSpec("adamw", 0.1, 0.9, 0.98, 1e-8, 0.2)
    theta, nxt = adamw_update(np.array([1.0]), np.array([1.0]), spec)
    expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.2)
    assert theta[0] == pytest.approx(expected, abs=1e-15)
    assert theta[0] == pytest.approx(0.88, abs=1e-8)
    assert nxt.step == 1 and spec.step == 0 and spec.exp_avg is None


def test_adamw_zero_gradient_fixed_point():
    spec = OptimizerSpec("adamw", 0.1, weight_decay=0.0)
    theta, _ = adamw_update(np.array([1.5, -2.0]), np.zeros(2), spec)
    np.testing.assert_array_equal(theta, [1.5, -2.0])


def test_adamw_matches_straight_line(rng):
    theta0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    spec = OptimizerSpec("adamw", 0.05, 0.9, 0.98, 1e-8, 0.2)
    theta = theta0
    for g in grads:
        theta, spec = adamw_update(theta, g, spec)
    np.testing.assert_allclose(theta, straight_line_adamw(theta0, grads, 0.05, 0.9, 0.98, 1e-8, 0.2), atol=1e-12)
    assert spec.step == 3


def test_learning_rate_override():
    spec = OptimizerSpec("sgd", 1.0)
    theta, nxt = apply_update(np.array([1.0]), np.array([1.0]), spec, learning_rate=0.25)
    assert theta[0] == 0.75 and nxt.step == 1


def test_adamw_differentiable_through_gradient():
    g = torch.tensor([0.3, -0.2], dtype=torch.float64, requires_grad=True)
    spec = OptimizerSpec("adamw", 0.1, exp_avg=np.array([0.1, 0.0]), exp_avg_sq=np.array([0.02, 0.03]), step=2)
    theta = torch.tensor([1.0, 2.0], dtype=torch.float64)
    out, _ = adamw_update(theta, g, spec)
    (jac,) = torch.autograd.grad(out.sum(), g)

    def f(gv):
        return adamw_update(theta.numpy(), gv, spec)[0].sum()

    h = 1e-6
    fd = [(f(g.detach().numpy() + h * e) - f(g.detach().numpy() - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(jac.numpy(), fd, rtol=1e-7)


def test_adamw_safe_at_zero_second_moment():
    g = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    out, _ = adamw_update(torch.ones(2, dtype=torch.float64), g, OptimizerSpec("adamw", 0.1))
    (jac,) = torch.autograd.grad(out.sum(), g)
    assert torch.isfinite(jac).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.sampled_from(["sgd", "adamw"]))
def test_updates_are_pure(n, seed, kind):
    r = np.random.default_rng(seed)
    theta, g = r.standard_normal(n), r.standard_normal(n)
    spec = OptimizerSpec(kind, 0.01)
    a = apply_update(theta.copy(), g.copy(), spec)
    b = apply_update(theta.copy(), g.copy(), spec)
    np.testing.assert_array_equal(a[0], b[0])
    assert spec.step == 0 and spec.exp_avg is None


def test_invalid_specs():
    with pytest.raises(InvalidInputError):
        OptimizerSpec("lion")
    with pytest.raises(InvalidInputError):
        OptimizerSpec("adamw", beta1=1.0)
    with pytest.raises(InvalidInputError):
        OptimizerSpec("adamw", exp_avg=np.zeros(2))
    with pytest.raises(InvalidInputError):
        sgd_update(np.zeros(2), np.zeros(3), 0.1)
