import numpy as np
import pytest

from fairprune.autodiff import Tensor
from fairprune.formulations import CEAG, EL, DualState, Formulation, ViolationVector
from fairprune.optim import (
    DualConfig,
    LrSchedule,
    MomentumState,
    SgdConfig,
    dual_ascent_step,
    lr_at_epoch,
    milestone_epochs,
    sgd_step,
)


def param(v):
    p = Tensor(np.array(v, float), requires_grad=True)
    return p


def test_plain_step():
    p = param([1.0])
    p.grad = np.array([0.5])
    sgd_step([p], [None], MomentumState(), SgdConfig(0.1, 0.0, False, 0.0), 0.1)
    assert p.values[0] == pytest.approx(0.95, abs=1e-15)


def test_zero_grad_fixed_point():
    p = param([1.0, -2.0])
    p.grad = np.zeros(2)
    sgd_step([p], [None], MomentumState(), SgdConfig(0.1, 0.9, False, 0.0), 0.1)
    np.testing.assert_array_equal(p.values, [1.0, -2.0])


def test_pruned_entry_stays_zero():
    p = param([[0.0, 1.0]])
    p.grad = np.array([[3.0, 1.0]])
    sgd_step([p], [np.array([[0.0, 1.0]])], MomentumState(), SgdConfig(), 0.1)
    assert p.values[0, 0] == 0.0


def test_momentum_and_nesterov_reference():
    g1, g2, lr, beta, wd = np.array([0.5]), np.array([-0.2]), 0.1, 0.9, 0.01
    for nesterov in (False, True):
        p = param([1.0])
        state = MomentumState()
        theta, m = 1.0, 0.0
        for g in (g1, g2):
            p.grad = g.copy()
            sgd_step([p], [None], state, SgdConfig(lr, beta, nesterov, wd), lr)
            d = g[0] + wd * theta
            m = beta * m + d
            theta -= lr * (d + beta * m if nesterov else m)
        assert p.values[0] == pytest.approx(theta, abs=1e-15)
        assert state.buffers[0].shape == p.shape


def test_shape_mismatch():
    p = param([1.0, 2.0])
    p.grad = np.zeros(3)
    with pytest.raises(ValueError):
        sgd_step([p], [None], MomentumState(), SgdConfig(), 0.1)


@pytest.mark.parametrize("epoch,lr", [(35, 0.01), (36, 0.001), (47, 0.001), (48, 1e-4), (54, 1e-5)])
def test_milestones(epoch, lr):
    assert lr_at_epoch(LrSchedule(0.01), epoch, 60) == pytest.approx(lr, rel=1e-12)


def test_lr_non_increasing():
    s = LrSchedule(0.05, (0.3, 0.6, 0.9), 0.5)
    lrs = [lr_at_epoch(s, e, 100) for e in range(100)]
    assert lrs == sorted(lrs, reverse=True)
    assert milestone_epochs(LrSchedule(), 60) == [36, 48, 54]


def test_dual_ascent_examples():
    d = DualState(np.array([0.0]))
    dual_ascent_step(d, ViolationVector(np.array([-0.11])), DualConfig(1.0), Formulation(CEAG))
    assert d.multipliers[0] == 0.0
    d = DualState(np.array([0.5]))
    dual_ascent_step(d, ViolationVector(np.array([0.02])), DualConfig(0.1), Formulation(CEAG))
    assert d.multipliers[0] == pytest.approx(0.502, abs=1e-15)
    d = DualState(np.array([0.0]), equality=True)
    dual_ascent_step(d, ViolationVector(np.array([-0.1])), DualConfig(1.0), Formulation(EL))
    assert d.multipliers[0] == -0.1


def test_dual_dimension_mismatch():
    with pytest.raises(ValueError):
        dual_ascent_step(DualState(np.zeros(2)), ViolationVector(np.zeros(3)), DualConfig(), Formulation(CEAG))
