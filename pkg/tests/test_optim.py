import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aidetect.nn.layers import Param, ShapeMismatch
from aidetect.nn.optim import Adam, LinearSchedule, OptimState, adam_step, lr_at

from oracles import adam_reference


def test_first_step_moves_by_lr():
    p = np.array([1.0, -2.0, 0.5])
    adam_step(OptimState(lr=1e-3), [p], [np.array([0.3, -4.0, 1e-2])])
    assert np.allclose(np.abs(p - [1.0, -2.0, 0.5]), 1e-3, rtol=1e-5)


def test_zero_gradient_is_a_no_op():
    p = np.array([1.0, 2.0])
    state = OptimState(lr=1e-2)
    for _ in range(5):
        adam_step(state, [p], [np.zeros(2)])
    assert p.tolist() == [1.0, 2.0]


@given(st.integers(0, 10_000), st.sampled_from([0.0, 5e-6, 5e-2]), st.integers(1, 30))
def test_matches_reference(seed, wd, steps):
    rng = np.random.default_rng(seed)
    p0 = rng.standard_normal(4)
    grads = [rng.standard_normal(4) for _ in range(steps)]
    p = p0.copy()
    state = OptimState(lr=1e-2, weight_decay=wd)
    for g in grads:
        adam_step(state, [p], [g])
    assert np.allclose(p, adam_reference(p0, grads, 1e-2, wd), rtol=1e-12, atol=1e-14)
    assert state.step == steps


def test_shape_checks():
    with pytest.raises(ShapeMismatch):
        adam_step(OptimState(lr=1e-3), [np.zeros(2)], [np.zeros(3)])
    with pytest.raises(ShapeMismatch):
        adam_step(OptimState(lr=1e-3), [np.zeros(2)], [])


def test_adam_validates():
    with pytest.raises(ValueError):
        Adam([], lr=0)
    with pytest.raises(ValueError):
        Adam([], lr=1e-3, weight_decay=-1)


def run_engine(seed):
    rng = np.random.default_rng(seed)
    params = [Param(rng.standard_normal((3, 4)).astype(np.float32)), Param(rng.standard_normal(4).astype(np.float32))]
    opt = Adam(params, lr=1e-3, weight_decay=5e-6)
    for _ in range(100):
        for p in params:
            p.grad[...] = rng.standard_normal(p.shape).astype(np.float32)
        opt.step()
    return [p.data for p in params]


def test_bit_identical_after_hundred_steps():
    a, b = run_engine(4), run_engine(4)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert a[0].dtype == np.float32


def test_schedule_examples():
    on = LinearSchedule(1e-3, 45)
    assert lr_at(on, 0) == 1e-3
    assert lr_at(on, 44) == pytest.approx(1e-3 / 45, rel=1e-12)
    off = LinearSchedule(1e-3, 45, enabled=False)
    assert all(lr_at(off, e) == 1e-3 for e in range(45))


@given(st.integers(1, 200), st.data())
def test_schedule_is_linear(total, data):
    e = data.draw(st.integers(0, total - 1))
    assert lr_at(LinearSchedule(0.5, total), e) == pytest.approx(0.5 * (1 - e / total))


def test_schedule_range():
    with pytest.raises(ValueError):
        lr_at(LinearSchedule(1e-3, 10), 10)
    with pytest.raises(ValueError):
        lr_at(LinearSchedule(1e-3, 10), -1)
