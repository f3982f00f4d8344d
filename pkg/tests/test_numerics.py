import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from mpmath import mp, mpf

from suan import numerics as nx
from suan.numerics import Param, Tape, Tensor

mp.dps = 40


def mp_sigmoid(x):
    return 1 / (1 + mp.e ** (-mpf(x)))


# --- rms_norm ---------------------------------------------------------------

def test_rms_norm_ones():
    y = nx.rms_norm(Tensor(np.ones(4)), Tensor(np.ones(4)), eps=0.0)
    np.testing.assert_array_equal(y.data, np.ones(4))


def test_rms_norm_zero_vector():
    y = nx.rms_norm(Tensor(np.zeros(2)), Tensor(np.ones(2)), eps=1e-8)
    np.testing.assert_array_equal(y.data, np.zeros(2))


def test_rms_norm_three_four():
    rms = mp.sqrt((mpf(9) + 16) / 2)
    expected = [float(3 / rms), float(4 / rms)]
    assert expected[0] == pytest.approx(0.848528137423857, abs=1e-12)
    y = nx.rms_norm(Tensor([3.0, 4.0]), Tensor(np.ones(2)), eps=0.0)
    np.testing.assert_allclose(y.data, expected, rtol=1e-14)


def test_rms_norm_shape_mismatch():
    with pytest.raises(ValueError):
        nx.rms_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


# --- masked_softmax -----------------------------------------------------------

def test_masked_softmax_examples():
    y = nx.masked_softmax(Tensor([0.0, 0.0]), np.array([True, True]))
    np.testing.assert_allclose(y.data, [0.5, 0.5])
    y = nx.masked_softmax(Tensor([1.0, 2.0, 3.0]), np.array([False, False, True]))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 1.0])
    y = nx.masked_softmax(Tensor([1.0, 2.0]), np.array([True, True]))
    np.testing.assert_allclose(y.data, [float(mp_sigmoid(-1)), float(mp_sigmoid(1))], rtol=1e-14)
    assert y.data[0] == pytest.approx(0.268941421369995, abs=1e-12)


def test_masked_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError):
        nx.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))


@st.composite
def logits_and_mask(draw):
    rows = draw(st.integers(1, 6))
    cols = draw(st.integers(1, 8))
    logits = draw(hnp.arrays(np.float64, (rows, cols),
                             elements=st.floats(-50, 50, allow_nan=False)))
    mask = draw(hnp.arrays(np.bool_, (rows, cols)))
    keep = draw(st.lists(st.integers(0, cols - 1), min_size=rows, max_size=rows))
    mask[np.arange(rows), keep] = True
    return logits, mask


@given(logits_and_mask())
def test_masked_softmax_rows_normalized(case):
    logits, mask = case
    p = nx.masked_softmax(Tensor(logits), mask).data
    assert np.all(p[~mask] == 0.0)
    assert np.all(p[mask] > 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


# --- activations ----------------------------------------------------------------

def test_activation_values():
    assert nx.swish(Tensor(0.0)).item() == 0.0
    assert nx.relu(Tensor(-1.0)).item() == 0.0
    assert nx.sigmoid(Tensor(0.0)).item() == 0.5
    assert nx.sigmoid(Tensor(2.0)).item() == pytest.approx(float(mp_sigmoid(2)), rel=1e-14)
    assert nx.sigmoid(Tensor(2.0)).item() == pytest.approx(0.880797077977882, abs=1e-12)
    assert nx.swish(Tensor(1.0)).item() == pytest.approx(float(mp_sigmoid(1)), rel=1e-14)


def test_sigmoid_clamped():
    s = nx.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert 0.0 < s[0] and s[1] < 1.0


# --- dice --------------------------------------------------------------------

def test_dice_centered_input():
    stats = nx.DiceStats(1)
    alpha = Tensor([0.3])
    x = Tensor([[0.7]])
    stats.mean[:] = 0.7
    y = nx.dice(x, alpha, stats, train_mode=False)
    assert y.data[0, 0] == pytest.approx(0.5 * 0.7 * 1.3, rel=1e-14)


@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(-10, 10)))
def test_dice_identity_when_alpha_one(x):
    stats = nx.DiceStats(3)
    y = nx.dice(Tensor(x), Tensor(np.ones(3)), stats, train_mode=True)
    np.testing.assert_allclose(y.data, x, atol=1e-12)


def test_dice_batch_example():
    stats = nx.DiceStats(1, eps=0.0)
    y = nx.dice(Tensor([[-1.0], [1.0]]), Tensor([0.0]), stats, train_mode=True)
    np.testing.assert_allclose(y.data[:, 0], [-float(mp_sigmoid(-1)), float(mp_sigmoid(1))], rtol=1e-14)


def test_dice_running_stats_update():
    stats = nx.DiceStats(1)
    nx.dice(Tensor([[1.0], [3.0]]), Tensor([0.0]), stats, train_mode=True)
    assert stats.mean[0] == pytest.approx(2.0) and stats.var[0] == pytest.approx(1.0)
    nx.dice(Tensor([[5.0], [9.0]]), Tensor([0.0]), stats, train_mode=True)
    w = np.array([0.99 * 0.01, 0.01]) / (1 - 0.99 ** 2)
    assert stats.mean[0] == pytest.approx(w @ [2.0, 7.0], rel=1e-12)
    assert stats.var[0] == pytest.approx(w @ [1.0, 4.0], rel=1e-12)


def test_dice_train_needs_batch():
    with pytest.raises(ValueError):
        nx.dice(Tensor([[1.0]]), Tensor([0.0]), nx.DiceStats(1), train_mode=True)


# --- bce ------------------------------------------------------------------------

def mp_bce(p, t):
    return -(t * mp.log(p) + (1 - t) * mp.log(1 - p))


def test_bce_values():
    assert nx.bce(Tensor(0.5), 1.0).item() == pytest.approx(math.log(2), rel=1e-15)
    # 0.7311 / 0.8808 are sigmoid(1) / sigmoid(2) rounded for display
    p, t = mp_sigmoid(1), mp_sigmoid(2)
    expected = float(mp_bce(p, t))
    assert expected == pytest.approx(0.4324646, abs=1e-7)
    assert nx.bce(Tensor(float(p)), float(t)).item() == pytest.approx(expected, rel=1e-13)
    rounded = float(mp_bce(mpf("0.7311"), mpf("0.8808")))
    assert nx.bce(Tensor(0.7311), 0.8808).item() == pytest.approx(rounded, rel=1e-13)


def test_bce_soft_target_agreement():
    z = Param(np.array([0.4]))
    with Tape() as tape:
        q = nx.scalar_sigmoid(0.4)
        loss = nx.bce(nx.sigmoid(z), q).sum()
    nx.backward(tape, loss)
    entropy = -(q * math.log(q) + (1 - q) * math.log(1 - q))
    assert loss.item() == pytest.approx(entropy, rel=1e-14)
    assert abs(z.grad[0]) < 1e-15


def test_bce_is_finite_at_extremes():
    assert np.isfinite(nx.bce(Tensor([0.0, 1.0]), [1.0, 0.0]).data).all()


# --- backward -----------------------------------------------------------------

def test_backward_sum():
    x = Param(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        loss = x.sum()
    nx.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Param(np.array(3.0))
    with Tape() as tape:
        loss = x * x
    nx.backward(tape, loss)
    assert x.grad == 6.0


def test_backward_before_forward():
    x = Param(np.array(3.0))
    loss = x * x  # not recorded
    with pytest.raises(RuntimeError):
        nx.backward(Tape(), loss)


def test_backward_non_scalar():
    x = Param(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        nx.backward(tape, y)


def test_no_recording_outside_tape():
    x = Param(np.ones(3))
    y = x * 2.0
    assert not y.requires_grad and y.parents == ()


KERNELS = {
    "rms_norm": lambda x, w: nx.rms_norm(x, w[0]),
    "layer_norm": lambda x, w: nx.layer_norm(x, w[0], w[1]),
    "softmax": lambda x, w: nx.masked_softmax(x @ w[2], np.tril(np.ones((4, 4), bool))[None]),
    "swish": lambda x, w: nx.swish(x) * w[0],
    "sigmoid": lambda x, w: nx.sigmoid(x) * w[0],
    "relu": lambda x, w: nx.relu(x + 0.05) * w[0],
    "dice": lambda x, w: nx.dice(x.reshape(12, 4), w[0], nx.DiceStats(4), True),
    "bce": lambda x, w: nx.bce(nx.sigmoid(x), np.full((3, 4, 4), 0.3)),
    "matmul_concat": lambda x, w: nx.concat([x @ w[2], x], axis=-1),
    "embedding": lambda x, w: nx.embedding(w[2], np.array([[0, 3], [3, 1]])) * x[0, :2],
    "getitem": lambda x, w: x[:, [0, 2]] * x[:, [1, 1]],
    "div_sqrt_exp_log": lambda x, w: nx.log(nx.exp(x) + 1.0) / nx.sqrt(w[0] * w[0] + 1.0),
}


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernel_gradients_match_finite_differences(name):
    rng = np.random.default_rng(0)
    x = Param(rng.normal(size=(3, 4, 4)))
    ws = [Param(rng.normal(size=4) + 1.0), Param(rng.normal(size=4)), Param(rng.normal(size=(4, 4)))]
    proj = rng.normal(size=KERNELS[name](x, ws).shape)
    fn = lambda: float((KERNELS[name](x, ws).data * proj).sum())
    with Tape() as tape:
        loss = (KERNELS[name](x, ws) * proj).sum()
    nx.backward(tape, loss)
    for p in [x] + ws:
        for flat in range(0, p.data.size, 3):
            idx = np.unravel_index(flat, p.shape)
            fd = nx.finite_difference(fn, p, idx)
            assert nx.relative_error(p.grad[idx], fd, floor=1e-6) < 1e-4, (name, idx)


def test_kernels_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4, 4))
    ws = [Tensor(np.ones(4)), Tensor(np.zeros(4)), Tensor(np.eye(4))]
    for fn in KERNELS.values():
        a = fn(Tensor(x), ws).data
        b = fn(Tensor(x), ws).data
        assert a.tobytes() == b.tobytes()


# --- adam --------------------------------------------------------------------

def test_adam_zero_gradient_and_zero_lr():
    p = Param(np.array([1.5, -2.0]))
    nx.adam_step([p], 1e-3, 0.9, 0.999, 1e-8, 1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    p.grad[:] = 3.0
    nx.adam_step([p], 0.0, 0.9, 0.999, 1e-8, 2)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    np.testing.assert_array_equal(p.grad, 0.0)


def test_adam_first_step():
    p = Param(np.array([0.0]))
    p.grad[:] = 1.0
    nx.adam_step([p], 1e-3, 0.9, 0.999, 1e-8, 1)
    # m_hat = v_hat = 1
    assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_step_index():
    with pytest.raises(ValueError):
        nx.adam_step([], 1e-3, 0.9, 0.999, 1e-8, 0)
