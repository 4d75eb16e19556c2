import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridflow import autodiff as ad
from hybridflow.autodiff import Tape, Tensor, backward, numerical_grad
from hybridflow.neurons import (
    ConvRNNCell,
    LIFParams,
    LIFSaved,
    MembraneState,
    NonPositiveThreshold,
    SurrogateSpec,
    MissingForwardState,
    convrnn_step,
    lif_backward,
    lif_step,
    reparam_threshold_leak,
    THRESHOLD_FLOOR,
)


def _step(u_prev, x, v_th, leak, mode="hard"):
    st_ = MembraneState(Tensor(np.asarray(u_prev, float)), Tensor(np.zeros(np.shape(u_prev))))
    new, o, _ = lif_step(st_, Tensor(np.asarray(x, float)), v_th, leak, mode)
    return new.u.data, o.data


def test_spike_and_hard_reset():
    u, o = _step([0.0], [1.5], 1.0, 1.0)
    assert o[0] == 1 and u[0] == 0


def test_sub_threshold_integration():
    u, o = _step([0.5], [0.3], 1.0, 0.9)
    assert o[0] == 0 and np.isclose(u[0], 0.75)


def test_soft_reset_subtracts_threshold():
    u, o = _step([0.2], [1.7], 1.2, 0.5, "soft")
    assert o[0] == 1 and np.isclose(u[0], 0.1 + 1.7 - 1.2)


def test_huge_threshold_is_silent():
    rng = np.random.default_rng(0)
    state = MembraneState.zeros((4, 3), np.float64)
    for _ in range(20):
        state, o, _ = lif_step(state, Tensor(rng.uniform(-5, 5, (4, 3))), 1e9, 0.95)
        assert not o.data.any()


def test_non_positive_threshold():
    with pytest.raises(NonPositiveThreshold):
        _step([0.0], [1.0], 0.0, 0.5)


def test_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        lif_step(MembraneState.zeros((2,)), Tensor(np.zeros(3)), 1.0, 0.5)


def test_reparam_values_and_gradient():
    v, lam = reparam_threshold_leak(Tensor(np.array(-1e4)), Tensor(np.array(0.0)))
    assert lam.item() == 0.5
    assert np.isclose(v.item(), THRESHOLD_FLOOR) and v.item() > 0
    raw = Tensor(np.array(0.0), True)
    with Tape() as tape:
        _, lam = reparam_threshold_leak(Tensor(np.array(0.0)), raw)
    assert np.isclose(backward(tape, lam)[raw], 0.25)


def test_lif_params_roundtrip():
    p = LIFParams.create(v_th=0.8, leak=0.7, dtype=np.float64)
    v, lam = p.values()
    assert np.isclose(v.item(), 0.8) and np.isclose(lam.item(), 0.7)


def test_surrogate_kernel():
    s = SurrogateSpec(width=2.0)
    assert s.derivative(np.array(0.0)) == 0.5
    assert s.derivative(np.array(2.0)) == 0 and s.derivative(np.array(-3.0)) == 0
    assert SurrogateSpec().derivative(np.array(0.0)) == 1.0


def test_surrogate_locality_on_tape():
    z = Tensor(np.array([-1.5, -0.5, 0.0, 0.99, 1.0, 4.0]), True)
    with Tape() as tape:
        o = ad.heaviside(z)
    g = backward(tape, o)[z]
    np.testing.assert_allclose(g, [0, 0.5, 1.0, 0.01, 0, 0], atol=1e-12)


def test_lif_backward_requires_forward_state():
    with pytest.raises(MissingForwardState):
        lif_backward(None, np.ones(2))


@pytest.mark.parametrize("mode", ["hard", "soft"])
def test_lif_backward_matches_tape_single_step(mode):
    rng = np.random.default_rng(1)
    u_prev = rng.uniform(-0.5, 1.0, 6)
    x = rng.uniform(-0.5, 1.5, 6)
    gs, gc = rng.standard_normal(6), rng.standard_normal(6)
    p = LIFParams.create(0.9, 0.8, mode, np.float64)
    up, xt = Tensor(u_prev, True), Tensor(x, True)
    with Tape() as tape:
        v, lam = p.values()
        new, o, z = lif_step(MembraneState(up, Tensor(np.zeros(6))), xt, v, lam, mode)
        loss = ad.sum_all(o * gs) + ad.sum_all(new.u * gc)
    v_val, lam_val = v.item(), lam.item()
    grads = backward(tape, loss)
    hand = lif_backward(LIFSaved(u_prev, lam_val * u_prev + x, z.data, o.data, v_val, lam_val, mode), gs, gc)
    np.testing.assert_allclose(grads[xt], hand["input"], rtol=1e-12)
    np.testing.assert_allclose(grads[up], hand["u_prev"], rtol=1e-12)
    # chain through the reparameterization: d lam / d raw = lam (1 - lam), d v / d raw = sigmoid(raw)
    sig = 1 / (1 + np.exp(-p.raw_threshold.item()))
    assert np.isclose(grads[p.raw_leak], hand["leak"] * lam_val * (1 - lam_val), rtol=1e-10)
    assert np.isclose(grads[p.raw_threshold], hand["v_th"] * sig, rtol=1e-10)


def _hand_unrolled_two_step(W, x1, x2, v, lam, w_out):
    """Symbolic BPTT for o_t = H(u_t / v - 1), u_t = lam * c_{t-1} + W x_t, hard reset,
    loss = w_out . (o_1 + o_2), triangular surrogate of width 1."""
    s = lambda z: np.maximum(0.0, 1 - np.abs(z))
    a1 = W @ x1
    u1 = a1
    z1 = u1 / v - 1
    o1 = (z1 > 0).astype(float)
    c1 = u1 * (1 - o1)
    a2 = W @ x2
    u2 = lam * c1 + a2
    z2 = u2 / v - 1
    o2 = (z2 > 0).astype(float)
    # step 2
    dz2 = w_out * s(z2)
    du2 = dz2 / v
    dv = -(dz2 * u2).sum() / v**2
    dlam = (du2 * c1).sum()
    dW = np.outer(du2, x2)
    dc1 = du2 * lam
    # step 1: o1 feeds the loss and the reset of c1
    do1 = w_out - dc1 * u1
    dz1 = do1 * s(z1)
    du1 = dc1 * (1 - o1) + dz1 / v
    dv += -(dz1 * u1).sum() / v**2
    dW += np.outer(du1, x1)
    return dW, dv, dlam


def test_two_step_two_neuron_bptt_matches_hand_unrolled():
    rng = np.random.default_rng(2)
    for _ in range(50):
        W = rng.uniform(-1, 2, (2, 3))
        x1, x2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        w_out = rng.standard_normal(2)
        v, lam = rng.uniform(0.5, 1.5), rng.uniform(0.1, 0.99)
        Wt, vt, lt = Tensor(W, True), Tensor(np.array(v), True), Tensor(np.array(lam), True)
        with Tape() as tape:
            state = MembraneState.zeros((2,), np.float64)
            total = None
            for x in (x1, x2):
                a = ad.reshape(ad.conv2d(Tensor(x.reshape(1, 3, 1, 1)), ad.reshape(Wt, (2, 3, 1, 1))), (2,))
                state, o, _ = lif_step(state, a, vt, lt)
                total = o if total is None else total + o
            loss = ad.sum_all(total * w_out)
        g = backward(tape, loss)
        dW, dv, dlam = _hand_unrolled_two_step(W, x1, x2, v, lam, w_out)
        np.testing.assert_allclose(g[Wt], dW, rtol=1e-6, atol=1e-12)
        assert np.isclose(g[vt], dv, rtol=1e-6, atol=1e-12)
        assert np.isclose(g[lt], dlam, rtol=1e-6, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), mode=st.sampled_from(["hard", "soft"]),
       v=st.floats(0.05, 3.0), lam=st.floats(0.0, 1.0))
def test_spikes_are_binary(seed, mode, v, lam):
    rng = np.random.default_rng(seed)
    state = MembraneState.zeros((5,), np.float64)
    for _ in range(4):
        state, o, _ = lif_step(state, Tensor(rng.normal(0, 2, 5)), v, lam, mode)
        assert set(np.unique(o.data)) <= {0.0, 1.0}


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), v=st.floats(0.05, 3.0))
def test_zero_leak_is_memoryless(seed, v):
    rng = np.random.default_rng(seed)
    xs = rng.normal(0, 2, (4, 6))
    alt = xs.copy()
    alt[:-1] = rng.normal(0, 2, (3, 6))
    outs = []
    for seq in (xs, alt):
        state = MembraneState.zeros((6,), np.float64)
        for x in seq:
            state, o, _ = lif_step(state, Tensor(x), v, 0.0)
        outs.append(o.data)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_silent_layer_outside_surrogate_support_passes_no_gradient():
    # z = u / v_th - 1 <= -1 for every non-positive potential, so a layer driven
    # only below rest never spikes and sits outside the triangle's support
    rng = np.random.default_rng(3)
    W = Tensor(-np.abs(rng.standard_normal((2, 3, 1, 1))), True)
    with Tape() as tape:
        state = MembraneState.zeros((1, 2, 4, 4), np.float64)
        acc = None
        for _ in range(3):
            a = ad.conv2d(Tensor(rng.uniform(0, 1, (1, 3, 4, 4))), W)
            state, o, z = lif_step(state, a, 0.5, 0.9)
            assert np.all(z.data <= -1)
            acc = o if acc is None else acc + o
        loss = ad.sum_all(acc)
    assert not acc.data.any()
    assert np.all(backward(tape, loss)[W] == 0)


def test_silent_layer_inside_support_still_gets_surrogate_gradient():
    # positive but sub-threshold potentials have |z| < 1: no spikes, yet nonzero gradient
    W = Tensor(np.full((1, 1, 1, 1), 0.5), True)
    with Tape() as tape:
        _, o, _ = lif_step(MembraneState.zeros((1, 1, 1, 1), np.float64),
                           ad.conv2d(Tensor(np.ones((1, 1, 1, 1))), W), 1.0, 0.9)
        loss = ad.sum_all(o)
    assert o.item() == 0
    assert np.isclose(backward(tape, loss)[W].item(), 0.5)


# ---------------------------------------------------------------- ConvRNN


def test_convrnn_zero_weights():
    cell = ConvRNNCell.create(2, 3, dtype=np.float64)
    for w in cell.parameters():
        w.data[...] = 0
    h, out = convrnn_step(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 4, 4))), cell)
    assert not h.data.any() and not out.data.any()


def test_convrnn_zero_state_ignores_recurrent_weights():
    rng = np.random.default_rng(4)
    cell = ConvRNNCell.create(2, 3, rng=rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    h1, _ = convrnn_step(x, Tensor(np.zeros((1, 3, 4, 4))), cell)
    cell.w_h.data[...] = rng.standard_normal(cell.w_h.shape)
    h2, _ = convrnn_step(x, Tensor(np.zeros((1, 3, 4, 4))), cell)
    np.testing.assert_array_equal(h1.data, h2.data)


def test_convrnn_three_step_gradients():
    rng = np.random.default_rng(5)
    cell = ConvRNNCell.create(2, 3, rng=rng, dtype=np.float64, input_bias=True)
    xs = [rng.standard_normal((2, 2, 5, 5)) for _ in range(3)]
    proj = rng.standard_normal((2, 3, 5, 5))

    def build():
        h = None
        total = None
        for x in xs:
            h, out = convrnn_step(Tensor(x), h, cell)
            total = out if total is None else total + out
        return ad.sum_all(total * proj)

    with Tape() as tape:
        loss = build()
    grads = backward(tape, loss)
    for p in cell.parameters():
        num = numerical_grad(lambda: build().item(), p.data)
        assert np.abs(grads[p] - num).max() / np.abs(num).max() < 1e-4, p.name


def test_smoothed_lif_gradients_match_finite_differences():
    """With the integrated-triangle forward, every path (leak, threshold, reset) is smooth."""
    rng = np.random.default_rng(6)
    p = LIFParams.create(0.7, 0.8, "hard", np.float64)
    W = Tensor(rng.standard_normal((3, 2, 1, 1)), True)
    xs = [rng.uniform(0, 1, (2, 2, 3, 3)) for _ in range(3)]
    sur = SurrogateSpec(smooth_forward=True)
    proj = rng.standard_normal((2, 3, 3, 3))

    def build():
        v, lam = p.values()
        state = MembraneState.zeros((2, 3, 3, 3), np.float64)
        acc = None
        for x in xs:
            state, o, _ = lif_step(state, ad.conv2d(Tensor(x), W), v, lam, "hard", sur)
            acc = o if acc is None else acc + o
        return ad.sum_all(acc * proj)

    with Tape() as tape:
        loss = build()
    grads = backward(tape, loss)
    for t in [W, p.raw_threshold, p.raw_leak]:
        num = numerical_grad(lambda: build().item(), t.data, step=1e-5)
        assert np.abs(grads[t] - num).max() / max(np.abs(num).max(), 1e-8) < 1e-4
