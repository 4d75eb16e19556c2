"""Time-stepped activation cells: LIF (surrogate-gradient trainable), ReLU, ConvRNN."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

THRESHOLD_FLOOR = 1e-3


class NonPositiveThreshold(ValueError):
    pass


class MissingForwardState(ValueError):
    pass


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "triangular"
    width: float = 1.0
    # forward uses the integrated triangle instead of a hard step (gradient checks only)
    smooth_forward: bool = False

    def __post_init__(self):
        if self.kind != "triangular":
            raise ValueError(f"unsupported surrogate {self.kind!r}")
        if self.width <= 0:
            raise ValueError("surrogate width must be positive")

    def derivative(self, z: np.ndarray) -> np.ndarray:
        return np.maximum(0.0, 1.0 - np.abs(z) / self.width) / self.width


def reparam_threshold_leak(raw_threshold, raw_leak, floor: float = THRESHOLD_FLOOR):
    """Map unconstrained raw parameters to ``(v_th > 0, leak in [0, 1])``."""
    v_th = ad.softplus(ad.as_tensor(raw_threshold)) + floor
    leak = ad.sigmoid(ad.as_tensor(raw_leak))
    return v_th, leak


def raw_from_values(v_th: float, leak: float, floor: float = THRESHOLD_FLOOR) -> tuple[float, float]:
    if v_th <= floor:
        raise NonPositiveThreshold(f"threshold {v_th} must exceed the floor {floor}")
    leak = min(max(leak, 1e-6), 1 - 1e-6)
    return math.log(math.expm1(v_th - floor)), math.log(leak / (1 - leak))


@dataclass
class LIFParams:
    """Trainable per-layer threshold and leak, stored unconstrained."""

    raw_threshold: Tensor
    raw_leak: Tensor
    reset_mode: str = "hard"

    @classmethod
    def create(cls, v_th: float = 1.0, leak: float = 0.9, reset_mode: str = "hard",
               dtype=ad.DEFAULT_DTYPE, name: str = "lif") -> "LIFParams":
        if reset_mode not in ("hard", "soft"):
            raise ValueError(f"reset_mode must be 'hard' or 'soft', got {reset_mode!r}")
        rv, rl = raw_from_values(v_th, leak)
        return cls(Tensor(np.array(rv, dtype), True, f"{name}.raw_threshold"),
                   Tensor(np.array(rl, dtype), True, f"{name}.raw_leak"), reset_mode)

    def values(self):
        return reparam_threshold_leak(self.raw_threshold, self.raw_leak)

    def parameters(self) -> list:
        return [self.raw_threshold, self.raw_leak]


@dataclass
class MembraneState:
    u: Tensor
    o_prev: Tensor

    @classmethod
    def zeros(cls, shape, dtype=ad.DEFAULT_DTYPE) -> "MembraneState":
        return cls(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))


@dataclass
class LIFSaved:
    """Forward values of one LIF step, enough to differentiate it by hand."""

    u_prev: np.ndarray
    u: np.ndarray
    z: np.ndarray
    o: np.ndarray
    v_th: float
    leak: float
    reset_mode: str = "hard"


def lif_step(state: MembraneState, weighted_input, v_th, leak, reset_mode: str = "hard",
             surrogate: SurrogateSpec = SurrogateSpec()):
    """Advance a layer of LIF neurons by one timestep.

    ``state.u`` is the potential carried from the previous step, already
    reset, so ``u = leak * state.u + weighted_input``. Spikes are emitted
    where ``u / v_th - 1 > 0``; the carried potential then drops to zero
    (hard reset) or by ``v_th`` (soft reset). ``v_th`` and ``leak`` may be
    plain floats or scalar tensors produced by :func:`reparam_threshold_leak`.
    """
    x = ad.as_tensor(weighted_input)
    if state.u.shape != x.shape:
        raise ad.ShapeMismatch(f"membrane {state.u.shape} vs input {x.shape}")
    if not isinstance(v_th, Tensor):
        if v_th <= 0:
            raise NonPositiveThreshold(f"threshold must be positive, got {v_th}")
        v_th = Tensor(np.asarray(v_th, x.dtype))
    elif np.any(v_th.data <= 0):
        raise NonPositiveThreshold("threshold must be positive")
    leak = ad.as_tensor(leak if isinstance(leak, Tensor) else np.asarray(leak, x.dtype))
    u = leak * state.u + x
    z = u / v_th - 1.0
    o = ad.heaviside(z, surrogate.width, surrogate.smooth_forward)
    if reset_mode == "hard":
        carry = u * (1.0 - o)
    elif reset_mode == "soft":
        carry = u - v_th * o
    else:
        raise ValueError(f"unknown reset mode {reset_mode!r}")
    return MembraneState(carry, o), o, z


def lif_backward(saved: LIFSaved | None, grad_spike, grad_carry=None,
                 surrogate: SurrogateSpec = SurrogateSpec()) -> dict:
    """Hand-derived gradients of one LIF step.

    Given upstream gradients for the emitted spikes and for the carried
    potential, returns gradients for the weighted input, the previous
    carried potential, and the (layer-shared) leak and threshold.
    """
    if saved is None:
        raise MissingForwardState("lif_backward needs the saved forward values")
    grad_spike = np.asarray(grad_spike, dtype=np.float64)
    grad_carry = np.zeros_like(grad_spike) if grad_carry is None else np.asarray(grad_carry, np.float64)
    u, o, v = saved.u, saved.o, saved.v_th
    sg = surrogate.derivative(saved.z)
    if saved.reset_mode == "hard":
        g_o = grad_spike - grad_carry * u
        g_z = g_o * sg
        g_u = grad_carry * (1 - o) + g_z / v
        g_v = -(g_z * u / v**2).sum()
    else:
        g_o = grad_spike - grad_carry * v
        g_z = g_o * sg
        g_u = grad_carry + g_z / v
        g_v = -(g_z * u / v**2).sum() - (grad_carry * o).sum()
    return {
        "input": g_u,
        "u_prev": g_u * saved.leak,
        "leak": (g_u * saved.u_prev).sum(),
        "v_th": g_v,
    }


# ---------------------------------------------------------------- ConvRNN


@dataclass
class ConvRNNCell:
    """h_t = tanh(conv_x(x_t) + conv_h(h_{t-1})); out_t = conv_o(h_t)."""

    w_x: Tensor
    w_h: Tensor
    w_o: Tensor
    b_o: Tensor
    b_x: Tensor | None = None
    stride: int = 1

    @classmethod
    def create(cls, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
               rng: np.random.Generator | None = None, dtype=ad.DEFAULT_DTYPE,
               name: str = "rnn", input_bias: bool = False) -> "ConvRNNCell":
        rng = rng or np.random.default_rng(0)
        return cls(
            w_x=Tensor(he_uniform(rng, (out_ch, in_ch, kernel, kernel), dtype), True, f"{name}.w_x"),
            w_h=Tensor(he_uniform(rng, (out_ch, out_ch, 3, 3), dtype), True, f"{name}.w_h"),
            w_o=Tensor(he_uniform(rng, (out_ch, out_ch, 1, 1), dtype), True, f"{name}.w_o"),
            b_o=Tensor(np.zeros(out_ch, dtype), True, f"{name}.b_o"),
            b_x=Tensor(np.zeros(out_ch, dtype), True, f"{name}.b_x") if input_bias else None,
            stride=stride,
        )

    def parameters(self) -> list:
        ps = [self.w_x, self.w_h, self.w_o, self.b_o]
        return ps + ([self.b_x] if self.b_x is not None else [])


def convrnn_step(x_t, h_prev, cell: ConvRNNCell, input_transform=None):
    """One ConvRNN step. ``input_transform`` (e.g. BNTT) is applied to conv_x's output."""
    x_t = ad.as_tensor(x_t)
    pre = ad.conv2d(x_t, cell.w_x, cell.b_x, cell.stride, cell.w_x.shape[-1] // 2)
    if input_transform is not None:
        pre = input_transform(pre)
    if h_prev is not None:
        if h_prev.shape != pre.shape:
            raise ad.ShapeMismatch(f"hidden state {h_prev.shape} vs input path {pre.shape}")
        pre = pre + ad.conv2d(h_prev, cell.w_h, None, 1, 1)
    h = ad.tanh(pre)
    out = ad.conv2d(h, cell.w_o, cell.b_o, 1, 0)
    return h, out


def he_uniform(rng: np.random.Generator, shape, dtype=ad.DEFAULT_DTYPE, fan_in: int | None = None):
    """Fan-in scaled uniform init, bound sqrt(6 / fan_in)."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
