"""Hybrid SNN-ANN optical-flow networks: EV-FlowNet-style U-Net and FireFlowNet.

Every activated layer independently uses LIF, ReLU or ConvRNN dynamics,
chosen by a :class:`HybridConfig`. Inputs are fed one [2, H, W] event bin
per timestep; the full-scale flow is the sum of the per-timestep
full-resolution predictions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BNTTState, Tensor
from .neurons import ConvRNNCell, LIFParams, MembraneState, SurrogateSpec, convrnn_step, he_uniform, lif_step

LIF, RELU, CONVRNN = "LIF", "ReLU", "ConvRNN"
SIZES = {"base": 64, "mini": 32, "micro": 16}
FIRE_LAYER_NAMES = ("L1", "L2", "R1", "R2", "L3")


class InvalidHybridConfig(ValueError):
    pass


class UnsupportedFamily(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    kind: str  # encoder | residual | decoder | flow_head | plain_conv
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    activation: str = RELU
    convs: int = 1  # residual blocks only


@dataclass
class NetworkSpec:
    family: str = "evflownet"
    k: int = 16
    T: int = 5
    fire_channels: int = 32
    in_channels: int = 2
    bntt: bool = True
    v_th_init: float = 1.0
    leak_init: float = 0.9
    reset_mode: str = "hard"
    # explicit sequential layer list (fireflownet family only); None = standard topology
    layers: list | None = None

    def layer_specs(self) -> list[LayerSpec]:
        """Activated layers in forward order (flow heads excluded)."""
        if self.family == "evflownet":
            k = self.k
            if k % 2:
                raise ValueError("evflownet base width k must be even")
            enc = [LayerSpec(f"enc{i + 1}", "encoder", c_in, c_out, 3, 2)
                   for i, (c_in, c_out) in enumerate(zip([self.in_channels, k, 2 * k, 4 * k], [k, 2 * k, 4 * k, 8 * k]))]
            res = [LayerSpec(f"res{i + 1}", "residual", 8 * k, 8 * k, 3, 1, convs=2) for i in range(2)]
            dec_in = [16 * k, 8 * k + 2, 4 * k + 2, 2 * k + 2]
            dec_out = [4 * k, 2 * k, k, k // 2]
            dec = [LayerSpec(f"dec{i + 1}", "decoder", c_in, c_out, 4, 2)
                   for i, (c_in, c_out) in enumerate(zip(dec_in, dec_out))]
            return enc + res + dec
        if self.family == "fireflownet":
            if self.layers is not None:
                return [LayerSpec(**l) if isinstance(l, dict) else l for l in self.layers
                        if (l["kind"] if isinstance(l, dict) else l.kind) != "flow_head"]
            c = self.fire_channels
            return [
                LayerSpec("L1", "plain_conv", self.in_channels, c, 3, 1),
                LayerSpec("L2", "plain_conv", c, c, 3, 1),
                LayerSpec("R1", "residual", c, c, 3, 1, convs=1),
                LayerSpec("R2", "residual", c, c, 3, 1, convs=1),
                LayerSpec("L3", "plain_conv", c, c, 3, 1),
            ]
        raise UnsupportedFamily(f"unknown network family {self.family!r}")

    def head_specs(self) -> list[LayerSpec]:
        layers = self.layer_specs()
        if self.family == "evflownet":
            return [LayerSpec(f"flow{i + 1}", "flow_head", l.out_ch, 2, 1, 1, activation="none")
                    for i, l in enumerate(layers[6:])]
        return [LayerSpec("flow", "flow_head", layers[-1].out_ch, 2, 1, 1, activation="none")]


@dataclass(frozen=True)
class HybridConfig:
    """Which activated layers are LIF (and, for the RNN baseline, ConvRNN); the rest are ReLU."""

    spiking_layer_indices: frozenset = field(default_factory=frozenset)
    convrnn_layer_indices: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "spiking_layer_indices", frozenset(int(i) for i in self.spiking_layer_indices))
        object.__setattr__(self, "convrnn_layer_indices", frozenset(int(i) for i in self.convrnn_layer_indices))

    @classmethod
    def full_ann(cls) -> "HybridConfig":
        return cls()

    @classmethod
    def first_layer(cls) -> "HybridConfig":
        return cls(frozenset({0}))

    @classmethod
    def full_snn(cls, spec: NetworkSpec) -> "HybridConfig":
        return cls(frozenset(range(len(spec.layer_specs()))))

    @classmethod
    def rnn_first(cls) -> "HybridConfig":
        return cls(frozenset(), frozenset({0}))

    @classmethod
    def parse(cls, text: str, spec: NetworkSpec) -> "HybridConfig":
        """Parse ``first``, ``none``, ``all``, ``rnn`` or comma-separated indices/layer names."""
        text = text.strip().lower()
        if text in ("first", "hybrid"):
            return cls.first_layer()
        if text in ("none", "ann", "full-ann", ""):
            return cls.full_ann()
        if text in ("all", "snn", "full-snn"):
            return cls.full_snn(spec)
        if text in ("rnn", "convrnn"):
            return cls.rnn_first()
        names = [l.name.lower() for l in spec.layer_specs()]
        idx = set()
        for tok in text.split(","):
            tok = tok.strip()
            if tok.isdigit():
                idx.add(int(tok))
            elif tok in names:
                idx.add(names.index(tok))
            else:
                raise InvalidHybridConfig(f"cannot interpret spiking layer {tok!r}")
        return cls(frozenset(idx))

    def label(self, spec: NetworkSpec) -> str:
        n = len(spec.layer_specs())
        if self.convrnn_layer_indices:
            return "rnn-" + "+".join(str(i) for i in sorted(self.convrnn_layer_indices))
        if not self.spiking_layer_indices:
            return "full-ann"
        if len(self.spiking_layer_indices) == n:
            return "full-snn"
        if self.spiking_layer_indices == {0}:
            return "hybrid"
        names = [l.name for l in spec.layer_specs()]
        return "spiking-" + "+".join(names[i] for i in sorted(self.spiking_layer_indices))

    def activation(self, index: int) -> str:
        if index in self.convrnn_layer_indices:
            return CONVRNN
        if index in self.spiking_layer_indices:
            return LIF
        return RELU


# ---------------------------------------------------------------- execution state / trace


@dataclass
class ConvActivity:
    """Static shape facts and per-timestep activity of one convolution in the net."""

    name: str
    layer: str
    transposed: bool
    in_shape: tuple  # per sample [C, H, W]
    out_shape: tuple
    kernel: int
    weight_count: int
    spiking_input: bool
    spiking_output: bool
    has_membrane: bool
    input_nonzero: list = field(default_factory=list)  # fraction per timestep
    output_nonzero: list = field(default_factory=list)

    @property
    def dense_ops(self) -> int:
        """Synaptic operations per timestep per sample with every input active."""
        cin, hin, win = self.in_shape
        cout, hout, wout = self.out_shape
        if self.transposed:
            return hin * win * cin * cout * self.kernel * self.kernel
        return hout * wout * cout * cin * self.kernel * self.kernel


@dataclass
class ActivationTrace:
    convs: list = field(default_factory=list)
    spike_counts: dict = field(default_factory=dict)  # layer -> list per timestep
    element_counts: dict = field(default_factory=dict)  # layer -> neurons per sample
    timesteps: int = 0
    batch: int = 0

    def conv(self, name: str) -> ConvActivity:
        for c in self.convs:
            if c.name == name:
                return c
        raise KeyError(name)


@dataclass
class ForwardResult:
    flow: Tensor  # [N, 2, H, W] accumulated over timesteps
    multiscale: list  # per timestep, list of flow Tensors coarse -> fine
    trace: ActivationTrace


class _RunState:
    def __init__(self, net: "Network", mode: str, surrogate: SurrogateSpec, trace: bool):
        self.mode = mode
        self.surrogate = surrogate
        self.memory: dict = {}
        self.trace = ActivationTrace() if trace else None
        self.net = net
        self.lif_values: dict = {}

    def lif(self, layer: "_Layer"):
        if layer.name not in self.lif_values:
            self.lif_values[layer.name] = layer.lif.values()
        return self.lif_values[layer.name]


def _nonzero_fraction(x: np.ndarray) -> float:
    return float(np.count_nonzero(x)) / x.size if x.size else 0.0


def skip_connect(encoder_out: Tensor, decoder_in: Tensor, coarse_flow: Tensor | None = None) -> Tensor:
    """Channel-concatenate ``decoder_in``, the matching encoder map, and the coarser flow if any."""
    parts = [decoder_in, encoder_out] + ([coarse_flow] if coarse_flow is not None else [])
    ref = decoder_in.shape
    for p in parts:
        if p.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ad.ShapeMismatch(f"skip connection needs matching [N, *, H, W]; got {p.shape} vs {ref}")
    return ad.concat(parts, axis=1)


class _Layer:
    """One activated layer: conv (or transposed conv / residual pair / ConvRNN) + BNTT + activation."""

    def __init__(self, spec: LayerSpec, index: int, net_spec: NetworkSpec, seed: int, dtype):
        self.spec = spec
        self.name = spec.name
        self.index = index
        self.activation = spec.activation
        rng = np.random.default_rng([seed, index])
        self.params: dict[str, Tensor] = {}
        self.bns: list[BNTTState] = []
        self.weights: list[Tensor] = []
        self.biases: list[Tensor | None] = []
        self.lif: LIFParams | None = None
        self.rnn: ConvRNNCell | None = None
        transposed = spec.kind == "decoder"
        if self.activation == CONVRNN and spec.kind not in ("encoder", "plain_conv"):
            raise InvalidHybridConfig(f"ConvRNN is only supported on encoder/plain layers, not {spec.name}")
        n_convs = spec.convs if spec.kind == "residual" else 1
        for j in range(n_convs):
            c_in = spec.in_ch if j == 0 else spec.out_ch
            if transposed:
                shape = (c_in, spec.out_ch, spec.kernel, spec.kernel)
                fan_in = c_in * spec.kernel * spec.kernel // (spec.stride * spec.stride)
            else:
                shape = (spec.out_ch, c_in, spec.kernel, spec.kernel)
                fan_in = None
            w = Tensor(he_uniform(rng, shape, dtype, fan_in), True, f"{self.name}.conv{j}.weight")
            self.weights.append(w)
            self.params[w.name] = w
            if net_spec.bntt:
                bn = BNTTState.create(spec.out_ch, net_spec.T, dtype, f"{self.name}.bn{j}")
                self.bns.append(bn)
                for p in bn.parameters():
                    self.params[p.name] = p
                self.biases.append(None)
            else:
                b = Tensor(np.zeros(spec.out_ch, dtype), True, f"{self.name}.conv{j}.bias")
                self.biases.append(b)
                self.params[b.name] = b
        if self.activation == LIF:
            self.lif = LIFParams.create(net_spec.v_th_init, net_spec.leak_init, net_spec.reset_mode,
                                        dtype, f"{self.name}.lif")
            for p in self.lif.parameters():
                self.params[p.name] = p
        elif self.activation == CONVRNN:
            rrng = np.random.default_rng([seed, index, 1])
            self.rnn = ConvRNNCell(
                w_x=self.weights[0],
                w_h=Tensor(he_uniform(rrng, (spec.out_ch, spec.out_ch, 3, 3), dtype), True, f"{self.name}.rnn.w_h"),
                w_o=Tensor(he_uniform(rrng, (spec.out_ch, spec.out_ch, 1, 1), dtype), True, f"{self.name}.rnn.w_o"),
                b_o=Tensor(np.zeros(spec.out_ch, dtype), True, f"{self.name}.rnn.b_o"),
                b_x=self.biases[0],
                stride=spec.stride,
            )
            for p in (self.rnn.w_h, self.rnn.w_o, self.rnn.b_o):
                self.params[p.name] = p

    # -------------------------------------------------------------- helpers

    def _conv(self, j: int, x: Tensor, t: int, run: _RunState) -> Tensor:
        spec = self.spec
        w = self.weights[j]
        stride = spec.stride if j == 0 else 1
        if spec.kind == "decoder":
            y = ad.conv_transpose2d(x, w, self.biases[j], stride, (spec.kernel - stride) // 2)
        else:
            y = ad.conv2d(x, w, self.biases[j], stride, spec.kernel // 2)
        if self.bns:
            y = ad.bntt_forward(y, t, self.bns[j], run.mode)
        return y

    def _activate(self, slot: str, x: Tensor, run: _RunState) -> Tensor:
        if self.activation == RELU:
            return ad.relu(x)
        key = (self.name, slot)
        state = run.memory.get(key) or MembraneState.zeros(x.shape, x.dtype)
        v_th, leak = run.lif(self)
        state, spikes, _ = lif_step(state, x, v_th, leak, self.lif.reset_mode, run.surrogate)
        run.memory[key] = state
        return spikes

    def _log(self, run: _RunState, j: int, x: Tensor, y: Tensor, t: int, spiking_input: bool,
             out_activation: str, suffix: str = ""):
        if run.trace is None:
            return
        name = f"{self.name}.conv{j}{suffix}"
        tr = run.trace
        try:
            rec = tr.conv(name)
        except KeyError:
            w = self.weights[j] if not suffix else (self.rnn.w_h if suffix == ".h" else self.rnn.w_o)
            rec = ConvActivity(
                name=name, layer=self.name,
                transposed=self.spec.kind == "decoder" and not suffix,
                in_shape=tuple(x.shape[1:]), out_shape=tuple(y.shape[1:]),
                kernel=w.shape[-1], weight_count=int(w.data.size),
                spiking_input=spiking_input,
                spiking_output=out_activation == LIF,
                has_membrane=out_activation in (LIF, CONVRNN) and suffix == "",
            )
            tr.convs.append(rec)
        rec.input_nonzero.append(_nonzero_fraction(x.data))
        rec.output_nonzero.append(_nonzero_fraction(y.data))

    def _count_spikes(self, run: _RunState, out: Tensor, t: int):
        if run.trace is None:
            return
        tr = run.trace
        counts = tr.spike_counts.setdefault(self.name, [])
        if len(counts) <= t:
            counts.append(0)
        if self.activation == LIF:
            counts[t] += int(out.data.sum())
        tr.element_counts[self.name] = tr.element_counts.get(self.name, 0)
        tr.element_counts[self.name] = max(tr.element_counts[self.name], int(np.prod(out.shape[1:])))

    # -------------------------------------------------------------- forward

    def __call__(self, x: Tensor, t: int, run: _RunState, spiking_input: bool) -> Tensor:
        if self.activation == CONVRNN:
            h_prev = run.memory.get((self.name, "h"))
            bn = self.bns[0] if self.bns else None
            h, out = convrnn_step(x, h_prev, self.rnn,
                                  (lambda y: ad.bntt_forward(y, t, bn, run.mode)) if bn else None)
            run.memory[(self.name, "h")] = h
            if run.trace is not None:
                self._log(run, 0, x, h, t, spiking_input, CONVRNN)
                if h_prev is not None:
                    self._log(run, 0, h_prev, h, t, False, "", ".h")
                else:
                    self._log(run, 0, Tensor(np.zeros_like(h.data)), h, t, False, "", ".h")
                self._log(run, 0, h, out, t, False, "", ".o")
            self._count_spikes(run, out, t)
            return out
        if self.spec.kind == "residual":
            if self.spec.convs == 2:
                a = self._activate("a", self._conv(0, x, t, run), run)
                self._log(run, 0, x, a, t, spiking_input, self.activation)
                b = self._conv(1, a, t, run)
                out = self._activate("b", b + x, run)
                self._log(run, 1, a, out, t, self.activation == LIF, self.activation)
            else:
                out = self._activate("a", self._conv(0, x, t, run) + x, run)
                self._log(run, 0, x, out, t, spiking_input, self.activation)
        else:
            out = self._activate("a", self._conv(0, x, t, run), run)
            self._log(run, 0, x, out, t, spiking_input, self.activation)
        self._count_spikes(run, out, t)
        return out


class _Head:
    def __init__(self, spec: LayerSpec, index: int, seed: int, dtype):
        self.spec = spec
        self.name = spec.name
        rng = np.random.default_rng([seed, 1000 + index])
        self.weight = Tensor(he_uniform(rng, (2, spec.in_ch, 1, 1), dtype) * 0.1, True, f"{self.name}.weight")
        self.bias = Tensor(np.zeros(2, dtype), True, f"{self.name}.bias")

    def __call__(self, x: Tensor, run: _RunState, spiking_input: bool) -> Tensor:
        y = ad.conv2d(x, self.weight, self.bias)
        if run.trace is not None:
            name = f"{self.name}.conv"
            try:
                rec = run.trace.conv(name)
            except KeyError:
                rec = ConvActivity(name, self.name, False, tuple(x.shape[1:]), tuple(y.shape[1:]), 1,
                                   int(self.weight.data.size), spiking_input, False, False)
                run.trace.convs.append(rec)
            rec.input_nonzero.append(_nonzero_fraction(x.data))
            rec.output_nonzero.append(_nonzero_fraction(y.data))
        return y


class Network:
    """An executable hybrid network; parameters are created deterministically from ``seed``."""

    def __init__(self, spec: NetworkSpec, hybrid: HybridConfig, seed: int = 0, dtype=ad.DEFAULT_DTYPE):
        layer_specs = spec.layer_specs()
        n = len(layer_specs)
        bad = [i for i in hybrid.spiking_layer_indices | hybrid.convrnn_layer_indices if not 0 <= i < n]
        if bad:
            raise InvalidHybridConfig(f"layer indices {sorted(bad)} outside [0, {n})")
        if hybrid.spiking_layer_indices & hybrid.convrnn_layer_indices:
            raise InvalidHybridConfig("a layer cannot be both LIF and ConvRNN")
        if spec.T < 1:
            raise ValueError("T must be at least 1")
        self.spec = spec
        self.hybrid = hybrid
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.layers = []
        for i, ls in enumerate(layer_specs):
            ls = LayerSpec(**{**asdict(ls), "activation": hybrid.activation(i)})
            self.layers.append(_Layer(ls, i, spec, seed, self.dtype))
        self.heads = [_Head(hs, i, seed, self.dtype) for i, hs in enumerate(spec.head_specs())]

    # -------------------------------------------------------------- parameters

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.params)
        for head in self.heads:
            out[head.weight.name] = head.weight
            out[head.bias.name] = head.bias
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            for j, bn in enumerate(layer.bns):
                for t in range(bn.timesteps):
                    out[f"{layer.name}.bn{j}.running_mean{t}"] = bn.running_mean[t]
                    out[f"{layer.name}.bn{j}.running_var{t}"] = bn.running_var[t]
        return out

    def load_buffers(self, values: dict) -> None:
        for layer in self.layers:
            for j, bn in enumerate(layer.bns):
                for t in range(bn.timesteps):
                    bn.running_mean[t] = np.array(values[f"{layer.name}.bn{j}.running_mean{t}"], self.dtype)
                    bn.running_var[t] = np.array(values[f"{layer.name}.bn{j}.running_var{t}"], self.dtype)

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def describe(self) -> dict:
        return {
            "family": self.spec.family, "k": self.spec.k, "T": self.spec.T,
            "fire_channels": self.spec.fire_channels,
            "spiking": sorted(self.hybrid.spiking_layer_indices),
            "convrnn": sorted(self.hybrid.convrnn_layer_indices),
            "seed": self.seed, "bntt": self.spec.bntt, "reset_mode": self.spec.reset_mode,
        }

    # -------------------------------------------------------------- forward

    def forward_sequence(self, events, mode: str = "train", surrogate: SurrogateSpec = SurrogateSpec(),
                         trace: bool = True) -> ForwardResult:
        """Run all timesteps of ``events`` ([T, 2, H, W] or [N, T, 2, H, W])."""
        x = np.asarray(events.data if isinstance(events, Tensor) else events)
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5 or x.shape[2] != self.spec.in_channels:
            raise ad.ShapeMismatch(f"expected [N, T, {self.spec.in_channels}, H, W], got {x.shape}")
        if x.shape[1] != self.spec.T:
            raise ad.ShapeMismatch(f"input has {x.shape[1]} timesteps, network expects {self.spec.T}")
        if self.spec.family == "evflownet" and (x.shape[3] % 16 or x.shape[4] % 16):
            raise ad.ShapeMismatch("evflownet input height and width must be multiples of 16")
        x = x.astype(self.dtype, copy=False)
        run = _RunState(self, mode, surrogate, trace)
        if run.trace is not None:
            run.trace.timesteps, run.trace.batch = x.shape[1], x.shape[0]
        total = None
        multiscale = []
        for t in range(self.spec.T):
            xt = Tensor(x[:, t])
            if self.spec.family == "evflownet":
                flows = self._evflownet_step(xt, t, run)
            else:
                flows = self._sequential_step(xt, t, run)
            multiscale.append(flows)
            total = flows[-1] if total is None else total + flows[-1]
        return ForwardResult(total, multiscale, run.trace)

    def _sequential_step(self, x: Tensor, t: int, run: _RunState) -> list:
        spiking = False
        for layer in self.layers:
            x = layer(x, t, run, spiking)
            spiking = layer.activation == LIF
        return [self.heads[0](x, run, spiking)]

    def _evflownet_step(self, x: Tensor, t: int, run: _RunState) -> list:
        skips = []
        spiking = False
        kinds = []
        for layer in self.layers[:4]:
            x = layer(x, t, run, spiking)
            spiking = layer.activation == LIF
            skips.append(x)
            kinds.append(spiking)
        for layer in self.layers[4:6]:
            x = layer(x, t, run, spiking)
            spiking = layer.activation == LIF
        flows = []
        flow = None
        for i, layer in enumerate(self.layers[6:]):
            enc = 3 - i
            cat = skip_connect(skips[enc], x, flow)
            x = layer(cat, t, run, spiking and kinds[enc])
            spiking = layer.activation == LIF
            flow = self.heads[i](x, run, spiking)
            flows.append(flow)
        return flows

    __call__ = forward_sequence


def build_network(spec: NetworkSpec, hybrid: HybridConfig, seed: int = 0, dtype=ad.DEFAULT_DTYPE) -> Network:
    return Network(spec, hybrid, seed, dtype)


# ---------------------------------------------------------------- description files


def save_description(path, spec: NetworkSpec, hybrid: HybridConfig, seed: int) -> None:
    doc = {
        "family": spec.family, "k": spec.k, "T": spec.T, "fire_channels": spec.fire_channels,
        "bntt": spec.bntt, "reset_mode": spec.reset_mode,
        "v_th_init": spec.v_th_init, "leak_init": spec.leak_init,
        "spiking": sorted(hybrid.spiking_layer_indices),
        "convrnn": sorted(hybrid.convrnn_layer_indices),
        "seed": seed,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_description(path) -> tuple[NetworkSpec, HybridConfig, int]:
    with open(path) as f:
        doc = json.load(f)
    return description_from_dict(doc)


def description_from_dict(doc: dict) -> tuple[NetworkSpec, HybridConfig, int]:
    known = {"family", "k", "T", "fire_channels", "bntt", "reset_mode", "v_th_init", "leak_init",
             "spiking", "convrnn", "seed", "in_channels"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown network description keys: {sorted(unknown)}")
    spec_kw = {k: doc[k] for k in ("family", "k", "T", "fire_channels", "bntt", "reset_mode",
                                   "v_th_init", "leak_init", "in_channels") if k in doc}
    spec = NetworkSpec(**spec_kw)
    spiking = doc.get("spiking", [])
    if isinstance(spiking, str):
        hybrid = HybridConfig.parse(spiking, spec)
        hybrid = HybridConfig(hybrid.spiking_layer_indices, frozenset(doc.get("convrnn", [])) or hybrid.convrnn_layer_indices)
    else:
        hybrid = HybridConfig(frozenset(spiking), frozenset(doc.get("convrnn", [])))
    return spec, hybrid, int(doc.get("seed", 0))
