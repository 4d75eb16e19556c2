"""Analytical inference-energy model over a two-level (DRAM + global buffer) memory.

Per convolution and per inference (one sample, T timesteps):

* compute: sum_t ops * sparsity_t * e_ac for spike inputs, ops * e_mac otherwise
  (ReLU zeros are not exploited, so analog inputs count as fully dense);
* weights: words * (e_dram + refetch * e_buf), once per timestep when the layer's
  weights exceed the buffer, otherwise once per inference; ``refetch`` is the
  number of activation tiles the layer's input+output working set needs;
* activations: input and output words per timestep at e_buf, plus the part
  of the working set that does not fit in the buffer at e_dram. Spikes move
  as 1-bit values packed 32 per word, analog values as 32-bit words;
* membrane: one read and one write per stateful neuron per timestep. All
  membrane state must persist across timesteps at the same time, so it stays
  in the buffer only when the whole network's state fits, otherwise in DRAM.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field

import numpy as np

WORD_BYTES = 4


class InvalidEnergyTable(ValueError):
    pass


class CapacityZero(InvalidEnergyTable):
    pass


class TraceMissing(ValueError):
    pass


@dataclass(frozen=True)
class EnergyTable:
    e_mac: float = 4.6
    e_ac: float = 0.9
    e_dram: float = 640.0
    e_buf: float = 6.0
    buffer_capacity: int = 108 * 1024

    def validate(self) -> "EnergyTable":
        if self.buffer_capacity <= 0:
            raise CapacityZero("buffer capacity must be positive")
        for name in ("e_mac", "e_ac", "e_dram", "e_buf"):
            if not getattr(self, name) > 0:
                raise InvalidEnergyTable(f"{name} must be positive")
        if not self.e_ac < self.e_mac:
            raise InvalidEnergyTable("accumulate energy must be below multiply-accumulate energy")
        if not self.e_buf < self.e_dram:
            raise InvalidEnergyTable("buffer access energy must be below DRAM access energy")
        return self

    @classmethod
    def from_text(cls, text: str) -> "EnergyTable":
        """Parse ``key = value`` lines; ``#`` starts a comment; missing keys keep defaults."""
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidEnergyTable(f"line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise InvalidEnergyTable(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = int(val) if key == "buffer_capacity" else float(val)
            except ValueError:
                raise InvalidEnergyTable(f"line {lineno}: bad number {val!r}") from None
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path) -> "EnergyTable":
        with open(path) as f:
            return cls.from_text(f.read())


@dataclass
class LayerTrace:
    layer: str
    T: int
    output_elements: int
    input_elements: int
    dense_ops: int  # per timestep
    sparsity: list  # per timestep input nonzero fraction
    is_spiking_input: bool
    spiking_output: bool
    has_membrane: bool
    weight_count: int

    def __post_init__(self):
        if len(self.sparsity) != self.T:
            raise ValueError(f"{self.layer}: {len(self.sparsity)} sparsity values for T={self.T}")
        if any(not 0.0 <= s <= 1.0 for s in self.sparsity):
            raise ValueError(f"{self.layer}: sparsity outside [0, 1]")


@dataclass
class LayerEnergy:
    layer: str
    compute_pJ: float
    weight_pJ: float
    act_pJ: float
    membrane_pJ: float

    @property
    def total_pJ(self) -> float:
        return math.fsum((self.compute_pJ, self.weight_pJ, self.act_pJ, self.membrane_pJ))


@dataclass
class EnergyReport:
    layers: list = field(default_factory=list)
    membrane_in_dram: bool = False

    def component_totals_pJ(self) -> dict:
        return {k: math.fsum(getattr(l, k) for l in self.layers)
                for k in ("compute_pJ", "weight_pJ", "act_pJ", "membrane_pJ")}

    @property
    def total_pJ(self) -> float:
        # one correctly rounded sum over every component, so totals are exact to the last bit
        return math.fsum(v for l in self.layers for v in (l.compute_pJ, l.weight_pJ, l.act_pJ, l.membrane_pJ))

    @property
    def total_mJ(self) -> float:
        return self.total_pJ * 1e-9

    def layer(self, name: str) -> LayerEnergy:
        for l in self.layers:
            if l.layer == name:
                return l
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "compute_pJ", "weight_pJ", "act_pJ", "membrane_pJ"])
        for l in self.layers:
            w.writerow([l.layer, repr(l.compute_pJ), repr(l.weight_pJ), repr(l.act_pJ), repr(l.membrane_pJ)])
        return buf.getvalue()

    def summary(self) -> str:
        c = self.component_totals_pJ()
        lines = [f"total energy: {self.total_mJ:.6f} mJ"]
        for k, v in c.items():
            share = v / self.total_pJ if self.total_pJ else 0.0
            lines.append(f"  {k[:-3]:>8}: {v * 1e-9:.6f} mJ ({share:.1%})")
        lines.append(f"  membrane state held in {'DRAM' if self.membrane_in_dram else 'buffer'}")
        return "\n".join(lines) + "\n"


def _words(elements: int, spiking: bool) -> int:
    return math.ceil(elements / 32) if spiking else elements


def estimate_energy(traces: list, table: EnergyTable = EnergyTable()) -> EnergyReport:
    table.validate()
    cap_words = table.buffer_capacity / WORD_BYTES
    membrane_words = sum(t.output_elements for t in traces if t.has_membrane)
    in_dram = membrane_words > cap_words
    e_mem = table.e_dram if in_dram else table.e_buf
    report = EnergyReport(membrane_in_dram=in_dram)
    for tr in traces:
        if tr.is_spiking_input:
            compute = math.fsum(tr.dense_ops * s * table.e_ac for s in tr.sparsity)
        else:
            compute = tr.dense_ops * tr.T * table.e_mac
        in_w = _words(tr.input_elements, tr.is_spiking_input)
        out_w = _words(tr.output_elements, tr.spiking_output)
        working = in_w + out_w
        refetch = max(1, math.ceil(working / cap_words))
        passes = tr.T if tr.weight_count > cap_words else 1
        weight = passes * tr.weight_count * (table.e_dram + refetch * table.e_buf)
        spill = max(0.0, working - cap_words)
        act = tr.T * (working * table.e_buf + spill * table.e_dram)
        membrane = 2 * tr.output_elements * tr.T * e_mem if tr.has_membrane else 0.0
        report.layers.append(LayerEnergy(tr.layer, float(compute), float(weight), float(act), float(membrane)))
    return report


def trace_from_run(net, activation_trace) -> list:
    """Turn a forward-pass activity trace into per-convolution :class:`LayerTrace` records."""
    if activation_trace is None or not activation_trace.convs:
        raise TraceMissing("forward pass was run without recording a trace")
    names = {c.layer for c in activation_trace.convs}
    missing = [n for n in net.layer_names() if n not in names]
    if missing:
        raise TraceMissing(f"trace has no activity for layers {missing}")
    out = []
    T = activation_trace.timesteps
    for c in activation_trace.convs:
        if len(c.input_nonzero) != T:
            raise TraceMissing(f"{c.name}: {len(c.input_nonzero)} timesteps recorded, expected {T}")
        out.append(LayerTrace(
            layer=c.name, T=T,
            output_elements=int(np.prod(c.out_shape)), input_elements=int(np.prod(c.in_shape)),
            dense_ops=c.dense_ops, sparsity=[float(s) for s in c.input_nonzero],
            is_spiking_input=c.spiking_input, spiking_output=c.spiking_output,
            has_membrane=c.has_membrane, weight_count=c.weight_count,
        ))
    return out


def with_sparsity(traces: list, sparsity: float) -> list:
    """Copy of ``traces`` with every spike-input sparsity replaced by a constant."""
    return [dataclasses.replace(t, sparsity=[float(sparsity)] * t.T) if t.is_spiking_input else t
            for t in traces]


def compare_variants(spec, hybrid_configs, events, table: EnergyTable = EnergyTable(), seed: int = 0,
                     nets: dict | None = None) -> list:
    """Total energy per configuration on identical input.

    ``nets`` optionally maps config label to an already trained network to
    use instead of a freshly initialised one. Returns rows of
    ``(label, total_mJ, report)`` in input order.
    """
    from .network import build_network

    rows = []
    for hybrid in hybrid_configs:
        label = hybrid.label(spec)
        net = (nets or {}).get(label) or build_network(spec, hybrid, seed)
        result = net.forward_sequence(events, mode="eval")
        report = estimate_energy(trace_from_run(net, result.trace), table)
        rows.append((label, report.total_mJ, report))
    return rows
