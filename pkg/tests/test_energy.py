import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from hybridflow.energy import (
    CapacityZero,
    EnergyTable,
    InvalidEnergyTable,
    LayerTrace,
    TraceMissing,
    estimate_energy,
    trace_from_run,
    with_sparsity,
)
from hybridflow.network import ConvActivity, HybridConfig, LayerSpec, NetworkSpec, build_network

TOY_TABLE = EnergyTable(e_mac=4.0, e_ac=1.0, e_dram=100.0, e_buf=2.0, buffer_capacity=400)  # 100 words


def toy_traces():
    """2-layer toy, T=2: analog 2x8x8 -> spiking 4x8x8 -> analog 2x8x8, 3x3 kernels."""
    l1 = LayerTrace("L1", 2, output_elements=256, input_elements=128, dense_ops=8 * 8 * 4 * 9 * 2,
                    sparsity=[1.0, 1.0], is_spiking_input=False, spiking_output=True, has_membrane=True,
                    weight_count=72)
    l2 = LayerTrace("L2", 2, output_elements=128, input_elements=256, dense_ops=8 * 8 * 2 * 9 * 4,
                    sparsity=[0.25, 0.5], is_spiking_input=True, spiking_output=False, has_membrane=False,
                    weight_count=72)
    return [l1, l2]


def test_hand_count_oracle():
    # L1: 4608 ops * 2 steps * 4 pJ; working set 128 analog + 256/32 packed = 136 words > 100
    #     -> refetch 2, spill 36; weights 72 words fit -> fetched once; membrane 256 words > 100 -> DRAM
    # L2: 4608 * (0.25 + 0.5) * 1 pJ; working set 8 + 128 = 136 words, same tiling as L1
    r = estimate_energy(toy_traces(), TOY_TABLE)
    l1, l2 = r.layer("L1"), r.layer("L2")
    assert (l1.compute_pJ, l1.weight_pJ, l1.act_pJ, l1.membrane_pJ) == (36864.0, 7488.0, 7744.0, 102400.0)
    assert (l2.compute_pJ, l2.weight_pJ, l2.act_pJ, l2.membrane_pJ) == (3456.0, 7488.0, 7744.0, 0.0)
    assert r.total_pJ == 173184.0
    assert r.membrane_in_dram


def test_hand_count_weights_exceeding_buffer():
    # 50-word buffer: 72 weight words no longer fit -> fetched every timestep; refetch = ceil(136 / 50) = 3
    table = dataclasses.replace(TOY_TABLE, buffer_capacity=200)
    l1 = estimate_energy(toy_traces(), table).layer("L1")
    assert l1.weight_pJ == 2 * 72 * (100.0 + 3 * 2.0)
    assert l1.act_pJ == 2 * (136 * 2.0 + 86 * 100.0)


def test_membrane_in_buffer_when_state_fits():
    table = dataclasses.replace(TOY_TABLE, buffer_capacity=4096)
    r = estimate_energy(toy_traces(), table)
    assert not r.membrane_in_dram
    assert r.layer("L1").membrane_pJ == 2 * 256 * 2 * 2.0


def test_dense_ops_example():
    conv = ConvActivity("c", "c", False, (2, 32, 32), (16, 32, 32), 3, 16 * 2 * 9, False, True, True)
    assert conv.dense_ops == 32 * 32 * 16 * 3 * 3 * 2 == 294_912


def test_zero_sparsity_keeps_membrane_cost():
    tr = dataclasses.replace(toy_traces()[1], sparsity=[0.0, 0.0], has_membrane=True, spiking_output=True)
    layer = estimate_energy([tr]).layers[0]
    assert layer.compute_pJ == 0.0 and layer.membrane_pJ > 0.0


@given(s=st.floats(0.0, 1.0), table=st.sampled_from([EnergyTable(), TOY_TABLE]))
def test_compute_ratio_matches_accumulate_credit(s, table):
    ann = dataclasses.replace(toy_traces()[1], is_spiking_input=False, sparsity=[1.0, 1.0])
    snn = dataclasses.replace(toy_traces()[1], sparsity=[s, s])
    e_ann = estimate_energy([ann], table).layers[0].compute_pJ
    e_snn = estimate_energy([snn], table).layers[0].compute_pJ
    assert e_snn / e_ann == pytest.approx(s * table.e_ac / table.e_mac, rel=1e-12)


def _layer_traces(sizes, T, spiking, sparsity=0.3):
    """Sequential stack of 3x3 convs at 8x8; ``spiking[i]`` marks layer i's output as spikes."""
    out, prev_spiking = [], False
    for i, (cin, cout) in enumerate(zip(sizes[:-1], sizes[1:])):
        out.append(LayerTrace(f"l{i}", T, cout * 64, cin * 64, 64 * cout * cin * 9, [sparsity] * T,
                              prev_spiking, spiking[i], spiking[i], cout * cin * 9))
        prev_spiking = spiking[i]
    return out


@given(T=st.integers(1, 8))
def test_membrane_energy_linear_in_T(T):
    base = estimate_energy(_layer_traces([2, 8, 8], 1, [True, True])).component_totals_pJ()["membrane_pJ"]
    scaled = estimate_energy(_layer_traces([2, 8, 8], T, [True, True])).component_totals_pJ()["membrane_pJ"]
    assert scaled == T * base


@given(a=st.floats(0.0, 1.0), b=st.floats(0.0, 1.0))
def test_compute_monotone_in_sparsity(a, b):
    lo, hi = sorted((a, b))
    tr = toy_traces()[1]
    e_lo = estimate_energy([dataclasses.replace(tr, sparsity=[lo, lo])]).layers[0].compute_pJ
    e_hi = estimate_energy([dataclasses.replace(tr, sparsity=[hi, hi])]).layers[0].compute_pJ
    assert e_lo <= e_hi


@given(sizes=st.lists(st.integers(1, 64), min_size=2, max_size=6), T=st.integers(1, 6),
       flags=st.lists(st.booleans(), min_size=5, max_size=5), cap=st.integers(64, 1 << 20))
def test_totals_are_sum_of_components(sizes, T, flags, cap):
    table = dataclasses.replace(EnergyTable(), buffer_capacity=cap)
    r = estimate_energy(_layer_traces(sizes, T, flags), table)
    assert r.total_pJ == math.fsum(v for l in r.layers for v in
                                   (l.compute_pJ, l.weight_pJ, l.act_pJ, l.membrane_pJ))
    assert all(min(l.compute_pJ, l.weight_pJ, l.act_pJ, l.membrane_pJ) >= 0 for l in r.layers)
    assert r.total_mJ == r.total_pJ * 1e-9


@settings(max_examples=100)
@given(sizes=st.lists(st.integers(1, 64), min_size=3, max_size=6), T=st.integers(1, 6),
       pick=st.lists(st.booleans(), min_size=5, max_size=5), s=st.floats(0.0, 1.0),
       cap=st.integers(64, 4096))
def test_hybrid_between_ann_and_snn(sizes, T, pick, s, cap):
    table = dataclasses.replace(EnergyTable(), buffer_capacity=cap)
    n = len(sizes) - 1
    ann = estimate_energy(_layer_traces(sizes, T, [False] * n, s), table)
    snn = estimate_energy(_layer_traces(sizes, T, [True] * n, s), table)
    hyb = estimate_energy(_layer_traces(sizes, T, pick[:n], s), table)
    # the precondition: every layer costs at least as much once spiking enters it, and
    # the hybrid's spiking layers cost no more than their fully spiking counterparts
    for h, a, f in zip(hyb.layers, ann.layers, snn.layers):
        assume(a.total_pJ <= h.total_pJ <= f.total_pJ or h.total_pJ == a.total_pJ)
        assume(a.total_pJ <= f.total_pJ)
    assert ann.total_pJ <= hyb.total_pJ * (1 + 1e-12)
    assert hyb.total_pJ <= snn.total_pJ * (1 + 1e-12)


def test_single_layer_hybrid_equals_full_snn():
    spec = NetworkSpec("fireflownet", T=3, layers=[LayerSpec("L1", "plain_conv", 2, 4),
                                                   LayerSpec("flow", "flow_head", 4, 2, 1, activation="none")])
    rng = np.random.default_rng(0)
    events = (rng.random((3, 2, 8, 8)) < 0.3).astype(np.float32)
    totals = []
    for hybrid in (HybridConfig.first_layer(), HybridConfig.full_snn(spec)):
        net = build_network(spec, hybrid, seed=1)
        totals.append(estimate_energy(trace_from_run(net, net.forward_sequence(events, mode="eval").trace)).total_pJ)
    assert totals[0] == totals[1]


def test_trace_from_run_records_sparsity_and_layer_kinds():
    spec = NetworkSpec("evflownet", k=4, T=2)
    net = build_network(spec, HybridConfig.parse("0,1", spec), seed=0)
    events = np.zeros((2, 2, 32, 32), np.float32)
    traces = trace_from_run(net, net.forward_sequence(events, mode="eval").trace)
    by_name = {t.layer: t for t in traces}
    assert by_name["enc1.conv0"].has_membrane and not by_name["enc3.conv0"].has_membrane
    # nothing arrives, so the first layer never fires and the second sees all-zero spikes
    assert by_name["enc2.conv0"].is_spiking_input and by_name["enc2.conv0"].sparsity == [0.0, 0.0]
    assert estimate_energy(traces).layer("enc2.conv0").compute_pJ == 0.0


def test_trace_missing():
    spec = NetworkSpec("evflownet", k=4, T=2)
    net = build_network(spec, HybridConfig.first_layer(), seed=0)
    run = net.forward_sequence(np.zeros((2, 2, 32, 32), np.float32), mode="eval", trace=False)
    with pytest.raises(TraceMissing):
        trace_from_run(net, run.trace)
    with pytest.raises(TraceMissing):
        trace_from_run(net, None)


def test_with_sparsity_only_touches_spike_inputs():
    ann, spk = toy_traces()
    out = with_sparsity([ann, spk], 0.1)
    assert out[0] is ann and out[1].sparsity == [0.1, 0.1]


def test_table_loader_and_validation(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("# 45 nm\ne_mac = 3.7\ne_ac=0.5  # adder\n\nbuffer_capacity = 2048\n")
    t = EnergyTable.from_file(path)
    assert (t.e_mac, t.e_ac, t.buffer_capacity, t.e_dram) == (3.7, 0.5, 2048, 640.0)
    for bad in ("e_ac = 5", "e_buf = 700", "e_dram = -1", "foo = 1", "e_mac 4", "e_mac = x"):
        with pytest.raises(InvalidEnergyTable):
            EnergyTable.from_text(bad)
    with pytest.raises(CapacityZero):
        EnergyTable.from_text("buffer_capacity = 0")
    with pytest.raises(CapacityZero):
        estimate_energy(toy_traces(), dataclasses.replace(TOY_TABLE, buffer_capacity=0))


def test_invalid_trace_rejected():
    with pytest.raises(ValueError):
        dataclasses.replace(toy_traces()[1], sparsity=[0.5])
    with pytest.raises(ValueError):
        dataclasses.replace(toy_traces()[1], sparsity=[0.5, 1.5])


def test_report_csv_and_summary():
    r = estimate_energy(toy_traces(), TOY_TABLE)
    lines = r.to_csv().splitlines()
    assert lines[0] == "layer,compute_pJ,weight_pJ,act_pJ,membrane_pJ"
    assert lines[1] == "L1,36864.0,7488.0,7744.0,102400.0"
    assert "DRAM" in r.summary() and r.summary().startswith("total energy:")
