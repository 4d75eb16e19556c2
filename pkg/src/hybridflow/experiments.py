"""Desk-scale trend experiment: Micro EV-FlowNet variants and a FireFlowNet spiking-position sweep."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .energy import EnergyTable, estimate_energy, trace_from_run, with_sparsity
from .network import HybridConfig, NetworkSpec, build_network
from .trainer import SyntheticData, TrainConfig, make_dataset, split_dataset, train

log = logging.getLogger(__name__)


@dataclass
class TrendConfig:
    data: SyntheticData = field(default_factory=lambda: SyntheticData(n_samples=320, res=64, T=5,
                                                                      noise_rate=2.0, seed=2024))
    k: int = 16
    seeds: tuple = (0, 1, 2)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6, batch_size=8, lr0=0.003))
    fire_channels: int = 8
    fire_seeds: tuple = (0,)
    fire_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, batch_size=8, lr0=0.003))

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = SyntheticData(**self.data)
        for name in ("train", "fire_train"):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, TrainConfig(**getattr(self, name)))


@dataclass
class TrendResult:
    evflownet: dict  # label -> list of test AEE per seed
    fireflownet: dict  # layer name -> list of test AEE per seed
    energy_mJ: dict  # label -> total energy of the seed-0 trained network on the first test sample
    sparsity_sweep: list  # (sparsity, Full-SNN / Full-ANN energy ratio)
    seconds: float

    def medians(self, family: str) -> dict:
        return {k: float(np.median(v)) for k, v in getattr(self, family).items()}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def run_trends(cfg: TrendConfig = TrendConfig(), table: EnergyTable = EnergyTable(),
               sparsities=(0.05, 0.1, 0.2, 0.3, 0.4, 0.5)) -> TrendResult:
    start = time.perf_counter()
    train_set, test_set = split_dataset(make_dataset(cfg.data))
    spec = NetworkSpec("evflownet", k=cfg.k, T=cfg.data.T)
    variants = {"full-ann": HybridConfig.full_ann(), "full-snn": HybridConfig.full_snn(spec),
                "hybrid": HybridConfig.first_layer()}
    ev, energy, traces = {}, {}, {}
    probe = test_set[0].events
    for label, hybrid in variants.items():
        ev[label] = []
        for seed in cfg.seeds:
            net = build_network(spec, hybrid, seed)
            tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
            result = train(net, (train_set, test_set), tcfg)
            ev[label].append(result.metrics[-1].val_aee)
            log.info("%s seed %d: test AEE %.4f", label, seed, ev[label][-1])
            if seed == cfg.seeds[0]:
                run = net.forward_sequence(probe, mode="eval")
                traces[label] = trace_from_run(net, run.trace)
                energy[label] = estimate_energy(traces[label], table).total_mJ

    ann_pJ = estimate_energy(traces["full-ann"], table).total_pJ
    sweep = [(float(s), estimate_energy(with_sparsity(traces["full-snn"], s), table).total_pJ / ann_pJ)
             for s in sparsities]

    fire_spec = NetworkSpec("fireflownet", T=cfg.data.T, fire_channels=cfg.fire_channels)
    names = [l.name for l in fire_spec.layer_specs()]
    fire = {}
    for i, name in enumerate(names):
        fire[name] = []
        for seed in cfg.fire_seeds:
            net = build_network(fire_spec, HybridConfig(frozenset({i})), seed)
            tcfg = TrainConfig(**{**asdict(cfg.fire_train), "seed": seed})
            fire[name].append(train(net, (train_set, test_set), tcfg).metrics[-1].val_aee)
            log.info("fireflownet spiking %s seed %d: test AEE %.4f", name, seed, fire[name][-1])
    return TrendResult(ev, fire, energy, sweep, time.perf_counter() - start)
