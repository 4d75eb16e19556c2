"""Command-line entry point: synth, train, eval, energy, ablate.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 artifact mismatch (checkpoint/dataset/network disagree).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .energy import EnergyTable, InvalidEnergyTable, estimate_energy, trace_from_run
from .events import bin_events, format_flow, read_events, write_events, write_flow
from .losses import aee
from .network import HybridConfig, InvalidHybridConfig, NetworkSpec, UnsupportedFamily, build_network
from .network import load_description, save_description
from .trainer import (
    Augmentations,
    CheckpointMismatch,
    CorruptCheckpoint,
    DivergedLoss,
    Sample,
    SyntheticData,
    TrainConfig,
    ablate,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    make_sample,
    metrics_csv,
    split_dataset,
    start_training,
    train_epochs,
)

log = logging.getLogger("hybridflow")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4
DEFAULT_TABLE_FILE = "energy_table.txt"


class ConfigError(Exception):
    pass


class ArtifactMismatch(Exception):
    pass


# ---------------------------------------------------------------- manifest


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}


class RunManifest:
    """``manifest.json`` in the output directory; written before work starts, finalised after."""

    def __init__(self, out: Path, command: str, config: dict, seed):
        self.path = out / "manifest.json"
        self.started = time.time()
        self.doc = {
            "command": command,
            "argv": sys.argv[1:],
            "config": config,
            "seed": seed,
            "code_version": __version__,
            "started": _dt.datetime.fromtimestamp(self.started, _dt.timezone.utc).isoformat(),
            "status": "running",
            "outputs": [],
            "notes": [],
        }
        self.write()

    def note(self, text: str) -> None:
        self.doc["notes"].append(text)

    def output(self, path: Path) -> None:
        self.doc["outputs"].append(str(path))

    def write(self) -> None:
        with open(self.path, "w") as f:
            json.dump(self.doc, f, indent=2, sort_keys=True)
            f.write("\n")

    def finish(self, status: str = "ok") -> None:
        self.doc["status"] = status
        self.doc["wall_clock_s"] = round(time.time() - self.started, 3)
        self.write()


# ---------------------------------------------------------------- flow images


def _color_wheel() -> np.ndarray:
    # standard optical-flow wheel: red-yellow-green-cyan-blue-magenta segments
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, a, b in segments:
        f = np.arange(n)[:, None] / n
        rows.append(np.array(a) * (1 - f) + np.array(b) * f)
    return np.concatenate(rows) / 255.0


def flow_to_rgb(flow: np.ndarray) -> np.ndarray:
    """[2, H, W] flow to uint8 RGB, hue from direction, saturation from magnitude / max magnitude."""
    u, v = flow[0].astype(np.float64), flow[1].astype(np.float64)
    mag = np.hypot(u, v)
    peak = mag.max()
    rad = mag / peak if peak > 0 else mag
    wheel = _color_wheel()
    ncols = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi  # in [-1, 1]
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    col = 1 - rad[..., None] * (1 - col)
    return np.clip(np.floor(255 * col), 0, 255).astype(np.uint8)


def save_flow_png(path, flow: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(flow_to_rgb(flow), "RGB").save(path)


# ---------------------------------------------------------------- dataset directory


def _sample_stem(i: int) -> str:
    return f"sample_{i:05d}"


def load_dataset(path: Path, T: int | None = None) -> tuple[dict, list]:
    meta_path = path / "dataset.json"
    if not meta_path.exists():
        raise ArtifactMismatch(f"{path} is not a dataset directory (no dataset.json)")
    with open(meta_path) as f:
        meta = json.load(f)
    T = T or meta["T"]
    samples = []
    for i in range(meta["count"]):
        stem = path / _sample_stem(i)
        events = read_events(str(stem) + ".evt")
        flow = np.load(str(stem) + "_flow.npy")
        frames = np.load(str(stem) + "_frames.npy")
        samples.append(Sample(bin_events(events, T), flow, events.event_mask(), frames[0], frames[1]))
    return meta, samples


def _check_compatible(spec: NetworkSpec, meta: dict) -> None:
    if meta["T"] != spec.T:
        raise ArtifactMismatch(f"dataset binned with T={meta['T']}, network expects T={spec.T}")
    if spec.family == "evflownet" and meta["res"] % 16:
        raise ArtifactMismatch(f"evflownet needs resolutions divisible by 16, dataset has {meta['res']}")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.res < 1 or args.scenes < 1 or args.T < 1:
        raise ConfigError("--res, --scenes and --T must be positive")
    if args.noise_rate < 0:
        raise ConfigError("--noise-rate must be non-negative")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    data = SyntheticData(args.scenes, args.res, args.T, args.noise_rate, args.max_speed, args.seed)
    manifest = RunManifest(out, "synth", asdict(data), args.seed)
    from .events import random_scene_spec, synthesize_sample

    for i in range(args.scenes):
        rng = np.random.default_rng([data.seed, i])
        spec = random_scene_spec(rng, data.res, data.res, max_speed=data.max_speed, noise_rate=data.noise_rate)
        s = synthesize_sample(spec, int(rng.integers(2**31)))
        stem = out / _sample_stem(i)
        write_events(str(stem) + ".evt", s.events)
        write_flow(str(stem) + ".flo", s.flow)
        np.save(str(stem) + "_flow.npy", s.flow)
        np.save(str(stem) + "_frames.npy", np.stack([s.frame_start, s.frame_end]))
    meta = {"count": args.scenes, "res": args.res, "T": args.T, "seed": args.seed,
            "noise_rate": args.noise_rate, "max_speed": args.max_speed, "window_us": 50_000}
    with open(out / "dataset.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    manifest.output(out / "dataset.json")
    manifest.finish()
    print(f"wrote {args.scenes} samples to {out}")
    return EXIT_OK


def _spec_from_args(args) -> tuple[NetworkSpec, HybridConfig]:
    try:
        spec = NetworkSpec(args.family, k=args.k, T=args.T, fire_channels=args.fire_channels)
        spec.layer_specs()
        hybrid = HybridConfig.parse(args.spiking, spec)
    except (UnsupportedFamily, InvalidHybridConfig, ValueError) as e:
        raise ConfigError(str(e)) from None
    return spec, hybrid


def cmd_train(args) -> int:
    spec, hybrid = _spec_from_args(args)
    try:
        cfg = TrainConfig(epochs=args.epochs, lr0=args.lr, batch_size=args.batch_size, seed=args.seed,
                          loss_mode="self_supervised" if args.loss == "selfsup" else "supervised",
                          augmentations=Augmentations(args.flip, args.rotate, args.crop))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "train", _flags(args) | {"resolved_train_config": asdict(cfg)}, args.seed)
    meta, samples = load_dataset(Path(args.data), spec.T)
    _check_compatible(spec, meta)
    train_set, val_set = split_dataset(samples)
    net = build_network(spec, hybrid, args.seed)
    state = checkpoint_load(net, cfg, args.resume) if args.resume else start_training(net, cfg)
    try:
        train_epochs(state, train_set, val_set)
    except DivergedLoss:
        manifest.finish("diverged")
        raise
    save_description(out / "network.json", spec, hybrid, args.seed)
    checkpoint_save(state, out / "model.ckpt")
    (out / "metrics.csv").write_text(metrics_csv(state.metrics))
    for name in ("network.json", "model.ckpt", "metrics.csv"):
        manifest.output(out / name)
    manifest.finish()
    last = state.metrics[-1] if state.metrics else None
    print(f"{hybrid.label(spec)}: {len(state.metrics)} epochs" + (f", val AEE {last.val_aee:.4f}" if last else ""))
    return EXIT_OK


def _load_trained(ckpt: Path):
    ckpt_dir = ckpt if ckpt.is_dir() else ckpt.parent
    ckpt_file = ckpt / "model.ckpt" if ckpt.is_dir() else ckpt
    desc = ckpt_dir / "network.json"
    if not desc.exists() or not ckpt_file.exists():
        raise ArtifactMismatch(f"need model.ckpt and network.json in {ckpt_dir}")
    try:
        spec, hybrid, seed = load_description(desc)
    except (ValueError, KeyError) as e:
        raise ArtifactMismatch(f"bad network description: {e}") from None
    net = build_network(spec, hybrid, seed)
    checkpoint_load(net, TrainConfig(), ckpt_file)
    return spec, hybrid, net


def cmd_eval(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "eval", _flags(args), None)
    manifest.note("flow images: standard colour wheel, saturation normalised by each image's max magnitude")
    spec, hybrid, net = _load_trained(Path(args.checkpoint))
    meta, samples = load_dataset(Path(args.data), spec.T)
    _check_compatible(spec, meta)
    if args.split != "all":
        samples = dict(zip(("train", "test"), split_dataset(samples)))[args.split]
    mean, flows = evaluate(net, samples)
    lines = ["sample,aee"]
    for i, (s, f) in enumerate(zip(samples, flows)):
        lines.append(f"{i},{aee(f, s.flow, s.mask)!r}")
        save_flow_png(out / f"flow_{i:05d}.png", f)
        if args.dump_flow:
            (out / f"flow_{i:05d}.flo").write_bytes(format_flow(f))
    lines.append(f"mean,{mean!r}")
    (out / "aee.csv").write_text("\n".join(lines) + "\n")
    manifest.output(out / "aee.csv")
    manifest.finish()
    print(f"AEE {mean:.4f} over {len(samples)} samples")
    return EXIT_OK


def _energy_table(args, manifest: RunManifest) -> EnergyTable:
    path = args.table or DEFAULT_TABLE_FILE
    if args.table is None and not os.path.exists(path):
        manifest.note(f"no {DEFAULT_TABLE_FILE}; built-in default energy table used")
        return EnergyTable()
    try:
        table = EnergyTable.from_file(path)
    except OSError as e:
        raise ConfigError(f"cannot read energy table: {e}") from None
    except InvalidEnergyTable as e:
        raise ConfigError(f"invalid energy table: {e}") from None
    manifest.note(f"energy table loaded from {path}")
    return table


def cmd_energy(args) -> int:
    spec, _ = _spec_from_args(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "energy", _flags(args), args.seed)
    table = _energy_table(args, manifest)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("--variants is empty")
    if args.data:
        meta, samples = load_dataset(Path(args.data), spec.T)
        _check_compatible(spec, meta)
        events = samples[0].events
    else:
        events = make_sample(SyntheticData(1, args.res, spec.T, seed=args.seed), 0).events
    rows = ["variant,total_mJ,compute_pJ,weight_pJ,act_pJ,membrane_pJ"]
    summary = []
    for v in variants:
        try:
            hybrid = HybridConfig.parse(v, spec)
        except InvalidHybridConfig as e:
            raise ConfigError(str(e)) from None
        net = build_network(spec, hybrid, args.seed)
        run = net.forward_sequence(events, mode="eval")
        report = estimate_energy(trace_from_run(net, run.trace), table)
        label = hybrid.label(spec)
        (out / f"energy_{label}.csv").write_text(report.to_csv())
        manifest.output(out / f"energy_{label}.csv")
        c = report.component_totals_pJ()
        rows.append(f"{label},{report.total_mJ!r},{c['compute_pJ']!r},{c['weight_pJ']!r},"
                    f"{c['act_pJ']!r},{c['membrane_pJ']!r}")
        summary.append(f"[{label}]\n{report.summary()}")
    (out / "energy.csv").write_text("\n".join(rows) + "\n")
    (out / "summary.txt").write_text("\n".join(summary))
    manifest.output(out / "energy.csv")
    manifest.finish()
    print("\n".join(rows))
    return EXIT_OK


def _sweep(text: str, spec: NetworkSpec) -> list:
    n = len(spec.layer_specs())
    text = text.strip()
    if text == "positions":
        return [HybridConfig(frozenset({i})) for i in range(n)]
    if text == "count":
        return [HybridConfig(frozenset(range(m))) for m in range(n + 1)]
    items = [t for t in text.split(";") if t.strip()]
    if not items:
        raise ConfigError("empty ablation sweep")
    try:
        return [HybridConfig.parse(t, spec) for t in items]
    except InvalidHybridConfig as e:
        raise ConfigError(str(e)) from None


def cmd_ablate(args) -> int:
    spec, _ = _spec_from_args(args)
    configs = _sweep(args.sweep, spec)
    try:
        cfg = TrainConfig(epochs=args.epochs, lr0=args.lr, batch_size=args.batch_size, seed=args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "ablate", _flags(args), args.seed)
    meta, samples = load_dataset(Path(args.data), spec.T)
    _check_compatible(spec, meta)
    try:
        rows = ablate(spec, configs, cfg, split_dataset(samples), args.seed)
    except DivergedLoss:
        manifest.finish("diverged")
        raise
    names = [l.name for l in spec.layer_specs()]
    lines = ["config,spiking_layers,aee"]
    for r in rows:
        layers = "+".join(names[i] for i in sorted(r.config.spiking_layer_indices)) or "none"
        lines.append(f"{r.label},{layers},{r.val_aee!r}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    manifest.output(out / "ablation.csv")
    manifest.finish()
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _network_flags(p: argparse.ArgumentParser, spiking_default: str = "first") -> None:
    p.add_argument("--family", default="evflownet", choices=["evflownet", "fireflownet"])
    p.add_argument("--k", type=int, default=16, help="EV-FlowNet base width (64 Base, 32 Mini, 16 Micro)")
    p.add_argument("--fire-channels", type=int, default=32)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--spiking", default=spiking_default, help="first | none | all | comma-separated indices or names")
    p.add_argument("--seed", type=int, default=0)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hybridflow", description="Hybrid SNN-ANN optical flow toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file whose keys override flags (a run manifest works too)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize an event dataset with ground-truth flow")
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--T", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-rate", type=float, default=2.0, help="noise events per pixel per second")
    p.add_argument("--max-speed", type=float, default=4.0, help="pixels per window")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a network on a synthesized dataset")
    _network_flags(p)
    _train_flags(p)
    p.add_argument("--loss", default="supervised", choices=["supervised", "selfsup"])
    p.add_argument("--flip", action="store_true")
    p.add_argument("--rotate", action="store_true")
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="AEE of a trained checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="training output directory or model.ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--dump-flow", action="store_true", help="also write one .flo file per sample")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("energy", parents=[common], help="estimate inference energy of several variants")
    _network_flags(p)
    p.add_argument("--variants", default="full-ann,full-snn,hybrid")
    p.add_argument("--data", help="dataset directory; its first sample drives the trace")
    p.add_argument("--res", type=int, default=64, help="resolution of the synthetic probe when --data is absent")
    p.add_argument("--table", help=f"key=value energy table (default: ./{DEFAULT_TABLE_FILE} if present)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("ablate", parents=[common], help="train a sweep of spiking-layer configurations")
    _network_flags(p)
    _train_flags(p)
    p.add_argument("--sweep", default="positions", help="positions | count | configs separated by ';'")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def _apply_config_file(ap: argparse.ArgumentParser, argv: list) -> argparse.Namespace:
    args = ap.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        ap.error(f"cannot read config file: {e}")
    if "command" in doc and "config" in doc:  # a run manifest
        doc = {k: v for k, v in doc["config"].items() if k != "resolved_train_config"}
    unknown = [k for k in doc if k not in vars(args) and k.replace("-", "_") not in vars(args)]
    if unknown:
        ap.error(f"unknown config keys: {unknown}")
    for k, v in doc.items():
        if k in ("func", "config", "command"):
            continue
        setattr(args, k.replace("-", "_"), v)
    return args


def main(argv=None) -> int:
    ap = build_parser()
    args = _apply_config_file(ap, sys.argv[1:] if argv is None else list(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ArtifactMismatch, CheckpointMismatch, CorruptCheckpoint, FileNotFoundError) as e:
        print(f"artifact mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
