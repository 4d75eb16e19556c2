"""BPTT training loop, Adam, step LR schedule, augmentation, checkpoints and the ablation harness."""
from __future__ import annotations

import dataclasses
import io
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .events import bin_events, random_scene_spec, synthesize_sample
from .losses import LossConfig, aee, supervised_loss, total_selfsup_loss
from .network import HybridConfig, Network, NetworkSpec, build_network

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


class DivergedLoss(RuntimeError):
    pass


class EmptyDataset(ValueError):
    pass


class CropTooLarge(ValueError):
    pass


class CorruptCheckpoint(ValueError):
    pass


class VersionMismatch(CorruptCheckpoint):
    pass


class CheckpointMismatch(ValueError):
    """Checkpoint parameters do not fit the network they are loaded into."""


# ---------------------------------------------------------------- configs


@dataclass
class Augmentations:
    flip: bool = False
    rotation: bool = False
    crop_size: int | None = None


@dataclass
class TrainConfig:
    epochs: int = 10
    lr0: float = 0.001
    lr_decay: float = 0.7
    lr_every: int = 10
    batch_size: int = 8
    loss_mode: str = "supervised"  # supervised | self_supervised
    seed: int = 0
    augmentations: Augmentations = field(default_factory=Augmentations)
    loss: LossConfig = field(default_factory=LossConfig)
    clip_norm: float = 10.0
    clip: str = "auto"  # auto (spiking/recurrent configs only) | always | never
    # training samples used to re-estimate BNTT running statistics after each epoch (0 keeps the running averages)
    bn_recalibration: int = 64

    def __post_init__(self):
        if isinstance(self.augmentations, dict):
            self.augmentations = Augmentations(**self.augmentations)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.lr_every < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr_every and batch_size must be at least 1, epochs non-negative")
        if self.loss_mode not in ("supervised", "self_supervised"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.bn_recalibration < 0:
            raise ValueError("bn_recalibration must be non-negative")
        if self.clip not in ("auto", "always", "never"):
            raise ValueError(f"unknown clip mode {self.clip!r}")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_every)


# ---------------------------------------------------------------- data


@dataclass
class Sample:
    events: np.ndarray  # [T, 2, H, W]
    flow: np.ndarray  # [2, H, W]
    mask: np.ndarray  # [H, W] pixels with at least one event
    frame_start: np.ndarray  # [H, W]
    frame_end: np.ndarray  # [H, W]


@dataclass
class SyntheticData:
    n_samples: int = 80
    res: int = 64
    T: int = 5
    noise_rate: float = 2.0
    max_speed: float = 4.0
    seed: int = 0


def make_sample(data: SyntheticData, index: int) -> Sample:
    rng = np.random.default_rng([data.seed, index])
    spec = random_scene_spec(rng, data.res, data.res, max_speed=data.max_speed, noise_rate=data.noise_rate)
    s = synthesize_sample(spec, int(rng.integers(2**31)))
    return Sample(bin_events(s.events, data.T), s.flow, s.events.event_mask(), s.frame_start, s.frame_end)


def make_dataset(data: SyntheticData) -> list:
    return [make_sample(data, i) for i in range(data.n_samples)]


def split_dataset(samples: list, train_fraction: float = 0.8) -> tuple[list, list]:
    n_train = int(round(len(samples) * train_fraction))
    return samples[:n_train], samples[n_train:]


def _rot90_sample(s: Sample) -> Sample:
    # np.rot90 maps source pixel (x, y) to (y, W-1-x), so displacement (u, v) becomes (v, -u)
    rot = lambda a: np.ascontiguousarray(np.rot90(a, 1, axes=(-2, -1)))
    flow = rot(s.flow)
    return Sample(rot(s.events), np.stack([flow[1], -flow[0]]), rot(s.mask), rot(s.frame_start), rot(s.frame_end))


def _hflip_sample(s: Sample) -> Sample:
    flip = lambda a: np.ascontiguousarray(a[..., ::-1])
    flow = flip(s.flow)
    return Sample(flip(s.events), np.stack([-flow[0], flow[1]]), flip(s.mask), flip(s.frame_start), flip(s.frame_end))


def flip_horizontal(s: Sample) -> Sample:
    return _hflip_sample(s)


def rotate90(s: Sample, quarter_turns: int) -> Sample:
    for _ in range(quarter_turns % 4):
        s = _rot90_sample(s)
    return s


def crop(s: Sample, top: int, left: int, size: int) -> Sample:
    h, w = s.mask.shape
    if size > h or size > w:
        raise CropTooLarge(f"crop {size} exceeds sample resolution {h}x{w}")
    win = lambda a: np.ascontiguousarray(a[..., top:top + size, left:left + size])
    return Sample(win(s.events), win(s.flow), win(s.mask), win(s.frame_start), win(s.frame_end))


def augment(sample: Sample, aug: Augmentations, rng: np.random.Generator) -> Sample:
    """Random flip, quarter-turn rotation and square crop applied to every field alike."""
    if aug.crop_size is not None:
        h, w = sample.mask.shape
        if aug.crop_size > h or aug.crop_size > w:
            raise CropTooLarge(f"crop {aug.crop_size} exceeds sample resolution {h}x{w}")
    if aug.flip and rng.random() < 0.5:
        sample = _hflip_sample(sample)
    if aug.rotation:
        turns = int(rng.integers(4))
        h, w = sample.mask.shape
        if h != w and aug.crop_size is None:
            turns -= turns % 2  # quarter turns would change the batch shape
        sample = rotate90(sample, turns)
    if aug.crop_size is not None:
        h, w = sample.mask.shape
        top = int(rng.integers(h - aug.crop_size + 1))
        left = int(rng.integers(w - aug.crop_size + 1))
        sample = crop(sample, top, left, aug.crop_size)
    return sample


def _stack(samples: list) -> dict:
    return {f.name: np.stack([getattr(s, f.name) for s in samples]) for f in dataclasses.fields(Sample)}


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            beta1=beta1, beta2=beta2, eps=eps,
        )

    def step(self, grads: dict, lr: float) -> None:
        """Apply one bias-corrected Adam update; ``grads`` maps parameter names to arrays."""
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1 - b1**st.step
        c2 = 1 - b2**st.step
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g.astype(p.dtype, copy=False)
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(p.dtype)
            p.data -= update


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the original norm."""
    total = math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(scale)
    return total


# ---------------------------------------------------------------- train / evaluate


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_aee: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.lr!r},{self.train_loss!r},{self.val_aee!r}"


METRICS_HEADER = "epoch,lr,train_loss,val_aee"


def metrics_csv(metrics: list) -> str:
    return "\n".join([METRICS_HEADER] + [m.csv_row() for m in metrics]) + "\n"


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    net: Network
    optimizer: Adam
    cfg: TrainConfig
    epoch: int = 0
    metrics: list = field(default_factory=list)


def _loss(net: Network, batch: dict, cfg: TrainConfig) -> Tensor:
    flow = net.forward_sequence(batch["events"], mode="train", trace=False).flow
    if cfg.loss_mode == "supervised":
        return supervised_loss(flow, batch["flow"].astype(flow.dtype))
    return total_selfsup_loss(batch["frame_start"].astype(flow.dtype), batch["frame_end"].astype(flow.dtype),
                              flow, cfg.loss)


def evaluate(net: Network, samples: list, batch_size: int = 16) -> tuple[float, list]:
    """Mean per-sample AEE over event pixels, plus the predicted flows."""
    if not samples:
        raise EmptyDataset("no samples to evaluate")
    errors, flows = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        pred = net.forward_sequence(np.stack([s.events for s in chunk]), mode="eval", trace=False).flow.data
        for s, f in zip(chunk, pred):
            flows.append(f)
            errors.append(aee(f, s.flow, s.mask))
    return float(np.mean(errors)), flows


def recalibrate_bn(net: Network, samples: list, batch_size: int) -> None:
    """Replace BNTT running statistics with the average batch statistics of ``samples`` under current weights.

    Running averages trail weights that moved during the epoch; recomputing them
    keeps eval-mode normalization (and hence spike thresholds) matched to the
    trained network.
    """
    bns = [bn for layer in net.layers for bn in layer.bns]
    if not bns or len(samples) < 2:
        return
    bs = max(2, min(batch_size, len(samples)))
    momenta = [bn.momentum for bn in bns]
    try:
        for k, start in enumerate(range(0, len(samples) - bs + 1, bs)):
            for bn in bns:
                bn.momentum = 1.0 / (k + 1)  # cumulative mean over batches
            net.forward_sequence(np.stack([s.events for s in samples[start:start + bs]]), mode="train", trace=False)
    finally:
        for bn, m in zip(bns, momenta):
            bn.momentum = m


def _clip_enabled(net: Network, cfg: TrainConfig) -> bool:
    if cfg.clip == "auto":
        h = net.hybrid
        return bool(h.spiking_layer_indices or h.convrnn_layer_indices)
    return cfg.clip == "always"


def start_training(net: Network, cfg: TrainConfig) -> TrainState:
    return TrainState(net, Adam(net.parameters()), cfg)


def train_epochs(state: TrainState, train_set: list, val_set: list, n_epochs: int | None = None) -> TrainState:
    """Advance ``state`` by ``n_epochs`` epochs (default: until ``cfg.epochs``)."""
    cfg, net = state.cfg, state.net
    if not train_set:
        raise EmptyDataset("training set is empty")
    if not val_set:
        raise EmptyDataset("validation set is empty")
    stop = cfg.epochs if n_epochs is None else min(cfg.epochs, state.epoch + n_epochs)
    params = net.parameters()
    clip = _clip_enabled(net, cfg)
    bs = min(cfg.batch_size, len(train_set))
    while state.epoch < stop:
        epoch = state.epoch
        lr = lr_schedule(epoch, cfg)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:  # batch statistics need two samples; fold the remainder into the next epoch
                continue
            batch = _stack([augment(train_set[i], cfg.augmentations, rng) for i in idx])
            try:
                with Tape() as tape:
                    loss = _loss(net, batch, cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergedLoss(f"loss became {value} at epoch {epoch}")
                leaf_grads = backward(tape, loss)
            except ad.NonFiniteValue as e:
                raise DivergedLoss(f"non-finite value during epoch {epoch}: {e}") from e
            grads = {name: leaf_grads[p] for name, p in params.items() if p in leaf_grads}
            for p in params.values():
                p.grad = None
            if any(not np.isfinite(g).all() for g in grads.values()):
                raise DivergedLoss(f"non-finite gradient at epoch {epoch}")
            if clip:
                clip_global_norm(grads, cfg.clip_norm)
            state.optimizer.step(grads, lr)
            losses.append(value)
        if cfg.bn_recalibration:
            recalibrate_bn(net, train_set[:cfg.bn_recalibration], cfg.batch_size)
        val, _ = evaluate(net, val_set)
        m = EpochMetrics(epoch, lr, float(np.mean(losses)) if losses else float("nan"), val)
        state.metrics.append(m)
        log.info("epoch %d lr %.6g loss %.5f val_aee %.4f", epoch, lr, m.train_loss, val)
        state.epoch += 1
    return state


@dataclass
class TrainResult:
    net: Network
    metrics: list
    state: TrainState


def train(net: Network, dataset: tuple, cfg: TrainConfig, metrics_path=None) -> TrainResult:
    """Train ``net`` on ``dataset = (train_samples, val_samples)`` for ``cfg.epochs`` epochs."""
    train_set, val_set = dataset
    state = train_epochs(start_training(net, cfg), train_set, val_set)
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as f:
            f.write(metrics_csv(state.metrics))
    return TrainResult(net, state.metrics, state)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    label: str
    config: HybridConfig
    val_aee: float
    metrics: list


def ablate(base_spec: NetworkSpec, configs: list, cfg: TrainConfig, dataset: tuple, seed: int = 0) -> list:
    """Train every configuration with identical initial seed, data and schedule."""
    seen, unique = set(), []
    for c in configs:
        key = (c.spiking_layer_indices, c.convrnn_layer_indices)
        if key in seen:
            warnings.warn(f"duplicate configuration {c.label(base_spec)} skipped", stacklevel=2)
            continue
        seen.add(key)
        unique.append(c)
    rows = []
    for c in unique:
        net = build_network(base_spec, c, seed)
        result = train(net, dataset, cfg)
        rows.append(AblationRow(c.label(base_spec), c, result.metrics[-1].val_aee if result.metrics else float("nan"),
                                result.metrics))
    return rows


# ---------------------------------------------------------------- checkpoints
#
# Layout: b"CKPT", u32 version, u32 blob count, then per blob:
# u32 name length, UTF-8 name, u32 ndim, ndim x u32 shape, float32 data.
# Integers (epoch, step, seed) are stored as 16-bit limbs so float32 holds them exactly.


def _int_blob(value: int) -> np.ndarray:
    if value < 0 or value >= 2**64:
        raise ValueError("checkpoint integers must lie in [0, 2**64)")
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)], np.float32)


def _blob_int(arr: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(arr))


def _blobs_for(state: TrainState) -> dict:
    net, opt = state.net, state.optimizer
    blobs = {}
    for name, p in net.parameters().items():
        blobs[f"param/{name}"] = p.data
    for name, arr in net.buffers().items():
        blobs[f"buffer/{name}"] = arr
    for name in opt.params:
        blobs[f"adam.m/{name}"] = opt.state.m[name]
        blobs[f"adam.v/{name}"] = opt.state.v[name]
    blobs["meta/step"] = _int_blob(opt.state.step)
    blobs["meta/epoch"] = _int_blob(state.epoch)
    blobs["meta/seed"] = _int_blob(state.cfg.seed)
    for m in state.metrics:
        blobs[f"metrics/{m.epoch}"] = np.array([m.lr, m.train_loss, m.val_aee], np.float64).view(np.float32)
    return blobs


def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    blobs = _blobs_for(state)
    buf.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blobs)))
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ValueError(f"{name}: checkpoints hold float32 data only, got {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> dict:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("missing checkpoint header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            if len(name.encode()) != n:
                raise CorruptCheckpoint("truncated blob name")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(data):
                raise CorruptCheckpoint(f"blob {name!r} is truncated")
            out[name] = np.frombuffer(data, "<f4", int(np.prod(shape, dtype=np.int64)), pos).reshape(shape).copy()
            pos += size
    except (struct.error, UnicodeDecodeError) as e:
        raise CorruptCheckpoint(f"malformed checkpoint: {e}") from e
    if pos != len(data):
        raise CorruptCheckpoint(f"{len(data) - pos} trailing bytes after the last blob")
    return out


def checkpoint_save(state: TrainState, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(state))


def restore_state(blobs: dict, net: Network, cfg: TrainConfig) -> TrainState:
    params = net.parameters()
    want = {f"param/{k}" for k in params}
    have = {k for k in blobs if k.startswith("param/")}
    if want != have:
        missing, extra = sorted(want - have)[:3], sorted(have - want)[:3]
        raise CheckpointMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        arr = blobs[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointMismatch(f"{name}: checkpoint shape {arr.shape} vs network {p.shape}")
        p.data[...] = arr
    try:
        net.load_buffers({k[len("buffer/"):]: v for k, v in blobs.items() if k.startswith("buffer/")})
    except KeyError as e:
        raise CheckpointMismatch(f"missing running statistics {e}") from None
    opt = Adam(params)
    if "meta/step" in blobs:
        opt.state.step = _blob_int(blobs["meta/step"])
        for name in params:
            opt.state.m[name][...] = blobs[f"adam.m/{name}"]
            opt.state.v[name][...] = blobs[f"adam.v/{name}"]
    state = TrainState(net, opt, cfg, _blob_int(blobs.get("meta/epoch", _int_blob(0))))
    epochs = sorted(int(k.split("/")[1]) for k in blobs if k.startswith("metrics/"))
    for e in epochs:
        lr, loss, val = blobs[f"metrics/{e}"].view(np.float64)
        state.metrics.append(EpochMetrics(e, float(lr), float(loss), float(val)))
    return state


def checkpoint_load(net: Network, cfg: TrainConfig, path) -> TrainState:
    with open(path, "rb") as f:
        return restore_state(parse_checkpoint(f.read()), net, cfg)


def checkpoint_seed(path) -> int | None:
    with open(path, "rb") as f:
        blobs = parse_checkpoint(f.read())
    return _blob_int(blobs["meta/seed"]) if "meta/seed" in blobs else None
