"""Event streams: AER file formats, temporal binning, and a log-intensity scene synthesizer."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u4"), ("p", "i1"), ("pad", "V3")])
BIN_MAGIC = b"EVT0"
FLOW_MAGIC = b"FLO0"


class EventFormatError(ValueError):
    pass


class MalformedRecord(EventFormatError):
    pass


class OutOfBounds(EventFormatError):
    pass


class NonMonotonicTime(EventFormatError):
    pass


class EmptyWindow(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Columnar, time-sorted events plus the sensor size and window bounds (µs)."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: int = 0
    t_end: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for row in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(*row)

    @classmethod
    def empty(cls, width: int, height: int, t_start: int = 0, t_end: int = 0) -> "EventStream":
        z = np.zeros(0, np.int64)
        return cls(z, z, z, z, width, height, t_start, t_end)

    @classmethod
    def from_events(cls, events, width: int, height: int, t_start=None, t_end=None) -> "EventStream":
        arr = np.asarray([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        return _build_stream(arr, width, height, t_start, t_end, strict=False)

    def sorted(self) -> "EventStream":
        order = np.argsort(self.t, kind="stable")
        return EventStream(self.x[order], self.y[order], self.t[order], self.p[order],
                           self.width, self.height, self.t_start, self.t_end)

    def event_mask(self) -> np.ndarray:
        """Boolean [H, W] map of pixels that received at least one event."""
        mask = np.zeros((self.height, self.width), dtype=bool)
        mask[self.y, self.x] = True
        return mask


def _build_stream(arr: np.ndarray, width, height, t_start, t_end, strict: bool) -> EventStream:
    x, y, t, p = (arr[:, i] for i in range(4))
    if len(arr):
        if np.any(x < 0) or np.any(y < 0) or np.any(t < 0):
            raise MalformedRecord("x, y and t must be non-negative")
        if not np.all(np.isin(p, (1, -1))):
            raise MalformedRecord("polarity must be 1 or -1")
    if width is None:
        width = int(x.max()) + 1 if len(arr) else 0
    if height is None:
        height = int(y.max()) + 1 if len(arr) else 0
    bad = np.flatnonzero((x >= width) | (y >= height))
    if len(bad):
        i = bad[0]
        raise OutOfBounds(f"event {i} at ({x[i]}, {y[i]}) outside {width}x{height}")
    if strict and np.any(np.diff(t) < 0):
        raise NonMonotonicTime("timestamps decrease")
    if t_start is None:
        t_start = int(t.min()) if len(t) else 0
    if t_end is None:
        t_end = int(t.max()) if len(t) else t_start
    if len(t) and (t.min() < t_start or t.max() > t_end):
        raise OutOfBounds("event timestamps fall outside the declared window")
    return EventStream(x, y, t, p, int(width), int(height), int(t_start), int(t_end)).sorted()


# ---------------------------------------------------------------- file formats


def parse_aer(data, width: int | None = None, height: int | None = None, *, strict: bool = False,
              t_start: int | None = None, t_end: int | None = None) -> EventStream:
    """Parse CSV text or the fixed-width binary format into a time-sorted stream.

    Binary input carries its own resolution; for CSV, ``width``/``height``
    default to the smallest size containing every event.
    """
    if isinstance(data, (bytes, bytearray, memoryview)):
        data = bytes(data)
        if data[:4] == BIN_MAGIC:
            return _parse_binary(data, strict, t_start, t_end)
        data = data.decode("utf-8")
    rows = []
    for lineno, line in enumerate(data.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if lineno == 1 and line.replace(" ", "") == "x,y,t,p":
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise MalformedRecord(f"line {lineno}: expected 4 fields, got {len(fields)}")
        try:
            rows.append([int(f) for f in fields])
        except ValueError:
            raise MalformedRecord(f"line {lineno}: non-integer field in {line!r}") from None
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    return _build_stream(arr, width, height, t_start, t_end, strict)


def _parse_binary(data: bytes, strict: bool, t_start, t_end) -> EventStream:
    if len(data) < 16:
        raise MalformedRecord("binary header truncated")
    width, height, count = struct.unpack_from("<III", data, 4)
    body = data[16:]
    if len(body) != count * EVENT_DTYPE.itemsize:
        raise MalformedRecord(f"expected {count} records, found {len(body) / EVENT_DTYPE.itemsize:g}")
    rec = np.frombuffer(body, dtype=EVENT_DTYPE)
    arr = np.stack([rec["x"], rec["y"], rec["t"], rec["p"]], axis=1).astype(np.int64)
    return _build_stream(arr, width, height, t_start, t_end, strict)


def format_csv(stream: EventStream) -> str:
    buf = io.StringIO()
    buf.write("x,y,t,p\n")
    for e in stream:
        buf.write(f"{e.x},{e.y},{e.t},{e.p}\n")
    return buf.getvalue()


def format_binary(stream: EventStream) -> bytes:
    rec = np.zeros(len(stream), dtype=EVENT_DTYPE)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    return BIN_MAGIC + struct.pack("<III", stream.width, stream.height, len(stream)) + rec.tobytes()


def write_events(path, stream: EventStream) -> None:
    path = str(path)
    if path.endswith(".csv"):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(format_csv(stream))
    else:
        with open(path, "wb") as f:
            f.write(format_binary(stream))


def read_events(path, **kwargs) -> EventStream:
    with open(path, "rb") as f:
        return parse_aer(f.read(), **kwargs)


def format_flow(flow: np.ndarray) -> bytes:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be [2, H, W], got {flow.shape}")
    _, h, w = flow.shape
    return FLOW_MAGIC + struct.pack("<II", h, w) + np.ascontiguousarray(flow.transpose(1, 2, 0)).tobytes()


def parse_flow(data: bytes) -> np.ndarray:
    if data[:4] != FLOW_MAGIC or len(data) < 12:
        raise EventFormatError("not a FLO0 flow file")
    h, w = struct.unpack_from("<II", data, 4)
    body = data[12:]
    if len(body) != h * w * 8:
        raise EventFormatError("flow payload size does not match header")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, 2).transpose(2, 0, 1).copy()


def write_flow(path, flow: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(format_flow(flow))


def read_flow(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_flow(f.read())


# ---------------------------------------------------------------- binning


def bin_events(stream: EventStream, T: int) -> np.ndarray:
    """Bilinear temporal binning into a float32 tensor of shape [T, 2, H, W].

    An event at normalized time tau = (t - t_start) / (t_end - t_start) * (T - 1)
    adds max(0, 1 - |tau - b|) to bin b; positive polarity goes to channel 0,
    negative to channel 1. Counts accumulate without clipping.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if stream.t_end <= stream.t_start:
        raise EmptyWindow(f"window [{stream.t_start}, {stream.t_end}] is empty")
    out = np.zeros((T, 2, stream.height, stream.width), dtype=np.float64)
    if len(stream) == 0:
        return out.astype(np.float32)
    chan = (stream.p < 0).astype(np.int64)
    if T == 1:
        np.add.at(out, (0, chan, stream.y, stream.x), 1.0)
        return out.astype(np.float32)
    tau = (stream.t - stream.t_start) / (stream.t_end - stream.t_start) * (T - 1)
    lo = np.clip(np.floor(tau).astype(np.int64), 0, T - 1)
    frac = tau - lo
    hi = np.minimum(lo + 1, T - 1)
    np.add.at(out, (lo, chan, stream.y, stream.x), 1.0 - frac)
    # frac is 0 whenever hi was clipped onto lo
    np.add.at(out, (hi, chan, stream.y, stream.x), frac)
    return out.astype(np.float32)


# ---------------------------------------------------------------- synthesizer


@dataclass
class PatternSpec:
    """A textured layer translating at a constant velocity (px per window).

    ``kind="background"`` fills the whole frame; ``kind="square"`` is a
    ``size``-pixel square whose top-left corner starts at ``position``.
    Patterns later in a scene's list are drawn on top.
    """

    kind: str = "square"
    velocity: tuple[float, float] = (0.0, 0.0)
    size: float = 8.0
    position: tuple[float, float] = (0.0, 0.0)
    brightness: float = 0.5
    contrast: float = 0.0
    texture_seed: int = 0
    wavelength: tuple[float, float] = (12.0, 32.0)


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    duration_us: int = 50_000
    patterns: list = field(default_factory=list)
    theta: float = 0.15
    noise_rate: float = 0.0  # background-activity events per pixel per second
    substeps: int = 32
    ambient: float = 0.2  # intensity where no pattern is drawn
    random_reference: bool = True  # start each pixel at a random phase between threshold crossings

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise InvalidSpec("resolution must be positive")
        if self.duration_us < 1:
            raise InvalidSpec("duration must be positive")
        if self.theta <= 0:
            raise InvalidSpec("contrast threshold must be positive")
        if self.noise_rate < 0:
            raise InvalidSpec("noise rate must be non-negative")
        if self.substeps < 1:
            raise InvalidSpec("substeps must be at least 1")
        for pat in self.patterns:
            if pat.kind not in ("background", "square"):
                raise InvalidSpec(f"unknown pattern kind {pat.kind!r}")
            if pat.kind == "square" and pat.size <= 0:
                raise InvalidSpec("square size must be positive")
            if pat.brightness <= 0:
                raise InvalidSpec("pattern brightness must be positive")


@dataclass
class SceneSample:
    events: EventStream
    flow: np.ndarray  # [2, H, W]
    frame_start: np.ndarray  # [H, W] intensity at t_start
    frame_end: np.ndarray  # [H, W] intensity at t_end


class _Texture:
    """Sum of a few random plane waves, values in roughly [-1, 1]."""

    def __init__(self, seed: int, wavelength: tuple[float, float], n: int = 3):
        rng = np.random.default_rng(seed)
        lam = rng.uniform(*wavelength, n)
        ang = rng.uniform(0, np.pi, n)
        self.kx = 2 * np.pi / lam * np.cos(ang)
        self.ky = 2 * np.pi / lam * np.sin(ang)
        self.phase = rng.uniform(0, 2 * np.pi, n)
        self.amp = rng.uniform(0.5, 1.0, n)
        self.amp /= self.amp.sum()

    def __call__(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        out = np.zeros(np.broadcast(xs, ys).shape)
        for kx, ky, ph, a in zip(self.kx, self.ky, self.phase, self.amp):
            out += a * np.sin(kx * xs + ky * ys + ph)
        return out


def _coverage(lo: float, hi: float, index: np.ndarray) -> np.ndarray:
    # pixel i spans [i, i + 1) in scene coordinates
    return np.clip(np.minimum(index + 1.0, hi) - np.maximum(index, lo), 0.0, 1.0)


def render_frame(spec: SceneSpec, frac: float, textures=None):
    """Intensity image at fraction ``frac`` of the window and the per-pixel top layer."""
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), spec.ambient)
    owner = np.full((h, w), -1)
    textures = textures or [_Texture(p.texture_seed, p.wavelength) for p in spec.patterns]
    for idx, (pat, tex) in enumerate(zip(spec.patterns, textures)):
        dx, dy = pat.velocity[0] * frac, pat.velocity[1] * frac
        lx, ly = xs - pat.position[0] - dx, ys - pat.position[1] - dy
        layer = pat.brightness * (1 + pat.contrast * tex(lx, ly))
        if pat.kind == "background":
            img = layer
            owner[:] = idx
            continue
        x0, y0 = pat.position[0] + dx, pat.position[1] + dy
        cov = _coverage(x0, x0 + pat.size, xs[0])[None, :] * _coverage(y0, y0 + pat.size, ys[:, 0])[:, None]
        img = (1 - cov) * img + cov * layer
        owner[cov > 0.5] = idx
    return np.maximum(img, 1e-3), owner


def synthesize_sample(spec: SceneSpec, seed: int = 0) -> SceneSample:
    """Simulate an event camera watching ``spec`` for one window."""
    spec.validate()
    rng = np.random.default_rng(seed)
    textures = [_Texture(p.texture_seed, p.wavelength) for p in spec.patterns]
    frame0, owner = render_frame(spec, 0.0, textures)
    flow = np.zeros((2, spec.height, spec.width), dtype=np.float32)
    for idx, pat in enumerate(spec.patterns):
        sel = owner == idx
        flow[0][sel] = pat.velocity[0]
        flow[1][sel] = pat.velocity[1]

    log_prev = np.log(frame0)
    log_ref = log_prev.copy()
    if spec.random_reference:
        # a window cut from a running stream finds each pixel at an arbitrary point between crossings
        log_ref += rng.uniform(-spec.theta, spec.theta, log_ref.shape)
    xs, ys, ts, ps = [], [], [], []
    dur = spec.duration_us
    frame = frame0
    for k in range(1, spec.substeps + 1):
        frame, _ = render_frame(spec, k / spec.substeps, textures)
        log_cur = np.log(frame)
        diff = log_cur - log_ref
        n = np.floor(np.abs(diff) / spec.theta).astype(np.int64)
        if n.any():
            sign = np.sign(diff)
            step = log_cur - log_prev
            safe = np.where(step == 0, 1.0, step)
            for j in range(1, int(n.max()) + 1):
                yy, xx = np.nonzero(n >= j)
                level = log_ref[yy, xx] + sign[yy, xx] * j * spec.theta
                f = np.clip((level - log_prev[yy, xx]) / safe[yy, xx], 0.0, 1.0)
                xs.append(xx)
                ys.append(yy)
                ts.append(np.rint((k - 1 + f) / spec.substeps * dur).astype(np.int64))
                ps.append(sign[yy, xx].astype(np.int64))
            log_ref = log_ref + sign * n * spec.theta
        log_prev = log_cur
    frame1 = frame

    n_noise = rng.poisson(spec.noise_rate * spec.width * spec.height * dur * 1e-6)
    if n_noise:
        xs.append(rng.integers(0, spec.width, n_noise))
        ys.append(rng.integers(0, spec.height, n_noise))
        ts.append(rng.integers(0, dur + 1, n_noise))
        ps.append(rng.choice(np.array([-1, 1]), n_noise))

    if xs:
        arr = np.stack([np.concatenate(a) for a in (xs, ys, ts, ps)], axis=1)
    else:
        arr = np.zeros((0, 4), np.int64)
    stream = _build_stream(arr, spec.width, spec.height, 0, dur, strict=False)
    return SceneSample(stream, flow, frame0.astype(np.float32), frame1.astype(np.float32))


def synthesize_scene(spec: SceneSpec, seed: int = 0) -> tuple[EventStream, np.ndarray]:
    sample = synthesize_sample(spec, seed)
    return sample.events, sample.flow


def random_scene_spec(rng: np.random.Generator, width: int = 64, height: int = 64,
                      max_speed: float = 4.0, n_objects: tuple[int, int] = (1, 2),
                      noise_rate: float = 2.0, duration_us: int = 50_000,
                      theta: float = 0.15) -> SceneSpec:
    """A moving textured background with a few textured squares on top."""
    pats = [PatternSpec(
        kind="background",
        velocity=tuple(rng.uniform(-max_speed, max_speed, 2)),
        brightness=float(rng.uniform(0.3, 0.6)),
        contrast=float(rng.uniform(0.5, 0.9)),
        texture_seed=int(rng.integers(2**31)),
        wavelength=(8.0, 20.0),
    )]
    for _ in range(int(rng.integers(n_objects[0], n_objects[1] + 1))):
        size = float(rng.uniform(0.2, 0.4) * min(width, height))
        pats.append(PatternSpec(
            kind="square",
            velocity=tuple(rng.uniform(-max_speed, max_speed, 2)),
            size=size,
            position=(float(rng.uniform(0, width - size)), float(rng.uniform(0, height - size))),
            brightness=float(rng.uniform(0.2, 0.9)),
            contrast=float(rng.uniform(0.4, 0.8)),
            texture_seed=int(rng.integers(2**31)),
            wavelength=(6.0, 16.0),
        ))
    return SceneSpec(width=width, height=height, duration_us=duration_us, patterns=pats,
                     theta=theta, noise_rate=noise_rate)
