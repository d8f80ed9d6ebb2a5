"""Contrast-threshold event simulator over single moving-shape scenes.

Also produces the templated conversations paired with each simulated clip
and writes whole datasets as JSON Lines manifests plus ``EVST`` event files.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream, write_stream

SHAPES = ("circle", "square", "triangle")
DIRECTIONS = ("east", "northeast", "north", "northwest", "west", "southwest", "south", "southeast")
SPEEDS = ("slow", "medium", "fast")
TASKS = ("caption", "reasoning", "vqa")
VQA_ATTRIBUTES = ("shape", "direction", "speed")

# |v| thresholds (pixels/second) separating slow | medium | fast
SPEED_EDGES = (20.0, 40.0)
# sampling ranges kept clear of the edges so labels are never borderline
SPEED_RANGES = {"slow": (8.0, 16.0), "medium": (24.0, 36.0), "fast": (46.0, 60.0)}

US = 1_000_000


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    size: float
    velocity: tuple[float, float]
    start: tuple[float, float]
    foreground: float = 0.9
    background: float = 0.2
    duration: int = 500_000
    resolution: tuple[int, int] = (64, 64)
    contrast_threshold: float = 0.3
    render_rate: float = 200.0
    seed: int = 0
    noise_rate_hz: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if not (0 < self.foreground <= 1 and 0 < self.background <= 1):
            raise SceneError("intensities must lie in (0, 1]")
        if self.foreground == self.background:
            raise SceneError("foreground and background intensities must differ")
        if self.contrast_threshold <= 0 or self.render_rate <= 0 or self.duration <= 0:
            raise SceneError("contrast threshold, render rate and duration must be positive")
        h, w = self.resolution
        half = self.size / 2
        for cx, cy in (self.position(0), self.position(self.duration)):
            if cx - half < 0 or cy - half < 0 or cx + half > w - 1 or cy + half > h - 1:
                raise SceneError(f"{self.shape} of size {self.size} leaves the {w}x{h} frame")

    def position(self, t: float) -> tuple[float, float]:
        s = t / US
        return self.start[0] + self.velocity[0] * s, self.start[1] + self.velocity[1] * s

    def to_meta(self) -> dict:
        d = asdict(self)
        d["velocity"] = list(self.velocity)
        d["start"] = list(self.start)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_meta(cls, meta: dict) -> "SceneSpec":
        names = cls.__dataclass_fields__
        kw = {k: meta[k] for k in names if k in meta}
        for k in ("velocity", "start", "resolution"):
            kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class GroundTruth:
    shape: str
    direction: str
    speed: str
    spec: SceneSpec

    def to_meta(self) -> dict:
        return {"shape_name": self.shape, "direction": self.direction, "speed_label": self.speed,
                **self.spec.to_meta()}

    @classmethod
    def from_meta(cls, meta: dict) -> "GroundTruth":
        return ground_truth(SceneSpec.from_meta(meta))


def direction_label(vx: float, vy: float) -> str:
    """8-way compass label; image rows grow downwards, so north is -y."""
    angle = math.degrees(math.atan2(-vy, vx)) % 360.0
    return DIRECTIONS[int(((angle + 22.5) % 360.0) // 45.0)]


def speed_label(vx: float, vy: float) -> str:
    v = math.hypot(vx, vy)
    if v < SPEED_EDGES[0]:
        return "slow"
    return "medium" if v < SPEED_EDGES[1] else "fast"


def ground_truth(spec: SceneSpec) -> GroundTruth:
    return GroundTruth(spec.shape, direction_label(*spec.velocity), speed_label(*spec.velocity), spec)


# ---------------------------------------------------------------- rendering


def shape_mask(shape: str, size: float, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    """Pixels whose centres fall inside the shape centred at (cx, cy)."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    half = size / 2
    if shape == "circle":
        return dx * dx + dy * dy <= half * half
    if shape == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # upward equilateral triangle with side `size`, centred on its centroid
    tri_h = size * math.sqrt(3) / 2
    top = -2 * tri_h / 3
    base = tri_h / 3
    inside_y = (dy >= top) & (dy <= base)
    # half-width grows linearly from the apex to the base
    half_w = (dy - top) / tri_h * half
    return inside_y & (np.abs(dx) <= half_w)


def shape_area(shape: str, size: float) -> float:
    if shape == "circle":
        return math.pi * (size / 2) ** 2
    if shape == "square":
        return size * size
    return math.sqrt(3) / 4 * size * size


def render_intensity(spec: SceneSpec, t: float) -> np.ndarray:
    """Intensity image in (0, 1] at time ``t`` microseconds."""
    if not 0 <= t <= spec.duration:
        raise SceneError(f"time {t} outside [0, {spec.duration}]")
    h, w = spec.resolution
    cx, cy = spec.position(t)
    img = np.full((h, w), spec.background, dtype=np.float64)
    img[shape_mask(spec.shape, spec.size, cx, cy, h, w)] = spec.foreground
    return img


def frame_times(spec: SceneSpec) -> np.ndarray:
    n = max(1, math.ceil(spec.duration * spec.render_rate / US))
    return np.minimum(np.arange(n + 1) * (US / spec.render_rate), spec.duration)


def simulate_events(spec: SceneSpec) -> EventStream:
    """Per-pixel log-intensity threshold crossings between consecutive rendered frames."""
    h, w = spec.resolution
    c = spec.contrast_threshold
    times = frame_times(spec)
    prev = np.log(render_intensity(spec, 0.0)).ravel()
    ref = prev.copy()
    ts, xs, ys, ps = [], [], [], []
    for k in range(1, len(times)):
        t_prev, t_cur = times[k - 1], times[k]
        cur = np.log(render_intensity(spec, t_cur)).ravel()
        slope = cur - prev
        while True:
            diff = cur - ref
            fire = np.flatnonzero(np.abs(diff) >= c)
            if fire.size == 0:
                break
            pol = np.sign(diff[fire])
            level = ref[fire] + pol * c
            ref[fire] = level
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(slope[fire] != 0, (level - prev[fire]) / slope[fire], 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            ts.append(np.floor(t_prev + frac * (t_cur - t_prev)).astype(np.int64))
            ys.append(fire // w)
            xs.append(fire % w)
            ps.append(pol.astype(np.int8))
        prev = cur
    if spec.noise_rate_hz > 0:
        rng = np.random.default_rng([spec.seed, 0x5EED])
        n = rng.poisson(spec.noise_rate_hz * h * w * spec.duration / US)
        ts.append(rng.integers(0, spec.duration + 1, n))
        ys.append(rng.integers(0, h, n))
        xs.append(rng.integers(0, w, n))
        ps.append(rng.choice(np.array([-1, 1], dtype=np.int8), n))
    if not ts:
        return EventStream(w, h)
    t = np.concatenate(ts)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    p = np.concatenate(ps)
    # stable sort keeps emission order (and so per-pixel polarity order) among equal timestamps
    order = np.argsort(t, kind="stable")
    return EventStream(w, h, t[order], x[order], y[order], p[order])


# ---------------------------------------------------------------- text


def _sentence(s: str) -> str:
    return s[0].upper() + s[1:]


def future_position(gt: GroundTruth, horizon_s: float) -> tuple[int, int]:
    spec = gt.spec
    s = spec.duration / US + horizon_s
    return (round(spec.start[0] + spec.velocity[0] * s), round(spec.start[1] + spec.velocity[1] * s))


def vqa_turn(gt: GroundTruth, attribute: str) -> list[dict]:
    if attribute == "shape":
        q, a = "What shape is moving?", f"A {gt.shape}."
    elif attribute == "direction":
        q, a = "Which direction is the object moving?", f"{_sentence(gt.direction)}."
    elif attribute == "speed":
        q, a = "How fast is the object moving?", f"{_sentence(gt.speed)}."
    else:
        raise ValueError(f"unknown attribute {attribute!r}")
    return [{"role": "user", "text": q}, {"role": "assistant", "text": a}]


def make_text(gt: GroundTruth, task: str, *, attribute: str = "shape", horizon_s: float = 0.5) -> list[dict]:
    """One user/assistant exchange for ``task``."""
    if task == "caption":
        return [{"role": "user", "text": "Describe the scene."},
                {"role": "assistant", "text": f"A {gt.shape} is moving {gt.direction} at {gt.speed} speed."}]
    if task == "vqa":
        return vqa_turn(gt, attribute)
    if task == "reasoning":
        x, y = future_position(gt, horizon_s)
        return [{"role": "user", "text": f"Where will the {gt.shape} be {horizon_s:g} s after the clip?"},
                {"role": "assistant", "text": f"Near ({x}, {y})."}]
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetRecord:
    id: str
    events: str
    task: str
    conversations: list[dict]
    meta: dict
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        d = json.loads(line)
        return cls(d["id"], d["events"], d["task"], d["conversations"], d["meta"], d.get("split", "train"))

    @property
    def ground_truth(self) -> GroundTruth:
        return GroundTruth.from_meta(self.meta)


@dataclass
class SimConfig:
    resolution: tuple[int, int] = (64, 64)
    duration: int = 500_000
    render_rate: float = 200.0
    contrast_threshold: float = 0.3
    size_range: tuple[float, float] = (14.0, 22.0)
    task_weights: dict = field(default_factory=lambda: {"caption": 0.3, "vqa": 0.55, "reasoning": 0.15})
    noise_rate_hz: float = 0.0


def sample_scene(rng: np.random.Generator, seed: int, cfg: SimConfig = SimConfig()) -> SceneSpec:
    h, w = cfg.resolution
    shape = SHAPES[rng.integers(len(SHAPES))]
    size = float(np.round(rng.uniform(*cfg.size_range), 2))
    k = int(rng.integers(len(DIRECTIONS)))
    speed = SPEEDS[rng.integers(len(SPEEDS))]
    mag = float(rng.uniform(*SPEED_RANGES[speed]))
    ang = math.radians(45.0 * k)
    vx = round(mag * math.cos(ang), 3)
    vy = round(-mag * math.sin(ang), 3)
    dur_s = cfg.duration / US
    half = size / 2 + 1.0
    # start positions that keep both endpoints of the path inside the frame
    lo_x, hi_x = half - min(0.0, vx * dur_s), (w - 1) - half - max(0.0, vx * dur_s)
    lo_y, hi_y = half - min(0.0, vy * dur_s), (h - 1) - half - max(0.0, vy * dur_s)
    if lo_x > hi_x or lo_y > hi_y:
        raise SceneError("frame too small for the sampled motion")
    start = (round(float(rng.uniform(lo_x, hi_x)), 2), round(float(rng.uniform(lo_y, hi_y)), 2))
    fg = round(float(rng.uniform(0.7, 1.0)), 3)
    bg = round(float(rng.uniform(0.05, 0.25)), 3)
    return SceneSpec(shape, size, (vx, vy), start, fg, bg, cfg.duration, cfg.resolution,
                     cfg.contrast_threshold, cfg.render_rate, seed, cfg.noise_rate_hz)


def split_sizes(n: int, ratios) -> list[int]:
    sizes = [int(math.floor(n * r + 0.5)) for r in ratios]
    sizes[0] += n - sum(sizes)
    return sizes


def generate_dataset(
    n: int,
    seed: int,
    out_dir: str | os.PathLike,
    split_ratios=(0.8, 0.1, 0.1),
    cfg: SimConfig | None = None,
) -> dict[str, Path]:
    """Simulate ``n`` clips and write ``{train,val,test}.jsonl`` plus ``events/*.evst``.

    Returns the manifest path per split.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(split_ratios) != 3 or abs(sum(split_ratios) - 1.0) > 1e-9 or min(split_ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {split_ratios}")
    cfg = cfg or SimConfig()
    out = Path(out_dir)
    ev_dir = out / "events"
    try:
        ev_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {ev_dir}: {exc}") from exc

    order = np.random.default_rng([seed, 1]).permutation(n)
    sizes = split_sizes(n, split_ratios)
    split_of = {}
    names = ("train", "val", "test")
    pos = 0
    for name, size in zip(names, sizes):
        for i in order[pos:pos + size]:
            split_of[int(i)] = name
        pos += size

    tasks = list(cfg.task_weights)
    probs = np.array([cfg.task_weights[t] for t in tasks], dtype=float)
    probs /= probs.sum()
    lines: dict[str, list[str]] = {k: [] for k in names}
    for i in range(n):
        rng = np.random.default_rng([seed, 2, i])
        spec = sample_scene(rng, seed * 1_000_003 + i, cfg)
        gt = ground_truth(spec)
        task = tasks[int(rng.choice(len(tasks), p=probs))]
        attribute = VQA_ATTRIBUTES[int(rng.integers(len(VQA_ATTRIBUTES)))]
        horizon = float(rng.choice([0.1, 0.2, 0.5]))
        rid = f"{seed}-{i:06d}"
        rel = f"events/{rid}.evst"
        path = out / rel
        try:
            write_stream(path, simulate_events(spec))
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        rec = DatasetRecord(rid, rel, task, make_text(gt, task, attribute=attribute, horizon_s=horizon),
                            gt.to_meta(), split_of[i])
        lines[rec.split].append(rec.to_json())
    paths = {}
    for name in names:
        p = out / f"{name}.jsonl"
        try:
            p.write_text("".join(line + "\n" for line in lines[name]))
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        paths[name] = p
    return paths


def read_manifest(path: str | os.PathLike) -> list[DatasetRecord]:
    text = Path(path).read_text()
    return [DatasetRecord.from_json(line) for line in text.splitlines() if line.strip()]
