"""Radar echo preprocessing and a synthetic radar-like sequence generator.

Pipeline per frame: global min/max normalisation of reflectivity, centre
crop, normalised disk filter, bilinear resize, then zeroing of pixels that a
1-D k-means on the monthly pixel average flags as instrument noise.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, signal

from . import nclt


class PreprocessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Affine:
    """``p = (z - zmin) / (zmax - zmin)`` and its inverse."""

    zmin: float
    zmax: float

    def forward(self, z):
        return (np.asarray(z, dtype=np.float64) - self.zmin) / (self.zmax - self.zmin)

    def inverse(self, p):
        return np.asarray(p, dtype=np.float64) * (self.zmax - self.zmin) + self.zmin

    def to_dict(self) -> dict:
        return asdict(self)


def fit_affine(frames) -> Affine:
    """Dataset-global min/max. ``frames`` may be one array or an iterable of arrays."""
    if isinstance(frames, np.ndarray):
        frames = [frames]
    lo, hi = math.inf, -math.inf
    for f in frames:
        lo, hi = min(lo, float(np.min(f))), max(hi, float(np.max(f)))
    if not hi > lo:
        raise PreprocessError("cannot normalise a constant dataset")
    return Affine(lo, hi)


def normalize(frames: np.ndarray, affine: Affine | None = None) -> tuple[np.ndarray, Affine]:
    affine = affine or fit_affine(frames)
    return np.clip(affine.forward(frames), 0.0, 1.0), affine


# ---------------------------------------------------------------------------
# Spatial operators (act on the last two axes)
# ---------------------------------------------------------------------------


def crop_center(frames: np.ndarray, size: int = 330) -> np.ndarray:
    h, w = frames.shape[-2:]
    if h < size or w < size:
        raise PreprocessError(f"cannot crop {size}x{size} from {h}x{w}")
    r, c = (h - size) // 2, (w - size) // 2
    return frames[..., r:r + size, c:c + size]


def _cell_disk_area(radius: float, x0: float, x1: float, y0: float, y1: float) -> float:
    def chord(x):
        s = math.sqrt(max(radius * radius - x * x, 0.0))
        return max(0.0, min(y1, s) - max(y0, -s))

    lo, hi = max(x0, -radius), min(x1, radius)
    if hi <= lo:
        return 0.0
    return integrate.quad(chord, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


def disk_kernel(radius: float = 10) -> np.ndarray:
    """Averaging disk: each entry is the area of its unit cell inside the disk, normalised to sum 1."""
    if radius < 1:
        raise PreprocessError("disk radius must be >= 1")
    n = int(math.ceil(radius - 0.5))
    size = 2 * n + 1
    k = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            y, x = i - n, j - n
            k[i, j] = _cell_disk_area(radius, x - 0.5, x + 0.5, y - 0.5, y + 0.5)
    return k / k.sum()


def disk_filter(frames: np.ndarray, radius: float = 10) -> np.ndarray:
    """Disk average over the last two axes with mirrored (edge-repeating) borders."""
    k = disk_kernel(radius)
    n = k.shape[0] // 2
    frames = np.asarray(frames, dtype=np.float64)
    pad = [(0, 0)] * (frames.ndim - 2) + [(n, n), (n, n)]
    padded = np.pad(frames, pad, mode="symmetric")
    kernel = k[::-1, ::-1].reshape((1,) * (frames.ndim - 2) + k.shape)
    out = signal.fftconvolve(padded, kernel, mode="valid", axes=(-2, -1))
    return np.maximum(out, 0.0) if frames.min() >= 0 else out


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # Half-pixel-centred sample positions, clamped to the source extent.
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = pos - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - t)
    np.add.at(m, (np.arange(n_out), hi), t)
    return m


def resize(frames: np.ndarray, shape: tuple[int, int] = (100, 100)) -> np.ndarray:
    """Bilinear resampling of the last two axes."""
    frames = np.asarray(frames, dtype=np.float64)
    ry = _interp_matrix(shape[0], frames.shape[-2])
    rx = _interp_matrix(shape[1], frames.shape[-1])
    return ry @ frames @ rx.T


# ---------------------------------------------------------------------------
# Noise masking
# ---------------------------------------------------------------------------


def kmeans_1d(values: np.ndarray, k: int = 2, iterations: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm on scalars, seeded at evenly spaced percentiles.

    For ``k=2`` the seeds are the 25th and 75th percentiles. A cluster that
    ends up empty is re-seeded at the value farthest from its nearest centre.
    Returns ``(labels, centres)`` with centres sorted ascending.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    qs = np.linspace(0, 100, k + 2)[1:-1] if k != 2 else np.array([25.0, 75.0])
    centres = np.percentile(v, qs)
    labels = np.zeros(len(v), dtype=int)
    for _ in range(iterations):
        labels = np.argmin(np.abs(v[:, None] - centres[None, :]), axis=1)
        new = centres.copy()
        for c in range(k):
            members = v[labels == c]
            if len(members):
                new[c] = members.mean()
            else:
                far = np.argmax(np.min(np.abs(v[:, None] - centres[None, :]), axis=1))
                new[c] = v[far]
        if np.array_equal(new, centres):
            break
        centres = new
    order = np.argsort(centres, kind="stable")
    rank = np.empty(k, dtype=int)
    rank[order] = np.arange(k)
    labels = rank[np.argmin(np.abs(v[:, None] - centres[None, :]), axis=1)]
    return labels, centres[order]


def noise_mask(monthly_frames: np.ndarray, k: int = 2) -> np.ndarray:
    """Pixels in the highest cluster of the per-pixel monthly mean.

    ``monthly_frames`` is ``T x M x N``; all-equal means give an empty mask.
    """
    means = np.asarray(monthly_frames, dtype=np.float64).mean(axis=0)
    if means.size < 2:
        raise PreprocessError("need at least two pixels")
    if np.ptp(means) == 0:
        return np.zeros(means.shape, dtype=bool)
    labels, _ = kmeans_1d(means, k)
    return (labels == k - 1).reshape(means.shape)


def apply_mask(frames: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, frames)


@dataclass
class PipelineConfig:
    """``crop``, ``disk_radius`` or ``size`` set to None skips that stage."""

    crop: int | None = 330
    disk_radius: float | None = 10
    size: tuple[int, int] | None = (100, 100)
    clusters: int = 2
    days_per_month: int = 30

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PreprocessError(f"unknown preprocessing keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.size is not None:
            cfg.size = tuple(cfg.size)
        return cfg


def preprocess_frames(raw: np.ndarray, affine: Affine, config: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """Normalise, crop, smooth and resize ``T x H x W`` raw frames (masking is separate)."""
    p, _ = normalize(raw, affine)
    if config.crop is not None:
        p = crop_center(p, config.crop)
    if config.disk_radius is not None:
        p = disk_filter(p, config.disk_radius)
    if config.size is not None:
        p = resize(p, tuple(config.size))
    return np.clip(p, 0.0, 1.0)


def preprocess_days(raw_days, config: PipelineConfig = PipelineConfig(), threads: int = 1) -> tuple[np.ndarray, np.ndarray, Affine]:
    """Run the full pipeline over ``days x T x H x W`` raw reflectivity.

    The global min/max pass runs first; days are then processed in parallel.
    Each block of ``days_per_month`` consecutive days gets its own noise
    mask. Returns float32 frames, the per-day masks and the affine map.
    """
    affine = fit_affine(raw_days[d] for d in range(len(raw_days)))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        days = list(ex.map(lambda d: preprocess_frames(np.asarray(raw_days[d], dtype=np.float64), affine, config).astype(np.float32),
                           range(len(raw_days))))
    out = np.stack(days)
    masks = np.zeros((len(out),) + out.shape[-2:], dtype=bool)
    for m in range(0, len(out), config.days_per_month):
        month = out[m:m + config.days_per_month]
        mask = noise_mask(month.reshape(-1, *out.shape[-2:]), config.clusters)
        masks[m:m + config.days_per_month] = mask
        out[m:m + config.days_per_month] = np.where(mask, 0.0, month)
    return out, masks, affine


# ---------------------------------------------------------------------------
# Train / test / validation slicing
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "test", "val")


@dataclass
class SplitPlan:
    """How each day is cut into blocks and windows.

    The default cuts a 240-frame day into six 40-frame blocks and assigns
    four to training, one to testing and one to validation; a 20-frame window
    slid with stride 1 then yields 21 windows per block. ``literal()`` gives
    forty six-frame blocks, which only yield windows once runs of temporally
    adjacent same-split blocks are merged (``merge=True``).
    """

    frames_per_day: int = 240
    blocks_per_day: int = 6
    pattern: tuple[str, ...] = ("train", "train", "train", "train", "test", "val")
    window: int = 20
    n_input: int = 5
    merge: bool = False

    @classmethod
    def literal(cls) -> "SplitPlan":
        return cls(blocks_per_day=40, merge=True)

    @property
    def block_frames(self) -> int:
        return self.frames_per_day // self.blocks_per_day


@dataclass
class SplitResult:
    assignment: np.ndarray  # days x blocks, index into SPLIT_NAMES
    windows: dict[str, list[tuple[int, int]]] = field(default_factory=dict)  # (day, start frame)

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.windows.items()}

    def frame_sets(self, plan: SplitPlan) -> dict[str, set[tuple[int, int]]]:
        out = {name: set() for name in SPLIT_NAMES}
        for day, row in enumerate(self.assignment):
            for b, s in enumerate(row):
                for f in range(b * plan.block_frames, (b + 1) * plan.block_frames):
                    out[SPLIT_NAMES[s]].add((day, f))
        return out


def assign_blocks(n_days: int, plan: SplitPlan, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    group = len(plan.pattern)
    codes = np.array([SPLIT_NAMES.index(p) for p in plan.pattern])
    out = np.zeros((n_days, plan.blocks_per_day), dtype=int)
    for d in range(n_days):
        for g in range(0, plan.blocks_per_day, group):
            n = min(group, plan.blocks_per_day - g)
            out[d, g:g + n] = rng.permutation(codes)[:n]
    return out


def split_and_slice(n_days: int, plan: SplitPlan, seed: int, day_lengths=None) -> SplitResult:
    """Assign blocks to splits and enumerate sliding windows inside same-split runs."""
    if plan.frames_per_day % plan.blocks_per_day:
        raise PreprocessError("frames per day must divide evenly into blocks")
    if day_lengths is not None:
        short = [i for i, n in enumerate(day_lengths) if n != plan.frames_per_day]
        if short:
            raise PreprocessError(f"days {short} do not have {plan.frames_per_day} frames")
    assignment = assign_blocks(n_days, plan, seed)
    result = SplitResult(assignment, {name: [] for name in SPLIT_NAMES})
    bf = plan.block_frames
    for day, row in enumerate(assignment):
        b = 0
        while b < len(row):
            e = b
            while plan.merge and e + 1 < len(row) and row[e + 1] == row[b]:
                e += 1
            start, stop = b * bf, (e + 1) * bf
            for s in range(start, stop - plan.window + 1):
                result.windows[SPLIT_NAMES[row[b]]].append((day, s))
            b = e + 1
    return result


def write_split_stores(days: np.ndarray, split: SplitResult, plan: SplitPlan, out_dir, prefix: str = "") -> dict[str, Path]:
    """Write ``{train,test,val}.nclt`` stores of shape ``n x window x 1 x M x N``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLIT_NAMES:
        wins = split.windows[name]
        if not wins:
            continue
        path = out_dir / f"{prefix}{name}.nclt"
        with nclt.TensorWriter(path, (len(wins), plan.window, 1) + days.shape[-2:]) as sink:
            for c in range(0, len(wins), 256):
                sink.append(np.stack([days[d, s:s + plan.window, None] for d, s in wins[c:c + 256]]))
        paths[name] = path
    return paths


def build_radar_dataset(raw_days, out_dir, seed: int, plan: SplitPlan = SplitPlan(),
                        config: PipelineConfig = PipelineConfig(), threads: int = 1) -> dict:
    """Preprocess, split, and write sequence stores plus a ``dataset.json`` sidecar."""
    if raw_days.shape[1] != plan.frames_per_day:
        raise PreprocessError(f"days have {raw_days.shape[1]} frames, plan expects {plan.frames_per_day}")
    days, masks, affine = preprocess_days(raw_days, config, threads)
    split = split_and_slice(len(days), plan, seed)
    paths = write_split_stores(days, split, plan, out_dir)
    sidecar = {
        "generator": "radar-preprocess",
        "affine": affine.to_dict(),
        "plan": asdict(plan),
        "pipeline": asdict(config),
        "seed": seed,
        "counts": split.counts(),
        "n_input": plan.n_input,
        "masked_pixels": int(masks[0].sum()) if len(masks) else 0,
        "stores": {k: p.name for k, p in paths.items()},
    }
    Path(out_dir, "dataset.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar


# ---------------------------------------------------------------------------
# Synthetic radar-like days
# ---------------------------------------------------------------------------


@dataclass
class SyntheticRadarConfig:
    """Gaussian rain cells carried by a spatially uniform, slowly turning wind.

    Cells are scattered over the whole region the wind can sweep into view
    during a day, so they drift in across the borders. Each cell waxes and
    wanes on its own smooth envelope unless ``growth`` is off. Values are
    reflectivity in dBZ; a few fixed clutter pixels carry a constant echo.
    """

    days: int = 100
    frames: int = 240
    height: int = 100
    width: int = 100
    speed: tuple[float, float] = (0.5, 2.0)
    turn_rate: float = 0.004  # max |d(direction)/dt|, radians per frame
    cell_density: float = 6.0  # cells per 100x100 area
    cell_sigma: tuple[float, float] = (3.0, 8.0)
    cell_peak: tuple[float, float] = (0.6, 1.5)
    lifetime: tuple[float, float] = (40.0, 160.0)
    growth: bool = True
    flow: tuple[float, float] | None = None  # fixed (u, v); overrides speed/turn_rate
    zmax: float = 70.0
    clutter_pixels: int = 0
    clutter_level: float = 60.0

    def to_dict(self) -> dict:
        return asdict(self)


def _day_wind(cfg: SyntheticRadarConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(cfg.frames)
    if cfg.flow is not None:
        return np.full(cfg.frames, float(cfg.flow[0])), np.full(cfg.frames, float(cfg.flow[1]))
    speed = rng.uniform(*cfg.speed)
    theta0 = rng.uniform(0, 2 * np.pi)
    omega = rng.uniform(-cfg.turn_rate, cfg.turn_rate)
    theta = theta0 + omega * t
    return speed * np.cos(theta), speed * np.sin(theta)


def synthetic_day(cfg: SyntheticRadarConfig, rng: np.random.Generator, clutter: np.ndarray | None = None) -> np.ndarray:
    """One day, ``frames x height x width`` reflectivity in ``[0, zmax]``."""
    u, v = _day_wind(cfg, rng)
    # Cell displacement at frame t is the wind integrated over the frames before t.
    dx = np.concatenate([[0.0], np.cumsum(u)[:-1]])
    dy = np.concatenate([[0.0], np.cumsum(v)[:-1]])
    margin = 3 * cfg.cell_sigma[1]
    x_lo, x_hi = -dx.max() - margin, cfg.width - dx.min() + margin
    y_lo, y_hi = -dy.max() - margin, cfg.height - dy.min() + margin
    area = (x_hi - x_lo) * (y_hi - y_lo)
    n = rng.poisson(cfg.cell_density * area / 1e4)
    x0 = rng.uniform(x_lo, x_hi, n)
    y0 = rng.uniform(y_lo, y_hi, n)
    sigma = rng.uniform(*cfg.cell_sigma, n)
    peak = rng.uniform(*cfg.cell_peak, n)
    if cfg.growth:
        life = rng.uniform(*cfg.lifetime, n)
        born = rng.uniform(-life, cfg.frames, n)
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    out = np.zeros((cfg.frames, cfg.height, cfg.width))
    for t in range(cfg.frames):
        cx, cy = x0 + dx[t], y0 + dy[t]
        amp = peak.copy()
        if cfg.growth:
            phase = (t - born) / life
            amp = np.where((phase > 0) & (phase < 1), peak * np.sin(np.pi * np.clip(phase, 0, 1)) ** 2, 0.0)
        near = (amp > 0) & (cx > -4 * sigma) & (cx < cfg.width + 4 * sigma) & (cy > -4 * sigma) & (cy < cfg.height + 4 * sigma)
        field_ = np.zeros((cfg.height, cfg.width))
        for i in np.nonzero(near)[0]:
            gx = np.exp(-0.5 * ((xx[0] - cx[i]) / sigma[i]) ** 2)
            gy = np.exp(-0.5 * ((yy[:, 0] - cy[i]) / sigma[i]) ** 2)
            field_ += amp[i] * np.outer(gy, gx)
        out[t] = cfg.zmax * (1.0 - np.exp(-field_))
    if clutter is not None:
        out[:, clutter] = np.maximum(out[:, clutter], cfg.clutter_level)
    return out


def generate_synthetic_radar(cfg: SyntheticRadarConfig, seed: int) -> np.ndarray:
    """``days x frames x height x width`` reflectivity, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    clutter = None
    if cfg.clutter_pixels:
        clutter = np.zeros((cfg.height, cfg.width), dtype=bool)
        clutter.flat[rng.choice(cfg.height * cfg.width, cfg.clutter_pixels, replace=False)] = True
    return np.stack([synthetic_day(cfg, np.random.default_rng([seed, d]), clutter) for d in range(cfg.days)])
