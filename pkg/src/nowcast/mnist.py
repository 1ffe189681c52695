"""Moving-MNIST: handwritten digits bouncing inside a square canvas.

Each sprite keeps a real-valued top-left position and a constant speed. When
a step would carry it past a wall, the offending velocity component flips
sign and the position is mirrored back inside, so a sprite never leaves the
canvas. Positions are rounded only when rendering, and overlapping sprites
are composited with an element-wise maximum.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nclt

IDX_IMAGES_MAGIC = 0x00000803
SPLITS = ("train", "val", "test")


class IdxError(ValueError):
    pass


def load_idx(path: str | Path) -> np.ndarray:
    """Read an IDX image file (optionally gzipped) as an ``N x rows x cols`` stack in [0, 1]."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise IdxError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = n * rows * cols
    payload = raw[16:]
    if len(payload) < expected:
        raise IdxError(f"{path}: truncated payload, {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise IdxError(f"{path}: {len(payload) - expected} bytes beyond the declared {n}x{rows}x{cols}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)
    return images.astype(np.float64) / 255.0


def write_idx(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def bundled_digits(size: int = 28) -> np.ndarray:
    """The 1797 scikit-learn handwritten digits, upscaled into MNIST-style 28x28 stamps.

    Used when no MNIST IDX file is available. The 8x8 scans are resized to
    20x20 and centred with a 4-pixel margin, matching the MNIST layout.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    small = load_digits().images / 16.0
    margin = round(size / 7)
    inner = size - 2 * margin
    stamps = np.zeros((len(small), size, size))
    for i, img in enumerate(small):
        big = zoom(img, inner / 8, order=1, grid_mode=True, mode="grid-constant")
        stamps[i, margin:margin + inner, margin:margin + inner] = np.clip(big, 0.0, 1.0)
    return stamps


def rescale_stamps(pool: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of every stamp to ``size x size``."""
    if pool.shape[-1] == size and pool.shape[-2] == size:
        return pool
    from .radar import resize

    return np.clip(resize(pool, (size, size)), 0.0, 1.0)


@dataclass
class DigitSprite:
    stamp: np.ndarray
    x: float
    y: float
    vx: float
    vy: float

    def advance(self, x_max: float, y_max: float) -> None:
        self.x, self.vx = _reflect(self.x + self.vx, self.vx, x_max)
        self.y, self.vy = _reflect(self.y + self.vy, self.vy, y_max)

    def cell(self) -> tuple[int, int]:
        return int(np.rint(self.y)), int(np.rint(self.x))


def _reflect(pos: float, vel: float, hi: float) -> tuple[float, float]:
    # Repeated mirroring handles steps longer than the free range.
    if hi <= 0:
        return 0.0, vel
    while pos < 0 or pos > hi:
        if pos < 0:
            pos = -pos
        else:
            pos = 2 * hi - pos
        vel = -vel
    return pos, vel


@dataclass
class MovingMnistConfig:
    canvas: int = 64
    frames: int = 20
    n_input: int = 10
    digits: int = 2
    pool: tuple[int, int] = (0, 500)
    speed: tuple[float, float] = (3.0, 5.0)
    counts: tuple[int, int, int] = (10000, 2000, 3000)
    seed: int = 0
    digit_size: int = 28

    def to_dict(self) -> dict:
        return asdict(self)


def random_sprites(config: MovingMnistConfig, pool: np.ndarray, rng: np.random.Generator) -> list[DigitSprite]:
    lo, hi = config.pool
    lim = config.canvas - pool.shape[-1]
    sprites = []
    for _ in range(config.digits):
        stamp = pool[rng.integers(lo, hi)]
        x, y = rng.uniform(0, lim, size=2)
        theta = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(*config.speed) if config.speed[1] > config.speed[0] else config.speed[0]
        sprites.append(DigitSprite(stamp, x, y, speed * np.cos(theta), speed * np.sin(theta)))
    return sprites


def render_layers(sprites: list[DigitSprite], canvas: int) -> np.ndarray:
    """One canvas per sprite, ``len(sprites) x canvas x canvas``."""
    layers = np.zeros((len(sprites), canvas, canvas))
    for k, s in enumerate(sprites):
        r, c = s.cell()
        h, w = s.stamp.shape
        layers[k, r:r + h, c:c + w] = s.stamp
    return layers


def simulate(sprites: list[DigitSprite], canvas: int, frames: int) -> np.ndarray:
    """Render ``frames`` steps; returns per-sprite layers ``T x S x canvas x canvas``."""
    out = np.zeros((frames, len(sprites), canvas, canvas))
    lims = [canvas - s.stamp.shape[1] for s in sprites], [canvas - s.stamp.shape[0] for s in sprites]
    for t in range(frames):
        out[t] = render_layers(sprites, canvas)
        for k, s in enumerate(sprites):
            s.advance(lims[0][k], lims[1][k])
    return out


def generate_sequence(config: MovingMnistConfig, seed, pool: np.ndarray) -> np.ndarray:
    """One sequence ``frames x 1 x canvas x canvas``, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    sprites = random_sprites(config, pool, rng)
    layers = simulate(sprites, config.canvas, config.frames)
    return layers.max(axis=1)[:, None]


def pool_hash(pool: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pool, dtype="<f4").tobytes()).hexdigest()


def build_dataset(
    config: MovingMnistConfig,
    out_dir: str | Path,
    pool: np.ndarray,
    threads: int = 1,
    prefix: str = "",
) -> dict[str, Path]:
    """Write ``{train,val,test}.nclt`` stores (``count x frames x 1 x canvas x canvas``) plus a JSON sidecar.

    Splits with a zero count are skipped. Sequence ``i`` of split ``s`` is
    seeded by ``(config.seed, s, i)``, so output is independent of ``threads``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = rescale_stamps(pool, config.digit_size)
    if pool.shape[0] < config.pool[1]:
        raise ValueError(f"digit pool has {pool.shape[0]} stamps, config needs {config.pool[1]}")
    paths = {}
    shape = (config.frames, 1, config.canvas, config.canvas)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        for s, (name, count) in enumerate(zip(SPLITS, config.counts)):
            if count == 0:
                continue
            path = out_dir / f"{prefix}{name}.nclt"
            seeds = [(config.seed, s, i) for i in range(count)]
            with nclt.TensorWriter(path, (count, *shape)) as sink:
                for chunk in range(0, count, 256):
                    batch = list(ex.map(lambda sd: generate_sequence(config, sd, pool), seeds[chunk:chunk + 256]))
                    sink.append(np.stack(batch))
            paths[name] = path
    sidecar = {
        "generator": "moving-mnist",
        "config": config.to_dict(),
        "pool_sha256": pool_hash(pool[config.pool[0]:config.pool[1]]),
        "stores": {k: p.name for k, p in paths.items()},
    }
    (out_dir / f"{prefix}dataset.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return paths
