import gzip
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from nowcast import nclt
from nowcast.frames import patchify, unpatchify
from nowcast.mnist import (
    DigitSprite,
    IdxError,
    MovingMnistConfig,
    build_dataset,
    bundled_digits,
    generate_sequence,
    load_idx,
    random_sprites,
    render_layers,
    simulate,
    write_idx,
)

MNIST_CANDIDATES = [
    Path("train-images-idx3-ubyte"),
    Path("train-images-idx3-ubyte.gz"),
    Path.home() / ".cache" / "mnist" / "train-images-idx3-ubyte.gz",
]


@pytest.fixture(scope="module")
def pool():
    return bundled_digits()


def test_idx_roundtrip_and_gzip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28)).astype(np.uint8)
    write_idx(tmp_path / "a.idx", imgs)
    np.testing.assert_array_equal(load_idx(tmp_path / "a.idx"), imgs / 255.0)
    with gzip.open(tmp_path / "a.idx.gz", "wb") as fh:
        fh.write((tmp_path / "a.idx").read_bytes())
    np.testing.assert_array_equal(load_idx(tmp_path / "a.idx.gz"), imgs / 255.0)


def test_idx_all_zero_file(tmp_path):
    write_idx(tmp_path / "z.idx", np.zeros((2, 28, 28), dtype=np.uint8))
    out = load_idx(tmp_path / "z.idx")
    assert out.shape == (2, 28, 28) and not out.any()


def test_idx_errors(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack(">IIII", 0x801, 1, 28, 28) + bytes(784))
    with pytest.raises(IdxError, match="magic"):
        load_idx(p)
    p.write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + bytes(784))
    with pytest.raises(IdxError, match="truncated"):
        load_idx(p)
    p.write_bytes(struct.pack(">IIII", 0x803, 1, 28, 28) + bytes(785))
    with pytest.raises(IdxError, match="beyond"):
        load_idx(p)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(IdxError):
        load_idx(p)


def test_real_mnist_header_if_available():
    found = [p for p in MNIST_CANDIDATES if p.exists()]
    if not found:
        pytest.skip("no MNIST training image file available offline")
    assert load_idx(found[0]).shape == (60000, 28, 28)


def test_bundled_digits_layout(pool):
    assert pool.shape == (1797, 28, 28)
    assert pool.min() >= 0 and pool.max() <= 1
    assert not pool[:, :4].any() and not pool[:, -4:].any()


def test_reflection_at_left_wall():
    s = DigitSprite(np.ones((2, 2)), x=0.0, y=5.0, vx=-2.0, vy=0.0)
    s.advance(10, 10)
    assert (s.x, s.vx) == (2.0, 2.0)
    s = DigitSprite(np.ones((2, 2)), x=9.0, y=5.0, vx=3.0, vy=0.0)
    s.advance(10, 10)
    assert (s.x, s.vx) == (8.0, -3.0)


def test_long_step_folds_back_inside():
    s = DigitSprite(np.ones((2, 2)), x=3.0, y=0.0, vx=9.0, vy=0.0)
    s.advance(4, 4)
    assert 0 <= s.x <= 4 and s.x == 4.0 and s.vx == 9.0  # two bounces restore the direction


def test_zero_velocity_is_static(pool):
    s = DigitSprite(pool[0], 10.3, 20.7, 0.0, 0.0)
    layers = simulate([s], 64, 5)
    for t in range(1, 5):
        np.testing.assert_array_equal(layers[t], layers[0])


def test_max_compositing():
    a = DigitSprite(np.full((3, 3), 0.4), 0, 0, 0, 0)
    b = DigitSprite(np.full((3, 3), 0.7), 1, 1, 0, 0)
    frame = render_layers([a, b], 6).max(axis=0)
    assert frame[1, 1] == 0.7 and frame[0, 0] == 0.4 and frame[3, 3] == 0.7 and frame[5, 5] == 0


def test_mass_and_speed_invariants(pool):
    cfg = MovingMnistConfig()
    for i in range(1000):
        rng = np.random.default_rng([7, i])
        sprites = random_sprites(cfg, pool, rng)
        speeds = [np.hypot(s.vx, s.vy) for s in sprites]
        masses = [s.stamp.sum() for s in sprites]
        layers = simulate(sprites, cfg.canvas, cfg.frames)
        # Each digit stays whole on the canvas in every frame...
        np.testing.assert_allclose(layers.sum(axis=(2, 3)), np.tile(masses, (cfg.frames, 1)), rtol=1e-12)
        # ...and keeps its speed through every bounce.
        np.testing.assert_allclose([np.hypot(s.vx, s.vy) for s in sprites], speeds, rtol=1e-12)
        assert all(3.0 <= v <= 5.0 for v in speeds)


def test_sequence_values_and_determinism(pool):
    cfg = MovingMnistConfig(frames=6)
    a = generate_sequence(cfg, (1, 2, 3), pool)
    assert a.shape == (6, 1, 64, 64) and a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, generate_sequence(cfg, (1, 2, 3), pool))


@pytest.mark.parametrize("p", [1, 2, 4])
def test_patchify_roundtrip_bitexact(p):
    x = np.random.default_rng(p).uniform(size=(2, 3, 1, 8, 8))
    np.testing.assert_array_equal(unpatchify(patchify(x, p), p), x)


def test_patchify_is_a_bijection_with_documented_layout():
    x = np.arange(2 * 8 * 8, dtype=float).reshape(2, 8, 8)
    y = patchify(x, 4)
    assert y.shape == (32, 2, 2)
    assert sorted(y.ravel()) == sorted(x.ravel())
    for ch in range(2):
        for a in range(4):
            for b in range(4):
                np.testing.assert_array_equal(y[ch * 16 + a * 4 + b], x[ch, a::4, b::4])


def test_build_dataset_counts_and_reruns(tmp_path, pool):
    cfg = MovingMnistConfig(canvas=32, frames=4, counts=(5, 2, 3), digit_size=14, seed=3)
    build_dataset(cfg, tmp_path / "a", pool, threads=1)
    build_dataset(cfg, tmp_path / "b", pool, threads=3)
    for split, n in zip(("train", "val", "test"), cfg.counts):
        arr = nclt.read_tensor(tmp_path / "a" / f"{split}.nclt")
        assert arr.shape == (n, 4, 1, 32, 32)
        assert (tmp_path / "a" / f"{split}.nclt").read_bytes() == (tmp_path / "b" / f"{split}.nclt").read_bytes()
    meta = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert meta["config"]["counts"] == [5, 2, 3]


def test_out_of_domain_variant(tmp_path, pool):
    cfg = MovingMnistConfig(frames=3, digits=3, pool=(500, 1000), counts=(0, 0, 4))
    paths = build_dataset(cfg, tmp_path, pool, prefix="ood_")
    assert list(paths) == ["test"]
    arr = nclt.read_tensor(paths["test"])
    assert arr.shape == (4, 3, 1, 64, 64)
    rng = np.random.default_rng(0)
    picks = [s.stamp for s in random_sprites(cfg, pool, rng)]
    assert len(picks) == 3
    # Stamps come from the held-out half of the pool only.
    assert all(any(np.array_equal(p, pool[j]) for j in range(500, 1000)) for p in picks)
