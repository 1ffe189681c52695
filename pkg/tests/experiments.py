"""Desk-scale experiments shared by the acceptance suite and the ledger runs."""

from __future__ import annotations

import time

import numpy as np

from nowcast.cells import ModelConfig, count_params
from nowcast.metrics import evaluate_frames
from nowcast.mnist import MovingMnistConfig, bundled_digits, generate_sequence, rescale_stamps
from nowcast.network import EncoderForecaster
from nowcast.radar import (
    PipelineConfig,
    SplitPlan,
    SyntheticRadarConfig,
    generate_synthetic_radar,
    preprocess_days,
    split_and_slice,
)
from nowcast.rover import FlowParams, rover
from nowcast.training import Schedule, evaluate_loss, split_io, train


def bouncing_bars(n=4, size=8, frames=10, seed=0, width=3):
    """Full-height (or full-width) bars sliding one pixel per frame and bouncing off the walls."""
    rng = np.random.default_rng(seed)
    out = np.zeros((n, frames, 1, size, size))
    for s in range(n):
        c = rng.integers(0, size - width + 1)
        dc = rng.choice([-1, 1])
        vertical = rng.integers(2)
        for t in range(frames):
            if vertical:
                out[s, t, 0, :, c:c + width] = 1
            else:
                out[s, t, 0, c:c + width, :] = 1
            if not 0 <= c + dc <= size - width:
                dc = -dc
            c += dc
    return out


# -- kernel-size trend on small Moving-MNIST ---------------------------------

TREND_MNIST = MovingMnistConfig(canvas=32, frames=20, n_input=10, digits=1, digit_size=14, speed=(1.5, 2.5))
TREND_BASE = dict(frame_height=32, frame_width=32, patch_size=4, input_kernel=5)
TREND_MODELS = {
    "state3x3": ModelConfig(hidden=(16,), state_kernel=3, **TREND_BASE),
    "state1x1": ModelConfig(hidden=(23,), state_kernel=1, **TREND_BASE),  # parameter count matched
}


def trend_data(seed, n_train=1000, n_val=200):
    pool = rescale_stamps(bundled_digits(), TREND_MNIST.digit_size)
    make = lambda split, n: np.stack([generate_sequence(TREND_MNIST, (seed, split, i), pool) for i in range(n)])
    return make(0, n_train), make(1, n_val)


def kernel_trend_run(seed, iterations=2000, log=print):
    train_seqs, val_seqs = trend_data(seed)
    tr, va = split_io(train_seqs, TREND_MNIST.n_input), split_io(val_seqs, TREND_MNIST.n_input)
    out = {}
    for name, cfg in TREND_MODELS.items():
        t0 = time.time()
        sched = Schedule(lr=1e-3, decay=0.9, batch=8, epochs=10**6, patience=10**6, seed=seed, max_iterations=iterations,
                         prior_bias=True)
        report, best = train(EncoderForecaster(cfg, seed=seed), tr, va, sched)
        out[name] = min(v for _, v in report.val_loss)
        log(f"  seed {seed} {name} params={count_params(cfg)} val={out[name]:.2f} ({time.time() - t0:.0f}s)")
    return out


# -- learned models versus the flow baseline on synthetic radar ----------------

RADAR_SYNTH = SyntheticRadarConfig(days=100, frames=240, height=40, width=40, speed=(0.5, 1.5), clutter_pixels=3)
RADAR_PIPE = PipelineConfig(crop=None, disk_radius=None, size=None)
RADAR_PLAN = SplitPlan()
RADAR_CONV = ModelConfig(frame_height=40, frame_width=40, patch_size=4, hidden=(64, 64), input_kernel=3, state_kernel=3)
RADAR_FC = ModelConfig(cell="fc", frame_height=40, frame_width=40, patch_size=1, hidden=(200, 200))


def radar_data(seed):
    raw = generate_synthetic_radar(RADAR_SYNTH, seed)
    days, _, affine = preprocess_days(raw, RADAR_PIPE)
    split = split_and_slice(len(days), RADAR_PLAN, seed)

    def take(name, limit, stride):
        wins = split.windows[name][::stride][:limit]
        return np.stack([days[d, s:s + RADAR_PLAN.window, None] for d, s in wins]).astype(np.float64)

    return take("train", 2000, 4), take("val", 100, 20), take("test", 200, 10), affine


def radar_ordering_run(seed, iterations=2500, log=print):
    train_seqs, val_seqs, test_seqs, affine = radar_data(seed)
    j = RADAR_PLAN.n_input
    x_test, y_test = split_io(test_seqs, j)
    scores = {}
    for name, cfg in (("convlstm", RADAR_CONV), ("fclstm", RADAR_FC)):
        t0 = time.time()
        sched = Schedule(lr=1e-3, batch=4, epochs=10**6, patience=3, seed=seed, max_iterations=iterations, prior_bias=True)
        _, best = train(EncoderForecaster(cfg, seed=seed), split_io(train_seqs, j), split_io(val_seqs, j), sched)
        pred = np.concatenate([best.predict_sequence(x_test[s:s + 16], y_test.shape[1]) for s in range(0, len(x_test), 16)])
        scores[name] = evaluate_frames(pred, y_test, affine).averages()["csi"]
        log(f"  seed {seed} {name} csi={scores[name]:.3f} ({time.time() - t0:.0f}s)")
    params = FlowParams()
    pred = np.stack([rover(x[:, 0], 2, params, y_test.shape[1])[:, None] for x in x_test])
    scores["rover2"] = evaluate_frames(np.clip(pred, 0, 1), y_test, affine).averages()["csi"]
    log(f"  seed {seed} rover2 csi={scores['rover2']:.3f}")
    return scores
