"""Encoder-forecaster network built from stacked LSTM layers.

The encoder reads J observed frames. Its final per-layer states are copied
into the forecaster, which then unrolls K steps with absent input. At every
forecast step the hidden states of all forecaster layers are concatenated
(layer order ascending) and mapped to a frame by a 1x1 convolution followed
by a sigmoid. The FC-LSTM variant flattens frames to vectors and reads out
from the top layer through a fully connected map.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import nclt
from .cells import (
    CellState,
    ConfigError,
    ModelConfig,
    convlstm_fused_step,
    fclstm_fused_step,
    fuse,
    init_params,
    layer_params,
    param_shapes,
    zero_state,
)
from .frames import patchify, unpatchify
from .tensor import Tensor, bce_loss, concat, conv2d, copy, linear, no_tape, parameter, scale, sigmoid, add


def copy_states(encoder_final: list[CellState], depth: int | None = None) -> list[CellState]:
    """Hand the encoder's last states to the forecaster as fresh values.

    The copies are new tensors (later forecaster steps can never alias the
    encoder's history) but stay on the tape, so forecast gradients still
    reach the encoder.
    """
    if depth is not None and len(encoder_final) != depth:
        raise ValueError(f"state stack depth {len(encoder_final)} != forecaster depth {depth}")
    return [CellState(copy(s.hidden), copy(s.cell)) for s in encoder_final]


class EncoderForecaster:
    """Stacked-LSTM sequence-to-sequence forecaster.

    Frames are passed as float arrays shaped ``(B, T, C, H, W)`` (or without
    the batch axis) with values in ``[0, 1]``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = init_params(config, seed)
        expected = param_shapes(config)
        if [n for n, _ in expected] != list(params):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = params

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def with_values(self, arrays: list[np.ndarray]) -> "EncoderForecaster":
        """A model with the same config and new parameter values."""
        params = {n: parameter(a, name=n) for n, a in zip(self.params, arrays)}
        return EncoderForecaster(self.config, params)

    # -- data plumbing ------------------------------------------------------

    def _check_frames(self, frames: np.ndarray, what: str) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        cfg = self.config
        want = (cfg.frame_channels, cfg.frame_height, cfg.frame_width)
        if frames.ndim != 5 or frames.shape[2:] != want:
            raise ValueError(f"{what}: expected (B, T, {', '.join(map(str, want))}), got {frames.shape}")
        if frames.shape[1] < 1:
            raise ValueError(f"{what}: need at least one frame")
        return frames

    def to_model_space(self, frames: np.ndarray) -> np.ndarray:
        """``(B, T, C, H, W)`` -> per-step model inputs ``(B, T, ...)``."""
        cfg = self.config
        if cfg.cell == "conv":
            return patchify(frames, cfg.patch_size)
        return frames.reshape(*frames.shape[:2], -1)

    def from_model_space(self, arr: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.cell == "conv":
            return unpatchify(arr, cfg.patch_size, cfg.frame_channels)
        return arr.reshape(*arr.shape[:2], cfg.frame_channels, cfg.frame_height, cfg.frame_width)

    def _state_shape(self, batch: int, layer: int) -> tuple[int, ...]:
        cfg = self.config
        if cfg.cell == "conv":
            return (batch, cfg.hidden[layer], *cfg.grid)
        return (batch, cfg.hidden[layer])

    # -- network ------------------------------------------------------------

    def _step_fn(self):
        return convlstm_fused_step if self.config.cell == "conv" else fclstm_fused_step

    def encode(self, inputs: np.ndarray) -> list[CellState]:
        """Run the encoder over ``inputs`` and return its final per-layer states."""
        inputs = self._check_frames(inputs, "inputs")
        x = self.to_model_space(inputs)
        batch, steps = x.shape[:2]
        cfg = self.config
        step = self._step_fn()
        fused = [fuse(layer_params(cfg, self.params, "enc", l)) for l in range(cfg.depth)]
        states = [zero_state(self._state_shape(batch, l)) for l in range(cfg.depth)]
        for t in range(steps):
            below = Tensor(x[:, t])
            for l in range(cfg.depth):
                states[l] = step(fused[l], below, states[l])
                below = states[l].hidden
        return states

    def forecast(self, states: list[CellState], k: int) -> list[Tensor]:
        """Unroll the forecaster ``k`` steps from copied encoder states."""
        if k < 1:
            raise ValueError("need at least one forecast step")
        cfg = self.config
        step = self._step_fn()
        states = copy_states(states, cfg.depth)
        fused = [fuse(layer_params(cfg, self.params, "dec", l)) for l in range(cfg.depth)]
        w, b = self.params["readout.w"], self.params["readout.b"]
        outputs = []
        for _ in range(k):
            below = None
            for l in range(cfg.depth):
                states[l] = step(fused[l], below, states[l])
                below = states[l].hidden
            if cfg.cell == "conv":
                stacked = concat([s.hidden for s in states], axis=-3)
                outputs.append(sigmoid(conv2d(stacked, w, b)))
            else:
                outputs.append(sigmoid(add(linear(states[-1].hidden, w), b)))
        return outputs

    def forward(self, inputs: np.ndarray, k: int) -> list[Tensor]:
        """K predicted frames in model space (patched grid or flat vector), each in (0, 1)."""
        return self.forecast(self.encode(inputs), k)

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
        """Cross-entropy summed over all predicted frames, averaged over the batch."""
        targets = self._check_frames(targets, "targets")
        inputs = self._check_frames(inputs, "inputs")
        if targets.shape[0] != inputs.shape[0]:
            raise ValueError("inputs and targets disagree on batch size")
        preds = self.forward(inputs, targets.shape[1])
        tgt = self.to_model_space(targets)
        total = None
        for t, p in enumerate(preds):
            term = bce_loss(p, tgt[:, t])
            total = term if total is None else add(total, term)
        return scale(total, 1.0 / targets.shape[0])

    def predict_sequence(self, inputs: np.ndarray, k: int) -> np.ndarray:
        """Inference-mode forecast returned as frames ``(B, K, C, H, W)``."""
        single = np.ndim(inputs) == 4
        if single:
            inputs = np.asarray(inputs)[None]
        with no_tape():
            preds = self.forward(inputs, k)
        out = self.from_model_space(np.stack([p.data for p in preds], axis=1))
        return out[0] if single else out

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None, extra_tensors=()) -> None:
        header = {"format": "encoder-forecaster", "config": self.config.to_dict()}
        header.update(extra or {})
        tensors = [(n, p.data) for n, p in self.params.items()] + list(extra_tensors)
        nclt.write_container(path, header, tensors)

    @classmethod
    def load(cls, path: str | Path) -> tuple["EncoderForecaster", dict, dict[str, np.ndarray]]:
        """Returns ``(model, header, leftover tensors)``."""
        header, tensors = nclt.read_container(path)
        if header.get("format") != "encoder-forecaster":
            raise nclt.FormatError(f"{path}: not an encoder-forecaster checkpoint")
        config = ModelConfig.from_dict(header["config"])
        names = [n for n, _ in param_shapes(config)]
        params = {n: parameter(tensors.pop(n), name=n) for n in names}
        return cls(config, params), header, tensors
