"""ConvLSTM and FC-LSTM single-step transitions.

Both cells use peephole connections into the input, forget and output
gates. The ConvLSTM replaces every matrix product of the FC-LSTM with a
same-size convolution, so a ConvLSTM on a 1x1 grid with 1x1 kernels is
exactly an FC-LSTM.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .tensor import Tensor, add, concat, conv2d, linear, parameter, sigmoid, split, tanh

GATES = ("i", "f", "c", "o")
PEEPHOLE_GATES = ("i", "f", "o")


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Shape of an encoder-forecaster network.

    ``input_kernel`` and ``state_kernel`` give one odd kernel size per layer
    (ConvLSTM only). ``peephole`` is ``"spatial"`` for full ``C x M x N``
    peephole tensors or ``"channel"`` for one weight per hidden channel.
    """

    cell: str = "conv"
    frame_channels: int = 1
    frame_height: int = 64
    frame_width: int = 64
    patch_size: int = 4
    hidden: tuple[int, ...] = (64,)
    input_kernel: tuple[int, ...] = (5,)
    state_kernel: tuple[int, ...] = (5,)
    peephole: str = "spatial"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        n = len(self.hidden)
        for name in ("input_kernel", "state_kernel"):
            ks = getattr(self, name)
            ks = (ks,) * n if isinstance(ks, int) else tuple(int(k) for k in ks)
            if len(ks) == 1 and n > 1:
                ks = ks * n
            object.__setattr__(self, name, ks)
        self.validate()

    def validate(self) -> None:
        if self.cell not in ("conv", "fc"):
            raise ConfigError(f"unknown cell type {self.cell!r}")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("need at least one layer with >= 1 hidden unit")
        if self.frame_channels < 1 or self.frame_height < 1 or self.frame_width < 1:
            raise ConfigError("frame extents must be positive")
        if self.patch_size < 1 or self.frame_height % self.patch_size or self.frame_width % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} must divide frame {self.frame_height}x{self.frame_width}"
            )
        if self.cell == "conv":
            for ks in (self.input_kernel, self.state_kernel):
                if len(ks) != len(self.hidden):
                    raise ConfigError("one kernel size per layer required")
                if any(k < 1 or k % 2 == 0 for k in ks):
                    raise ConfigError(f"kernel sizes must be odd, got {ks}")
            if self.peephole not in ("spatial", "channel"):
                raise ConfigError(f"unknown peephole mode {self.peephole!r}")

    @property
    def depth(self) -> int:
        return len(self.hidden)

    @property
    def in_channels(self) -> int:
        return self.frame_channels * self.patch_size**2

    @property
    def grid(self) -> tuple[int, int]:
        return self.frame_height // self.patch_size, self.frame_width // self.patch_size

    @property
    def frame_size(self) -> int:
        return self.frame_channels * self.frame_height * self.frame_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class CellState(NamedTuple):
    hidden: Tensor
    cell: Tensor


@dataclass
class LSTMParams:
    """Weights of one LSTM layer, named after the gate they feed.

    Input weights are ``None`` for a layer that never receives input.
    """

    w_hi: Tensor
    w_hf: Tensor
    w_hc: Tensor
    w_ho: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor
    w_ci: Tensor
    w_cf: Tensor
    w_co: Tensor
    w_xi: Tensor | None = None
    w_xf: Tensor | None = None
    w_xc: Tensor | None = None
    w_xo: Tensor | None = None

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if isinstance(value, Tensor):
                yield name, value

    @property
    def has_input(self) -> bool:
        return self.w_xi is not None


class ConvLSTMParams(LSTMParams):
    """Kernels ``C_hid x C_in x k x k``; peepholes ``C_hid x M x N`` (or ``C_hid x 1 x 1``)."""


class FCLSTMParams(LSTMParams):
    """Matrices ``hid x in``; peepholes and biases are length-``hid`` vectors."""


def fuse(params: LSTMParams) -> tuple:
    """Stack the per-gate weights so one convolution/product covers all four gates.

    Call once per unrolled sequence; the stacking is itself taped, so the
    per-gate gradients come out of a single backward pass.
    """
    w_x = concat([getattr(params, f"w_x{g}") for g in GATES], 0) if params.has_input else None
    w_h = concat([getattr(params, f"w_h{g}") for g in GATES], 0)
    b = concat([getattr(params, f"b_{g}") for g in GATES], 0)
    return w_x, w_h, b, params.w_ci, params.w_cf, params.w_co


def _lstm_core(z: Tensor, prev: CellState, w_ci, w_cf, w_co, axis: int) -> CellState:
    zi, zf, zc, zo = split(z, 4, axis)
    c_prev = prev.cell
    i = sigmoid(zi + w_ci * c_prev)
    f = sigmoid(zf + w_cf * c_prev)
    c = f * c_prev + i * tanh(zc)
    o = sigmoid(zo + w_co * c)
    return CellState(o * tanh(c), c)


def convlstm_fused_step(fused: tuple, x: Tensor | None, prev: CellState) -> CellState:
    w_x, w_h, b, w_ci, w_cf, w_co = fused
    h = prev.hidden
    if x is not None and x.shape[-2:] != h.shape[-2:]:
        raise ValueError(f"input grid {x.shape[-2:]} does not match state grid {h.shape[-2:]}")
    z = conv2d(h, w_h, b)
    # An absent input is all zeros: the input-to-state term vanishes.
    if x is not None and w_x is not None:
        z = add(z, conv2d(x, w_x))
    return _lstm_core(z, prev, w_ci, w_cf, w_co, axis=-3)


def fclstm_fused_step(fused: tuple, x: Tensor | None, prev: CellState) -> CellState:
    w_x, w_h, b, w_ci, w_cf, w_co = fused
    z = add(linear(prev.hidden, w_h), b)
    if x is not None and w_x is not None:
        z = add(z, linear(x, w_x))
    return _lstm_core(z, prev, w_ci, w_cf, w_co, axis=-1)


def convlstm_step(params: ConvLSTMParams, x: Tensor | None, prev: CellState) -> CellState:
    """One ConvLSTM transition. ``x=None`` is an all-zero input."""
    if prev.hidden.shape != prev.cell.shape:
        raise ValueError("hidden and cell state shapes differ")
    return convlstm_fused_step(fuse(params), x, prev)


def fclstm_step(params: FCLSTMParams, x: Tensor | None, prev: CellState) -> CellState:
    """One FC-LSTM transition. ``x=None`` is an all-zero input."""
    if prev.hidden.shape != prev.cell.shape:
        raise ValueError("hidden and cell state shapes differ")
    return fclstm_fused_step(fuse(params), x, prev)


def zero_state(shape: tuple[int, ...]) -> CellState:
    z = np.zeros(shape)
    return CellState(Tensor(z), Tensor(z))


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


def layer_shapes(config: ModelConfig, layer: int, has_input: bool) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (field name, shape) pairs for one recurrent layer."""
    hid = config.hidden[layer]
    if config.cell == "conv":
        c_in = config.in_channels if layer == 0 else config.hidden[layer - 1]
        kx, kh = config.input_kernel[layer], config.state_kernel[layer]
        wx, wh = (hid, c_in, kx, kx), (hid, hid, kh, kh)
        peep = (hid, *config.grid) if config.peephole == "spatial" else (hid, 1, 1)
    else:
        n_in = config.frame_size if layer == 0 else config.hidden[layer - 1]
        wx, wh, peep = (hid, n_in), (hid, hid), (hid,)
    shapes = []
    if has_input:
        shapes += [(f"w_x{g}", wx) for g in GATES]
    shapes += [(f"w_h{g}", wh) for g in GATES]
    shapes += [(f"b_{g}", (hid,)) for g in GATES]
    shapes += [(f"w_c{g}", peep) for g in PEEPHOLE_GATES]
    return shapes


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter tensor of the full network, in checkpoint order.

    The forecaster's first layer only ever sees absent (zero) input, so it
    carries no input-to-state weights.
    """
    out = []
    for stack in ("enc", "dec"):
        for layer in range(config.depth):
            has_input = not (stack == "dec" and layer == 0)
            out += [(f"{stack}{layer}.{n}", s) for n, s in layer_shapes(config, layer, has_input)]
    if config.cell == "conv":
        c_out = config.in_channels
        out += [("readout.w", (c_out, sum(config.hidden), 1, 1)), ("readout.b", (c_out,))]
    else:
        out += [("readout.w", (config.frame_size, config.hidden[-1])), ("readout.b", (config.frame_size,))]
    return out


def count_params(config: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_shapes(config))


def init_scale(shape: tuple[int, ...]) -> float:
    """Uniform init half-width ``1/sqrt(fan_in)``; fan-in excludes the output axis."""
    return 1.0 / math.sqrt(math.prod(shape[1:]))


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Draw all network parameters deterministically from ``seed``.

    Weight tensors are uniform on ``[-s, s]`` with ``s = 1/sqrt(fan_in)``;
    biases and peepholes start at zero except the forget bias, which is 1.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        field_name = name.split(".")[1]
        if field_name.startswith(("w_x", "w_h")) or name == "readout.w":
            s = init_scale(shape)
            value = rng.uniform(-s, s, size=shape)
        elif field_name == "b_f":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = parameter(value, name=name)
    return params


def layer_params(config: ModelConfig, params: dict[str, Tensor], stack: str, layer: int) -> LSTMParams:
    cls = ConvLSTMParams if config.cell == "conv" else FCLSTMParams
    prefix = f"{stack}{layer}."
    fields = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    return cls(**fields)
