"""Optical-flow extrapolation baseline.

Flow between two frames comes from a coarse-to-fine variational solver: at
each pyramid level the second frame is warped by the current estimate, the
brightness-constancy residual is linearised, and the increment minimising

    sum (Ix du + Iy dv + It)^2 + alpha * (|grad u|^2 + |grad v|^2)

is found with multigrid V-cycles whose smoother is a damped, pointwise
coupled Jacobi sweep. Forecasts hold the flow fixed and move echoes along
it by backward semi-Lagrangian sampling.

Flow ``(u, v)`` is in pixels per frame, ``u`` along columns and ``v`` along
rows, and maps the first frame onto the second: ``b(i + v, j + u) ~ a(i, j)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .radar import resize

INTENSITY_SCALE = 255.0  # alpha is calibrated for 8-bit intensities
JACOBI_OMEGA = 0.8
V_CYCLES = 4  # per warp
WARPS = 2  # linearisations per pyramid level
MIN_GRID = 4  # coarsest size for both the pyramid and the multigrid hierarchy
COARSE_SWEEPS = 30

SCHEME_WEIGHTS = {1: (1.0,), 2: (0.5, 0.5), 3: (0.7, 0.2, 0.1)}  # newest flow first


class FlowError(ValueError):
    pass


class Flow(NamedTuple):
    u: np.ndarray
    v: np.ndarray

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class FlowParams:
    L_max: int = 6
    L_start: int = 0
    n_pre: int = 2
    n_post: int = 2
    rho: float = 1.5
    alpha: float = 2000.0
    sigma: float = 4.5

    def __post_init__(self):
        if not self.L_max >= self.L_start >= 0:
            raise FlowError(f"need L_max >= L_start >= 0, got {self.L_max}, {self.L_start}")
        if self.n_pre < 0 or self.n_post < 0 or self.n_pre + self.n_post == 0:
            raise FlowError("smoothing counts must be >= 0 and not both zero")
        if self.alpha <= 0 or self.rho < 0 or self.sigma < 0:
            raise FlowError("alpha must be > 0; rho and sigma >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "FlowParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise FlowError(f"unknown flow parameters: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "FlowParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray, outside: str = "zero") -> np.ndarray:
    """Sample ``img`` at real coordinates; ``outside`` is ``"zero"`` or ``"clamp"``."""
    h, w = img.shape
    if outside == "clamp":
        rows = np.clip(rows, 0, h - 1)
        cols = np.clip(cols, 0, w - 1)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    tr, tc = rows - r0, cols - c0
    pad = np.pad(img, 1)  # zero ring so that every corner index is addressable
    out = np.zeros(np.broadcast(rows, cols).shape)
    for dr, wr in ((0, 1 - tr), (1, tr)):
        for dc, wc in ((0, 1 - tc), (1, tc)):
            rr = np.clip(r0 + dr, -1, h) + 1
            cc = np.clip(c0 + dc, -1, w) + 1
            out += wr * wc * pad[rr, cc]
    return out


def advect(frame: np.ndarray, flow: Flow, steps: int) -> np.ndarray:
    """``steps`` frames, each sampling its predecessor at ``(i - v, j - u)``; outside reads 0."""
    if frame.shape != flow.u.shape or frame.shape != flow.v.shape:
        raise FlowError(f"frame {frame.shape} and flow {flow.u.shape} shapes differ")
    rows, cols = np.indices(frame.shape, dtype=np.float64)
    src_r, src_c = rows - flow.v, cols - flow.u
    out = np.empty((steps,) + frame.shape)
    cur = np.asarray(frame, dtype=np.float64)
    for k in range(steps):
        cur = bilinear_sample(cur, src_r, src_c, "zero")
        out[k] = cur
    return out


# ---------------------------------------------------------------------------
# Multigrid solver for the linearised system
# ---------------------------------------------------------------------------


def _neighbour_sum(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum over the 4-neighbourhood and the neighbour count (reflecting borders)."""
    s = np.zeros_like(x)
    n = np.zeros_like(x)
    s[1:] += x[:-1]; n[1:] += 1
    s[:-1] += x[1:]; n[:-1] += 1
    s[:, 1:] += x[:, :-1]; n[:, 1:] += 1
    s[:, :-1] += x[:, 1:]; n[:, :-1] += 1
    return s, n


def _apply(J, a, du, dv):
    """Operator ``[J11 J12; J12 J22] w - a * Laplacian(w)``."""
    su, n = _neighbour_sum(du)
    sv, _ = _neighbour_sum(dv)
    j11, j12, j22 = J
    return (j11 * du + j12 * dv + a * (n * du - su),
            j12 * du + j22 * dv + a * (n * dv - sv))


def _jacobi(J, a, f1, f2, du, dv, sweeps):
    j11, j12, j22 = J
    for _ in range(sweeps):
        su, n = _neighbour_sum(du)
        sv, _ = _neighbour_sum(dv)
        d11, d22 = j11 + a * n, j22 + a * n
        r1, r2 = f1 + a * su, f2 + a * sv
        det = d11 * d22 - j12 * j12
        nu = (d22 * r1 - j12 * r2) / det
        nv = (d11 * r2 - j12 * r1) / det
        du = du + JACOBI_OMEGA * (nu - du)
        dv = dv + JACOBI_OMEGA * (nv - dv)
    return du, dv


def _v_cycle(J, a, f1, f2, du, dv, params: FlowParams):
    shape = du.shape
    if min(shape) < 2 * MIN_GRID:
        return _jacobi(J, a, f1, f2, du, dv, COARSE_SWEEPS)
    du, dv = _jacobi(J, a, f1, f2, du, dv, params.n_pre)
    a1, a2 = _apply(J, a, du, dv)
    coarse = ((shape[0] + 1) // 2, (shape[1] + 1) // 2)
    Jc = tuple(resize(j, coarse) for j in J)
    # Doubling the grid spacing quarters the discrete Laplacian's weight.
    eu, ev = _v_cycle(Jc, a / 4, resize(f1 - a1, coarse), resize(f2 - a2, coarse),
                      np.zeros(coarse), np.zeros(coarse), params)
    du, dv = du + resize(eu, shape), dv + resize(ev, shape)
    return _jacobi(J, a, f1, f2, du, dv, params.n_post)


def _level_sizes(shape, params: FlowParams) -> list[tuple[int, int]]:
    sizes = []
    for level in range(params.L_start, params.L_max + 1):
        size = (max(1, round(shape[0] / 2**level)), max(1, round(shape[1] / 2**level)))
        if level > params.L_start and min(size) < MIN_GRID:
            break
        sizes.append(size)
    return sizes[::-1]  # coarse to fine


def _resize_flow(flow: Flow, shape) -> Flow:
    if flow.u.shape == tuple(shape):
        return flow
    sy, sx = shape[0] / flow.u.shape[0], shape[1] / flow.u.shape[1]
    return Flow(resize(flow.u, shape) * sx, resize(flow.v, shape) * sy)


def _refine(a: np.ndarray, b: np.ndarray, flow: Flow, params: FlowParams) -> Flow:
    rows, cols = np.indices(a.shape, dtype=np.float64)
    u, v = flow
    for _ in range(WARPS):
        bw = bilinear_sample(b, rows + v, cols + u, "clamp")
        mean = 0.5 * (a + bw)
        iy, ix = np.gradient(mean)
        it = bw - a
        J = (ix * ix, ix * iy, iy * iy)
        su, n = _neighbour_sum(u)
        sv, _ = _neighbour_sum(v)
        alpha = params.alpha
        # Right-hand side for the increment: -data residual + alpha * Laplacian(current flow).
        f1 = -ix * it - alpha * (n * u - su)
        f2 = -iy * it - alpha * (n * v - sv)
        du, dv = np.zeros(a.shape), np.zeros(a.shape)
        for _ in range(V_CYCLES):
            du, dv = _v_cycle(J, alpha, f1, f2, du, dv, params)
        u, v = u + du, v + dv
    return Flow(u, v)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, params: FlowParams = FlowParams()) -> Flow:
    """Displacement field carrying ``frame_a`` onto ``frame_b``."""
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise FlowError(f"need two equal 2-D frames, got {a.shape} and {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise FlowError("frames contain non-finite values")
    a, b = a * INTENSITY_SCALE, b * INTENSITY_SCALE
    if params.sigma > 0:
        a = ndimage.gaussian_filter(a, params.sigma, mode="nearest")
        b = ndimage.gaussian_filter(b, params.sigma, mode="nearest")
    flow = None
    for size in _level_sizes(a.shape, params):
        al, bl = resize(a, size), resize(b, size)
        flow = Flow(np.zeros(size), np.zeros(size)) if flow is None else _resize_flow(flow, size)
        flow = _refine(al, bl, flow, params)
        if params.rho > 0:
            flow = Flow(ndimage.gaussian_filter(flow.u, params.rho, mode="nearest"),
                        ndimage.gaussian_filter(flow.v, params.rho, mode="nearest"))
    return _resize_flow(flow, a.shape)


def combined_flow(history: np.ndarray, scheme: int, params: FlowParams = FlowParams()) -> Flow:
    if scheme not in SCHEME_WEIGHTS:
        raise FlowError(f"unknown scheme {scheme}; expected 1, 2 or 3")
    weights = SCHEME_WEIGHTS[scheme]
    need = max(len(weights) + 1, 2 if scheme == 1 else 3)
    if len(history) < need:
        raise FlowError(f"scheme {scheme} needs at least {need} frames, got {len(history)}")
    u = np.zeros(history.shape[1:])
    v = np.zeros(history.shape[1:])
    for k, w in enumerate(weights):
        f = estimate_flow(history[-2 - k], history[-1 - k], params)
        u += w * f.u
        v += w * f.v
    return Flow(u, v)


def rover(history: np.ndarray, scheme: int, params: FlowParams = FlowParams(), steps: int = 15) -> np.ndarray:
    """Extrapolate the last frame of ``T x M x N`` history ``steps`` frames ahead."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 3:
        raise FlowError(f"history must be T x M x N, got {history.shape}")
    return advect(history[-1], combined_flow(history, scheme, params), steps)
