"""Folding P x P pixel blocks into channels and back.

Both functions act on the last three axes (``C x H x W``), so any leading
batch/time axes pass through.
"""

import numpy as np


def patchify(frames: np.ndarray, p: int) -> np.ndarray:
    """``C x H x W`` -> ``C*p*p x H/p x W/p``.

    Output channel ``ch*p*p + a*p + b`` of cell ``(i, j)`` holds source pixel
    ``(ch, i*p + a, j*p + b)``.
    """
    frames = np.asarray(frames)
    *lead, c, h, w = frames.shape
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide {h}x{w}")
    x = frames.reshape(*lead, c, h // p, p, w // p, p)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return x.reshape(*lead, c * p * p, h // p, w // p)


def unpatchify(tensors: np.ndarray, p: int, channels: int = 1) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    tensors = np.asarray(tensors)
    *lead, cpp, m, n_ = tensors.shape
    if cpp != channels * p * p:
        raise ValueError(f"{cpp} channels cannot unfold into {channels} x {p}x{p} patches")
    n = len(lead)
    x = tensors.reshape(*lead, channels, p, p, m, n_)
    x = x.transpose(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return x.reshape(*lead, channels, m * p, n_ * p)
