"""Numpy implementation of the ensemble step kernel.

Semantics must match bondlab._kernels exactly (same branch structure), so the
compiled and fallback backends agree to floating-point noise. One simulation
step maps each path's node values p to

    (L_dt [p * exp(c)])(x_j)

where c is the per-path exponent array and L_dt translates left by dt with
linear interpolation; nodes landing strictly beyond x_max take the path's
constant fill value. dt is encoded as k0 * dx + frac * dx with 0 <= frac < 1.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def step_exp_shift(
    states: np.ndarray,
    expo: np.ndarray,
    fill: np.ndarray,
    k0: int,
    frac: float,
    out: np.ndarray,
) -> None:
    """One exact log-Euler step for the whole ensemble.

    Args:
        states: (P, N) current node values; not modified.
        expo: (P, N) exponent samples; clobbered as scratch.
        fill: (P,) per-path value beyond x_max (constant part of the curve).
        k0: whole-node part of the shift, 0 <= k0.
        frac: fractional part of the shift in [0, 1).
        out: (P, N) output buffer; may not alias states or expo.
    """
    n = states.shape[1]
    np.exp(expo, out=expo)
    np.multiply(states, expo, out=expo)  # expo now holds p * e^c
    if k0 >= n:
        out[:] = fill[:, None]
        return
    if frac == 0.0:
        m = n - k0
        out[:, :m] = expo[:, k0:]
        out[:, m:] = fill[:, None]
    else:
        # nodes with j + k0 >= n - 1 land strictly beyond x_max -> fill
        m = n - k0 - 1
        np.multiply(expo[:, k0 : k0 + m], 1.0 - frac, out=out[:, :m])
        out[:, :m] += frac * expo[:, k0 + 1 : k0 + 1 + m]
        out[:, m:] = fill[:, None]
