"""Discounted-curve simulation in the moving frame.

One step of the exact log-Euler scheme maps the ensemble of discounted curves
p_t (node values per path) to

    p_{t+dt} = L_dt [ p_t * exp((m - 1/2 sum_i (sigma^i)^2) dt
                                + sum_i sigma^i dW^i) ],

coefficients frozen at the left endpoint; L_dt is left translation with
linear interpolation on the shared maturity grid. Positivity is preserved
node-by-node because the update is a positive multiplier followed by convex
interpolation (the truncation tail inherits the curve's constant part).
Under the martingale measure the same step runs with drift m - sigma gamma
and Q-Brownian increments.

Rates are read off the curve: forward rate f_t(x) = -p_t'(x)/p_t(x), short
rate r_t = f_t(0). The boundary identity p_t(0) = exp(-int_0^t r) and the
rollover identity connect the simulation to its continuum model and are
exposed as residual diagnostics, discretized with left-point sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .curve_space import (
    Curve,
    MaturityGrid,
    SobolevIndex,
    atoms_value_matrix,
    hs_inner_samples,
)
from .errors import ConfigInvalid, DegenerateCurve, NonPositiveInitialCurve
from .market_model import CoefficientSchedule, as_gamma_array

__all__ = [
    "SimConfig",
    "CurvePath",
    "RolloverPath",
    "flat_forward_curve",
    "curve_from_forward",
    "brownian_increments",
    "simulate_mild",
    "spot_rate",
    "forward_rate",
    "boundary_residual",
    "simulate_rollover",
    "undiscount_curve",
    "undiscount_path",
    "moment_diagnostic",
]


@dataclass(frozen=True)
class SimConfig:
    """Ensemble simulation parameters.

    horizon T and n_steps fix dt = T/n_steps; seed feeds a counter-based
    generator per path index, so path j's noise does not depend on n_paths.
    """

    grid: MaturityGrid
    s: SobolevIndex
    horizon: float
    n_steps: int
    n_paths: int
    seed: int

    def __post_init__(self) -> None:
        if not (self.horizon > 0.0 and np.isfinite(self.horizon)):
            raise ConfigInvalid(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 1 or self.n_paths < 1:
            raise ConfigInvalid("n_steps and n_paths must be >= 1")
        if self.horizon > self.grid.x_max:
            raise ConfigInvalid(
                f"horizon {self.horizon} exceeds grid end {self.grid.x_max}; "
                "translated curves would be pure truncation fill"
            )

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass
class CurvePath:
    """Simulated ensemble: recorded observables plus optional full states."""

    config: SimConfig
    p0: Curve
    measure: str
    dw: np.ndarray  # (P, K, n) increments of the driving Brownian motion
    terminal: np.ndarray  # (P, N) node values at the horizon
    terminal_fill: np.ndarray  # (P,) constant part at the horizon
    spot: np.ndarray  # (K+1, P) short rate r_t
    value0: np.ndarray  # (K+1, P) boundary value p_t(0)
    states: np.ndarray | None = None  # (K+1, P, N) node values if retained
    fill: np.ndarray | None = None  # (K+1, P) constant parts if retained
    sup_norm_p: np.ndarray | None = None  # (P,) sup_t ||p_t||_{E^{s+1}}
    sup_norm_q: np.ndarray | None = None
    sup_norm_qinv: np.ndarray | None = None
    obs_locations: np.ndarray | None = None  # (M,) recorded maturities
    observations: np.ndarray | None = None  # (K+1, P, M) p_t at obs_locations

    @property
    def times(self) -> np.ndarray:
        return self.config.times

    @property
    def n_paths(self) -> int:
        return self.dw.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dw.shape[1]

    def curve_at(self, step: int, path: int) -> Curve:
        if self.states is None:
            raise ConfigInvalid("states were not retained; rerun with keep_states=True")
        a = float(self.fill[step, path])
        return Curve(self.config.grid, self.states[step, path] - a, a)


@dataclass
class RolloverPath:
    """Rolling bank account at a fixed time-to-maturity S."""

    times: np.ndarray
    maturity: float
    forward: np.ndarray  # (K+1, P) f_t(S)
    account: np.ndarray  # (K+1, P) x_t = exp(int f_s(S) ds), left-point sums
    bond_value: np.ndarray  # (K+1, P) p_t(S)
    wealth: np.ndarray  # (K+1, P) q_t = x_t p_t(S)


# --- initial curves ----------------------------------------------------------


def flat_forward_curve(grid: MaturityGrid, rate: float) -> Curve:
    """Discount curve exp(-rate * x), constant part pinned at the far value.

    The split a = p(x_max) keeps the beyond-grid fill positive, so translation
    preserves positivity at every node.
    """
    vals = np.exp(-rate * grid.nodes)
    a = float(vals[-1])
    return Curve(grid, vals - a, a)


def curve_from_forward(grid: MaturityGrid, forward) -> Curve:
    """Discount curve exp(-int_0^x f) from a forward-rate function.

    Args:
        forward: callable evaluated at the grid nodes.
    """
    f_vals = np.asarray([forward(x) for x in grid.nodes], dtype=np.float64)
    integral = np.concatenate(
        [[0.0], np.cumsum(0.5 * (f_vals[1:] + f_vals[:-1]) * grid.dx)]
    )
    vals = np.exp(-integral)
    a = float(vals[-1])
    return Curve(grid, vals - a, a)


# --- noise -------------------------------------------------------------------


def brownian_increments(config: SimConfig, n_factors: int) -> np.ndarray:
    """(P, K, n) increments; path j is seeded by SeedSequence([seed, j]).

    Counter-based (Philox) per-path streams: the same (seed, path index)
    always yields the same increments, independent of ensemble size or
    threading, which is what the byte-identical rerun contract needs.
    """
    if n_factors < 1:
        raise ConfigInvalid(f"n_factors must be >= 1, got {n_factors}")
    out = np.empty((config.n_paths, config.n_steps, n_factors))
    root = math.sqrt(config.dt)
    for j in range(config.n_paths):
        gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([config.seed, j]))
        )
        out[j] = gen.standard_normal((config.n_steps, n_factors)) * root
    return out


# --- rates -------------------------------------------------------------------


def _spot_from_values(values: np.ndarray, dx: float) -> np.ndarray:
    """r = -p'(0)/p(0) with a one-sided second-order stencil; batched."""
    v0 = values[..., 0]
    if np.any(v0 <= 0.0):
        raise DegenerateCurve("curve non-positive at x = 0")
    deriv0 = (-3.0 * v0 + 4.0 * values[..., 1] - values[..., 2]) / (2.0 * dx)
    return -deriv0 / v0


def spot_rate(p: Curve) -> float:
    """Short rate r = f(0) = -p'(0)/p(0)."""
    return float(_spot_from_values(p.values()[None, :], p.grid.dx)[0])


def forward_rate(p: Curve, x: float) -> float:
    """Instantaneous forward rate f(x) = -p'(x)/p(x).

    Raises:
        DegenerateCurve: p(x) <= 0.
    """
    px = p.value_at(x)
    if px <= 0.0:
        raise DegenerateCurve(f"curve non-positive at x = {x}: {px}")
    return -p.derivative_at(x) / px


# --- simulation --------------------------------------------------------------


def _norm_batch(values: np.ndarray, const: np.ndarray, dx: float, order: int) -> np.ndarray:
    """Batched E^order norm of curves given node values and constant parts."""
    g = values - const[:, None]
    sq = hs_inner_samples(g, g, dx, order) + const * const
    return np.sqrt(np.maximum(sq, 0.0))


def simulate_mild(
    p0: Curve,
    schedule: CoefficientSchedule,
    config: SimConfig,
    noise: np.ndarray | None = None,
    *,
    measure: str = "P",
    gamma=None,
    keep_states: bool = False,
    record_norms: bool = False,
    record_locations=None,
) -> CurvePath:
    """Simulate the discounted-curve ensemble by the exact log-Euler scheme.

    Args:
        p0: initial curve with p0(0) = 1 and positive node values.
        schedule: market coefficients; deterministic schedules are sampled
            once per step, state-dependent ones once per step and path.
        config: grid/time/ensemble parameters.
        noise: optional (n_paths, n_steps, n_factors) Brownian increments;
            drawn from the per-path counter generator when omitted.
        measure: "P" or "Q". Under "Q" the drift is m - sigma gamma and the
            increments are read as Q-Brownian; gamma is then required.
        gamma: market price of risk (vector, (K, n) array, or callable).
        keep_states: retain the full (K+1, P, N) state array.
        record_norms: track sup_t of the E^{s+1} norms of p, q = p / L_t p0
            and 1/q per path (costs a few extra passes per step).
        record_locations: optional maturities at which p_t is recorded every
            step, giving (K+1, P, M) observations without keeping states.

    Returns:
        CurvePath with recorded observables.

    Raises:
        ConfigInvalid: inconsistent shapes, measure, or p0(0) != 1.
        NonPositiveInitialCurve: p0 has a non-positive node value.
    """
    grid, s = config.grid, config.s
    if p0.grid != grid:
        raise ConfigInvalid("initial curve grid differs from simulation grid")
    vals0 = p0.values()
    if np.any(vals0 <= 0.0):
        raise NonPositiveInitialCurve("initial curve must be positive at every node")
    if abs(vals0[0] - 1.0) > 1e-9:
        raise ConfigInvalid(f"initial curve must satisfy p(0) = 1, got {vals0[0]}")
    if measure not in ("P", "Q"):
        raise ConfigInvalid(f"measure must be 'P' or 'Q', got {measure!r}")

    m0, sig0 = schedule.at(0.0, p0)
    n_factors = sig0.n_factors
    if sig0.grid != grid:
        raise ConfigInvalid("volatility grid differs from simulation grid")

    K, P, N, dt, dx = config.n_steps, config.n_paths, grid.n_points, config.dt, grid.dx
    if noise is None:
        noise = brownian_increments(config, n_factors)
    else:
        noise = np.ascontiguousarray(noise, dtype=np.float64)
        if noise.shape != (P, K, n_factors):
            raise ConfigInvalid(
                f"noise shape {noise.shape} != {(P, K, n_factors)}"
            )

    gamma_arr = None
    if measure == "Q":
        if gamma is None:
            raise ConfigInvalid("measure='Q' requires a gamma schedule")
        gamma_arr = as_gamma_array(gamma, K, dt)
        if gamma_arr.shape[1] != n_factors:
            raise ConfigInvalid("gamma factor count differs from volatility")

    shift = dt / dx
    k0 = int(math.floor(shift))
    frac = shift - k0

    states = np.ascontiguousarray(np.broadcast_to(vals0, (P, N)).copy())
    out = np.empty_like(states)
    expo = np.empty_like(states)
    fill = np.full(P, p0.a)

    spot = np.empty((K + 1, P))
    value0 = np.empty((K + 1, P))
    spot[0] = _spot_from_values(states, dx)
    value0[0] = states[:, 0]

    states_all = fill_all = None
    if keep_states:
        states_all = np.empty((K + 1, P, N))
        fill_all = np.empty((K + 1, P))
        states_all[0] = states
        fill_all[0] = fill

    obs_loc = observations = None
    if record_locations is not None:
        obs_loc = np.atleast_1d(np.asarray(record_locations, dtype=np.float64))
        observations = np.empty((K + 1, P, obs_loc.size))
        observations[0] = atoms_value_matrix(obs_loc, states, grid)

    sup_p = sup_q = sup_qinv = None
    norm_order = s.s + 1
    if record_norms:
        sup_p = _norm_batch(states, fill, dx, norm_order)
        q0 = np.ones_like(states)
        one = np.ones(P)
        sup_q = _norm_batch(q0, one, dx, norm_order)
        sup_qinv = sup_q.copy()

    times = config.times
    for k in range(K):
        t = float(times[k])
        dwk = noise[:, k, :]
        if schedule.deterministic:
            m_k, sig_k = schedule.at(t)
            sig_vals = sig_k.values_matrix()
            sig_a = sig_k.constant_parts()
            drift_vals = m_k.curve.values().copy()
            drift_a = m_k.curve.a
            if gamma_arr is not None:
                drift_vals -= gamma_arr[k] @ sig_vals
                drift_a -= float(gamma_arr[k] @ sig_a)
            base = (drift_vals - 0.5 * np.einsum("in,in->n", sig_vals, sig_vals)) * dt
            base_a = (drift_a - 0.5 * float(sig_a @ sig_a)) * dt
            np.dot(dwk, sig_vals, out=expo)
            expo += base
            fill_expo = base_a + dwk @ sig_a
        else:
            fill_expo = np.empty(P)
            for j in range(P):
                p_j = Curve(grid, states[j] - fill[j], float(fill[j]))
                m_j, sig_j = schedule.at(t, p_j)
                sig_vals = sig_j.values_matrix()
                sig_a = sig_j.constant_parts()
                drift_vals = m_j.curve.values()
                drift_a = m_j.curve.a
                if gamma_arr is not None:
                    drift_vals = drift_vals - gamma_arr[k] @ sig_vals
                    drift_a = drift_a - float(gamma_arr[k] @ sig_a)
                expo[j] = (drift_vals - 0.5 * np.einsum("in,in->n", sig_vals, sig_vals)) * dt
                expo[j] += dwk[j] @ sig_vals
                fill_expo[j] = (drift_a - 0.5 * float(sig_a @ sig_a)) * dt + dwk[j] @ sig_a

        fill = fill * np.exp(fill_expo)
        kernels.step_exp_shift(states, expo, fill, k0, frac, out)
        states, out = out, states

        spot[k + 1] = _spot_from_values(states, dx)
        value0[k + 1] = states[:, 0]
        if keep_states:
            states_all[k + 1] = states
            fill_all[k + 1] = fill
        if observations is not None:
            observations[k + 1] = atoms_value_matrix(obs_loc, states, grid)
        if record_norms:
            np.maximum(sup_p, _norm_batch(states, fill, dx, norm_order), out=sup_p)
            t_next = float(times[k + 1])
            l_vals = np.interp(grid.nodes + t_next, grid.nodes, p0.g, right=0.0) + p0.a
            if p0.a > 0.0:
                q = states / l_vals[None, :]
                aq = fill / p0.a
            else:
                # truncation tail is 0/0 where L_t p0 degenerates; pin q = 1 there
                valid = l_vals > 1e-300
                q = np.ones_like(states)
                q[:, valid] = states[:, valid] / l_vals[valid]
                aq = np.ones(P)
            if np.any(q <= 0.0):
                raise DegenerateCurve("q = p / L_t p0 non-positive; norms undefined")
            np.maximum(sup_q, _norm_batch(q, aq, dx, norm_order), out=sup_q)
            np.maximum(sup_qinv, _norm_batch(1.0 / q, 1.0 / aq, dx, norm_order), out=sup_qinv)

    return CurvePath(
        config=config,
        p0=p0,
        measure=measure,
        dw=noise,
        terminal=states.copy(),
        terminal_fill=fill.copy(),
        spot=spot,
        value0=value0,
        states=states_all,
        fill=fill_all,
        sup_norm_p=sup_p,
        sup_norm_q=sup_q,
        sup_norm_qinv=sup_qinv,
        obs_locations=obs_loc,
        observations=observations,
    )


# --- identities and diagnostics ------------------------------------------------


def boundary_residual(path: CurvePath) -> float:
    """sup over steps and paths of |p_t(0) - exp(-sum_{s<t} r_s dt)|."""
    dt = path.config.dt
    integral = np.zeros_like(path.value0)
    np.cumsum(path.spot[:-1] * dt, axis=0, out=integral[1:])
    return float(np.max(np.abs(path.value0 - np.exp(-integral))))


def simulate_rollover(path: CurvePath, maturity: float) -> RolloverPath:
    """Roll a bank account at constant time-to-maturity S = maturity.

    x_t = exp(sum_{s<t} f_s(S) dt) (left-point), q_t = x_t p_t(S). Requires
    retained states.

    Raises:
        ConfigInvalid: S outside the uncontaminated window [dx, x_max - T].
        DegenerateCurve: p_t(S) <= 0 somewhere.
    """
    cfg = path.config
    if path.states is None:
        raise ConfigInvalid("rollover needs keep_states=True")
    if not (cfg.grid.dx <= maturity <= cfg.grid.x_max - cfg.horizon):
        raise ConfigInvalid(
            f"rollover maturity {maturity} outside [{cfg.grid.dx}, "
            f"{cfg.grid.x_max - cfg.horizon}]"
        )
    nodes, dx, dt = cfg.grid.nodes, cfg.grid.dx, cfg.dt
    deriv = np.gradient(path.states, dx, axis=2, edge_order=2)
    pos = maturity / dx
    idx = min(int(pos), cfg.grid.n_points - 2)
    w = pos - idx
    p_at = (1.0 - w) * path.states[:, :, idx] + w * path.states[:, :, idx + 1]
    dp_at = (1.0 - w) * deriv[:, :, idx] + w * deriv[:, :, idx + 1]
    if np.any(p_at <= 0.0):
        raise DegenerateCurve(f"p_t({maturity}) non-positive on some path")
    fwd = -dp_at / p_at
    log_x = np.zeros_like(fwd)
    np.cumsum(fwd[:-1] * dt, axis=0, out=log_x[1:])
    account = np.exp(log_x)
    return RolloverPath(
        times=cfg.times,
        maturity=maturity,
        forward=fwd,
        account=account,
        bond_value=p_at,
        wealth=account * p_at,
    )


def undiscount_curve(p: Curve) -> Curve:
    """p-hat = p / p(0): forward curve unchanged, boundary value 1."""
    v0 = p.values()[0]
    if v0 <= 0.0:
        raise DegenerateCurve(f"p(0) = {v0} <= 0")
    return Curve(p.grid, (p.g + p.a) / v0 - p.a / v0, p.a / v0)


def undiscount_path(path: CurvePath) -> np.ndarray:
    """(K+1, P, N) undiscounted node values; requires retained states."""
    if path.states is None:
        raise ConfigInvalid("undiscount_path needs keep_states=True")
    v0 = path.value0[:, :, None]
    if np.any(v0 <= 0.0):
        raise DegenerateCurve("p_t(0) non-positive on some path")
    return path.states / v0


def moment_diagnostic(path: CurvePath, orders=(1, 2, 4, 8)) -> dict:
    """Sample moments E[sup_t ||.||^u] for p, q, 1/q with stability flags.

    Each flag compares the first-half-sample estimate to the full-sample one;
    a >10% move marks the moment as unstable at this ensemble size.
    """
    if path.sup_norm_p is None:
        raise ConfigInvalid("moment_diagnostic needs record_norms=True")
    out: dict = {"orders": list(orders), "n_paths": path.n_paths}
    for label, sup in (
        ("p", path.sup_norm_p),
        ("q", path.sup_norm_q),
        ("q_inv", path.sup_norm_qinv),
    ):
        half = sup[: max(1, sup.shape[0] // 2)]
        moments = {}
        stable = True
        for u in orders:
            full_m = float(np.mean(sup**u))
            half_m = float(np.mean(half**u))
            moments[int(u)] = full_m
            if abs(full_m - half_m) > 0.1 * abs(half_m):
                stable = False
        out[label] = {"moments": moments, "stable": stable}
    return out
