"""Portfolios of dual atoms over a simulated curve ensemble.

A strategy holds, at each step, a finite list of dual atoms (point holdings
in bonds of given time-to-maturity, or derivative atoms). Wealth is the
pairing V_t = <theta_t, p_t>; the gains process adds, per step,

    <theta_k, p_k m_k> dt + sum_i <theta_k, p_k sigma_k^i> dW_k^i

with coefficients frozen at the left endpoint (matching the simulator).
Self-financing is |V_t - V_0 - G_t| small over the whole grid; the residual
is a diagnostic, not an enforcement, since discrete strategies are only
self-financing up to O(dt).

Adaptedness is structural: builders receive a PathPrefix whose accessors
refuse step indices beyond the current one, so a strategy cannot read the
future without raising AdaptednessViolation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .curve_space import Curve, DualAtom, SobolevIndex, atoms_value_matrix, pair
from .dynamics import CurvePath
from .errors import AdaptednessViolation, ConfigInvalid, ValidationFailure
from .market_model import CoefficientSchedule

__all__ = [
    "PathPrefix",
    "PortfolioStrategy",
    "LedgerPath",
    "value",
    "value_path",
    "gains",
    "ledger",
    "self_financing_residual",
    "self_financing_tolerance",
    "admissibility_norm",
    "strategy_from_spec",
    "buy_and_hold_zero_coupon",
]


class PathPrefix:
    """Read-only view of one path up to and including step `step`.

    Every accessor validates its step argument; asking for j > step raises
    AdaptednessViolation. This is the only data a strategy builder sees.
    """

    def __init__(self, path: CurvePath, step: int, path_index: int):
        self._path = path
        self.step = step
        self.path_index = path_index

    def _check(self, j: int) -> None:
        if j > self.step:
            raise AdaptednessViolation(
                f"step {j} requested while constructing the step-{self.step} portfolio"
            )
        if j < 0:
            raise ValidationFailure(f"negative step {j}")

    @property
    def time(self) -> float:
        return float(self._path.times[self.step])

    def time_at(self, j: int) -> float:
        self._check(j)
        return float(self._path.times[j])

    def curve(self, j: int) -> Curve:
        self._check(j)
        return self._path.curve_at(j, self.path_index)

    def spot(self, j: int) -> float:
        self._check(j)
        return float(self._path.spot[j, self.path_index])

    def boundary(self, j: int) -> float:
        self._check(j)
        return float(self._path.value0[j, self.path_index])

    def increment(self, j: int) -> np.ndarray:
        """Brownian increment over [t_j, t_{j+1}]; needs j < step."""
        if j >= self.step:
            raise AdaptednessViolation(
                f"increment over [{j}, {j + 1}] requested at step {self.step}"
            )
        self._check(j)
        return self._path.dw[self.path_index, j].copy()


@dataclass(frozen=True)
class PortfolioStrategy:
    """Atom-valued strategy built step by step from path prefixes.

    deterministic=True promises the builder ignores the prefix data (the
    atoms depend on the step only), enabling ensemble-vectorized evaluation.
    """

    name: str
    builder: Callable[[int, PathPrefix], Sequence[DualAtom]]
    deterministic: bool = False


@dataclass
class LedgerPath:
    """Wealth/gains bookkeeping for one strategy over an ensemble."""

    strategy_name: str
    times: np.ndarray
    wealth: np.ndarray  # (K+1, P)
    gains: np.ndarray  # (K+1, P)
    residual: np.ndarray  # (P,) sup_t |V_t - V_0 - G_t|

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residual))

    def to_csv(self, path) -> None:
        """Rows (path, t, V, G, residual) with full float precision."""
        defect = np.abs(self.wealth - self.wealth[0] - self.gains)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "t", "V", "G", "residual"])
            for j in range(self.wealth.shape[1]):
                for k, t in enumerate(self.times):
                    writer.writerow(
                        [
                            j,
                            f"{t:.17g}",
                            f"{self.wealth[k, j]:.17g}",
                            f"{self.gains[k, j]:.17g}",
                            f"{defect[k, j]:.17g}",
                        ]
                    )


def value(atoms: Sequence[DualAtom], p: Curve, s: SobolevIndex) -> float:
    """Wealth of an atom list against one curve: <theta, p>."""
    return pair(atoms, p, s)


# --- batched atom evaluation ---------------------------------------------------


def _atoms_arrays(atoms: Sequence[DualAtom]):
    locs = np.array([a.location for a in atoms])
    weights = np.array([a.weight for a in atoms])
    orders = np.array([a.order for a in atoms])
    return locs, weights, orders


def _pair_batch(atoms: Sequence[DualAtom], values: np.ndarray, grid, dx: float, s: SobolevIndex):
    """<theta, curve> against batched node values (..., N); orders mixed."""
    if len(atoms) == 0:
        return np.zeros(values.shape[:-1])
    locs, weights, orders = _atoms_arrays(atoms)
    out = 0.0
    point = orders == 0
    if np.any(point):
        out = atoms_value_matrix(locs[point], values, grid) @ weights[point]
    if np.any(~point):
        if s.s < 2:
            from .errors import OrderUnsupported

            raise OrderUnsupported("derivative atoms require Sobolev order >= 2")
        deriv = np.gradient(values, dx, axis=-1, edge_order=2)
        out = out + atoms_value_matrix(locs[~point], deriv, grid) @ weights[~point]
    return out


def _strategy_atoms(strategy: PortfolioStrategy, path: CurvePath):
    """Materialize atoms for every (step, path).

    Returns (per_step, per_path) where per_step[k] is an atom list shared by
    all paths (deterministic strategies) or per_path[k][j] is path j's list.
    """
    K, P = path.n_steps, path.n_paths
    if strategy.deterministic:
        per_step = [list(strategy.builder(k, PathPrefix(path, k, 0))) for k in range(K + 1)]
        return per_step, None
    per_path = [
        [list(strategy.builder(k, PathPrefix(path, k, j))) for j in range(P)]
        for k in range(K + 1)
    ]
    return None, per_path


def value_path(strategy: PortfolioStrategy, path: CurvePath) -> np.ndarray:
    """(K+1, P) wealth V_k = <theta_k, p_k> along the ensemble."""
    if path.states is None:
        raise ConfigInvalid("portfolio evaluation needs keep_states=True")
    grid, s, dx = path.config.grid, path.config.s, path.config.grid.dx
    K, P = path.n_steps, path.n_paths
    per_step, per_path = _strategy_atoms(strategy, path)
    V = np.empty((K + 1, P))
    for k in range(K + 1):
        if per_step is not None:
            V[k] = _pair_batch(per_step[k], path.states[k], grid, dx, s)
        else:
            for j in range(P):
                V[k, j] = _pair_batch(per_path[k][j], path.states[k, j], grid, dx, s)
    return V


def gains(
    strategy: PortfolioStrategy, path: CurvePath, schedule: CoefficientSchedule
) -> np.ndarray:
    """(K+1, P) accumulated gains process of the strategy.

    The drift and volatility legs are paired against the product curves
    p_k m_k and p_k sigma_k^i (consistent with curve multiplication), frozen
    at the left endpoint of each step.
    """
    if path.states is None:
        raise ConfigInvalid("gains needs keep_states=True")
    if path.measure != "P":
        raise ConfigInvalid(
            "gains uses P-dynamics; for Q-ensembles accumulate against q_brownian_increments"
        )
    grid, s = path.config.grid, path.config.s
    dx, dt = grid.dx, path.config.dt
    K, P = path.n_steps, path.n_paths
    per_step, per_path = _strategy_atoms(strategy, path)
    G = np.zeros((K + 1, P))
    for k in range(K):
        t = float(path.times[k])
        increments = np.zeros(P)
        if schedule.deterministic:
            m_k, sig_k = schedule.at(t)
            m_vals = m_k.curve.values()
            sig_vals = sig_k.values_matrix()
            drift_prod = path.states[k] * m_vals[None, :]
            if per_step is not None:
                increments += _pair_batch(per_step[k], drift_prod, grid, dx, s) * dt
                for i in range(sig_vals.shape[0]):
                    vol_prod = path.states[k] * sig_vals[i][None, :]
                    increments += (
                        _pair_batch(per_step[k], vol_prod, grid, dx, s) * path.dw[:, k, i]
                    )
            else:
                for j in range(P):
                    atoms = per_path[k][j]
                    inc = _pair_batch(atoms, drift_prod[j], grid, dx, s) * dt
                    for i in range(sig_vals.shape[0]):
                        inc += _pair_batch(
                            atoms, path.states[k, j] * sig_vals[i], grid, dx, s
                        ) * path.dw[j, k, i]
                    increments[j] = inc
        else:
            for j in range(P):
                p_j = path.curve_at(k, j)
                m_j, sig_j = schedule.at(t, p_j)
                atoms = per_path[k][j] if per_path is not None else per_step[k]
                vals_j = path.states[k, j]
                inc = _pair_batch(atoms, vals_j * m_j.curve.values(), grid, dx, s) * dt
                for i, f in enumerate(sig_j.factors):
                    inc += _pair_batch(atoms, vals_j * f.values(), grid, dx, s) * path.dw[j, k, i]
                increments[j] = inc
        G[k + 1] = G[k] + increments
    return G


def ledger(
    strategy: PortfolioStrategy, path: CurvePath, schedule: CoefficientSchedule
) -> LedgerPath:
    """Wealth, gains, and per-path self-financing residual in one pass."""
    V = value_path(strategy, path)
    G = gains(strategy, path, schedule)
    residual = np.max(np.abs(V - V[0] - G), axis=0)
    return LedgerPath(strategy.name, path.times, V, G, residual)


def self_financing_residual(
    strategy: PortfolioStrategy, path: CurvePath, schedule: CoefficientSchedule
) -> float:
    """sup over steps and paths of |V_t - V_0 - G_t|."""
    return ledger(strategy, path, schedule).max_residual


def self_financing_tolerance(led: LedgerPath, dt: float, factor: float = 10.0) -> float:
    """Default residual budget: factor * dt * observed wealth scale."""
    scale = max(1.0, float(np.max(np.abs(led.wealth))))
    return factor * dt * scale


def admissibility_norm(
    strategy: PortfolioStrategy, path: CurvePath, schedule: CoefficientSchedule
) -> float:
    """Sample admissibility norm of the strategy.

    ||theta||^2 = E[(int |<theta, p m>| dt)^2] + E[int sum_i <theta, p sigma^i>^2 dt],
    both integrals left-point sums on the simulation grid.
    """
    if path.states is None:
        raise ConfigInvalid("admissibility_norm needs keep_states=True")
    grid, s = path.config.grid, path.config.s
    dx, dt = grid.dx, path.config.dt
    K, P = path.n_steps, path.n_paths
    per_step, per_path = _strategy_atoms(strategy, path)
    drift_abs = np.zeros(P)
    vol_sq = np.zeros(P)
    for k in range(K):
        t = float(path.times[k])
        if schedule.deterministic:
            m_k, sig_k = schedule.at(t)
            if per_step is not None:
                drift_prod = path.states[k] * m_k.curve.values()[None, :]
                drift_abs += np.abs(_pair_batch(per_step[k], drift_prod, grid, dx, s)) * dt
                for f in sig_k.factors:
                    vol_prod = path.states[k] * f.values()[None, :]
                    vol_sq += _pair_batch(per_step[k], vol_prod, grid, dx, s) ** 2 * dt
            else:
                m_vals = m_k.curve.values()
                sig_list = [f.values() for f in sig_k.factors]
                for j in range(P):
                    atoms = per_path[k][j]
                    drift_abs[j] += abs(_pair_batch(atoms, path.states[k, j] * m_vals, grid, dx, s)) * dt
                    for sv in sig_list:
                        vol_sq[j] += _pair_batch(atoms, path.states[k, j] * sv, grid, dx, s) ** 2 * dt
        else:
            for j in range(P):
                p_j = path.curve_at(k, j)
                m_j, sig_j = schedule.at(t, p_j)
                atoms = per_path[k][j] if per_path is not None else per_step[k]
                vals_j = path.states[k, j]
                drift_abs[j] += abs(_pair_batch(atoms, vals_j * m_j.curve.values(), grid, dx, s)) * dt
                for f in sig_j.factors:
                    vol_sq[j] += _pair_batch(atoms, vals_j * f.values(), grid, dx, s) ** 2 * dt
    return float(np.sqrt(np.mean(drift_abs**2) + np.mean(vol_sq)))


# --- strategy primitives -------------------------------------------------------


def buy_and_hold_zero_coupon(maturity: float, weight: float = 1.0) -> PortfolioStrategy:
    """Hold `weight` bonds maturing at calendar time `maturity`.

    At step k the holding is an atom at time-to-maturity maturity - t_k;
    self-financing up to O(dt) without rebalancing cash.
    """

    def builder(k: int, prefix: PathPrefix) -> list[DualAtom]:
        x = maturity - prefix.time
        if x < 0.0:
            raise ValidationFailure(
                f"zero-coupon maturity {maturity} before current time {prefix.time}"
            )
        return [DualAtom(x, weight, 0)]

    return PortfolioStrategy(f"zero_coupon {maturity}", builder, deterministic=True)


def _rollover_strategy(maturity: float, weight: float) -> PortfolioStrategy:
    """Roll bonds at constant time-to-maturity S, reinvesting continuously.

    The holding at step k is x_k * delta_S with x_k = exp(sum_{j<k} f_j(S) dt)
    accumulated from the path prefix (adapted by construction). Incremental
    per-path memo keeps the construction O(1) per step.
    """
    memo: dict[int, tuple[int, float]] = {}

    def builder(k: int, prefix: PathPrefix) -> list[DualAtom]:
        from .dynamics import forward_rate

        j = prefix.path_index
        last_k, log_x = memo.get(j, (0, 0.0))
        if k < last_k:  # replay from scratch when stepping backwards
            last_k, log_x = 0, 0.0
        dt = float(prefix._path.config.dt)
        for step in range(last_k, k):
            log_x += forward_rate(prefix.curve(step), maturity) * dt
        memo[j] = (k, log_x)
        return [DualAtom(maturity, weight * float(np.exp(log_x)), 0)]

    return PortfolioStrategy(f"rollover {maturity}", builder, deterministic=False)


def strategy_from_spec(spec: dict | list) -> PortfolioStrategy:
    """Build a strategy from its JSON description.

    A leg is {"kind": ..., "weight": w} with kind one of
      "cash"                      : w * delta_0
      "zero_coupon", "maturity" T : w bonds maturing at calendar time T
      "rollover", "maturity" S    : rolling account at time-to-maturity S
      "derivative_atom", "location" x : w * delta'_x
    A list of legs combines them.
    """
    legs = spec if isinstance(spec, list) else [spec]
    parts: list[PortfolioStrategy] = []
    for leg in legs:
        if not isinstance(leg, dict) or "kind" not in leg:
            raise ValidationFailure(f"strategy leg not understood: {leg!r}")
        kind = leg["kind"]
        w = float(leg.get("weight", 1.0))
        if kind == "cash":
            parts.append(
                PortfolioStrategy(
                    "cash", lambda k, prefix, w=w: [DualAtom(0.0, w, 0)], deterministic=True
                )
            )
        elif kind == "zero_coupon":
            parts.append(buy_and_hold_zero_coupon(float(leg["maturity"]), w))
        elif kind == "rollover":
            parts.append(_rollover_strategy(float(leg["maturity"]), w))
        elif kind == "derivative_atom":
            x = float(leg["location"])
            parts.append(
                PortfolioStrategy(
                    f"derivative_atom {x}",
                    lambda k, prefix, x=x, w=w: [DualAtom(x, w, 1)],
                    deterministic=True,
                )
            )
        else:
            raise ValidationFailure(f"unknown strategy kind {kind!r}")
    if len(parts) == 1:
        return parts[0]

    def combined(k: int, prefix: PathPrefix) -> list[DualAtom]:
        atoms: list[DualAtom] = []
        for part in parts:
            atoms.extend(part.builder(k, prefix))
        return atoms

    name = "+".join(p.name for p in parts)
    return PortfolioStrategy(name, combined, deterministic=all(p.deterministic for p in parts))
