"""Replication of terminal claims by bond portfolios.

Under the martingale measure a square-integrable claim X is
E_Q[X] + sum_i int x_t^i dW~^i; the hedge turns the integrand x_t into a
portfolio in two moves, both per time step:

1. Range inversion. With l_t = L_t p_0, B_t^i = l_t sigma_t^i and the Gram
   operator A_t = ((B^i, B^j))_{ij} in the ambient inner product, solve
   A_t c = x_t on the retained spectrum (relative eigenvalue cutoff
   eps_rank); a residual above eps_residual * ||x_t|| means the target is
   not attainable by bond portfolios and raises OutOfRange.

2. Atom realization. The curve eta_t = sum_i c_i B_t^i acting through the
   inner product is re-expressed as finitely many point holdings: weights w
   on a maturity basis {S_1..S_M} solve <w-atoms, p_t sigma^i_t> =
   (A_t c)_i, minimum-norm via pseudo-inverse. A cash atom at 0 (the bond
   p_t(0) carries no risk since sigma(0) = 0) completes the wealth to the
   conditional claim value, propagated by the running value identity
   V_{k+1} = V_k + sum_i x_k^i dW~_k^i or supplied by an oracle.

For deterministic market prices of risk the Clark-Ocone integrand of the
optimal-wealth claims has the closed form x_t^i = gamma_t^i y_t with y_t
from the utility kernel tables; that path is exercised by the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .curve_space import (
    Curve,
    DualAtom,
    SobolevIndex,
    atoms_value_matrix,
    multiply,
    sobolev_inner,
    translate,
)
from .dynamics import CurvePath
from .errors import ConfigInvalid, OutOfRange, ValidationFailure
from .market_model import CoefficientSchedule, as_gamma_array, q_brownian_increments
from .portfolio import PortfolioStrategy, _pair_batch, _strategy_atoms
from .utility import Utility, conditional_coefficients

__all__ = [
    "HedgeOperators",
    "HedgeResult",
    "gram_operators",
    "solve_hedge_step",
    "eta_curve",
    "default_atom_maturities",
    "integrand_from_strategy",
    "remaining_variance",
    "conditional_wealth_tables",
    "clark_ocone_integrand_deterministic",
    "complete_hedge",
    "weighted_condition_diagnostic",
]


@dataclass
class HedgeOperators:
    """Deterministic hedge operators per time node, with spectral data."""

    times: np.ndarray
    grid: object
    s: SobolevIndex
    l: list  # translated initial curves L_t p0
    B: list  # B[k][i] = l_k * sigma_k^i
    sigma_values: list  # (n, N) node values per step
    A: np.ndarray  # (K+1, n, n) Gram matrices
    eigvals: np.ndarray  # (K+1, n)
    eigvecs: np.ndarray  # (K+1, n, n)

    @property
    def n_factors(self) -> int:
        return self.A.shape[1]


def gram_operators(
    p0: Curve, schedule: CoefficientSchedule, times: np.ndarray, s: SobolevIndex
) -> HedgeOperators:
    """Build l_t, B_t^i and A_t = B*B on the time grid (deterministic sigma)."""
    if not schedule.deterministic:
        raise ConfigInvalid("gram_operators needs a deterministic coefficient schedule")
    l_list, B_list, sig_list = [], [], []
    n = schedule.at(0.0)[1].n_factors
    A = np.empty((len(times), n, n))
    for k, t in enumerate(times):
        _, sig = schedule.at(float(t))
        l_k = translate(p0, float(t))
        B_k = [multiply(l_k, f) for f in sig.factors]
        for i in range(n):
            for j in range(i, n):
                A[k, i, j] = A[k, j, i] = sobolev_inner(B_k[i], B_k[j], s)
        l_list.append(l_k)
        B_list.append(B_k)
        sig_list.append(sig.values_matrix())
    eigvals, eigvecs = np.linalg.eigh(A)
    return HedgeOperators(
        times=np.asarray(times, dtype=np.float64),
        grid=p0.grid,
        s=s,
        l=l_list,
        B=B_list,
        sigma_values=sig_list,
        A=A,
        eigvals=eigvals,
        eigvecs=eigvecs,
    )


def solve_hedge_step(
    ops: HedgeOperators,
    step: int,
    x: np.ndarray,
    eps_rank: float = 1e-10,
    eps_residual: float = 1e-8,
):
    """Solve A_t c = x on the retained spectrum.

    Args:
        x: (n,) target or (P, n) batch of targets.

    Returns:
        (c, residual): coefficients with the same leading shape as x and the
        Euclidean residual ||A c - x|| per target.

    Raises:
        OutOfRange: some residual exceeds eps_residual * ||x||.
    """
    lam = ops.eigvals[step]
    V = ops.eigvecs[step]
    cutoff = eps_rank * max(float(lam.max()), 0.0)
    keep = lam > cutoff
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim == 1
    xb = x_arr[None, :] if single else x_arr
    c = ((xb @ V) * inv) @ V.T
    resid = np.linalg.norm(c @ ops.A[step] - xb, axis=1)
    scale = np.linalg.norm(xb, axis=1)
    bad = resid > eps_residual * np.maximum(scale, 1e-300)
    if np.any(bad):
        worst = int(np.argmax(resid - eps_residual * scale))
        raise OutOfRange(
            f"hedge target outside operator range at step {step}: residual "
            f"{resid[worst]:.3e} vs allowance {eps_residual * scale[worst]:.3e}"
        )
    return (c[0], float(resid[0])) if single else (c, resid)


def eta_curve(ops: HedgeOperators, step: int, c: np.ndarray) -> Curve:
    """Riesz representative eta = sum_i c_i B_t^i of the solved hedge."""
    B_k = ops.B[step]
    g = np.zeros(ops.grid.n_points)
    a = 0.0
    for ci, b in zip(c, B_k):
        g += ci * b.g
        a += ci * b.a
    return Curve(ops.grid, g, a)


def default_atom_maturities(n_factors: int, grid, horizon: float, m: int | None = None) -> np.ndarray:
    """Equally spaced atom basis in [0.5, x_max - horizon]; default M = 2n + 1."""
    m = 2 * n_factors + 1 if m is None else m
    hi = grid.x_max - horizon
    if hi <= 0.5:
        raise ValidationFailure(
            f"grid end {grid.x_max} leaves no room for atoms beyond the horizon {horizon}"
        )
    return np.linspace(0.5, hi, m)


def integrand_from_strategy(
    strategy: PortfolioStrategy, path: CurvePath, schedule: CoefficientSchedule
) -> np.ndarray:
    """(K, P, n) volatility pairings x_k^i = <theta_k, p_k sigma_k^i>.

    These are the exact hedge targets of a claim defined as the strategy's
    terminal wealth; feeding them to complete_hedge closes the round trip.
    """
    if path.states is None:
        raise ConfigInvalid("integrand extraction needs keep_states=True")
    if not schedule.deterministic:
        raise ConfigInvalid("integrand extraction needs a deterministic schedule")
    grid, s = path.config.grid, path.config.s
    dx = grid.dx
    K, P = path.n_steps, path.n_paths
    per_step, per_path = _strategy_atoms(strategy, path)
    n = schedule.at(0.0)[1].n_factors
    out = np.empty((K, P, n))
    for k in range(K):
        _, sig_k = schedule.at(float(path.times[k]))
        sig_vals = sig_k.values_matrix()
        for i in range(n):
            prod = path.states[k] * sig_vals[i][None, :]
            if per_step is not None:
                out[k, :, i] = _pair_batch(per_step[k], prod, grid, dx, s)
            else:
                for j in range(P):
                    out[k, j, i] = _pair_batch(per_path[k][j], prod[j], grid, dx, s)
    return out


# --- Clark-Ocone closed forms ---------------------------------------------------


def remaining_variance(gamma, n_steps: int, dt: float) -> np.ndarray:
    """(K+1,) tail sums h_k = sum_{j>=k} ||gamma_j||^2 dt (left-point)."""
    g = as_gamma_array(gamma, n_steps, dt)
    sq = np.sum(g * g, axis=1) * dt
    out = np.zeros(n_steps + 1)
    out[:-1] = np.cumsum(sq[::-1])[::-1]
    return out


def conditional_wealth_tables(
    u: Utility, lam: float, gamma, xi: np.ndarray, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """(Y, y) tables (K+1, P) from the lognormal kernels along xi paths."""
    K = xi.shape[1] - 1
    h = remaining_variance(gamma, K, dt)
    Y = np.empty_like(xi.T)
    y = np.empty_like(xi.T)
    for k in range(K + 1):
        Y[k], y[k] = conditional_coefficients(u, lam, xi[:, k], h[k])
    return Y, y


def clark_ocone_integrand_deterministic(
    u: Utility, lam: float, gamma, xi: np.ndarray, dt: float
) -> np.ndarray:
    """(K, P, n) integrand x_k^i = gamma_k^i y_k for the optimal-wealth claim.

    xi is the (P, K+1) density path under P; gamma must be deterministic
    (vector, (K, n) array, or callable). Utilities outside the registered
    families raise UnsupportedUtility inside the kernel call.
    """
    K = xi.shape[1] - 1
    g = as_gamma_array(gamma, K, dt)
    _, y = conditional_wealth_tables(u, lam, g, xi, dt)
    return y[:K, :, None] * g[:, None, :]


# --- hedge completion -----------------------------------------------------------


@dataclass
class HedgeResult:
    """Completed hedge: atoms plus cash per step, with audit trails."""

    atom_maturities: np.ndarray
    weights: np.ndarray  # (K, P, M) atom weights
    cash: np.ndarray  # (K+1, P) holdings of the maturing bond delta_0
    conditional_value: np.ndarray  # (K+1, P) V-bar_k
    gram_residual: np.ndarray  # (K, P)
    achieved: np.ndarray  # (K, P, n) targets A c actually met
    strategy: PortfolioStrategy


def complete_hedge(
    ops: HedgeOperators,
    path: CurvePath,
    integrands: np.ndarray,
    price0,
    gamma=None,
    conditional_mean: Callable[[int], np.ndarray] | None = None,
    atom_maturities: Sequence[float] | None = None,
    eps_rank: float = 1e-10,
    eps_residual: float = 1e-8,
) -> HedgeResult:
    """Turn integrands into an atom strategy replicating the claim.

    Args:
        ops: precomputed hedge operators on path.times.
        path: P-measure ensemble with retained states.
        integrands: (K, P, n) hedge targets at the left endpoints.
        price0: claim price E_Q[X] (scalar or per-path array).
        gamma: market price of risk, required unless conditional_mean is
            given; used to propagate the conditional value V-bar via
            Q-increments.
        conditional_mean: optional oracle k -> (P,) values E_Q[X | F_{t_k}],
            replacing the propagation.
        atom_maturities: maturity basis; default 2n+1 points in
            [0.5, x_max - T].

    Returns:
        HedgeResult; `strategy` is ready for the portfolio ledger ops.

    Raises:
        OutOfRange: an integrand is not attainable within eps_residual.
    """
    if path.states is None:
        raise ConfigInvalid("complete_hedge needs keep_states=True")
    cfg = path.config
    K, P = path.n_steps, path.n_paths
    n = ops.n_factors
    if integrands.shape != (K, P, n):
        raise ConfigInvalid(f"integrands shape {integrands.shape} != {(K, P, n)}")
    if conditional_mean is None and gamma is None:
        raise ConfigInvalid("complete_hedge needs gamma or a conditional_mean oracle")
    maturities = (
        default_atom_maturities(n, cfg.grid, cfg.horizon)
        if atom_maturities is None
        else np.asarray(atom_maturities, dtype=np.float64)
    )
    M = maturities.shape[0]

    dw_q = None
    if conditional_mean is None:
        dw_q = q_brownian_increments(path.dw, gamma, cfg.dt)

    weights = np.empty((K, P, M))
    cash = np.empty((K + 1, P))
    vbar = np.empty((K + 1, P))
    gram_residual = np.empty((K, P))
    achieved = np.empty((K, P, n))
    vbar[0] = conditional_mean(0) if conditional_mean is not None else np.broadcast_to(
        np.asarray(price0, dtype=np.float64), (P,)
    )

    for k in range(K):
        c, resid = solve_hedge_step(ops, k, integrands[k], eps_rank, eps_residual)
        gram_residual[k] = resid
        targets = c @ ops.A[k]
        achieved[k] = targets
        # per-path atom system rows: (p_k sigma^i)(S_j)
        mat = np.empty((P, n, M))
        for i in range(n):
            prod = path.states[k] * ops.sigma_values[k][i][None, :]
            mat[:, i, :] = atoms_value_matrix(maturities, prod, cfg.grid)
        w = (np.linalg.pinv(mat) @ targets[:, :, None])[:, :, 0]
        weights[k] = w
        p_at = atoms_value_matrix(maturities, path.states[k], cfg.grid)
        risky = np.sum(w * p_at, axis=1)
        cash[k] = (vbar[k] - risky) / path.value0[k]
        if conditional_mean is not None:
            vbar[k + 1] = conditional_mean(k + 1)
        else:
            vbar[k + 1] = vbar[k] + np.einsum("pn,pn->p", targets, dw_q[:, k, :])
    cash[K] = vbar[K] / path.value0[K]

    def builder(k: int, prefix) -> list[DualAtom]:
        j = prefix.path_index
        atoms = [DualAtom(0.0, float(cash[k, j]), 0)]
        if k < K:
            atoms.extend(
                DualAtom(float(Sm), float(weights[k, j, m]), 0)
                for m, Sm in enumerate(maturities)
            )
        return atoms

    strategy = PortfolioStrategy("completed_hedge", builder, deterministic=False)
    return HedgeResult(
        atom_maturities=maturities,
        weights=weights,
        cash=cash,
        conditional_value=vbar,
        gram_residual=gram_residual,
        achieved=achieved,
        strategy=strategy,
    )


# --- weighted sequence-space diagnostic -----------------------------------------


@dataclass(frozen=True)
class WeightedSequenceIndex:
    """Polynomial weights (1 + i^2)^{s/2}, i = 1..n, of the coefficient space."""

    order: float

    def weights(self, n: int) -> np.ndarray:
        i = np.arange(1, n + 1, dtype=np.float64)
        return np.power(1.0 + i * i, 0.5 * self.order)


def weighted_condition_diagnostic(
    A_stack: np.ndarray,
    index: WeightedSequenceIndex,
    n_trials: int = 64,
    seed: int = 0,
    eps_rank: float = 1e-12,
) -> dict:
    """Smallest k with ||z|| <= k ||A^{1/2} z|| in the weighted sequence norm.

    Args:
        A_stack: (n, n) Gram matrix or (K, n, n) stack.
        index: weight order of the coefficient norm.
        n_trials: random unit vectors cross-checking the spectral bound.

    Returns:
        dict with k (inf when A is singular on the retained spectrum, i.e.
        no finite constant exists), the per-step minimum eigenvalues of
        A^{1/2} W^2 A^{1/2}, and the worst random-trial ratio (must be <= k).
    """
    A = np.asarray(A_stack, dtype=np.float64)
    if A.ndim == 2:
        A = A[None, :, :]
    n = A.shape[1]
    w2 = index.weights(n) ** 2
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    k_worst = 0.0
    min_eigs = []
    trial_worst = 0.0
    for Ak in A:
        lam, V = np.linalg.eigh(Ak)
        lam_clip = np.maximum(lam, 0.0)
        root = (V * np.sqrt(lam_clip)) @ V.T
        Mk = root @ (w2[:, None] * root)
        m_eigs = np.linalg.eigvalsh(Mk)
        min_eigs.append(float(m_eigs[0]))
        scale = float(m_eigs[-1])
        if m_eigs[0] <= eps_rank * max(scale, 1e-300):
            k_worst = np.inf
        else:
            k_worst = max(k_worst, 1.0 / np.sqrt(m_eigs[0]))
        z = rng.standard_normal((n_trials, n))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        denom_sq = np.einsum("tn,nm,tm->t", z, Mk, z)
        good = denom_sq > 0
        if np.any(good):
            trial_worst = max(
                trial_worst, float(np.max(1.0 / np.sqrt(denom_sq[good])))
            )
    return {
        "k": float(k_worst) if np.isfinite(k_worst) else np.inf,
        "bounded": bool(np.isfinite(k_worst)),
        "min_weighted_eigs": min_eigs,
        "worst_trial_ratio": trial_worst,
    }
