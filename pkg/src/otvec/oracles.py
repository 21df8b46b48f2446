"""Independent reference computations used to validate the solver.

Everything here is deliberately naive: an exact linear program for tiny
static transport instances, a fine-grid minimization for the pure-reaction
geodesic, a dense grid search for the pointwise prox, and a randomized
adjoint tester.  None of it shares code with the production path, which is
the point; the test suite holds the two sides against each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog, minimize

from .grid import GridSpec

_MAX_LP_CELLS = 64


@dataclass
class DiscreteCoupling:
    """Transport plan between two cell-mass vectors, with its cost."""

    plan: np.ndarray   # (n, n), nonnegative
    cost: float

    def marginal_defect(self, mu: np.ndarray, nu: np.ndarray) -> float:
        """Largest violation of the row/column sum constraints."""
        row = np.abs(self.plan.sum(axis=1) - mu.ravel()).max()
        col = np.abs(self.plan.sum(axis=0) - nu.ravel()).max()
        return float(max(row, col))


def lp_w2(mu, nu, g: GridSpec):
    """Exact squared-W2 transport cost between cell masses on one grid.

    Solves the transportation linear program with squared-Euclidean
    cell-center costs.  Only meant for tiny instances (at most 64 cells);
    anything larger is refused.

    Parameters
    ----------
    mu, nu:
        Nonnegative cell masses, shape (ny, nx) or flat, equal totals.
    g:
        Grid supplying the cell-center coordinates.

    Returns
    -------
    (cost, DiscreteCoupling)
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    nu = np.asarray(nu, dtype=np.float64).ravel()
    n = g.n_cells
    if mu.shape != (n,) or nu.shape != (n,):
        raise ValueError(f"marginals must have {n} cells, got {mu.size} and {nu.size}")
    if n > _MAX_LP_CELLS:
        raise ValueError(f"instance has {n} cells; the LP reference is capped "
                         f"at {_MAX_LP_CELLS}")
    if mu.min() < 0.0 or nu.min() < 0.0:
        raise ValueError("marginals must be nonnegative")
    total = mu.sum()
    if abs(total - nu.sum()) > 1e-10 * max(1.0, total):
        raise ValueError(f"marginals are unbalanced ({total:.12g} vs {nu.sum():.12g})")

    xc, yc = g.cell_centers()
    x, y = xc.ravel(), yc.ravel()
    cost_mat = (x[:, None] - x[None, :]) ** 2 + (y[:, None] - y[None, :]) ** 2

    # row sums = mu, column sums = nu over the flattened plan
    rows_i, rows_j, vals = [], [], []
    for i in range(n):
        for j in range(n):
            k = i * n + j
            rows_i += [i, n + j]
            rows_j += [k, k]
            vals += [1.0, 1.0]
    a_eq = sparse.csr_matrix((vals, (rows_i, rows_j)), shape=(2 * n, n * n))
    b_eq = np.concatenate([mu, nu])

    res = linprog(cost_mat.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0.0, None),
                  method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    coupling = DiscreteCoupling(res.x.reshape(n, n), float(res.fun))
    defect = coupling.marginal_defect(mu, nu)
    if defect > 1e-10 * max(1.0, total):
        raise RuntimeError(f"LP plan violates marginals by {defect:.3e}")
    return coupling.cost, coupling


def reaction_energy(m0: float, m1: float, gamma: float) -> float:
    """Cheapest pure growth/decay cost between two masses.

    The minimum of gamma * integral of (dm/dt)^2 / m over unit-time paths
    from m0 to m1 is 4 gamma (sqrt(m1) - sqrt(m0))^2; exact for m0 = 0 by
    continuity.
    """
    if m0 < 0.0 or m1 < 0.0:
        raise ValueError(f"masses must be nonnegative, got {m0} and {m1}")
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return float(4.0 * gamma * (np.sqrt(m1) - np.sqrt(m0)) ** 2)


def reaction_energy_numeric(m0: float, m1: float, gamma: float,
                            n_points: int = 2001) -> float:
    """Fine-grid verification of :func:`reaction_energy`.

    Minimizes the discretized action over piecewise-linear mass paths on
    ``n_points`` time nodes (midpoint density per interval, masses floored
    at 1e-12 to stay off the boundary singularity).  The action is convex,
    so the starting path only affects the iteration count; interpolating
    between the square roots starts close enough that the solver converges
    even when one endpoint sits on the floor.  Agrees with the closed form
    to well under 0.1% at the default resolution.
    """
    if m0 < 0.0 or m1 < 0.0:
        raise ValueError(f"masses must be nonnegative, got {m0} and {m1}")
    if gamma <= 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if n_points < 1000:
        raise ValueError("use at least 1000 time points for the verification")
    floor = 1e-12
    a, b = max(m0, floor), max(m1, floor)
    n = n_points - 1
    ht = 1.0 / n

    def action(interior):
        r = np.concatenate([[a], interior, [b]])
        dr = np.diff(r)
        mid = 0.5 * (r[:-1] + r[1:])
        terms = dr ** 2 / mid
        val = gamma * terms.sum() / ht
        # d(term_k)/dr_k and /dr_{k+1}
        d_lo = (-2.0 * dr * mid - 0.5 * dr ** 2) / mid ** 2
        d_hi = (2.0 * dr * mid - 0.5 * dr ** 2) / mid ** 2
        grad = np.zeros_like(r)
        grad[:-1] += d_lo
        grad[1:] += d_hi
        return val, gamma * grad[1:-1] / ht

    t = np.linspace(0.0, 1.0, n_points)[1:-1]
    start = np.maximum(((1.0 - t) * np.sqrt(a) + t * np.sqrt(b)) ** 2, floor)
    res = minimize(action, start, jac=True, method="L-BFGS-B",
                   bounds=[(floor, None)] * (n_points - 2),
                   options={"maxiter": 5000, "maxfun": 20000,
                            "ftol": 1e-14, "gtol": 1e-12})
    return float(res.fun)


def prox_bruteforce(rho_bar: float, momenta_bar, weights, lam: float):
    """Grid-search reference for the pointwise perspective prox.

    Scans the reduced one-dimensional objective (momenta eliminated in
    closed form) on a dense grid over [0, rho_bar + 10 lam sum(w m^2) + 10]
    at 1e-4 resolution, then refines locally twice.  Capped at 3 momentum
    slots; this is a test fixture, not a solver.

    Returns (rho, list of momenta).
    """
    m_bar = np.asarray(momenta_bar, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    if m_bar.size > 3:
        raise ValueError(f"at most 3 momentum slots, got {m_bar.size}")
    if m_bar.shape != w.shape:
        raise ValueError("momenta and weights must have matching lengths")
    if m_bar.size and w.min() <= 0.0:
        raise ValueError("weights must be strictly positive")
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")

    def objective(rho):
        val = (rho - rho_bar) ** 2 / (2.0 * lam)
        for mj, wj in zip(m_bar, w):
            val = val + wj * mj ** 2 / (rho + 2.0 * lam * wj)
        return val

    hi = max(rho_bar, 0.0) + 10.0 * lam * float((w * m_bar ** 2).sum()) + 10.0
    step = 1e-4
    grid = np.arange(0.0, hi + step, step)
    best = grid[int(np.argmin(objective(grid)))]
    for _ in range(2):
        lo = max(best - step, 0.0)
        grid = np.linspace(lo, best + step, 2001)
        step = grid[1] - grid[0]
        best = grid[int(np.argmin(objective(grid)))]
    rho = float(best)
    momenta = [float(mj * rho / (rho + 2.0 * lam * wj)) for mj, wj in zip(m_bar, w)]
    return rho, momenta


@dataclass
class LinearOp:
    """A linear map packaged for adjoint testing (flat in/out shapes)."""

    forward: callable
    adjoint: callable
    in_shape: tuple
    out_shape: tuple
    name: str = ""


def finite_check(op: LinearOp, n_trials: int = 100, seed: int = 0) -> float:
    """Largest normalized adjoint defect of a linear operator pair.

    Draws ``n_trials`` random (x, y) pairs and returns the maximum of
    |<Ax, y> - <x, A^T y>| / (|x| |y|).  Zero (to rounding) certifies that
    ``adjoint`` really is the transpose of ``forward``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        x = rng.standard_normal(op.in_shape)
        y = rng.standard_normal(op.out_shape)
        lhs = float(np.vdot(np.asarray(op.forward(x)), y))
        rhs = float(np.vdot(x, np.asarray(op.adjoint(y))))
        denom = np.linalg.norm(x.ravel()) * np.linalg.norm(y.ravel())
        if denom > 0.0:
            worst = max(worst, abs(lhs - rhs) / denom)
    return worst
