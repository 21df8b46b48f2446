"""Dynamic transport solver: problem containers, the splitting loop, sweeps.

The solver alternates two exact maps on a pair of iterates (staggered state,
cell-centered bundle): the joint projection onto the continuity-plus-
interpolation constraint, and the pointwise prox of the perspective energy,
combined by Douglas-Rachford relaxation

    z <- z + alpha (prox_lam(2 P(z) - z) - P(z)).

Both maps are exact, so the iteration converges to a minimizer of the
discrete action.  Convergence is declared when the energy of the prox point
is flat over a 10-iteration window (relative tolerance) and the projected
iterate's continuity residual is below tolerance; the prox point's energy is
used because the projected iterate can carry transient negative densities
that make its energy undefined.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyBreakdown, apply_prox, centered_energy
from .graph import AugmentationReport, ChannelGraph, augment_scalar, augment_vector, recover_source
from .grid import GridSpec, StateFields
from .projection import ConstraintSystem, validate_endpoints

_WINDOW = 10


@dataclass
class SolverOptions:
    """Knobs of the splitting iteration; defaults suit desk-scale problems."""

    step: float = 1.0             # prox step of the energy term
    relaxation: float = 1.8      # over-relaxation, in (0, 2)
    max_iters: int = 3000
    energy_rtol: float = 1e-5    # window-relative energy flatness
    residual_tol: float = 1e-7   # continuity defect, max norm
    cg_tol: float = 1e-10
    cg_maxiter: int = 10000
    projection: str = "spectral"  # or "cg"
    energy_floor: float | None = None  # denominator floor for the energy test

    def validate(self):
        if self.step <= 0.0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not (0.0 < self.relaxation < 2.0):
            raise ValueError(f"relaxation must lie in (0, 2), got {self.relaxation}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if min(self.energy_rtol, self.residual_tol, self.cg_tol) < 0.0:
            raise ValueError("tolerances must be nonnegative")
        if self.projection not in ("spectral", "cg"):
            raise ValueError(f"projection must be 'spectral' or 'cg', got {self.projection!r}")


@dataclass
class Problem:
    """One fully specified transport problem on extended (balanced) endpoints."""

    g: GridSpec
    graph: ChannelGraph
    rho0_ext: np.ndarray
    rho1_ext: np.ndarray
    options: SolverOptions = field(default_factory=SolverOptions)
    report: AugmentationReport | None = None
    seed: int = 0  # reserved; the iteration has no randomized step

    def __post_init__(self):
        self.rho0_ext, self.rho1_ext = validate_endpoints(
            self.g, self.graph, self.rho0_ext, self.rho1_ext)
        self.options.validate()
        if self.g.nt < 2:
            raise ValueError("solver needs nt >= 2 time slabs")

    def system(self) -> ConstraintSystem:
        return ConstraintSystem(self.g, self.graph, self.rho0_ext, self.rho1_ext)

    @property
    def total_mass(self) -> float:
        return float(self.rho0_ext.sum())


@dataclass
class Solution:
    """Solver output: feasible state, energy split, and the run's history."""

    state: StateFields
    energy: EnergyBreakdown
    source: np.ndarray | None
    history_energy: np.ndarray
    history_residual: np.ndarray
    history_parts: np.ndarray  # (n_iter, 3): spatial, inter-channel, source-layer
    converged: bool
    n_iter: int
    wall_time: float
    problem: Problem

    def source_layer_masses(self) -> np.ndarray:
        """Total source-layer mass at each time node (augmented problems only)."""
        layer = self.problem.graph.source_layer
        if layer is None:
            raise ValueError("problem has no source layer")
        return self.state.rho[:, layer].sum(axis=(1, 2))

    def channel_masses(self) -> np.ndarray:
        """Channel-summed total mass per time node; constant for feasible states."""
        return self.state.rho.sum(axis=(1, 2, 3))


def initial_state(problem: Problem, system: ConstraintSystem | None = None,
                  method: str | None = None) -> StateFields:
    """Feasible starting point: densities linear in time, then one projection."""
    if system is None:
        system = problem.system()
    g = problem.g
    state = StateFields.zeros(g, problem.graph.n_channels, problem.graph.n_edges)
    t = g.time_nodes()[:, None, None, None]
    state.rho[:] = (1.0 - t) * problem.rho0_ext[None] + t * problem.rho1_ext[None]
    opts = problem.options
    return system.project(state, cg_tol=opts.cg_tol, cg_maxiter=opts.cg_maxiter,
                          method=method or opts.projection)


def solve(problem: Problem) -> Solution:
    """Run the splitting iteration to tolerance (or max_iters) and package results."""
    t_start = time.perf_counter()
    opts = problem.options
    g, graph = problem.g, problem.graph
    system = problem.system()
    coupling = system.coupling

    u0 = initial_state(problem, system)
    z_u = u0.copy()
    z_v = system.interpolate(u0)

    floor = opts.energy_floor
    if floor is None:
        floor = 1e-10 * max(problem.total_mass, 1e-30) * (g.Lx ** 2 + g.Ly ** 2)

    energies = []
    residuals = []
    parts = []  # (spatial, inter-channel edge, source-layer edge) per iteration
    last_pair = None
    breakdown = None
    converged = False
    n_iter = 0

    for n_iter in range(1, opts.max_iters + 1):
        x_u, x_v = system.project_coupled(z_u, z_v, cg_tol=opts.cg_tol,
                                          cg_maxiter=opts.cg_maxiter,
                                          method=opts.projection)
        r_u = 2.0 * x_u - z_u
        r_v = 2.0 * x_v - z_v
        y_v = apply_prox(r_v, graph, g, opts.step, coupling)
        z_u = z_u + opts.relaxation * (x_u - z_u)
        z_v = z_v + opts.relaxation * (y_v - x_v)

        bd = centered_energy(y_v, graph, g, coupling)
        e_n = bd.total
        if not np.isfinite(e_n):
            raise RuntimeError(f"energy diverged at iteration {n_iter} "
                               f"(value {e_n}); check problem scaling")
        res_n = system.residual_norm(x_u)
        energies.append(e_n)
        residuals.append(res_n)
        inter, src = bd.split_edges(graph)
        parts.append((float(bd.spatial_by_channel.sum()), inter, src))
        last_pair = (r_u, y_v)
        breakdown = bd

        if n_iter >= _WINDOW:
            w = energies[-_WINDOW:]
            band = max(w) - min(w)
            if band <= opts.energy_rtol * max(abs(w[-1]), floor) \
                    and res_n <= opts.residual_tol:
                converged = True
                break

    # The returned state is the projection of the final prox point: exactly
    # feasible.  The reported energy is the prox point's, which stays finite
    # (prox outputs cannot violate the perspective domain) and converges to
    # the optimal value; the two sides coincide at the fixed point.
    final_u, _ = system.project_coupled(last_pair[0], last_pair[1],
                                        cg_tol=opts.cg_tol,
                                        cg_maxiter=opts.cg_maxiter,
                                        method=opts.projection)
    source = recover_source(final_u.u, graph) if graph.source_layer is not None else None

    return Solution(
        state=final_u,
        energy=breakdown,
        source=source,
        history_energy=np.array(energies),
        history_residual=np.array(residuals),
        history_parts=np.array(parts).reshape(-1, 3),
        converged=converged,
        n_iter=n_iter,
        wall_time=time.perf_counter() - t_start,
        problem=problem,
    )


def interpolation_frames(solution: Solution, neg_rtol: float = 1e-3) -> np.ndarray:
    """Density frames (nt+1, C, ny, nx), clipped to be exactly nonnegative.

    Small negative excursions (relative to the field maximum) are an expected
    artifact of a first-order method and are clipped to zero; anything larger
    signals a solver failure and raises.
    """
    frames = solution.state.rho.copy()
    scale = max(frames.max(), 1e-300)
    lowest = frames.min()
    if lowest < -neg_rtol * scale:
        raise ValueError(f"density has negative values beyond tolerance "
                         f"(min {lowest:.3e}, scale {scale:.3e})")
    np.clip(frames, 0.0, None, out=frames)
    return frames


# ---------------------------------------------------------------------------
# problem builders
# ---------------------------------------------------------------------------

def scalar_problem(rho0, rho1, nt: int, gamma: float = 1.0, epsilon: float = 1e-3,
                   placement: str = "uniform", mask=None, Lx: float = 1.0,
                   Ly: float = 1.0, options: SolverOptions | None = None) -> Problem:
    """Single-channel unbalanced problem via the source-layer construction."""
    rho0 = np.asarray(rho0, dtype=np.float64)
    if rho0.ndim == 1:
        rho0 = rho0[None, :]
    rho1 = np.asarray(rho1, dtype=np.float64)
    if rho1.ndim == 1:
        rho1 = rho1[None, :]
    graph, r0, r1, report = augment_scalar(rho0, rho1, gamma=gamma, epsilon=epsilon,
                                           placement=placement, mask=mask)
    g = GridSpec(nx=rho0.shape[1], ny=rho0.shape[0], nt=nt, Lx=Lx, Ly=Ly)
    return Problem(g, graph, r0, r1, options or SolverOptions(), report)


def complete_edges(n: int) -> list:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def vector_problem(rho0, rho1, nt: int, edges="complete", gamma: float = 1.0,
                   eta: float = 1.0, epsilon: float = 1e-3,
                   placement: str = "uniform", mask=None, Lx: float = 1.0,
                   Ly: float = 1.0, base_mode: str = "two_point",
                   options: SolverOptions | None = None) -> Problem:
    """Multi-channel unbalanced problem with a shared source layer."""
    rho0 = np.asarray(rho0, dtype=np.float64)
    rho1 = np.asarray(rho1, dtype=np.float64)
    if edges == "complete":
        edges = complete_edges(rho0.shape[0])
    graph, r0, r1, report = augment_vector(rho0, rho1, edges, gamma=gamma, eta=eta,
                                           epsilon=epsilon, placement=placement,
                                           mask=mask, base_mode=base_mode)
    g = GridSpec(nx=rho0.shape[2], ny=rho0.shape[1], nt=nt, Lx=Lx, Ly=Ly)
    return Problem(g, graph, r0, r1, options or SolverOptions(), report)


def balanced_problem(rho0_ext, rho1_ext, graph: ChannelGraph, nt: int,
                     Lx: float = 1.0, Ly: float = 1.0,
                     options: SolverOptions | None = None) -> Problem:
    """Direct problem on an explicit graph; endpoints must already balance."""
    rho0_ext = np.asarray(rho0_ext, dtype=np.float64)
    g = GridSpec(nx=rho0_ext.shape[2], ny=rho0_ext.shape[1], nt=nt, Lx=Lx, Ly=Ly)
    return Problem(g, graph, rho0_ext, rho1_ext, options or SolverOptions())


# ---------------------------------------------------------------------------
# parameter sweeps
# ---------------------------------------------------------------------------

def _sweep_row(make_problem, params: dict) -> dict:
    row = dict(params)
    try:
        problem = make_problem(**params)
        sol = solve(problem)
        edge_part, source_part = sol.energy.split_edges(problem.graph)
        row.update(
            energy=sol.energy.total,
            energy_spatial=float(sol.energy.spatial_by_channel.sum()),
            energy_edge=edge_part,
            energy_source=source_part,
            iterations=sol.n_iter,
            converged=sol.converged,
            wall_time=sol.wall_time,
        )
        layer = problem.graph.source_layer
        if layer is not None:
            masses = sol.source_layer_masses()
            row.update(
                # total minus the layer's own (epsilon-weighted) kinetic term:
                # the part of the energy that survives the epsilon -> 0 limit
                corrected_energy=sol.energy.total - float(sol.energy.spatial_by_channel[layer]),
                max_source_layer_mass=float(masses.max()),
                mid_source_layer_mass=float(masses[len(masses) // 2]),
                source_integral=float(sol.source.sum() * problem.g.ht),
            )
        row["solution"] = sol
    except Exception as exc:  # noqa: BLE001 - sweep must survive bad points
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def sweep(make_problem, param_grid: dict, n_jobs: int = 1) -> list:
    """Solve one problem per point of a parameter grid.

    ``make_problem(**params) -> Problem`` is called for every point of the
    cartesian product, in deterministic order (sorted parameter names,
    row-major product).  Failures are recorded in the row and do not stop the
    sweep.  ``n_jobs > 1`` runs points on a thread pool; row order and
    content do not depend on it (every solve is itself deterministic).

    Returns a list of dict rows with the parameters, total energy and its
    parts, source-layer statistics, iteration count and convergence flag (or
    an ``error`` entry).
    """
    names = sorted(param_grid)
    points = [dict(zip(names, values))
              for values in itertools.product(*(param_grid[name] for name in names))]
    if n_jobs > 1 and len(points) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(lambda p: _sweep_row(make_problem, p), points))
    return [_sweep_row(make_problem, params) for params in points]
