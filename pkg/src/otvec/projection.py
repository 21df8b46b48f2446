"""Euclidean projection onto the discrete continuity constraint.

The constraint is affine: time difference of the density plus spatial
divergence of the momenta minus the per-channel gain from edge fluxes must
vanish on every (time slab, cell, channel), with the endpoint density slices
held fixed (variable elimination) and boundary faces pinned to zero.

Projection reduces to normal equations on the multiplier field.  The normal
operator is a Kronecker sum of four small one-dimensional operators (time,
x, y, channel graph), so it is diagonalized exactly by the tensor product of
their eigenbases; that spectral solve is the default path.  A matrix-free
preconditioned conjugate-gradient solve of the same equations is available
as ``method="cg"`` and is cross-checked against the spectral path in the
test suite.  The one-dimensional kernel per connected component of the
channel graph (constants, reflecting total-mass conservation) is deflated;
the corresponding right-hand-side component vanishes exactly when the
extended endpoints balance.

The coupled variant additionally ties the cell-centered bundle to the
staggered state (midpoint averages in time and space, flux copies equal to
their edge flux).  Folding those interpolation constraints into the
projection is what lets the energy prox stay pointwise and exact.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .grid import (
    CenteredState,
    FaceField,
    GridSpec,
    StateFields,
    face_to_center,
    face_to_center_adjoint,
    spatial_divergence,
    spatial_divergence_adjoint,
    time_average,
    time_average_adjoint,
    time_difference,
    time_difference_adjoint,
)
from .graph import ChannelGraph, EdgeCoupling, graph_divergence, graph_divergence_adjoint
from .validation import check_density


class ProjectionError(RuntimeError):
    """Normal-equation solve failed; carries the residual that was reached."""

    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


def _mult_axis(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    """Apply a small matrix along one axis of ``arr``."""
    return np.moveaxis(np.tensordot(mat, arr, axes=(1, axis)), 0, axis)


def _banded_solve(cb, arr: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, 0)
    shape = moved.shape
    out = cho_solve_banded((cb, False), moved.reshape(shape[0], -1))
    return np.moveaxis(out.reshape(shape), 0, axis)


def _coupling_tridiag(n: int):
    """Cholesky (banded) of I + AvgT Avg for a midpoint-average pair map."""
    if n < 1:
        return None
    ab = np.zeros((2, n))
    ab[1, :] = 1.5
    ab[0, 1:] = 0.25
    return cholesky_banded(ab, lower=False)


def validate_endpoints(g: GridSpec, graph: ChannelGraph,
                       rho0_ext, rho1_ext):
    """Check endpoint densities for shape and per-component mass balance.

    Returns the endpoints as float64 arrays.  Totals must agree on every
    connected component of the graph, since edge fluxes can only move mass
    within a component.
    """
    shape = (graph.n_channels, g.ny, g.nx)
    rho0_ext = check_density(np.asarray(rho0_ext, dtype=np.float64), "rho0_ext")
    rho1_ext = check_density(np.asarray(rho1_ext, dtype=np.float64), "rho1_ext")
    if rho0_ext.shape != shape or rho1_ext.shape != shape:
        raise ValueError(f"endpoints must have shape {shape}, got "
                         f"{rho0_ext.shape} and {rho1_ext.shape}")
    comps = graph.components()
    for label in np.unique(comps):
        sel = comps == label
        a, b = rho0_ext[sel].sum(), rho1_ext[sel].sum()
        if abs(a - b) > 1e-9 * max(1.0, abs(a), abs(b)):
            raise ValueError(
                f"endpoint totals differ on graph component {label} "
                f"({a:.12g} vs {b:.12g}); augment the problem first")
    return rho0_ext, rho1_ext


class ConstraintSystem:
    """Continuity constraint of one problem, with its projection operators.

    Parameters
    ----------
    g:
        Space-time grid.
    graph:
        Channel graph (edge fluxes enter the constraint through its signed
        incidence).
    rho0_ext, rho1_ext:
        Fixed endpoint densities, shape (n_channels, ny, nx), with equal
        totals per connected component of the graph.
    """

    def __init__(self, g: GridSpec, graph: ChannelGraph,
                 rho0_ext: np.ndarray, rho1_ext: np.ndarray):
        self.g = g
        self.graph = graph
        self.coupling = EdgeCoupling.from_graph(graph)
        self.rho0_ext, self.rho1_ext = validate_endpoints(g, graph,
                                                          rho0_ext, rho1_ext)

        self._chol_t = _coupling_tridiag(g.nt - 1)
        self._chol_x = _coupling_tridiag(g.nx - 1)
        self._chol_y = _coupling_tridiag(g.ny - 1)
        self._factors = {}
        # offset of the centered density interpolation from the fixed endpoints
        self._rho_c_offset = np.zeros((g.nt, graph.n_channels, g.ny, g.nx))
        self._rho_c_offset[0] += 0.5 * rho0_ext
        self._rho_c_offset[-1] += 0.5 * rho1_ext

    # -- basic maps ---------------------------------------------------------

    def residual(self, state: StateFields) -> np.ndarray:
        """Continuity defect per (slab, channel, cell), endpoints substituted."""
        rho = state.rho.copy()
        rho[0] = self.rho0_ext
        rho[-1] = self.rho1_ext
        out = time_difference(rho, self.g) + spatial_divergence(state.face(), self.g)
        if self.graph.n_edges:
            out -= graph_divergence(state.u, self.graph)
        return out

    def residual_norm(self, state: StateFields) -> float:
        return float(np.abs(self.residual(state)).max())

    def interpolate(self, state: StateFields) -> CenteredState:
        """Cell-centered bundle consistent with a staggered state."""
        pcx, pcy = face_to_center(state.face(), self.g)
        u_c = state.u[:, self.coupling.copy_edge] if self.coupling.n_copies \
            else np.zeros((self.g.nt, 0, self.g.ny, self.g.nx))
        rho = state.rho.copy()
        rho[0] = self.rho0_ext
        rho[-1] = self.rho1_ext
        return CenteredState(time_average(rho), pcx, pcy, u_c)

    def _adjoint_unknowns(self, y: np.ndarray) -> StateFields:
        """Transpose of the constraint map, restricted to the unknown slots."""
        rho_adj = time_difference_adjoint(y, self.g)
        rho_adj[0] = 0.0
        rho_adj[-1] = 0.0
        face = spatial_divergence_adjoint(y, self.g)
        if self.graph.n_edges:
            u_adj = -graph_divergence_adjoint(y, self.graph)
        else:
            u_adj = np.zeros((self.g.nt, 0, self.g.ny, self.g.nx))
        return StateFields(rho_adj, face.px, face.py, u_adj)

    def _coupling_solve(self, state: StateFields) -> StateFields:
        """Apply the inverse coupling normal matrix blockwise (in place ok)."""
        out = state.copy()
        if self.g.nt > 1:
            out.rho[1:-1] = _banded_solve(self._chol_t, out.rho[1:-1], 0)
        if self.g.nx > 1:
            out.px[..., 1:-1] = _banded_solve(self._chol_x, out.px[..., 1:-1], 3)
        if self.g.ny > 1:
            out.py[:, :, 1:-1, :] = _banded_solve(self._chol_y, out.py[:, :, 1:-1, :], 2)
        if self.graph.n_edges:
            out.u = out.u / self.coupling.kappa[None, :, None, None]
        return out

    # -- spectral factorization of the normal operator ----------------------

    def _small_matrices(self, coupled: bool):
        g = self.g
        ht, hx, hy = g.ht, g.hx, g.hy

        def pair_mats(n_rows, n_unknowns, h):
            diff = np.zeros((n_rows, n_unknowns))
            avg = np.zeros((n_rows, n_unknowns))
            for j in range(n_unknowns):
                diff[j, j] = 1.0 / h
                diff[j + 1, j] = -1.0 / h
                avg[j, j] = 0.5
                avg[j + 1, j] = 0.5
            return diff, avg

        def normal_1d(n_rows, n_unknowns, h):
            if n_unknowns < 1:
                return np.zeros((n_rows, n_rows))
            diff, avg = pair_mats(n_rows, n_unknowns, h)
            if coupled:
                k = np.eye(n_unknowns) + avg.T @ avg
                return diff @ np.linalg.solve(k, diff.T)
            return diff @ diff.T

        t_mat = normal_1d(g.nt, g.nt - 1, ht)
        x_mat = normal_1d(g.nx, g.nx - 1, hx)
        y_mat = normal_1d(g.ny, g.ny - 1, hy)

        graph = self.graph
        g_mat = np.zeros((graph.n_channels, graph.n_channels))
        for e in range(graph.n_edges):
            d = np.zeros(graph.n_channels)
            d[graph.edge_snk[e]] += 1.0
            d[graph.edge_src[e]] -= 1.0
            coef = 1.0 / self.coupling.kappa[e] if coupled else 1.0
            g_mat += coef * np.outer(d, d)
        return t_mat, g_mat, y_mat, x_mat

    def _get_factors(self, coupled: bool):
        if coupled not in self._factors:
            mats = self._small_matrices(coupled)
            eigs = [np.linalg.eigh(0.5 * (m + m.T)) for m in mats]
            lams = [w for w, _ in eigs]
            qs = [q for _, q in eigs]
            lam_sum = (lams[0][:, None, None, None] + lams[1][None, :, None, None]
                       + lams[2][None, None, :, None] + lams[3][None, None, None, :])
            scale = max(lam_sum.max(), 1.0)
            kernel = lam_sum <= 1e-12 * scale
            inv = np.where(kernel, 0.0, 1.0 / np.where(kernel, 1.0, lam_sum))
            diag = (np.diag(mats[0])[:, None, None, None]
                    + np.diag(mats[1])[None, :, None, None]
                    + np.diag(mats[2])[None, None, :, None]
                    + np.diag(mats[3])[None, None, None, :])
            kernel_modes = []
            tol = 1e-12 * scale
            zero_idx = [np.flatnonzero(w <= tol) for w in lams]
            for it in zero_idx[0]:
                for ic in zero_idx[1]:
                    for iy in zero_idx[2]:
                        for ix in zero_idx[3]:
                            kernel_modes.append((qs[0][:, it], qs[1][:, ic],
                                                 qs[2][:, iy], qs[3][:, ix]))
            self._factors[coupled] = (qs, inv, diag, kernel_modes)
        return self._factors[coupled]

    def _spectral_solve(self, rhs: np.ndarray, coupled: bool) -> np.ndarray:
        qs, inv, _, _ = self._get_factors(coupled)
        w = rhs
        for axis, q in enumerate(qs):
            w = _mult_axis(q.T, w, axis)
        w = w * inv
        for axis, q in enumerate(qs):
            w = _mult_axis(q, w, axis)
        return w

    def _deflate(self, r: np.ndarray, coupled: bool) -> np.ndarray:
        _, _, _, modes = self._get_factors(coupled)
        out = r
        for qt, qc, qy, qx in modes:
            coeff = np.einsum("tcyx,t,c,y,x->", out, qt, qc, qy, qx)
            out = out - coeff * np.einsum("t,c,y,x->tcyx", qt, qc, qy, qx)
        return out

    def _normal_apply(self, y: np.ndarray, coupled: bool) -> np.ndarray:
        adj = self._adjoint_unknowns(y)
        if coupled:
            adj = self._coupling_solve(adj)
        out = time_difference(adj.rho, self.g) + spatial_divergence(adj.face(), self.g)
        if self.graph.n_edges:
            out -= graph_divergence(adj.u, self.graph)
        return out

    def _cg_solve(self, rhs: np.ndarray, coupled: bool, tol: float,
                  maxiter: int) -> np.ndarray:
        _, _, diag, _ = self._get_factors(coupled)
        precond = 1.0 / np.where(diag > 0.0, diag, 1.0)
        b = self._deflate(rhs, coupled)
        b_norm = float(np.linalg.norm(b))
        if b_norm == 0.0:
            return np.zeros_like(rhs)
        x = np.zeros_like(rhs)
        r = b.copy()
        z = self._deflate(precond * r, coupled)
        p = z.copy()
        rz = float(np.vdot(r, z))
        for _ in range(maxiter):
            mp = self._normal_apply(p, coupled)
            alpha = rz / float(np.vdot(p, mp))
            x += alpha * p
            r -= alpha * mp
            if np.linalg.norm(r) <= tol * b_norm:
                return x
            z = self._deflate(precond * r, coupled)
            rz_new = float(np.vdot(r, z))
            p = z + (rz_new / rz) * p
            rz = rz_new
        achieved = float(np.linalg.norm(r) / b_norm)
        raise ProjectionError(
            f"projection CG stalled at relative residual {achieved:.3e} "
            f"after {maxiter} iterations (requested {tol:.1e})", achieved)

    def _solve_normal(self, rhs: np.ndarray, coupled: bool, method: str,
                      cg_tol: float, cg_maxiter: int) -> np.ndarray:
        if method == "spectral":
            return self._spectral_solve(rhs, coupled)
        if method == "cg":
            return self._cg_solve(rhs, coupled, cg_tol, cg_maxiter)
        raise ValueError(f"unknown projection method {method!r}")

    # -- public projections --------------------------------------------------

    def project(self, state: StateFields, cg_tol: float = 1e-10,
                cg_maxiter: int = 10000, method: str = "spectral") -> StateFields:
        """Project a staggered state onto the continuity constraint.

        Returns the closest state (Euclidean) satisfying the constraint, with
        endpoint slices set to the system's fixed endpoints and boundary
        faces zero.  The input is not modified.
        """
        state.check(self.g, self.graph.n_channels, self.graph.n_edges)
        rhs = self.residual(state)
        y = self._solve_normal(rhs, False, method, cg_tol, cg_maxiter)
        adj = self._adjoint_unknowns(y)
        out = state.copy()
        out.rho[0] = self.rho0_ext
        out.rho[-1] = self.rho1_ext
        out.rho[1:-1] -= adj.rho[1:-1]
        out.px[..., 1:-1] -= adj.px[..., 1:-1]
        out.py[:, :, 1:-1, :] -= adj.py[:, :, 1:-1, :]
        out.px[..., 0] = 0.0
        out.px[..., -1] = 0.0
        out.py[:, :, 0, :] = 0.0
        out.py[:, :, -1, :] = 0.0
        if self.graph.n_edges:
            out.u = out.u - adj.u
        return out

    def project_coupled(self, state: StateFields, centered: CenteredState,
                        cg_tol: float = 1e-10, cg_maxiter: int = 10000,
                        method: str = "spectral"):
        """Joint projection onto {continuity} x {centered bundle = averages}.

        Given arbitrary (staggered, centered) iterates, returns the closest
        pair in which the staggered state is feasible and the centered bundle
        equals its midpoint averages (with endpoint constants folded in).
        """
        g = self.g
        # r_bar = U_bar + Interp^T (V_bar - offset), on unknown slots
        rho_r = state.rho.copy()
        rho_r[0] = self.rho0_ext
        rho_r[-1] = self.rho1_ext
        if g.nt > 1:
            rho_r[1:-1] += time_average_adjoint(centered.rho_c - self._rho_c_offset)[1:-1]
        face_adj = face_to_center_adjoint(centered.px_c, centered.py_c, g)
        px_r = state.px + face_adj.px
        py_r = state.py + face_adj.py
        # boundary faces are pinned, not unknowns; drop any stray input there
        px_r[..., 0] = 0.0
        px_r[..., -1] = 0.0
        py_r[:, :, 0, :] = 0.0
        py_r[:, :, -1, :] = 0.0
        u_r = state.u.copy()
        for j in range(self.coupling.n_copies):
            u_r[:, self.coupling.copy_edge[j]] += centered.u_c[:, j]
        r_bar = StateFields(rho_r, px_r, py_r, u_r)

        w = self._coupling_solve(r_bar)
        rhs = self.residual(w)
        y = self._solve_normal(rhs, True, method, cg_tol, cg_maxiter)
        correction = self._coupling_solve(self._adjoint_unknowns(y))

        out = w.copy()
        out.rho[0] = self.rho0_ext
        out.rho[-1] = self.rho1_ext
        out.rho[1:-1] -= correction.rho[1:-1]
        out.px[..., 1:-1] -= correction.px[..., 1:-1]
        out.py[:, :, 1:-1, :] -= correction.py[:, :, 1:-1, :]
        out.px[..., 0] = 0.0
        out.px[..., -1] = 0.0
        out.py[:, :, 0, :] = 0.0
        out.py[:, :, -1, :] = 0.0
        if self.graph.n_edges:
            out.u = out.u - correction.u
        return out, self.interpolate(out)
