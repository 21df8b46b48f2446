"""Transport energy and its pointwise proximal operator.

The discrete action is a sum of perspective terms m^2 / rho over all
(time slab, cell, channel) instances: the two center-averaged momentum
components weighted by the channel weight, plus one term per incident edge
flux copy weighted by the edge weight.  Fields store mass per cell, so the
quadrature weight reduces to the time step alone (the cell volume cancels
between numerator and denominator), which keeps reported energies directly
comparable with squared-distance transport costs on the same grid.

Conventions: 0^2 / 0 counts as 0; any other division by zero density means
the configuration is infeasible and the energy is +inf.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import CenteredState, GridSpec, StateFields, face_to_center, time_average
from .graph import PRIMARY_ENDPOINT, TWO_POINT, ChannelGraph, EdgeCoupling

# Momenta smaller than this (relative to the field scale) over a zero density
# are treated as exact zeros rather than an infeasibility.
_ZERO_MOMENTUM_RTOL = 1e-12


@dataclass
class EnergyBreakdown:
    """Energy split by contribution; ``total`` is always the exact sum of parts."""

    spatial_by_channel: np.ndarray  # (C,) including channel weights
    edge_by_edge: np.ndarray        # (E,) including edge weights
    total: float

    @classmethod
    def build(cls, spatial_by_channel, edge_by_edge) -> "EnergyBreakdown":
        s = np.asarray(spatial_by_channel, dtype=np.float64)
        e = np.asarray(edge_by_edge, dtype=np.float64)
        return cls(s, e, float(s.sum() + e.sum()))

    def split_edges(self, graph: ChannelGraph):
        """(inter-channel part, source-layer part) of the edge energy."""
        aug = set(graph.augmentation_edges())
        src = sum(self.edge_by_edge[e] for e in aug)
        return float(self.edge_by_edge.sum() - src), float(src)


def _perspective_sum(num_sq: np.ndarray, den: np.ndarray) -> float:
    """Sum of num_sq / den with the 0/0 convention; +inf on real violations."""
    pos = den > 0.0
    total = float((num_sq[pos] / den[pos]).sum()) if np.any(pos) else 0.0
    rest = num_sq[~pos]
    if rest.size:
        scale = np.sqrt(num_sq.max()) if num_sq.size else 0.0
        if np.any(rest > (max(scale, 1.0) * _ZERO_MOMENTUM_RTOL) ** 2):
            return np.inf
    return total


def edge_density(rho_mid: np.ndarray, graph: ChannelGraph) -> np.ndarray:
    """Effective density seen by each edge flux, per the edge's mode.

    ``two_point`` pairs the endpoint densities harmonically,
    1/rho_eff = 1/rho_src + 1/rho_snk, and is zero as soon as either endpoint
    is empty; ``primary_endpoint`` uses the designated (sink) channel's
    density unchanged.

    Parameters
    ----------
    rho_mid:
        Slab-averaged densities, shape (nt, C, ny, nx), nonnegative.
    graph:
        Channel graph carrying the per-edge modes.
    """
    if np.any(rho_mid < 0.0):
        raise ValueError("negative density passed to edge_density")
    out = np.empty((rho_mid.shape[0], graph.n_edges) + rho_mid.shape[2:])
    for e in range(graph.n_edges):
        a, b = graph.edge_src[e], graph.edge_snk[e]
        if graph.edge_modes[e] == TWO_POINT:
            ra, rb = rho_mid[:, a], rho_mid[:, b]
            prod = ra * rb
            s = ra + rb
            out[:, e] = np.divide(prod, s, out=np.zeros_like(prod), where=s > 0.0)
        else:
            out[:, e] = rho_mid[:, graph.designated_channel(e)]
    return out


def total_energy(state: StateFields, graph: ChannelGraph, g: GridSpec) -> EnergyBreakdown:
    """Discrete action of a staggered state, split by channel and edge.

    Momenta are averaged to cell centers and densities to slab midpoints
    before forming the perspective terms, matching what the solver minimizes.
    Densities must be nonnegative at every node.
    """
    if np.any(state.rho < 0.0):
        raise ValueError(f"negative density (min {state.rho.min():.3g}); "
                         "clip or fix before evaluating the energy")
    rho_mid = time_average(state.rho)
    pcx, pcy = face_to_center(state.face(), g)
    w1 = graph.channel_weights
    spatial = np.empty(graph.n_channels)
    for c in range(graph.n_channels):
        spatial[c] = w1[c] * g.ht * _perspective_sum(pcx[:, c] ** 2 + pcy[:, c] ** 2,
                                                     rho_mid[:, c])
    rho_edge = edge_density(rho_mid, graph)
    per_edge = np.empty(graph.n_edges)
    for e in range(graph.n_edges):
        per_edge[e] = graph.edge_weights[e] * g.ht * _perspective_sum(
            state.u[:, e] ** 2, rho_edge[:, e])
    return EnergyBreakdown.build(spatial, per_edge)


def centered_energy(v: CenteredState, graph: ChannelGraph, g: GridSpec,
                    coupling: EdgeCoupling | None = None) -> EnergyBreakdown:
    """Energy of a cell-centered bundle (always finite when densities are >= 0
    wherever momenta are nonzero, which prox outputs guarantee)."""
    if coupling is None:
        coupling = EdgeCoupling.from_graph(graph)
    w1 = graph.channel_weights
    spatial = np.empty(graph.n_channels)
    for c in range(graph.n_channels):
        spatial[c] = w1[c] * g.ht * _perspective_sum(v.px_c[:, c] ** 2 + v.py_c[:, c] ** 2,
                                                     v.rho_c[:, c])
    per_edge = np.zeros(graph.n_edges)
    for j in range(coupling.n_copies):
        e = coupling.copy_edge[j]
        c = coupling.copy_channel[j]
        per_edge[e] += graph.edge_weights[e] * g.ht * _perspective_sum(
            v.u_c[:, j] ** 2, v.rho_c[:, c])
    return EnergyBreakdown.build(spatial, per_edge)


# ---------------------------------------------------------------------------
# proximal operator of the pointwise perspective energy
# ---------------------------------------------------------------------------

def prox_batch(rho_bar: np.ndarray, m_bar: np.ndarray, weights: np.ndarray,
               lam: float, tol: float = 1e-12, max_iter: int = 200):
    """Vectorized prox of sum_j w_j m_j^2 / rho at step ``lam``.

    Solves, independently for every leading index,

        min_{rho >= 0, m}  sum_j w_j m_j^2 / rho
                           + (1/(2 lam)) ((rho - rho_bar)^2 + |m - m_bar|^2)

    ``m_bar`` has one more trailing axis than ``rho_bar`` (the momentum
    slots); ``weights`` broadcasts against it.  Zero-weight slots pass
    through unchanged, which lets callers pad ragged stacks.

    Eliminating m gives the scalar reduced objective
    F(rho) = sum_j w_j m_bar_j^2 / (rho + 2 w_j lam) + (rho - rho_bar)^2 / (2 lam),
    whose derivative g is concave and strictly increasing on [0, inf), so a
    Newton iteration from the left bracket end converges monotonically;
    whenever g(max(0, rho_bar)) >= 0 the minimizer sits at that bracket end
    (in particular rho* = 0 for nonpositive rho_bar with small momenta).
    """
    rho_bar = np.asarray(rho_bar, dtype=np.float64)
    m_bar = np.asarray(m_bar, dtype=np.float64)
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), m_bar.shape)
    if np.any(w < 0.0):
        raise ValueError("weights must be nonnegative")
    live = w > 0.0
    wm2 = np.where(live, w * m_bar ** 2, 0.0)

    def g_and_slope(rho):
        den = rho[..., None] + 2.0 * lam * w
        frac = np.where(live, wm2 / den ** 2, 0.0)
        gval = (rho - rho_bar) / lam - frac.sum(-1)
        slope = 1.0 / lam + 2.0 * np.where(live, wm2 / den ** 3, 0.0).sum(-1)
        return gval, slope

    lo = np.maximum(rho_bar, 0.0)
    g_lo, _ = g_and_slope(lo)
    needs_root = g_lo < 0.0

    rho = lo.copy()
    if np.any(needs_root):
        x = lo.copy()
        active = needs_root.copy()
        for _ in range(max_iter):
            gval, slope = g_and_slope(x)
            step = np.where(active, -gval / slope, 0.0)
            # monotone from the left: g concave increasing, so steps stay below
            # the root; clip stray negatives from rounding
            step = np.maximum(step, 0.0)
            x = x + step
            active = active & (step > tol * (1.0 + x))
            if not active.any():
                break
        rho = np.where(needs_root, x, rho)

    den = rho[..., None] + 2.0 * lam * w
    scale = np.where(live, np.divide(rho[..., None], den,
                                     out=np.zeros_like(den), where=den > 0.0), 1.0)
    m = m_bar * scale
    return rho, m


def prox_perspective(rho_bar: float, momenta_bar, lam: float):
    """Prox of the weighted perspective energy at a single point.

    Parameters
    ----------
    rho_bar:
        Current density value (any sign; the prox projects onto rho >= 0).
    momenta_bar:
        Sequence of (value, weight) pairs, weights > 0.
    lam:
        Prox step, > 0.

    Returns
    -------
    (rho_star, momenta_star) with ``momenta_star`` a list of floats in the
    input order.
    """
    vals = np.array([float(v) for v, _ in momenta_bar])
    ws = np.array([float(w) for _, w in momenta_bar])
    if vals.size and ws.min() <= 0.0:
        raise ValueError("momentum weights must be strictly positive")
    rho, m = prox_batch(np.array([float(rho_bar)]),
                        vals[None, :] if vals.size else np.zeros((1, 0)),
                        ws if ws.size else np.zeros(0), lam)
    return float(rho[0]), [float(x) for x in m[0]]


def apply_prox(v_bar: CenteredState, graph: ChannelGraph, g: GridSpec, lam: float,
               coupling: EdgeCoupling | None = None) -> CenteredState:
    """Exact prox of the total energy on a centered bundle.

    The energy is separable over (slab, cell, channel) instances: each
    instance owns its density, its two center momenta (weight = channel
    weight x ht) and the flux copies attributed to the channel (weight = edge
    weight x ht).  The prox therefore reduces to independent scalar root
    finds, vectorized per channel.
    """
    if coupling is None:
        coupling = EdgeCoupling.from_graph(graph)
    out = v_bar.copy()
    ht = g.ht
    for c in range(graph.n_channels):
        copies = coupling.channel_copies[c]
        stack = [v_bar.px_c[:, c], v_bar.py_c[:, c]]
        wlist = [graph.channel_weights[c] * ht, graph.channel_weights[c] * ht]
        for j in copies:
            stack.append(v_bar.u_c[:, j])
            wlist.append(graph.edge_weights[coupling.copy_edge[j]] * ht)
        m_bar = np.stack(stack, axis=-1)
        w = np.array(wlist)
        rho, m = prox_batch(v_bar.rho_c[:, c], m_bar, w, lam)
        out.rho_c[:, c] = rho
        out.px_c[:, c] = m[..., 0]
        out.py_c[:, c] = m[..., 1]
        for k, j in enumerate(copies):
            out.u_c[:, j] = m[..., 2 + k]
    return out
