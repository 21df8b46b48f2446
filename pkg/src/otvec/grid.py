"""Space-time grids, staggered fields, and their difference operators.

Densities live at time nodes and cell centers; momenta live at time slabs and
spatial face centers; inter-channel fluxes live at time slabs and cell
centers.  With this staggering the discrete continuity equation telescopes
exactly in both time and space, so mass accounting is exact up to rounding.

Array layout (all float64, time axis first):

==============  =============================  ============================
field           shape                          location
==============  =============================  ============================
cell density    ``(nt + 1, C, ny, nx)``        time nodes, cell centers
x-momentum      ``(nt, C, ny, nx + 1)``        time slabs, x-face centers
y-momentum      ``(nt, C, ny + 1, nx)``        time slabs, y-face centers
edge flux       ``(nt, E, ny, nx)``            time slabs, cell centers
==============  =============================  ============================

Boundary faces (first/last slice of each momentum axis) carry the zero-flux
condition and are pinned to 0; they are never unknowns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Documented aliases for the plain ndarray field kinds.  A cell field is
# indexed (time node, channel, y, x); an edge flux field (time slab, edge,
# y, x).
CellField = np.ndarray
EdgeFluxField = np.ndarray


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid on [0, Lx] x [0, Ly] with nt time slabs.

    ``ny = 1`` gives a 1-d problem.  Cell sizes are ``hx = Lx / nx``,
    ``hy = Ly / ny``; the time step is ``ht = 1 / nt`` (unit horizon).
    """

    nx: int
    ny: int
    nt: int
    Lx: float = 1.0
    Ly: float = 1.0

    def __post_init__(self):
        for name in ("nx", "ny", "nt"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not (self.Lx > 0.0 and self.Ly > 0.0):
            raise ValueError(f"domain lengths must be positive, got Lx={self.Lx}, Ly={self.Ly}")

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def ht(self) -> float:
        return 1.0 / self.nt

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_centers(self):
        """Return (X, Y) center coordinate arrays, each of shape (ny, nx)."""
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.broadcast_to(x[None, :], (self.ny, self.nx)).copy(), \
            np.broadcast_to(y[:, None], (self.ny, self.nx)).copy()

    def time_nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nt + 1)


def _check_shape(arr: np.ndarray, shape: tuple, name: str) -> np.ndarray:
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


class _FieldAlgebra:
    """Vector-space arithmetic shared by the field bundles below."""

    def _arrays(self):
        raise NotImplementedError

    def _wrap(self, arrays):
        return type(self)(*arrays)

    def __add__(self, other):
        return self._wrap([a + b for a, b in zip(self._arrays(), other._arrays())])

    def __sub__(self, other):
        return self._wrap([a - b for a, b in zip(self._arrays(), other._arrays())])

    def __mul__(self, c: float):
        return self._wrap([c * a for a in self._arrays()])

    __rmul__ = __mul__

    def copy(self):
        return self._wrap([a.copy() for a in self._arrays()])

    def dot(self, other) -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self._arrays(), other._arrays())))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def ravel(self) -> np.ndarray:
        """The whole bundle as one flat vector (concatenated in field order)."""
        return np.concatenate([a.ravel() for a in self._arrays()])


@dataclass
class FaceField(_FieldAlgebra):
    """Face-centered momentum pair (px on x-faces, py on y-faces).

    Normal components on the domain boundary (the first and last face along
    each axis) must be exactly zero.
    """

    px: np.ndarray
    py: np.ndarray

    def _arrays(self):
        return (self.px, self.py)

    @classmethod
    def zeros(cls, g: GridSpec, n_channels: int) -> "FaceField":
        return cls(
            np.zeros((g.nt, n_channels, g.ny, g.nx + 1)),
            np.zeros((g.nt, n_channels, g.ny + 1, g.nx)),
        )

    def check(self, g: GridSpec, n_channels: int) -> "FaceField":
        _check_shape(self.px, (g.nt, n_channels, g.ny, g.nx + 1), "px")
        _check_shape(self.py, (g.nt, n_channels, g.ny + 1, g.nx), "py")
        if np.any(self.px[..., 0]) or np.any(self.px[..., -1]) \
                or np.any(self.py[:, :, 0, :]) or np.any(self.py[:, :, -1, :]):
            raise ValueError("nonzero momentum on a domain boundary face")
        return self


@dataclass
class StateFields(_FieldAlgebra):
    """Full staggered unknowns of one transport problem.

    rho: (nt+1, C, ny, nx), px/py: face momenta, u: (nt, E, ny, nx) edge
    fluxes.  Sliced views share memory with the bundle.
    """

    rho: np.ndarray
    px: np.ndarray
    py: np.ndarray
    u: np.ndarray

    def _arrays(self):
        return (self.rho, self.px, self.py, self.u)

    @classmethod
    def zeros(cls, g: GridSpec, n_channels: int, n_edges: int) -> "StateFields":
        return cls(
            np.zeros((g.nt + 1, n_channels, g.ny, g.nx)),
            np.zeros((g.nt, n_channels, g.ny, g.nx + 1)),
            np.zeros((g.nt, n_channels, g.ny + 1, g.nx)),
            np.zeros((g.nt, n_edges, g.ny, g.nx)),
        )

    @property
    def n_channels(self) -> int:
        return self.rho.shape[1]

    @property
    def n_edges(self) -> int:
        return self.u.shape[1]

    def face(self) -> FaceField:
        return FaceField(self.px, self.py)

    def check(self, g: GridSpec, n_channels: int, n_edges: int) -> "StateFields":
        _check_shape(self.rho, (g.nt + 1, n_channels, g.ny, g.nx), "rho")
        self.face().check(g, n_channels)
        _check_shape(self.u, (g.nt, n_edges, g.ny, g.nx), "u")
        return self


@dataclass
class CenteredState(_FieldAlgebra):
    """Cell-centered companion of :class:`StateFields` used by the solver.

    Every component lives at (time slab, cell): the time-averaged density,
    the face momenta averaged to centers, and one copy of each edge flux per
    channel that pays for it (two copies for a two-point edge, one for a
    designated-endpoint edge).  The pointwise energy is separable in these
    variables, which is what makes its prox exact.
    """

    rho_c: np.ndarray   # (nt, C, ny, nx)
    px_c: np.ndarray    # (nt, C, ny, nx)
    py_c: np.ndarray    # (nt, C, ny, nx)
    u_c: np.ndarray     # (nt, n_copies, ny, nx)

    def _arrays(self):
        return (self.rho_c, self.px_c, self.py_c, self.u_c)

    @classmethod
    def zeros(cls, g: GridSpec, n_channels: int, n_copies: int) -> "CenteredState":
        shape = (g.nt, n_channels, g.ny, g.nx)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape),
                   np.zeros((g.nt, n_copies, g.ny, g.nx)))


# ---------------------------------------------------------------------------
# difference operators
# ---------------------------------------------------------------------------

def spatial_divergence(flux: FaceField, g: GridSpec) -> np.ndarray:
    """Centered finite-volume divergence of face momenta.

    Parameters
    ----------
    flux:
        Face momenta with pinned (zero) boundary faces.
    g:
        Grid the field lives on.

    Returns
    -------
    ndarray of shape (nt, C, ny, nx), the net outflow rate per cell.
    """
    px, py = flux.px, flux.py
    return (px[..., 1:] - px[..., :-1]) / g.hx + (py[:, :, 1:, :] - py[:, :, :-1, :]) / g.hy


def spatial_divergence_adjoint(q: np.ndarray, g: GridSpec) -> FaceField:
    """Adjoint of :func:`spatial_divergence` (zero on boundary faces).

    The adjoint is taken with respect to the unweighted Euclidean inner
    products on cells and on interior faces, so boundary faces of the result
    are exactly zero.
    """
    nt, nc = q.shape[0], q.shape[1]
    px = np.zeros((nt, nc, g.ny, g.nx + 1))
    py = np.zeros((nt, nc, g.ny + 1, g.nx))
    px[..., 1:-1] = (q[..., :-1] - q[..., 1:]) / g.hx
    py[:, :, 1:-1, :] = (q[:, :, :-1, :] - q[:, :, 1:, :]) / g.hy
    return FaceField(px, py)


def time_difference(rho: np.ndarray, g: GridSpec) -> np.ndarray:
    """Forward difference in time, (rho^{k+1} - rho^k) / ht, one row per slab."""
    if rho.shape[0] != g.nt + 1:
        raise ValueError(f"rho has {rho.shape[0]} time nodes, expected {g.nt + 1}")
    return (rho[1:] - rho[:-1]) / g.ht


def time_difference_adjoint(q: np.ndarray, g: GridSpec) -> np.ndarray:
    """Adjoint of :func:`time_difference`, mapping slab fields to node fields."""
    if q.shape[0] != g.nt:
        raise ValueError(f"q has {q.shape[0]} time slabs, expected {g.nt}")
    out = np.zeros((g.nt + 1,) + q.shape[1:])
    out[0] = -q[0] / g.ht
    out[-1] = q[-1] / g.ht
    if g.nt > 1:
        out[1:-1] = (q[:-1] - q[1:]) / g.ht
    return out


def time_average(rho: np.ndarray) -> np.ndarray:
    """Midpoint average of consecutive time nodes; one row per slab."""
    return 0.5 * (rho[:-1] + rho[1:])


def time_average_adjoint(q: np.ndarray) -> np.ndarray:
    nt = q.shape[0]
    out = np.zeros((nt + 1,) + q.shape[1:])
    out[0] = 0.5 * q[0]
    out[-1] = 0.5 * q[-1]
    if nt > 1:
        out[1:-1] = 0.5 * (q[:-1] + q[1:])
    return out


def face_to_center(flux: FaceField, g: GridSpec):
    """Average face momenta to cell centers; returns (pcx, pcy)."""
    px, py = flux.px, flux.py
    return 0.5 * (px[..., :-1] + px[..., 1:]), 0.5 * (py[:, :, :-1, :] + py[:, :, 1:, :])


def face_to_center_adjoint(qx: np.ndarray, qy: np.ndarray, g: GridSpec) -> FaceField:
    """Adjoint of :func:`face_to_center`; boundary faces stay zero."""
    nt, nc = qx.shape[0], qx.shape[1]
    px = np.zeros((nt, nc, g.ny, g.nx + 1))
    py = np.zeros((nt, nc, g.ny + 1, g.nx))
    px[..., 1:-1] = 0.5 * (qx[..., :-1] + qx[..., 1:])
    py[:, :, 1:-1, :] = 0.5 * (qy[:, :, :-1, :] + qy[:, :, 1:, :])
    return FaceField(px, py)


_ADJOINTS = {
    "spatial_divergence": spatial_divergence_adjoint,
    "time_difference": time_difference_adjoint,
    "time_average": lambda q, g: time_average_adjoint(q),
    "face_to_center": None,  # takes a pair; dispatched below
}


def adjoint_of(opname: str, field, g: GridSpec):
    """Apply the adjoint of a named operator to ``field``.

    ``spatial_divergence`` and ``time_difference``/``time_average`` take a
    slab cell field; ``face_to_center`` takes the (qx, qy) pair.
    """
    if opname == "face_to_center":
        qx, qy = field
        return face_to_center_adjoint(qx, qy, g)
    fn = _ADJOINTS.get(opname)
    if fn is None:
        raise ValueError(f"unknown operator {opname!r}")
    return fn(field, g)
