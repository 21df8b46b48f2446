"""Channel graphs and the source-layer construction for unbalanced endpoints.

Channels (image planes, plus an optional source layer) are the nodes of a
small directed graph; each edge carries a cell-wise flux that moves mass
between two channels at the same spatial location.  Unbalanced problems are
made balanced by appending one extra channel -- the source layer -- connected
to every original channel, and placing the endpoint mass difference in it on
the lighter side.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .validation import check_density

TWO_POINT = "two_point"
PRIMARY_ENDPOINT = "primary_endpoint"
_MODES = (TWO_POINT, PRIMARY_ENDPOINT)


class ChannelGraph:
    """Directed graph over density channels with per-channel and per-edge weights.

    Parameters
    ----------
    n_channels:
        Number of channels (graph nodes), >= 1.
    edges:
        Sequence of (source_channel, sink_channel) pairs.  Self loops are
        rejected.  Positive edge flux removes mass at the source channel and
        deposits it at the sink channel.
    channel_weights:
        Spatial kinetic weight per channel (default all 1).
    edge_weights:
        Flux penalty per edge (default all 1).
    edge_modes:
        Per-edge effective-density rule, ``"two_point"`` (harmonic pairing of
        the two endpoint densities) or ``"primary_endpoint"`` (the sink
        channel's density alone).
    source_layer:
        Index of the source-layer channel if this graph came out of an
        augmentation, else None.
    require_connected:
        When True (default) a multi-channel graph must be connected, since
        transport between channels otherwise cannot reach every node.  Tests
        of block-diagonal behavior may opt out.
    """

    def __init__(self, n_channels: int, edges, channel_weights=None, edge_weights=None,
                 edge_modes=None, source_layer: int | None = None,
                 require_connected: bool = True):
        if n_channels < 1:
            raise ValueError(f"n_channels must be >= 1, got {n_channels}")
        self.n_channels = int(n_channels)
        edges = [(int(a), int(b)) for a, b in edges]
        for a, b in edges:
            if not (0 <= a < n_channels and 0 <= b < n_channels):
                raise ValueError(f"edge ({a}, {b}) references a channel out of range")
            if a == b:
                raise ValueError(f"self-loop edge on channel {a} is not allowed")
        self.edges = edges
        self.edge_src = np.array([a for a, _ in edges], dtype=np.intp)
        self.edge_snk = np.array([b for _, b in edges], dtype=np.intp)

        self.channel_weights = self._weights(channel_weights, n_channels, "channel_weights")
        self.edge_weights = self._weights(edge_weights, len(edges), "edge_weights")

        if edge_modes is None:
            edge_modes = [TWO_POINT] * len(edges)
        edge_modes = list(edge_modes)
        if len(edge_modes) != len(edges):
            raise ValueError("edge_modes length does not match the edge count")
        for m in edge_modes:
            if m not in _MODES:
                raise ValueError(f"unknown edge density mode {m!r}")
        self.edge_modes = edge_modes

        if source_layer is not None and not (0 <= source_layer < n_channels):
            raise ValueError(f"source_layer index {source_layer} out of range")
        self.source_layer = source_layer

        if require_connected and n_channels > 1 and not self.is_connected():
            raise ValueError("channel graph is not connected; transport cannot "
                             "reach every channel (pass require_connected=False "
                             "to build a deliberately decoupled problem)")

        # Incidence matrices: +1 at the source row of each edge column for the
        # source part, +1 at the sink row for the sink part; their difference
        # is the signed incidence.
        n_e = len(edges)
        self.source_part = np.zeros((n_channels, n_e))
        self.sink_part = np.zeros((n_channels, n_e))
        for e, (a, b) in enumerate(edges):
            self.source_part[a, e] = 1.0
            self.sink_part[b, e] = 1.0
        self.incidence = self.source_part - self.sink_part

    @staticmethod
    def _weights(w, n, name):
        if w is None:
            return np.ones(n)
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"{name} must have shape ({n},), got {w.shape}")
        if n and w.min() <= 0.0:
            raise ValueError(f"{name} must be strictly positive")
        return w.copy()

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def is_connected(self) -> bool:
        if self.n_channels == 1:
            return True
        if not self.edges:
            return False
        data = np.ones(len(self.edges))
        adj = csr_matrix((data, (self.edge_src, self.edge_snk)),
                         shape=(self.n_channels, self.n_channels))
        n, _ = connected_components(adj, directed=False)
        return n == 1

    def components(self) -> np.ndarray:
        """Connected-component label per channel (undirected)."""
        if not self.edges:
            return np.arange(self.n_channels)
        data = np.ones(len(self.edges))
        adj = csr_matrix((data, (self.edge_src, self.edge_snk)),
                         shape=(self.n_channels, self.n_channels))
        _, labels = connected_components(adj, directed=False)
        return labels

    def designated_channel(self, e: int) -> int:
        """Channel whose density a primary_endpoint edge is measured against (its sink)."""
        return int(self.edge_snk[e])

    def augmentation_edges(self) -> list:
        """Indices of edges incident to the source layer (empty if not augmented)."""
        if self.source_layer is None:
            return []
        s = self.source_layer
        return [e for e, (a, b) in enumerate(self.edges) if a == s or b == s]


@dataclass
class EdgeCoupling:
    """Expansion of edge fluxes into per-channel copies for the pointwise energy.

    A two-point edge contributes one energy half-term to each endpoint
    channel, so its flux appears twice; a primary_endpoint edge appears once,
    at its designated channel.  ``kappa[e] = 1 + number of copies of e`` is
    the diagonal of the coupling normal matrix used by the projection.
    """

    copy_edge: np.ndarray      # (n_copies,) edge index of each copy
    copy_channel: np.ndarray   # (n_copies,) channel the copy is attributed to
    kappa: np.ndarray          # (n_edges,)
    channel_copies: list = field(default_factory=list)  # per channel: copy index list

    @classmethod
    def from_graph(cls, graph: ChannelGraph) -> "EdgeCoupling":
        copy_edge, copy_channel = [], []
        for e in range(graph.n_edges):
            if graph.edge_modes[e] == TWO_POINT:
                copy_edge += [e, e]
                copy_channel += [int(graph.edge_src[e]), int(graph.edge_snk[e])]
            else:
                copy_edge.append(e)
                copy_channel.append(graph.designated_channel(e))
        copy_edge = np.array(copy_edge, dtype=np.intp)
        copy_channel = np.array(copy_channel, dtype=np.intp)
        kappa = np.ones(graph.n_edges)
        for e in copy_edge:
            kappa[e] += 1.0
        channel_copies = [np.flatnonzero(copy_channel == c) for c in range(graph.n_channels)]
        return cls(copy_edge, copy_channel, kappa, channel_copies)

    @property
    def n_copies(self) -> int:
        return len(self.copy_edge)


def graph_divergence(u: np.ndarray, graph: ChannelGraph) -> np.ndarray:
    """Net per-channel mass gain rate from edge fluxes.

    Positive flux on edge (a -> b) removes mass at channel a and deposits it
    at channel b, so the result is (sink_part - source_part) applied along
    the edge axis.
    """
    nt, n_e = u.shape[0], u.shape[1]
    if n_e != graph.n_edges:
        raise ValueError(f"u has {n_e} edges, graph has {graph.n_edges}")
    out = np.zeros((nt, graph.n_channels) + u.shape[2:])
    for e in range(n_e):
        out[:, graph.edge_snk[e]] += u[:, e]
        out[:, graph.edge_src[e]] -= u[:, e]
    return out


def graph_divergence_adjoint(q: np.ndarray, graph: ChannelGraph) -> np.ndarray:
    """Adjoint of :func:`graph_divergence`: per edge, sink value minus source value."""
    if q.shape[1] != graph.n_channels:
        raise ValueError(f"q has {q.shape[1]} channels, graph has {graph.n_channels}")
    out = np.empty((q.shape[0], graph.n_edges) + q.shape[2:])
    for e in range(graph.n_edges):
        out[:, e] = q[:, graph.edge_snk[e]] - q[:, graph.edge_src[e]]
    return out


@dataclass
class AugmentationReport:
    """What an augmentation did: where the layer sits and where the deficit went."""

    source_channel_index: int
    added_edges: list
    mass_deficit: float        # signed: target total minus start total
    placement: str             # "uniform" or "mask"


def _spread(amount: float, shape, placement: str, mask) -> np.ndarray:
    """Distribute ``amount`` of mass over a (ny, nx) grid."""
    if placement == "uniform":
        return np.full(shape, amount / (shape[0] * shape[1]))
    if placement == "mask":
        if mask is None:
            raise ValueError("placement='mask' requires a mask array")
        m = check_density(np.asarray(mask, dtype=np.float64), "mask")
        if m.shape != tuple(shape):
            raise ValueError(f"mask shape {m.shape} does not match grid {tuple(shape)}")
        total = m.sum()
        if total <= 0.0:
            raise ValueError("mask has zero total weight")
        return amount * m / total
    raise ValueError(f"unknown placement {placement!r}")


def augment_scalar(rho0: np.ndarray, rho1: np.ndarray, gamma: float = 1.0,
                   epsilon: float = 1e-3, placement: str = "uniform", mask=None):
    """Extend a single-channel endpoint pair with a source layer.

    The layer is a second channel joined to the original by one edge oriented
    layer -> channel, with flux penalty ``gamma`` and spatial weight
    ``epsilon`` on the layer itself.  If the starting density has less total
    mass the difference is placed in the starting side's layer; if it has
    more, in the target side's layer.  The extended endpoints then balance
    exactly.

    Returns ``(graph, rho0_ext, rho1_ext, report)`` with extended endpoints of
    shape (2, ny, nx).
    """
    rho0 = check_density(np.asarray(rho0, dtype=np.float64), "rho0")
    rho1 = check_density(np.asarray(rho1, dtype=np.float64), "rho1")
    if rho0.ndim != 2 or rho0.shape != rho1.shape:
        raise ValueError(f"expected matching 2-d endpoints, got {rho0.shape} and {rho1.shape}")
    if gamma <= 0 or epsilon <= 0:
        raise ValueError("gamma and epsilon must be positive")

    m0, m1 = rho0.sum(), rho1.sum()
    if m0 == 0.0 and m1 == 0.0:
        raise ValueError("both endpoints are identically zero")
    deficit = m1 - m0

    layer0 = np.zeros_like(rho0)
    layer1 = np.zeros_like(rho1)
    if deficit > 0:    # start is lighter: top up the starting side's layer
        layer0 = _spread(deficit, rho0.shape, placement, mask)
    elif deficit < 0:  # target is lighter: excess mass retires into the target's layer
        layer1 = _spread(-deficit, rho1.shape, placement, mask)

    graph = ChannelGraph(
        2, [(1, 0)],
        channel_weights=[1.0, float(epsilon)],
        edge_weights=[float(gamma)],
        edge_modes=[PRIMARY_ENDPOINT],
        source_layer=1,
    )
    rho0_ext = np.stack([rho0, layer0])
    rho1_ext = np.stack([rho1, layer1])
    report = AugmentationReport(1, [0], float(deficit), placement)
    return graph, rho0_ext, rho1_ext, report


def augment_vector(rho0: np.ndarray, rho1: np.ndarray, base_edges,
                   gamma: float = 1.0, eta: float = 1.0, epsilon: float = 1e-3,
                   placement: str = "uniform", mask=None, base_mode: str = TWO_POINT):
    """Extend an n-channel endpoint pair with one shared source layer.

    ``base_edges`` are the inter-channel edges over channels 0..n-1 (a
    :class:`ChannelGraph` is also accepted; its weights are replaced by
    ``gamma``).  The layer becomes channel n, joined to every original
    channel by an edge layer -> channel with penalty ``eta``; original edges
    keep penalty ``gamma`` and the ``base_mode`` density rule (two-point by
    default), layer edges use the designated-endpoint rule so the layer's own
    density never enters the flux cost.  The total-mass difference is placed
    in the lighter side's layer, exactly as in :func:`augment_scalar`.
    """
    rho0 = check_density(np.asarray(rho0, dtype=np.float64), "rho0")
    rho1 = check_density(np.asarray(rho1, dtype=np.float64), "rho1")
    if rho0.ndim != 3 or rho0.shape != rho1.shape:
        raise ValueError(f"expected matching (channels, ny, nx) endpoints, "
                         f"got {rho0.shape} and {rho1.shape}")
    n = rho0.shape[0]
    if isinstance(base_edges, ChannelGraph):
        if base_edges.source_layer is not None:
            raise ValueError("base graph is already augmented with a source layer")
        if base_edges.n_channels != n:
            raise ValueError(f"base graph has {base_edges.n_channels} channels, "
                             f"endpoints have {n}")
        base_edges = list(base_edges.edges)
    base_edges = [(int(a), int(b)) for a, b in base_edges]
    for a, b in base_edges:
        if not (0 <= a < n and 0 <= b < n):
            raise ValueError(f"base edge ({a}, {b}) out of range for {n} channels")
    if gamma <= 0 or eta <= 0 or epsilon <= 0:
        raise ValueError("gamma, eta and epsilon must be positive")
    if base_mode not in _MODES:
        raise ValueError(f"unknown edge density mode {base_mode!r}")
    if n > 1:
        probe = ChannelGraph(n, base_edges, require_connected=False)
        if not probe.is_connected():
            raise ValueError("base channel graph must be connected")

    m0, m1 = rho0.sum(), rho1.sum()
    if m0 == 0.0 and m1 == 0.0:
        raise ValueError("both endpoints are identically zero")
    deficit = m1 - m0

    layer0 = np.zeros(rho0.shape[1:])
    layer1 = np.zeros(rho1.shape[1:])
    if deficit > 0:
        layer0 = _spread(deficit, layer0.shape, placement, mask)
    elif deficit < 0:
        layer1 = _spread(-deficit, layer1.shape, placement, mask)

    edges = base_edges + [(n, c) for c in range(n)]
    graph = ChannelGraph(
        n + 1, edges,
        channel_weights=[1.0] * n + [float(epsilon)],
        edge_weights=[float(gamma)] * len(base_edges) + [float(eta)] * n,
        edge_modes=[base_mode] * len(base_edges) + [PRIMARY_ENDPOINT] * n,
        source_layer=n,
    )
    rho0_ext = np.concatenate([rho0, layer0[None]])
    rho1_ext = np.concatenate([rho1, layer1[None]])
    report = AugmentationReport(n, list(range(len(base_edges), len(edges))),
                                float(deficit), placement)
    return graph, rho0_ext, rho1_ext, report


def recover_source(u: np.ndarray, graph: ChannelGraph) -> np.ndarray:
    """Read the creation/destruction rate off the augmentation edge fluxes.

    For each original channel the source term equals the flux on its layer
    edge (positive = mass created in the channel).  Shape of the result is
    (nt, n_original_channels, ny, nx).
    """
    if graph.source_layer is None:
        raise ValueError("graph has no source layer; nothing to recover")
    aug = graph.augmentation_edges()
    n_orig = graph.n_channels - 1
    out = np.zeros((u.shape[0], n_orig) + u.shape[2:])
    for e in aug:
        a, b = graph.edges[e]
        c = b if a == graph.source_layer else a
        sign = 1.0 if a == graph.source_layer else -1.0
        out[:, c] += sign * u[:, e]
    return out
