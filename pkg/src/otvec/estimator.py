"""Estimator-style front end for the dynamic transport solver.

Wraps problem construction, augmentation and the splitting iteration behind
the familiar fit/transform surface so the solver composes with pipelines and
parameter-search tooling (``get_params``/``set_params``/``clone`` all work).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .solver import SolverOptions, scalar_problem, solve, vector_problem
from .validation import check_density


class DynamicTransport(BaseEstimator):
    """Dynamic mass transport between two densities, with mass creation.

    ``fit(rho0, rho1)`` accepts a pair of single-channel densities (2-d
    arrays, or 1-d for line problems) or multi-channel stacks of shape
    (channels, ny, nx).  Unequal totals are absorbed by an automatically
    added source layer; ``source_`` then carries the recovered
    creation/destruction rates.

    Parameters
    ----------
    gamma:
        Flux penalty of the source layer's edge in single-channel mode, and
        of the inter-channel edges in multi-channel mode.
    eta:
        Flux penalty of the source-layer edges in multi-channel mode.
    epsilon:
        Spatial kinetic weight of the source layer (small: the layer moves
        mass almost freely).
    nt:
        Number of time slabs, at least 2.
    edges:
        Inter-channel edge list for multi-channel inputs, or "complete".
    placement:
        Where the endpoint mass difference enters the layer: "uniform" or
        "mask".
    mask:
        Nonnegative weights for placement="mask".
    step, relaxation, max_iters, energy_rtol, residual_tol, projection:
        Splitting-iteration controls; see :class:`otvec.solver.SolverOptions`.
    Lx, Ly:
        Physical domain lengths.
    """

    def __init__(self, gamma: float = 1.0, eta: float = 1.0, epsilon: float = 1e-3,
                 nt: int = 16, edges="complete", placement: str = "uniform",
                 mask=None, step: float = 1.0, relaxation: float = 1.8,
                 max_iters: int = 3000, energy_rtol: float = 1e-5,
                 residual_tol: float = 1e-7, projection: str = "spectral",
                 Lx: float = 1.0, Ly: float = 1.0):
        self.gamma = gamma
        self.eta = eta
        self.epsilon = epsilon
        self.nt = nt
        self.edges = edges
        self.placement = placement
        self.mask = mask
        self.step = step
        self.relaxation = relaxation
        self.max_iters = max_iters
        self.energy_rtol = energy_rtol
        self.residual_tol = residual_tol
        self.projection = projection
        self.Lx = Lx
        self.Ly = Ly

    def _options(self) -> SolverOptions:
        return SolverOptions(step=self.step, relaxation=self.relaxation,
                             max_iters=self.max_iters, energy_rtol=self.energy_rtol,
                             residual_tol=self.residual_tol, projection=self.projection)

    def fit(self, rho0, rho1):
        """Solve the transport problem from ``rho0`` to ``rho1``."""
        rho0 = check_density(np.asarray(rho0, dtype=np.float64), "rho0")
        rho1 = check_density(np.asarray(rho1, dtype=np.float64), "rho1")
        if rho0.shape != rho1.shape:
            raise ValueError(f"endpoint shapes differ: {rho0.shape} vs {rho1.shape}")
        if rho0.ndim in (1, 2):
            problem = scalar_problem(rho0, rho1, self.nt, gamma=self.gamma,
                                     epsilon=self.epsilon, placement=self.placement,
                                     mask=self.mask, Lx=self.Lx, Ly=self.Ly,
                                     options=self._options())
        elif rho0.ndim == 3:
            problem = vector_problem(rho0, rho1, self.nt, edges=self.edges,
                                     gamma=self.gamma, eta=self.eta,
                                     epsilon=self.epsilon, placement=self.placement,
                                     mask=self.mask, Lx=self.Lx, Ly=self.Ly,
                                     options=self._options())
        else:
            raise ValueError(f"densities must be 1-d, 2-d or (channels, ny, nx), "
                             f"got shape {rho0.shape}")
        sol = solve(problem)
        self.input_ndim_ = rho0.ndim
        self.problem_ = problem
        self.solution_ = sol
        self.graph_ = problem.graph
        self.report_ = problem.report
        self.energy_ = sol.energy.total
        self.energy_breakdown_ = sol.energy
        self.source_ = sol.source
        self.n_iter_ = sol.n_iter
        self.converged_ = sol.converged
        return self

    def transform(self, X=None):
        """Interpolated density frames of the fitted transport.

        ``X`` selects time nodes (integer indices into 0..nt); None returns
        all nt+1 frames.  Only the original channels are returned, in the
        input's shape convention.
        """
        check_is_fitted(self, "solution_")
        from .solver import interpolation_frames
        frames = interpolation_frames(self.solution_)
        layer = self.graph_.source_layer
        if layer is not None:
            keep = [c for c in range(frames.shape[1]) if c != layer]
            frames = frames[:, keep]
        if X is not None:
            idx = np.asarray(X, dtype=int).ravel()
            if idx.min() < 0 or idx.max() > self.nt:
                raise ValueError(f"frame indices must lie in [0, {self.nt}]")
            frames = frames[idx]
        if self.input_ndim_ == 2:
            return frames[:, 0]
        if self.input_ndim_ == 1:
            return frames[:, 0, 0]
        return frames

    def fit_transform(self, rho0, rho1):
        return self.fit(rho0, rho1).transform()

    def layer_masses(self) -> np.ndarray:
        """Source-layer mass per time node of the fitted solution."""
        check_is_fitted(self, "solution_")
        return self.solution_.source_layer_masses()
