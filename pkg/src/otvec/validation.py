"""Input validation helpers shared by the public entry points."""
from __future__ import annotations

import numpy as np


def check_array(arr, name: str = "array") -> np.ndarray:
    """Return ``arr`` as a C-contiguous float64 ndarray, rejecting non-finite values."""
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


def check_density(arr, name: str = "density") -> np.ndarray:
    """Validate a density array: finite, nonnegative, float64."""
    out = check_array(arr, name)
    if out.size and out.min() < 0.0:
        raise ValueError(f"{name} has negative entries (min {out.min():.3g})")
    return out


def check_density_pair(rho0, rho1, name0: str = "rho0", name1: str = "rho1"):
    """Validate an endpoint pair and require matching shapes."""
    a = check_density(rho0, name0)
    b = check_density(rho1, name1)
    if a.shape != b.shape:
        raise ValueError(f"{name0} shape {a.shape} does not match {name1} shape {b.shape}")
    if a.sum() == 0.0 and b.sum() == 0.0:
        raise ValueError(f"{name0} and {name1} are both identically zero")
    return a, b


def as_channel_stack(arr, name: str = "density") -> np.ndarray:
    """Coerce an image-like array to shape (n_channels, ny, nx).

    Accepts (ny, nx) single-channel, (ny, nx, c) plane-last images, or an
    already channel-first (c, ny, nx) stack when c <= 4 is ambiguous; the
    plane-last reading wins for 3-d input because that is how image readers
    deliver color data.
    """
    a = check_density(arr, name)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3:
        # plane-last (ny, nx, c) with small channel count
        if a.shape[2] <= 4 and a.shape[0] > 4:
            return np.ascontiguousarray(np.moveaxis(a, 2, 0))
        return a
    raise ValueError(f"{name} must be 2-d or 3-d, got shape {a.shape}")
