"""Differentiable per-channel histograms.

Each pixel deposits Cauchy-kernel mass 1 / (1 + delta_scale * (p - t_r)^2)
on every bin node t_r, so bin masses are smooth in the pixel values. The
masses are normalized to sum to one, which makes histograms directly
comparable as probability vectors.

Forward accumulation happens in sorted pixel order, so the result is
bit-for-bit invariant under spatial shuffling of the plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# pixels per vectorized block; bounds the (pixels x bins) kernel matrix
_CHUNK = 1 << 16


@dataclass(frozen=True)
class HistogramGrid:
    """Uniform bin nodes t_1..t_R spanning [lower, upper] inclusive."""

    lower: float
    upper: float
    bins: int

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")
        if not self.upper > self.lower:
            raise ValueError(f"need upper > lower, got [{self.lower}, {self.upper}]")

    @property
    def delta(self) -> float:
        """Node spacing (upper - lower) / (bins - 1)."""
        return (self.upper - self.lower) / (self.bins - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.bins)


def make_grid(lower: float, upper: float, bins: int) -> HistogramGrid:
    return HistogramGrid(float(lower), float(upper), int(bins))


def default_grid() -> HistogramGrid:
    """The working grid: 64 bins on [0, 1]."""
    return make_grid(0.0, 1.0, 64)


@dataclass(frozen=True)
class KernelConfig:
    """Cauchy kernel sharpness; larger means tighter bins."""

    delta_scale: float

    def __post_init__(self):
        if not self.delta_scale > 0:
            raise ValueError(f"delta_scale must be positive, got {self.delta_scale}")

    @classmethod
    def for_grid(cls, grid: HistogramGrid) -> "KernelConfig":
        """Default sharpness (2 / spacing)^2: kernel halves at half a bin.

        For 64 bins on [0, 1] this is 15876.
        """
        return cls((2.0 / grid.delta) ** 2)


@dataclass(frozen=True, eq=False)
class SoftHistogram:
    grid: HistogramGrid
    mass: np.ndarray
    normalized: bool

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64)
        if mass.shape != (self.grid.bins,):
            raise ValueError(
                f"mass shape {mass.shape} does not match grid with {self.grid.bins} bins"
            )
        object.__setattr__(self, "mass", mass)

    def cdf(self) -> np.ndarray:
        """Running mass totals F_k = sum_{r<=k} mass_r; requires normalization."""
        if not self.normalized:
            raise ValueError("cdf requires a normalized histogram")
        return np.cumsum(self.mass)


def _kernel_mass(values: np.ndarray, nodes: np.ndarray, delta_scale: float) -> np.ndarray:
    """Unnormalized per-bin kernel sums, accumulated in blocks."""
    totals = np.zeros(nodes.shape[0])
    for start in range(0, values.shape[0], _CHUNK):
        d = values[start : start + _CHUNK, None] - nodes[None, :]
        totals += np.sum(1.0 / (1.0 + delta_scale * d * d), axis=0)
    return totals


def soft_hist(channel: np.ndarray, grid: HistogramGrid, kernel: KernelConfig) -> SoftHistogram:
    """Normalized soft histogram of one pixel plane."""
    values = np.asarray(channel, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot histogram an empty plane")
    # canonical (sorted) accumulation order: permutation invariance is exact
    totals = _kernel_mass(np.sort(values), grid.nodes, kernel.delta_scale)
    return SoftHistogram(grid, totals / totals.sum(), normalized=True)


def soft_hist_backward(
    channel: np.ndarray,
    grid: HistogramGrid,
    kernel: KernelConfig,
    upstream: np.ndarray,
) -> np.ndarray:
    """Pixel gradient of `upstream . mass` for the normalized histogram.

    With kernel sums n_r, total Z and mass m_r = n_r / Z, the quotient rule
    gives, per pixel p,

        d(u . m)/dp = ( sum_r u_r k_r'(p) - (u . m) sum_r k_r'(p) ) / Z,

    where k_r'(p) = -2 * delta_scale * (p - t_r) / (1 + delta_scale*(p - t_r)^2)^2.
    """
    values = np.asarray(channel, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (grid.bins,):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match grid with {grid.bins} bins"
        )
    flat = values.ravel()
    if flat.size == 0:
        raise ValueError("cannot histogram an empty plane")
    nodes = grid.nodes
    ds = kernel.delta_scale
    # Z and mass must match the forward pass bit-for-bit, so reuse its order.
    totals = _kernel_mass(np.sort(flat), nodes, ds)
    z_total = totals.sum()
    mass = totals / z_total
    u_dot_m = float(upstream @ mass)

    grad = np.empty_like(flat)
    for start in range(0, flat.size, _CHUNK):
        d = flat[start : start + _CHUNK, None] - nodes[None, :]
        k = 1.0 / (1.0 + ds * d * d)
        kprime = -2.0 * ds * d * k * k
        grad[start : start + _CHUNK] = (kprime @ upstream - u_dot_m * kprime.sum(axis=1)) / z_total
    return grad.reshape(values.shape)
