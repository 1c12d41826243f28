"""FFT pressure solve and the divergence-free projector.

With the plain difference operators of :mod:`skewles.operators` the projector
reads ``P m = m - gradient(L^{-1} divergence(m))`` where ``L = divergence o
gradient`` is the discrete 5-point Laplacian. This is the same operator as
``I - G_h (M_h Omega^{-1} G_h)^{-1} M_h Omega^{-1}`` because the volume factors
cancel on a uniform grid. ``P`` is symmetric in the Euclidean inner product,
so ``P^T = P``.
"""
from __future__ import annotations

import functools

import numpy as np
import torch

from .grid import Grid
from .operators import divergence, gradient


class IncompatibleRHS(ValueError):
    """Poisson right-hand side has a non-zero mean (no periodic solution)."""


class PoissonSolver:
    """Solves ``L p = rhs`` for the exact discrete Laplacian with ``mean(p) = 0``."""

    def __init__(self, grid: Grid):
        self.grid = grid
        kx = np.arange(grid.nx // 2 + 1)
        ky = np.arange(grid.ny)
        sym_x = (2 - 2 * np.cos(2 * np.pi * kx / grid.nx)) / grid.hx**2
        sym_y = (2 - 2 * np.cos(2 * np.pi * ky / grid.ny)) / grid.hy**2
        symbol = -(sym_y[:, None] + sym_x[None, :])
        inv = np.zeros_like(symbol)
        nonzero = symbol != 0
        inv[nonzero] = 1.0 / symbol[nonzero]
        # zero mode is the gauge freedom; pinned to mean(p) = 0
        self.symbol = symbol
        self._inv = torch.tensor(inv)

    def inverse_symbol(self, dtype) -> torch.Tensor:
        return self._inv.to(dtype)

    def apply_inverse(self, rhs: torch.Tensor) -> torch.Tensor:
        """``L^{-1} rhs`` on the mean-free subspace, no compatibility check."""
        rhs_hat = torch.fft.rfft2(rhs)
        return torch.fft.irfft2(rhs_hat * self.inverse_symbol(rhs.dtype), s=rhs.shape[-2:])

    def solve(self, rhs: torch.Tensor, rtol: float = 1e-8) -> torch.Tensor:
        total = rhs.sum(dim=(-1, -2)).abs()
        scale = rhs.abs().sum(dim=(-1, -2))
        if (total > rtol * scale.clamp_min(torch.finfo(rhs.dtype).tiny)).any():
            raise IncompatibleRHS(f"sum of rhs is {total.max().item():.3e}, must vanish")
        return self.apply_inverse(rhs)


@functools.lru_cache(maxsize=32)
def poisson_solver(grid: Grid) -> PoissonSolver:
    return PoissonSolver(grid)


def solve_pressure(rhs_div: torch.Tensor, grid: Grid) -> torch.Tensor:
    return poisson_solver(grid).solve(rhs_div)


def project(m: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Remove the discretely divergent part of a staggered field."""
    p = poisson_solver(grid).apply_inverse(divergence(m, grid))
    return m - gradient(p, grid)


# P is symmetric, so its transpose is itself; kept as a name for the adjoint code path.
project_transpose = project
