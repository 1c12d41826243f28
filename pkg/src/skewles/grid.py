"""Uniform periodic staggered (MAC) grid.

Field layout used everywhere in the package:

* velocity: tensor of shape ``(..., 2, ny, nx)``; channel 0 holds ``u`` at east
  faces ``(i+1/2, j)``, channel 1 holds ``v`` at north faces ``(i, j+1/2)``.
* center lattice (pressure, divergence, S11, S22): ``(..., ny, nx)`` at ``(i, j)``.
* corner lattice (vorticity, S12): ``(..., ny, nx)`` at ``(i+1/2, j+1/2)``.

Arrays are indexed ``[j, i]`` so that x is the fastest-varying index in
row-major storage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_DTYPE = torch.float64


class NonFiniteField(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    lx: float = 2 * math.pi
    ly: float = 2 * math.pi
    x0: float = -math.pi
    y0: float = -math.pi

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid needs at least 4 cells per direction, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain lengths must be positive")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def cell_volume(self) -> float:
        return self.hx * self.hy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def coarsen(self, factor: int) -> "Grid":
        if self.nx % factor or self.ny % factor:
            raise ValueError(f"factor {factor} does not divide {self.nx}x{self.ny}")
        return Grid(self.nx // factor, self.ny // factor, self.lx, self.ly, self.x0, self.y0)

    def coords(self, where: str) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) meshes, each ``(ny, nx)``, for a staggering location.

        ``where`` is one of ``center``, ``u`` (east faces), ``v`` (north faces), ``corner``.
        """
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        offx = {"center": 0.5, "u": 1.0, "v": 0.5, "corner": 1.0}[where]
        offy = {"center": 0.5, "u": 0.5, "v": 1.0, "corner": 1.0}[where]
        x = self.x0 + (i + offx) * self.hx
        y = self.y0 + (j + offy) * self.hy
        return np.meshgrid(x, y, indexing="xy")

    def zeros(self, *batch: int, dtype=DEFAULT_DTYPE) -> torch.Tensor:
        return torch.zeros(*batch, 2, self.ny, self.nx, dtype=dtype)

    def sample(self, fu, fv, dtype=DEFAULT_DTYPE) -> torch.Tensor:
        """Sample analytic components ``fu(x, y)``, ``fv(x, y)`` at their faces."""
        xu, yu = self.coords("u")
        xv, yv = self.coords("v")
        u = np.broadcast_to(np.asarray(fu(xu, yu), dtype=float), self.shape)
        v = np.broadcast_to(np.asarray(fv(xv, yv), dtype=float), self.shape)
        return torch.tensor(np.stack([u, v]), dtype=dtype)


def check_velocity(vel: torch.Tensor, grid: Grid) -> None:
    if tuple(vel.shape[-3:]) != (2, grid.ny, grid.nx):
        raise ValueError(f"velocity shape {tuple(vel.shape)} does not match grid {grid.nx}x{grid.ny}")
    if not torch.isfinite(vel).all():
        raise NonFiniteField("velocity contains NaN or Inf")


def grid_of(vel: torch.Tensor, lx: float = 2 * math.pi, ly: float = 2 * math.pi) -> Grid:
    """Grid matching a velocity tensor on the default square domain."""
    return Grid(vel.shape[-1], vel.shape[-2], lx, ly)
