"""Structure-preserving second-order operators on the periodic staggered grid.

Conventions follow the semi-discrete system ``Omega du/dt = P(m(u))`` with

    m(u) = -C(u) u + nu D u + Omega f

where ``C(u) u`` and ``D u`` are *volume weighted* (they carry a factor
``cell_volume``), while :func:`divergence` and :func:`gradient` are the plain
difference quotients. On a uniform grid the matrix forms satisfy
``G_h = -M_h^T`` with ``M_h = cell_volume * divergence`` and
``G_h = cell_volume * gradient``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .grid import Grid


def xp(a: torch.Tensor, k: int = 1) -> torch.Tensor:
    """``out[..., j, i] = a[..., j, i + k]`` with periodic wrap."""
    return torch.roll(a, -k, dims=-1)


def yp(a: torch.Tensor, k: int = 1) -> torch.Tensor:
    """``out[..., j, i] = a[..., j + k, i]`` with periodic wrap."""
    return torch.roll(a, -k, dims=-2)


def divergence(vel: torch.Tensor, grid: Grid) -> torch.Tensor:
    u, v = vel[..., 0, :, :], vel[..., 1, :, :]
    return (u - xp(u, -1)) / grid.hx + (v - yp(v, -1)) / grid.hy


def gradient(p: torch.Tensor, grid: Grid) -> torch.Tensor:
    gx = (xp(p) - p) / grid.hx
    gy = (yp(p) - p) / grid.hy
    return torch.stack([gx, gy], dim=-3)


def laplacian(a: torch.Tensor, grid: Grid) -> torch.Tensor:
    """5-point Laplacian of a scalar lattice (any staggering)."""
    return (xp(a) - 2 * a + xp(a, -1)) / grid.hx**2 + (yp(a) - 2 * a + yp(a, -1)) / grid.hy**2


def convection(vel: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Volume-weighted divergence-form convection ``C(u) u``.

    Face fluxes use two-point arithmetic averages for both the transporting and
    the transported velocity, which makes ``C(u)`` skew-symmetric whenever ``u``
    is discretely divergence free.
    """
    u, v = vel[..., 0, :, :], vel[..., 1, :, :]
    hx, hy = grid.hx, grid.hy

    # u-momentum: control volume centred on the east face (i+1/2, j)
    uc = 0.5 * (u + xp(u))  # u at center (i+1, j)
    f_ee = uc * uc
    v_k = 0.5 * (v + xp(v))  # v at corner (i+1/2, j+1/2)
    u_k = 0.5 * (u + yp(u))  # u at corner (i+1/2, j+1/2)
    f_nn = v_k * u_k
    cu = hy * (f_ee - xp(f_ee, -1)) + hx * (f_nn - yp(f_nn, -1))

    # v-momentum: control volume centred on the north face (i, j+1/2)
    vc = 0.5 * (v + yp(v))  # v at center (i, j+1)
    g_nn = vc * vc
    g_ee = u_k * v_k
    cv = hx * (g_nn - yp(g_nn, -1)) + hy * (g_ee - xp(g_ee, -1))
    return torch.stack([cu, cv], dim=-3)


def diffusion(vel: torch.Tensor, nu: float, grid: Grid) -> torch.Tensor:
    """``nu * D_h u`` with ``D_h = -Q_h^T Q_h`` volume weighted."""
    if nu < 0:
        raise ValueError("viscosity must be non-negative")
    return nu * grid.cell_volume * laplacian(vel, grid)


def forward_differences(vel: torch.Tensor, grid: Grid) -> torch.Tensor:
    """``Q_h w``: forward differences in x and y scaled so that ``D_h = -Q_h^T Q_h``."""
    s = grid.cell_volume**0.5
    return torch.stack([s * (xp(vel) - vel) / grid.hx, s * (yp(vel) - vel) / grid.hy], dim=-4)


@dataclass(frozen=True)
class ForcingSpec:
    """Body force. ``kind`` is ``"none"`` or ``"kolmogorov"``."""

    kind: str = "none"
    wavenumber: int = 4
    drag: float = 0.1

    TAGS = {"none": 0, "kolmogorov": 1}

    def __post_init__(self):
        if self.kind not in self.TAGS:
            raise ValueError(f"unknown forcing {self.kind!r}")
        if self.kind == "kolmogorov" and (self.wavenumber != 4 or self.drag != 0.1):
            raise ValueError("kolmogorov forcing is fixed to sin(4y) with drag 0.1")

    @property
    def tag(self) -> int:
        return self.TAGS[self.kind]

    @classmethod
    def from_tag(cls, tag: int) -> "ForcingSpec":
        return cls({v: k for k, v in cls.TAGS.items()}[tag])

    def __call__(self, vel: torch.Tensor, grid: Grid, t: float = 0.0) -> torch.Tensor:
        if self.kind == "none":
            return torch.zeros_like(vel)
        _, yu = grid.coords("u")
        fx = torch.as_tensor(np.sin(self.wavenumber * yu), dtype=vel.dtype)
        body = torch.stack([fx, torch.zeros_like(fx)])
        return body - self.drag * vel


NO_FORCING = ForcingSpec()
KOLMOGOROV = ForcingSpec("kolmogorov")


def rhs_m(vel: torch.Tensor, nu: float, grid: Grid, forcing: ForcingSpec = NO_FORCING,
          t: float = 0.0) -> torch.Tensor:
    out = diffusion(vel, nu, grid) - convection(vel, grid)
    if forcing.kind != "none":
        out = out + grid.cell_volume * forcing(vel, grid, t)
    return out


def momentum(vel: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Total momentum ``(Px, Py)``, shape ``(..., 2)``."""
    return grid.cell_volume * vel.sum(dim=(-1, -2))


def kinetic_energy(vel: torch.Tensor, grid: Grid) -> torch.Tensor:
    return 0.5 * grid.cell_volume * (vel**2).sum(dim=(-1, -2, -3))


def vorticity(vel: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Scalar vorticity at cell corners."""
    u, v = vel[..., 0, :, :], vel[..., 1, :, :]
    return (xp(v) - v) / grid.hx - (yp(u) - u) / grid.hy


def vorticity_centers(vel: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Vorticity averaged from the four surrounding corners to cell centers (output only)."""
    w = vorticity(vel, grid)
    return 0.25 * (w + xp(w, -1) + yp(w, -1) + xp(yp(w, -1), -1))
