"""Random low-wavenumber initial conditions.

Coefficients are drawn from ``numpy.random.Generator(numpy.random.Philox(seed))``
(a counter-based generator) in a fixed order so fields are reproducible
bit-for-bit: modes are enumerated with ``ky`` as the outer and ``kx`` as the
inner loop over ``-kmax+1 .. kmax-1``, keeping ``0 < |k| < kmax``; one draw of
shape ``(2 components, n_modes, 2 parts)`` gives real and imaginary parts.
"""
from __future__ import annotations

import numpy as np
import torch

from .grid import DEFAULT_DTYPE, Grid
from .projection import project


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def low_modes(kappa_max: float) -> np.ndarray:
    k = int(np.ceil(kappa_max))
    modes = [(kx, ky) for ky in range(-k + 1, k) for kx in range(-k + 1, k)
             if 0 < kx * kx + ky * ky < kappa_max**2]
    return np.array(modes, dtype=int)


def _synthesize(coef: np.ndarray, modes: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Re(sum c exp(i k.x)), evaluated mode by mode through separable exponentials
    ex = {kx: np.exp(1j * kx * x) for kx in np.unique(modes[:, 0])}
    ey = {ky: np.exp(1j * ky * y) for ky in np.unique(modes[:, 1])}
    out = np.zeros(x.shape)
    for c, (kx, ky) in zip(coef, modes):
        out += (c * ex[kx] * ey[ky]).real
    return out


def random_initial_condition(grid: Grid, seed: int, kappa_max: float = 10.0,
                             target_energy: float = 1.2, dtype=DEFAULT_DTYPE,
                             return_unprojected: bool = False):
    if not kappa_max < min(grid.nx, grid.ny) / 2:
        raise ValueError("kappa_max must be below half the grid resolution")
    rng = make_rng(seed)
    modes = low_modes(kappa_max)
    draws = rng.uniform(-1.0, 1.0, size=(2, len(modes), 2))
    coef = draws[..., 0] + 1j * draws[..., 1]
    # physical wavenumbers for a domain of length L are 2 pi k / L
    sx, sy = 2 * np.pi / grid.lx, 2 * np.pi / grid.ly
    xu, yu = grid.coords("u")
    xv, yv = grid.coords("v")
    u = _synthesize(coef[0], modes, sx * xu, sy * yu)
    v = _synthesize(coef[1], modes, sx * xv, sy * yv)
    vel = np.stack([u, v])
    # normalized kinetic energy (1 / 2|Omega|) int |u|^2 = mean over cells of (u^2 + v^2) / 2
    e = 0.5 * np.mean(u**2 + v**2)
    vel *= np.sqrt(target_energy / e)
    raw = torch.tensor(vel, dtype=torch.float64)
    out = project(raw, grid).to(dtype)
    if return_unprojected:
        return out, raw.to(dtype)
    return out
