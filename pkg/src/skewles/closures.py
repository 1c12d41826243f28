"""Closure models ``c(u)`` for the coarse equations ``Omega du/dt = P(m(u) + c(u))``.

Every closure returns a *volume-weighted* term on the two face lattices, so its
energy contribution is ``<u, c>`` and its momentum contribution ``sum c``.
Network outputs are read as velocity tendencies and multiplied by the cell
volume, which keeps the same trained weights meaningful across grids.

Staggering used throughout (arrays indexed ``[j, i]``)::

    u[j, i]   east face  (i+1/2, j)        center[j, i]  (i, j)
    v[j, i]   north face (i, j+1/2)        corner[j, i]  (i+1/2, j+1/2)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch

from .grid import Grid
from .nn import (
    CnnSpec, ParamStore, ShapeMismatch, conv2d_periodic, conv2d_periodic_transpose, forward_cnn, init_params,
)
from .operators import xp, yp

VARIANTS = ("NC", "SMAG", "DYNSMAG", "CNN", "DIV", "SKEW", "CNNC")
NET_OUT = {"CNN": 2, "CNNC": 2, "DIV": 3, "SKEW": 4}
B_RADIUS = 2


# ---- strain and eddy viscosity ------------------------------------------------

class Strain(NamedTuple):
    s11: torch.Tensor  # centers
    s22: torch.Tensor  # centers
    s12: torch.Tensor  # corners


def strain_rate(vel: torch.Tensor, grid: Grid) -> Strain:
    u, v = vel[..., 0, :, :], vel[..., 1, :, :]
    s11 = (u - xp(u, -1)) / grid.hx
    s22 = (v - yp(v, -1)) / grid.hy
    s12 = 0.5 * ((yp(u) - u) / grid.hy + (xp(v) - v) / grid.hx)
    return Strain(s11, s22, s12)


def corners_to_centers(a: torch.Tensor) -> torch.Tensor:
    a = a + xp(a, -1)
    return 0.25 * (a + yp(a, -1))


def centers_to_corners(a: torch.Tensor) -> torch.Tensor:
    a = a + xp(a)
    return 0.25 * (a + yp(a))


def strain_magnitude(S: Strain):
    """``sqrt(2 tr S^2)`` at centers and at corners, squares co-located by 4-point averages."""
    d2 = S.s11**2 + S.s22**2
    at_c = torch.sqrt(2 * (d2 + 2 * corners_to_centers(S.s12**2)))
    at_k = torch.sqrt(2 * (centers_to_corners(d2) + 2 * S.s12**2))
    return at_c, at_k


def stress_divergence(t11: torch.Tensor, t22: torch.Tensor, t12: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Volume-weighted ``div tau`` on the faces; ``t11, t22`` at centers, ``t12`` at corners."""
    cu = (xp(t11) - t11) / grid.hx + (t12 - yp(t12, -1)) / grid.hy
    cv = (t12 - xp(t12, -1)) / grid.hx + (yp(t22) - t22) / grid.hy
    return grid.cell_volume * torch.stack([cu, cv], dim=-3)


def eddy_viscosity_divergence(vel: torch.Tensor, nu_c: torch.Tensor, nu_k: torch.Tensor, grid: Grid,
                              S: Optional[Strain] = None) -> torch.Tensor:
    """``Omega div(2 nu_t S)``; dissipative for any ``nu_t >= 0``."""
    S = strain_rate(vel, grid) if S is None else S
    return stress_divergence(2 * nu_c * S.s11, 2 * nu_c * S.s22, 2 * nu_k * S.s12, grid)


def smagorinsky_closure(vel: torch.Tensor, cs: float, grid: Grid) -> torch.Tensor:
    if cs < 0:
        raise ValueError("Smagorinsky constant must be non-negative")
    S = strain_rate(vel, grid)
    mag_c, mag_k = strain_magnitude(S)
    coef = (cs * grid.cell_volume**0.5) ** 2
    return eddy_viscosity_divergence(vel, coef * mag_c, coef * mag_k, grid, S)


def _test_filter(a: torch.Tensor) -> torch.Tensor:
    a = 0.25 * xp(a, -1) + 0.5 * a + 0.25 * xp(a)
    return 0.25 * yp(a, -1) + 0.5 * a + 0.25 * yp(a)


def dynamic_cs2(vel: torch.Tensor, grid: Grid, alpha: float = 2.0) -> torch.Tensor:
    """Germano-Lilly ``Cs^2`` at cell centers, locally averaged and clipped at zero."""
    u, v = vel[..., 0, :, :], vel[..., 1, :, :]
    uc, vc = 0.5 * (u + xp(u, -1)), 0.5 * (v + yp(v, -1))
    S = strain_rate(vel, grid)
    s11, s22, s12 = S.s11, S.s22, corners_to_centers(S.s12)
    mag = torch.sqrt(2 * (s11**2 + s22**2 + 2 * s12**2))
    T = _test_filter
    tu, tv = T(uc), T(vc)
    l11, l22, l12 = T(uc * uc) - tu * tu, T(vc * vc) - tv * tv, T(uc * vc) - tu * tv
    half_trace = 0.5 * (l11 + l22)
    l11, l22 = l11 - half_trace, l22 - half_trace
    f11, f22, f12 = T(s11), T(s22), T(s12)
    fmag = torch.sqrt(2 * (f11**2 + f22**2 + 2 * f12**2))
    d2 = 2 * grid.cell_volume
    m11 = d2 * (T(mag * s11) - alpha**2 * fmag * f11)
    m22 = d2 * (T(mag * s22) - alpha**2 * fmag * f22)
    m12 = d2 * (T(mag * s12) - alpha**2 * fmag * f12)
    lm = T(l11 * m11 + l22 * m22 + 2 * l12 * m12)
    mm = T(m11 * m11 + m22 * m22 + 2 * m12 * m12)
    cs2 = torch.where(mm > 0, lm / torch.where(mm > 0, mm, torch.ones_like(mm)), torch.zeros_like(mm))
    return torch.clamp(cs2, min=0.0)


def dynamic_smagorinsky_closure(vel: torch.Tensor, grid: Grid) -> torch.Tensor:
    S = strain_rate(vel, grid)
    mag_c, _ = strain_magnitude(S)
    nu_c = dynamic_cs2(vel, grid) * grid.cell_volume * mag_c
    return eddy_viscosity_divergence(vel, nu_c, centers_to_corners(nu_c), grid, S)


# ---- network closures ---------------------------------------------------------

def net_input(vel: torch.Tensor, m: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Channels ``(u, v, m_u / Omega, m_v / Omega)`` on the face lattices as stored."""
    return torch.cat([vel, m / grid.cell_volume], dim=-3)


def _net_weights(spec: CnnSpec, params: dict) -> list:
    return [params[f"{p}{n}"] for n in range(len(spec.layers)) for p in ("w", "b")]


def run_net(spec: CnnSpec, params: dict, vel: torch.Tensor, m: torch.Tensor, grid: Grid) -> torch.Tensor:
    return forward_cnn(spec, _net_weights(spec, params), net_input(vel, m, grid))


def cnn_closure(vel, m, grid, spec, params) -> torch.Tensor:
    return grid.cell_volume * run_net(spec, params, vel, m, grid)


def div_closure(vel, m, grid, spec, params) -> torch.Tensor:
    tau = run_net(spec, params, vel, m, grid)
    return stress_divergence(tau[..., 0, :, :], tau[..., 1, :, :], tau[..., 2, :, :], grid)


def zero_sum_reparam(raw: torch.Tensor) -> torch.Tensor:
    """Remove the mean of every ``(out, in)`` kernel block so each block sums to zero."""
    return raw - raw.mean(dim=(-1, -2), keepdim=True)


class SkewParts(NamedTuple):
    k_path: torch.Tensor  # volume weighted (K - K^T) u
    q_path: torch.Tensor  # volume weighted -Q^T Q u
    q_vec: torch.Tensor  # Q u, so that <u, q_path> = -|q_vec|^2


def skew_operator(x: torch.Tensor, k: torch.Tensor, q: torch.Tensor, b1: torch.Tensor, b2: torch.Tensor,
                  b3: torch.Tensor, vol: float) -> SkewParts:
    """Apply ``Omega (K - K^T)`` and ``-Omega Q^T Q`` to ``x`` for frozen ``k, q`` fields.

    ``K = B1^T diag(k) B2`` and ``Q = diag(q) B3``; the volume factor enters ``Q``
    as ``sqrt(Omega)`` on both sides.
    """
    kx = conv2d_periodic_transpose(k * conv2d_periodic(x, b2), b1)
    ktx = conv2d_periodic_transpose(k * conv2d_periodic(x, b1), b2)
    qvec = vol**0.5 * q * conv2d_periodic(x, b3)
    qpath = -vol**0.5 * conv2d_periodic_transpose(q * qvec, b3)
    return SkewParts(vol * (kx - ktx), qpath, qvec)


def skew_fields(vel, m, grid, spec, params):
    """Network outputs ``k`` (channels 0, 1) and ``q`` (channels 2, 3) plus the reparameterized kernels."""
    out = run_net(spec, params, vel, m, grid)
    b = tuple(zero_sum_reparam(params[n]) for n in ("B1", "B2", "B3"))
    return out[..., 0:2, :, :], out[..., 2:4, :, :], b


def skew_parts(vel, m, grid, spec, params) -> SkewParts:
    k, q, (b1, b2, b3) = skew_fields(vel, m, grid, spec, params)
    return skew_operator(vel, k, q, b1, b2, b3, grid.cell_volume)


def skew_closure(vel, m, grid, spec, params, terms: str = "KQ") -> torch.Tensor:
    parts = skew_parts(vel, m, grid, spec, params)
    out = torch.zeros_like(vel)
    if "K" in terms:
        out = out + parts.k_path
    if "Q" in terms:
        out = out + parts.q_path
    return out


def clip_to_eddy_viscosity(vel: torch.Tensor, raw: torch.Tensor, grid: Grid) -> torch.Tensor:
    """Project ``raw`` onto ``nu * d`` with ``d = Omega div(2S)`` cell by cell and clip ``nu >= 0``.

    Cell ``[j, i]`` owns the pair ``(u[j, i], v[j, i])``. The fitted ``nu`` lives at
    the cell center and is averaged to corners, and the result is returned in the
    conservative form ``Omega div(2 nu S)``, which equals ``nu d`` for uniform ``nu``.
    """
    S = strain_rate(vel, grid)
    ones = torch.ones_like(S.s11)
    d = eddy_viscosity_divergence(vel, ones, ones, grid, S)
    num = (raw * d).sum(dim=-3)
    den = (d * d).sum(dim=-3)
    safe = torch.where(den > 0, den, torch.ones_like(den))
    nu = torch.where(den > 0, num / safe, torch.zeros_like(den)).clamp(min=0.0)
    return eddy_viscosity_divergence(vel, nu, centers_to_corners(nu), grid, S)


def cnnc_closure(vel, m, grid, spec, params) -> torch.Tensor:
    return clip_to_eddy_viscosity(vel, cnn_closure(vel, m, grid, spec, params), grid)


def closure_energy(vel: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    return (vel * c).sum(dim=(-1, -2, -3))


def closure_momentum(c: torch.Tensor) -> torch.Tensor:
    return c.sum(dim=(-1, -2))


# ---- models --------------------------------------------------------------------

def layout_for(variant: str, spec: CnnSpec) -> list:
    layout = list(spec.shapes())
    if variant == "SKEW":
        k = 2 * B_RADIUS + 1
        layout += [(n, (2, 2, k, k)) for n in ("B1", "B2", "B3")]
    return layout


@dataclass
class ClosureModel:
    variant: str
    spec: Optional[CnnSpec] = None
    store: Optional[ParamStore] = None
    cs: float = 0.0
    terms: str = "KQ"  # SKEW ablations: "K", "Q" or "KQ"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown closure variant {self.variant!r}")
        if self.variant == "SMAG" and self.cs < 0:
            raise ValueError("Smagorinsky constant must be non-negative")
        if self.variant in NET_OUT:
            if self.spec is None or self.store is None:
                raise ValueError(f"{self.variant} needs a network")
            if self.spec.in_ch != 4 or self.spec.out_ch != NET_OUT[self.variant]:
                raise ShapeMismatch(f"{self.variant} needs a 4 -> {NET_OUT[self.variant]} network")

    @property
    def trainable(self) -> bool:
        return self.variant in NET_OUT

    def with_terms(self, terms: str) -> "ClosureModel":
        return ClosureModel(self.variant, self.spec, self.store, self.cs, terms)

    def evaluate(self, vel: torch.Tensor, m: torch.Tensor, grid: Grid, params: Optional[dict] = None):
        v = self.variant
        if v == "NC":
            return torch.zeros_like(vel)
        if v == "SMAG":
            return smagorinsky_closure(vel, self.cs, grid)
        if v == "DYNSMAG":
            return dynamic_smagorinsky_closure(vel, grid)
        if params is None:
            params = self.params(vel.dtype)
        if v == "CNN":
            return cnn_closure(vel, m, grid, self.spec, params)
        if v == "DIV":
            return div_closure(vel, m, grid, self.spec, params)
        if v == "CNNC":
            return cnnc_closure(vel, m, grid, self.spec, params)
        return skew_closure(vel, m, grid, self.spec, params, self.terms)

    def params(self, dtype=torch.float64) -> dict:
        return self.store.views(dtype)[1]

    def closure(self, params: Optional[dict] = None):
        """Callable ``(vel, m, grid) -> c`` for the integrator, or ``None`` for NC."""
        if self.variant == "NC":
            return None
        if params is None and self.trainable:
            cached = {}

            def fn(vel, m, grid):
                if vel.dtype not in cached:
                    cached[vel.dtype] = self.params(vel.dtype)
                return self.evaluate(vel, m, grid, cached[vel.dtype])
            return fn
        return lambda vel, m, grid: self.evaluate(vel, m, grid, params)


def make_model(variant: str, seed: int = 0, cs: float = 0.0, hidden: int = 32, n_hidden: int = 4) -> ClosureModel:
    """Fresh closure model with initialised network parameters where needed."""
    if variant not in NET_OUT:
        return ClosureModel(variant, cs=cs)
    spec = CnnSpec.standard(NET_OUT[variant], hidden=hidden, n_hidden=n_hidden)
    return ClosureModel(variant, spec, init_params(layout_for(variant, spec), seed))


# ---- 1D reference construction ---------------------------------------------------

def appendix_d_matrices(n: int):
    """Periodic 1D central ``(Dc w)_i = w_{i+1} - w_{i-1}`` and forward ``(Df w)_i = w_{i+1} - w_i``."""
    eye = np.eye(n)
    up = np.roll(eye, 1, axis=1)  # (up w)_i = w_{i+1}
    return up - up.T, up - eye


def appendix_d_oracle(n: int = 32, seed: int = 0) -> dict:
    """Check the 1D skew-symmetric and dissipative constructions.

    ``Y = Dc diag(k) Df - Df^T diag(k) Dc^T`` must conserve ``sum w`` and ``|w|^2``;
    a single ``k_i = 1/(2h)`` must give the central first derivative at ``i`` and
    ``q = 1/h`` must turn ``Z = -Df^T diag(q)^2 Df`` into the second difference.
    """
    rng = np.random.default_rng(seed)
    h = 2 * np.pi / n
    dc, df = appendix_d_matrices(n)
    k, w = rng.standard_normal(n), rng.standard_normal(n)
    y = dc @ np.diag(k) @ df - df.T @ np.diag(k) @ dc.T
    yw = y @ w
    sum_err = abs(yw.sum()) / np.abs(yw).max()
    energy_err = abs(w @ yw) / (w @ w)

    i = n // 2
    k1 = np.zeros(n)
    k1[i] = 1 / (2 * h)
    y1 = dc @ np.diag(k1) @ df - df.T @ np.diag(k1) @ dc.T
    central = -(w[i + 1] - w[i - 1]) / (2 * h)
    deriv_err = abs((y1 @ w)[i] - central) / max(1.0, abs(central))

    z = -df.T @ np.diag(np.full(n, 1 / h) ** 2) @ df
    second = (np.roll(w, -1) - 2 * w + np.roll(w, 1)) / h**2
    diff_err = np.abs(z @ w - second).max() / np.abs(second).max()
    return {
        "momentum": bool(sum_err <= 1e-12),
        "energy": bool(energy_err <= 1e-12),
        "first_derivative": bool(deriv_err <= 1e-12),
        "second_derivative": bool(diff_err <= 1e-12),
        "errors": tuple(float(e) for e in (sum_err, energy_err, deriv_err, diff_err)),
    }
