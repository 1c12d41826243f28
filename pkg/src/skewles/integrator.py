"""Classical RK4 for ``Omega du/dt = P(m(u) + c(u))`` and the simulation driver."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .grid import Grid
from .operators import NO_FORCING, ForcingSpec, kinetic_energy, momentum, rhs_m
from .projection import project

BLOWUP_THRESHOLD = 1e6

# closure(vel, m, grid) -> volume-weighted closure term on the same lattices as vel
Closure = Callable[[torch.Tensor, torch.Tensor, Grid], torch.Tensor]


class BlowUp(RuntimeError):
    def __init__(self, t: float, msg: str = ""):
        super().__init__(f"simulation blew up at t={t:.6g} {msg}".strip())
        self.t = t


@dataclass
class SimConfig:
    dt: float
    n_steps: int
    nu: float = 1e-3
    forcing: ForcingSpec = NO_FORCING
    snapshot_stride: int = 1
    closure: Optional[Closure] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")


def tendency(vel: torch.Tensor, grid: Grid, nu: float, forcing: ForcingSpec = NO_FORCING,
             closure: Optional[Closure] = None, t: float = 0.0):
    """``du/dt`` and the closure term evaluated at ``vel`` (``None`` without closure)."""
    m = rhs_m(vel, nu, grid, forcing, t)
    c = None
    if closure is not None:
        c = closure(vel, m, grid)
        m = m + c
    return project(m, grid) / grid.cell_volume, c


def check_blowup(vel: torch.Tensor, t: float) -> None:
    if not torch.isfinite(vel).all():
        raise BlowUp(t, "(non-finite values)")
    peak = float(vel.detach().abs().max())
    if peak > BLOWUP_THRESHOLD:
        raise BlowUp(t, f"(|u|max={peak:.3g})")


def rk4_step(vel: torch.Tensor, cfg: SimConfig, grid: Grid, t: float = 0.0,
             return_closure: bool = False):
    """One classical RK4 step; every stage tendency is projected."""
    dt = cfg.dt
    args = (grid, cfg.nu, cfg.forcing, cfg.closure)
    k1, c1 = tendency(vel, *args, t=t)
    k2, _ = tendency(vel + 0.5 * dt * k1, *args, t=t + 0.5 * dt)
    k3, _ = tendency(vel + 0.5 * dt * k2, *args, t=t + 0.5 * dt)
    k4, _ = tendency(vel + dt * k3, *args, t=t + dt)
    out = vel + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    check_blowup(out, t + dt)
    if return_closure:
        return out, c1
    return out


@dataclass
class TrajectoryRecord:
    grid: Grid
    dt: float
    stride: int
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    # per-step scalars, sampled at the start of every step plus the final state
    t: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    px: list = field(default_factory=list)
    py: list = field(default_factory=list)
    closure_energy: list = field(default_factory=list)
    blowup_time: Optional[float] = None

    @property
    def stable(self) -> bool:
        return self.blowup_time is None

    def stacked(self) -> torch.Tensor:
        return torch.stack(self.snapshots)

    def series(self) -> dict:
        return {k: np.asarray(getattr(self, k)) for k in ("t", "energy", "px", "py", "closure_energy")}


def simulate(ic: torch.Tensor, cfg: SimConfig, grid: Grid, t0: float = 0.0,
             callback: Optional[Callable[[int, float, torch.Tensor], None]] = None) -> TrajectoryRecord:
    """Integrate ``cfg.n_steps`` RK4 steps, keeping every ``snapshot_stride``-th state.

    A blow-up ends the run early and is recorded in ``blowup_time`` instead of raising.
    """
    rec = TrajectoryRecord(grid, cfg.dt, cfg.snapshot_stride)
    vel = ic.detach().clone()
    t = t0
    rec.times.append(t)
    rec.snapshots.append(vel.clone())

    def log(vel, t, c):
        p = momentum(vel, grid)
        rec.t.append(t)
        rec.energy.append(float(kinetic_energy(vel, grid)))
        rec.px.append(float(p[..., 0]))
        rec.py.append(float(p[..., 1]))
        rec.closure_energy.append(0.0 if c is None else float((vel * c).sum()))

    with torch.no_grad():
        for step in range(cfg.n_steps):
            try:
                new, c = rk4_step(vel, cfg, grid, t, return_closure=True)
            except BlowUp as err:
                log(vel, t, None)
                rec.blowup_time = err.t
                return rec
            log(vel, t, c)
            vel = new
            # recompute t from the step index to avoid drift from repeated addition
            t = t0 + (step + 1) * cfg.dt
            if (step + 1) % cfg.snapshot_stride == 0:
                rec.times.append(t)
                rec.snapshots.append(vel.clone())
            if callback is not None:
                callback(step + 1, t, vel)
        _, c = tendency(vel, grid, cfg.nu, cfg.forcing, cfg.closure, t)
        log(vel, t, c)
    return rec


def steps_for(t_end: float, dt: float) -> int:
    n = round(t_end / dt)
    if not math.isclose(n * dt, t_end, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    return n
