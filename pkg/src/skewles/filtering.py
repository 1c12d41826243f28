"""Face-averaging filter, commutator error and filtered-DNS datasets."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional

import torch

from .dataset import SnapshotDataset
from .grid import Grid
from .integrator import TrajectoryRecord
from .operators import NO_FORCING, ForcingSpec, rhs_m
from .projection import project


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FaceAverageFilter:
    """Coarse face value = mean of the ``factor`` fine faces lying on that coarse face.

    Coarse u-face ``(I+1/2, Jc)`` sits on fine column ``i = (I+1) J - 1`` and
    averages fine rows ``Jc J .. Jc J + J - 1``; v-faces likewise with x and y swapped.
    ``factor = 1`` is the identity.
    """

    fine: Grid
    factor: int

    def __post_init__(self):
        if self.factor < 1:
            raise DimensionMismatch("filter factor must be >= 1")
        if self.fine.nx % self.factor or self.fine.ny % self.factor:
            raise DimensionMismatch(f"factor {self.factor} does not divide {self.fine.nx}x{self.fine.ny}")

    @classmethod
    def between(cls, fine: Grid, coarse: Grid) -> "FaceAverageFilter":
        if fine.nx % coarse.nx or fine.nx // coarse.nx != fine.ny // coarse.ny or fine.ny % coarse.ny:
            raise DimensionMismatch(f"cannot filter {fine.nx}x{fine.ny} to {coarse.nx}x{coarse.ny}")
        return cls(fine, fine.nx // coarse.nx)

    @property
    def coarse(self) -> Grid:
        return self.fine.coarsen(self.factor)

    def __call__(self, fine_vel: torch.Tensor) -> torch.Tensor:
        return apply_filter(fine_vel, self)


def apply_filter(fine_vel: torch.Tensor, filt: FaceAverageFilter) -> torch.Tensor:
    ny, nx, J = filt.fine.ny, filt.fine.nx, filt.factor
    if tuple(fine_vel.shape[-3:]) != (2, ny, nx):
        raise DimensionMismatch(f"field {tuple(fine_vel.shape)} does not live on {nx}x{ny}")
    if J == 1:
        return fine_vel.clone()
    u, v = fine_vel[..., 0, :, :], fine_vel[..., 1, :, :]
    batch = u.shape[:-2]
    # u: keep every J-th column ending at the coarse face, average J rows
    ub = u[..., :, J - 1::J].reshape(*batch, ny // J, J, nx // J).mean(dim=-2)
    vb = v[..., J - 1::J, :].reshape(*batch, ny // J, nx // J, J).mean(dim=-1)
    return torch.stack([ub, vb], dim=-3)


def commutator_error(fine_vel: torch.Tensor, filt: FaceAverageFilter, nu: float,
                     forcing: ForcingSpec = NO_FORCING, t: float = 0.0) -> torch.Tensor:
    """Exact closure target for ``Omega_H dū/dt = P_H m_H(ū) + c``.

    The fine tendency ``P_h m_h`` is volume weighted with the fine cell volume, so
    it is rescaled by ``Omega_H / Omega_h`` after filtering to match coarse units.
    """
    fine, coarse = filt.fine, filt.coarse
    fine_tend = project(rhs_m(fine_vel, nu, fine, forcing, t), fine)
    ubar = apply_filter(fine_vel, filt)
    coarse_tend = project(rhs_m(ubar, nu, coarse, forcing, t), coarse)
    return (coarse.cell_volume / fine.cell_volume) * apply_filter(fine_tend, filt) - coarse_tend


def trajectory_hash(traj: TrajectoryRecord) -> str:
    h = hashlib.sha256()
    for t, s in zip(traj.times, traj.snapshots):
        h.update(torch.tensor(t, dtype=torch.float64).numpy().tobytes())
        h.update(s.detach().to(torch.float64).contiguous().numpy().tobytes())
    return h.hexdigest()


def build_fdns_dataset(traj: TrajectoryRecord, filters: Iterable[FaceAverageFilter], nu: float,
                       forcing: ForcingSpec = NO_FORCING, seed: int = 0,
                       extra: Optional[dict] = None) -> dict[int, SnapshotDataset]:
    """Filter every stored snapshot to each coarse grid; keyed by coarse ``nx``."""
    fine_hash = trajectory_hash(traj)
    out = {}
    for filt in filters:
        snaps = [apply_filter(s, filt).to(torch.float64) for s in traj.snapshots]
        meta = {
            "fine_nx": traj.grid.nx, "fine_ny": traj.grid.ny, "fine_dt": traj.dt,
            "stride": traj.stride, "factor": filt.factor, "fine_hash": fine_hash,
            "blowup_time": traj.blowup_time,
        }
        meta.update(extra or {})
        out[filt.coarse.nx] = SnapshotDataset(
            grid=filt.coarse, dt=traj.dt * traj.stride, nu=nu, forcing=forcing, seed=seed,
            times=list(traj.times), snapshots=snaps, meta=meta,
        )
    return out
