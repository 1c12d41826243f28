"""Snapshot datasets and the ``.lesd`` binary format.

Layout (little endian)::

    b"LESD" | version u32 | nx u32 | ny u32 | n_snapshots u32
    | dt_between_snapshots f64 | nu f64 | forcing tag u8 | rng seed u64
    | n_snapshots x ( time f64 | u[ny, nx] f64 | v[ny, nx] f64 )

Lattices are row-major with x fastest. Provenance that does not fit the header
(fine resolution, stride, fine-trajectory hash, config hash) goes to a JSON
sidecar ``<file>.meta.json``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .grid import Grid
from .operators import ForcingSpec

MAGIC = b"LESD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIddBQ")


class FormatError(ValueError):
    pass


@dataclass
class SnapshotDataset:
    grid: Grid
    dt: float  # time between consecutive snapshots
    nu: float
    forcing: ForcingSpec
    seed: int
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.snapshots)

    def stacked(self, dtype=torch.float64) -> torch.Tensor:
        return torch.stack(self.snapshots).to(dtype)

    def index_of_time(self, t: float, tol: float = 1e-9) -> int:
        for k, tk in enumerate(self.times):
            if abs(tk - t) <= tol * max(1.0, abs(t)):
                return k
        raise KeyError(f"no snapshot at t={t}")

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, self.grid.nx, self.grid.ny, len(self.snapshots),
                              float(self.dt), float(self.nu), self.forcing.tag, int(self.seed))]
        for t, s in zip(self.times, self.snapshots):
            arr = np.ascontiguousarray(s.detach().cpu().numpy(), dtype="<f8")
            parts.append(struct.pack("<d", float(t)))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, meta: dict | None = None) -> "SnapshotDataset":
        if len(data) < _HEADER.size:
            raise FormatError("truncated header")
        magic, version, nx, ny, n, dt, nu, ftag, seed = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        per = 8 + 2 * nx * ny * 8
        if len(data) != _HEADER.size + n * per:
            raise FormatError("payload size does not match header")
        meta = dict(meta or {})
        grid = Grid(nx, ny, meta.get("lx", 2 * np.pi), meta.get("ly", 2 * np.pi))
        times, snaps = [], []
        off = _HEADER.size
        for _ in range(n):
            (t,) = struct.unpack_from("<d", data, off)
            arr = np.frombuffer(data, dtype="<f8", count=2 * nx * ny, offset=off + 8)
            times.append(t)
            snaps.append(torch.tensor(arr.reshape(2, ny, nx).astype(np.float64)))
            off += per
        return cls(grid, dt, nu, ForcingSpec.from_tag(ftag), seed, times, snaps, meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        meta = dict(self.meta, lx=self.grid.lx, ly=self.grid.ly)
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SnapshotDataset":
        path = Path(path)
        side = Path(str(path) + ".meta.json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls.from_bytes(path.read_bytes(), meta)
