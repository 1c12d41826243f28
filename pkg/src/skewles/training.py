"""Trajectory fitting: unroll the coarse solver and match filtered DNS snapshots."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .closures import ClosureModel
from .dataset import SnapshotDataset
from .integrator import BlowUp, SimConfig, rk4_step
from .nn import AdamConfig, NonFiniteGradient, ParamStore, adam_step

log = logging.getLogger(__name__)


class InsufficientWindow(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 20
    n_unroll: int = 5
    lr: float = 1e-3
    seed: int = 0
    dtype: torch.dtype = torch.float32
    chunk: int = 10  # windows per forward/backward pass inside a mini-batch


def windows_of(ds: SnapshotDataset, n_unroll: int, dtype=torch.float64) -> torch.Tensor:
    """All ``n_unroll + 1`` long windows, shape ``(n_windows, n_unroll + 1, 2, ny, nx)``."""
    if len(ds) < n_unroll + 1:
        raise InsufficientWindow(f"dataset has {len(ds)} snapshots, need {n_unroll + 1}")
    data = ds.stacked(dtype)
    return data.unfold(0, n_unroll + 1, 1).permute(0, 4, 1, 2, 3)


def trajectory_loss(model: ClosureModel, params: Optional[dict], window: torch.Tensor, ds: SnapshotDataset,
                    n_unroll: int = 5) -> torch.Tensor:
    """Sum over ``n_unroll`` coarse RK4 steps of the squared 2-norm to the reference snapshots.

    ``window`` has shape ``(..., n_unroll + 1, 2, ny, nx)``; leading dims are
    treated as independent windows and summed. One coarse step spans the
    snapshot spacing ``ds.dt``.
    """
    if window.shape[-4] < n_unroll + 1:
        raise InsufficientWindow(f"window holds {window.shape[-4]} snapshots, need {n_unroll + 1}")
    cfg = SimConfig(dt=ds.dt, n_steps=n_unroll, nu=ds.nu, forcing=ds.forcing, closure=model.closure(params))
    u = window[..., 0, :, :, :]
    t0 = ds.times[0] if ds.times else 0.0
    loss = window.new_zeros(())
    for i in range(1, n_unroll + 1):
        u = rk4_step(u, cfg, ds.grid, t0 + (i - 1) * ds.dt)
        loss = loss + ((u - window[..., i, :, :, :]) ** 2).sum()
    return loss


def loss_and_grad(model: ClosureModel, store: ParamStore, window: torch.Tensor, ds: SnapshotDataset,
                  n_unroll: int = 5, dtype=torch.float64):
    if not model.trainable:
        with torch.no_grad():
            return float(trajectory_loss(model, None, window.to(dtype), ds, n_unroll)), None
    flat, views = store.views(dtype, requires_grad=True)
    loss = trajectory_loss(model, views, window.to(dtype), ds, n_unroll)
    (g,) = torch.autograd.grad(loss, flat)
    return float(loss.detach()), g.to(torch.float64)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    nc_baseline_loss: float

    @property
    def relative_loss(self) -> float:
        return self.mean_loss / self.nc_baseline_loss if self.nc_baseline_loss > 0 else float("nan")


def epoch_windows(datasets: Sequence[SnapshotDataset], n_unroll: int, rng: np.random.Generator):
    """Disjoint windows per dataset with a random phase, then shuffled across datasets."""
    items = []
    for d, ds in enumerate(datasets):
        last = len(ds) - 1 - n_unroll
        if last < 0:
            raise InsufficientWindow(f"dataset {d} has {len(ds)} snapshots, need {n_unroll + 1}")
        phase = int(rng.integers(0, min(n_unroll, last + 1)))
        items += [(d, s) for s in range(phase, last + 1, n_unroll)]
    order = rng.permutation(len(items))
    return [items[k] for k in order]


def train(datasets: Sequence[SnapshotDataset], model: ClosureModel, cfg: TrainConfig = TrainConfig(),
          on_epoch=None):
    """Adam over mini-batches of unrolled windows. Returns ``(store, history)``.

    The stored parameters are updated in place on a copy; ``model`` itself is not modified.
    """
    if not datasets or all(len(ds) == 0 for ds in datasets):
        raise ValueError("training needs a non-empty dataset")
    store = model.store.copy()
    work = ClosureModel(model.variant, model.spec, store, model.cs, model.terms)
    nc = ClosureModel("NC")
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    adam = AdamConfig(lr=cfg.lr)
    stacked = [ds.stacked(torch.float64) for ds in datasets]
    n = cfg.n_unroll
    baseline: dict = {}
    history = []
    for epoch in range(1, cfg.epochs + 1):
        items = epoch_windows(datasets, n, rng)
        losses, base = [], []
        for b0 in range(0, len(items), cfg.batch_size):
            batch = items[b0:b0 + cfg.batch_size]
            grad = torch.zeros(len(store), dtype=torch.float64)
            # group by dataset so windows of one simulation share a forward pass
            for d in sorted({d for d, _ in batch}):
                starts = [s for dd, s in batch if dd == d]
                for c0 in range(0, len(starts), cfg.chunk):
                    chunk = starts[c0:c0 + cfg.chunk]
                    win = torch.stack([stacked[d][s:s + n + 1] for s in chunk])
                    try:
                        loss, g = loss_and_grad(work, store, win, datasets[d], n, cfg.dtype)
                    except BlowUp as err:
                        raise NonFiniteGradient(f"epoch {epoch}: unrolled solver blew up on windows "
                                                f"{[(d, s) for s in chunk]}") from err
                    losses.append(loss)
                    if g is not None:
                        grad += g
                    for s in chunk:
                        if (d, s) not in baseline:
                            baseline[(d, s)], _ = loss_and_grad(nc, store, stacked[d][s:s + n + 1], datasets[d], n,
                                                                torch.float64)
                        base.append(baseline[(d, s)])
            if work.trainable:
                try:
                    adam_step(store, grad / len(batch), adam)
                except NonFiniteGradient:
                    log.error("non-finite gradient in epoch %d, batch %s", epoch, batch)
                    raise
        rec = EpochRecord(epoch, float(np.sum(losses)) / len(items), float(np.mean(base)))
        history.append(rec)
        log.info("epoch %d loss %.6g nc %.6g rel %.4f", epoch, rec.mean_loss, rec.nc_baseline_loss, rec.relative_loss)
        if on_epoch is not None:
            on_epoch(rec, store)
    return store, history


def write_history(path, history) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss", "nc_baseline_loss", "relative_loss"])
        for r in history:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.nc_baseline_loss), repr(r.relative_loss)])
    return path


def evaluate_loss(datasets: Sequence[SnapshotDataset], model: ClosureModel, n_unroll: int = 5,
                  dtype=torch.float64) -> float:
    """Mean window loss over every (overlapping) window, without gradients."""
    total, count = 0.0, 0
    params = model.params(dtype) if model.trainable else None
    with torch.no_grad():
        for ds in datasets:
            win = windows_of(ds, n_unroll, dtype)
            for c0 in range(0, len(win), 10):
                total += float(trajectory_loss(model, params, win[c0:c0 + 10], ds, n_unroll))
            count += len(win)
    return total / count
