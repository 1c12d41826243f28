"""Energy spectra, error metrics, KDE and CSV emitters."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from .grid import Grid

SPECTRUM_ERROR_FLOOR = -300.0


@dataclass
class Spectrum:
    low: np.ndarray  # inclusive lower |k| edge of each bin
    high: np.ndarray  # exclusive upper edge
    energy: np.ndarray

    @property
    def total(self) -> float:
        return float(self.energy.sum())


def wavenumber_magnitude(grid: Grid) -> np.ndarray:
    kx = np.fft.fftfreq(grid.nx, d=1.0 / grid.nx) * (2 * np.pi / grid.lx)
    ky = np.fft.fftfreq(grid.ny, d=1.0 / grid.ny) * (2 * np.pi / grid.ly)
    return np.sqrt(kx[None, :] ** 2 + ky[:, None] ** 2)


def energy_spectrum(vel, grid: Grid) -> Spectrum:
    """Modal energy ``(|u_k|^2 + |v_k|^2) / 2`` summed in dyadic bins ``floor(log2 |k|)``.

    Coefficients are normalized so the modal energies add up to the domain-mean
    kinetic energy; the ``k = 0`` mode is excluded.
    """
    a = vel.detach().cpu().numpy() if isinstance(vel, torch.Tensor) else np.asarray(vel)
    a = a.astype(np.float64)
    n = grid.nx * grid.ny
    hat = np.fft.fft2(a, axes=(-2, -1)) / n
    modal = 0.5 * (np.abs(hat[0]) ** 2 + np.abs(hat[1]) ** 2)
    kmag = wavenumber_magnitude(grid)
    mask = kmag > 0
    idx = np.floor(np.log2(kmag[mask]) + 1e-12).astype(int)
    nbins = idx.max() + 1
    energy = np.bincount(idx, weights=modal[mask], minlength=nbins)
    low = 2.0 ** np.arange(nbins)
    return Spectrum(low, 2 * low, energy)


def mean_spectrum(spectra: Sequence[Spectrum]) -> Spectrum:
    e = np.mean([s.energy for s in spectra], axis=0)
    return Spectrum(spectra[0].low, spectra[0].high, e)


def trajectory_error(model_snaps: Sequence, fdns_snaps: Sequence) -> np.ndarray:
    """Relative 2-norm error per aligned snapshot; stops at the first non-finite model state."""
    out = []
    for m, f in zip(model_snaps, fdns_snaps):
        m = torch.as_tensor(m, dtype=torch.float64)
        f = torch.as_tensor(f, dtype=torch.float64)
        if not torch.isfinite(m).all():
            break
        out.append(float(torch.sqrt(((f - m) ** 2).sum() / (f**2).sum())))
    return np.asarray(out)


def spectrum_error(model: Spectrum, fdns: Spectrum) -> float:
    """``log10`` of the mean squared difference of ``log10`` bin energies."""
    if len(model.energy) != len(fdns.energy):
        raise ValueError("spectra use different binning")
    keep = (model.energy > 0) & (fdns.energy > 0)
    if not keep.any():
        return SPECTRUM_ERROR_FLOOR
    mse = np.mean((np.log10(model.energy[keep]) - np.log10(fdns.energy[keep])) ** 2)
    if mse <= 0:
        return SPECTRUM_ERROR_FLOOR
    return max(float(np.log10(mse)), SPECTRUM_ERROR_FLOOR)


def gaussian_kde(samples, eval_points) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2:
        raise ValueError("KDE needs at least two samples")
    return stats.gaussian_kde(samples, bw_method="silverman")(np.asarray(eval_points, dtype=np.float64))


# ---- CSV emitters -----------------------------------------------------------

def _write(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return path


def write_timeseries(path, record) -> Path:
    s = record.series()
    return _write(path, ["t", "E", "Px", "Py", "closure_energy"],
                  zip(s["t"], s["energy"], s["px"], s["py"], s["closure_energy"]))


def write_spectrum(path, spec: Spectrum) -> Path:
    return _write(path, ["bin_low", "bin_high", "energy"], zip(spec.low, spec.high, spec.energy))


def write_error_series(path, times, errors) -> Path:
    return _write(path, ["t", "error"], zip(times, errors))


def write_table(path, header, rows) -> Path:
    return _write(path, header, rows)
