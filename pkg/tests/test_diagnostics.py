import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_velocity
from skewles.diagnostics import (
    SPECTRUM_ERROR_FLOOR, Spectrum, energy_spectrum, gaussian_kde, spectrum_error, trajectory_error,
    write_spectrum, write_timeseries,
)
from skewles.grid import Grid
from skewles.initial import random_initial_condition
from skewles.integrator import SimConfig, simulate


def test_single_mode():
    g = Grid(16, 16)
    s = energy_spectrum(g.sample(lambda x, y: np.cos(x), lambda x, y: 0 * x), g)
    assert s.energy[0] == pytest.approx(0.25, rel=1e-12)
    assert np.all(s.energy[1:] < 1e-28)
    assert s.low[0] == 1 and s.high[0] == 2


def test_zero_field():
    g = Grid(8, 8)
    assert np.all(energy_spectrum(g.zeros(), g).energy == 0)


def test_parseval_white_noise(rng):
    g = Grid(32, 32)
    vel = random_velocity(g, rng)
    s = energy_spectrum(vel, g)
    a = vel.numpy()
    a = a - a.mean(axis=(-1, -2), keepdims=True)
    assert s.total == pytest.approx(0.5 * np.mean(a[0] ** 2 + a[1] ** 2), rel=1e-8)
    assert np.all(s.energy >= 0)


def test_bins_cover_all_modes():
    g = Grid(32, 32)
    s = energy_spectrum(g.zeros(), g)
    # largest |k| is 16 sqrt(2) ~ 22.6, which falls in [16, 32)
    assert len(s.energy) == 5 and s.high[-1] == 32


def test_initial_condition_band_limited():
    g = Grid(64, 64)
    s = energy_spectrum(random_initial_condition(g, 0), g)
    assert np.all(s.energy[s.low >= 16] < 1e-20)


def test_trajectory_error_cases(rng):
    g = Grid(8, 8)
    f = [random_velocity(g, rng) for _ in range(4)]
    assert np.all(trajectory_error(f, f) == 0)
    assert np.allclose(trajectory_error([2 * x for x in f], f), 1.0)
    m = [random_velocity(g, rng) for _ in range(4)]
    direct = [np.sqrt(((a.numpy() - b.numpy()) ** 2).sum() / (b.numpy() ** 2).sum()) for a, b in zip(m, f)]
    assert np.allclose(trajectory_error(m, f), direct, rtol=1e-13)
    m[2] = m[2] * float("nan")
    assert len(trajectory_error(m, f)) == 2


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 1000))
def test_trajectory_error_shift_invariant(a, b, seed):
    r = np.random.default_rng(seed)
    g = Grid(8, 8)
    m, f = [random_velocity(g, r) for _ in range(2)], [random_velocity(g, r) for _ in range(2)]
    sh = lambda xs: [torch.roll(x, (b, a), dims=(-2, -1)) for x in xs]
    assert np.allclose(trajectory_error(sh(m), sh(f)), trajectory_error(m, f), rtol=1e-13)


def test_spectrum_error():
    e = np.array([1.0, 0.5, 0.1, 0.01])
    lo = 2.0 ** np.arange(4)
    a = Spectrum(lo, 2 * lo, e)
    assert spectrum_error(a, a) == SPECTRUM_ERROR_FLOOR
    assert spectrum_error(Spectrum(lo, 2 * lo, 10 * e), a) == pytest.approx(0.0, abs=1e-14)
    b = Spectrum(lo, 2 * lo, np.array([2.0, 0.5, 0.0, 0.001]))
    hand = np.log10(np.mean([np.log10(2.0) ** 2, 0.0, 1.0]))
    assert spectrum_error(b, a) == pytest.approx(hand, rel=1e-12)


def test_kde_standard_normal():
    r = np.random.default_rng(0)
    assert gaussian_kde(r.standard_normal(10_000), [0.0])[0] == pytest.approx(0.3989, rel=0.05)


def test_kde_normalized_and_mean():
    r = np.random.default_rng(1)
    s = r.gamma(2.0, 1.5, size=500)
    x = np.linspace(-10, 25, 4001)
    d = gaussian_kde(s, x)
    dx = x[1] - x[0]
    assert np.all(d >= 0)
    assert d.sum() * dx == pytest.approx(1.0, abs=1e-3)
    assert (x * d).sum() * dx == pytest.approx(s.mean(), abs=0.05)


def test_kde_sharp_peak():
    r = np.random.default_rng(2)
    s = 3.0 + 1e-6 * r.standard_normal(50)
    x = np.array([2.0, 3.0, 4.0])
    d = gaussian_kde(s, x)
    assert d[1] > 1e4 and d[0] < 1e-100 and d[2] < 1e-100
    with pytest.raises(ValueError):
        gaussian_kde([1.0], x)


def test_csv_emitters(tmp_path):
    g = Grid(8, 8)
    rec = simulate(random_initial_condition(g, 0, kappa_max=3), SimConfig(dt=0.01, n_steps=3), g)
    lines = write_timeseries(tmp_path / "ts.csv", rec).read_text().splitlines()
    assert lines[0] == "t,E,Px,Py,closure_energy" and len(lines) == 5
    lines = write_spectrum(tmp_path / "sp.csv", energy_spectrum(rec.snapshots[-1], g)).read_text().splitlines()
    assert lines[0] == "bin_low,bin_high,energy"
