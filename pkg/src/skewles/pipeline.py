"""Experiment orchestration: data generation, calibration, training and evaluation runs."""
from __future__ import annotations

import logging
import math
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .closures import ClosureModel, closure_energy, make_model, skew_parts
from .config import ExperimentConfig
from .dataset import SnapshotDataset
from .diagnostics import (
    energy_spectrum, gaussian_kde, mean_spectrum, spectrum_error, trajectory_error, write_error_series,
    write_spectrum, write_table, write_timeseries,
)
from .filtering import FaceAverageFilter, apply_filter, build_fdns_dataset
from .grid import Grid
from .initial import random_initial_condition
from .integrator import BlowUp, SimConfig, TrajectoryRecord, simulate, steps_for
from .nn import NonFiniteGradient, load_checkpoint, save_checkpoint
from .operators import KOLMOGOROV, NO_FORCING, ForcingSpec, rhs_m
from .training import TrainConfig, train, write_history

log = logging.getLogger(__name__)


# ---- simulation helpers ----------------------------------------------------------

def fine_grid(cfg: ExperimentConfig) -> Grid:
    return Grid(cfg.fine_n, cfg.fine_n)


def coarse_grid(cfg: ExperimentConfig, n: Optional[int] = None) -> Grid:
    n = cfg.train_coarse if n is None else n
    return Grid(n, n)


def dns(cfg: ExperimentConfig, seed: int, t_end: float, stride: int, forcing: ForcingSpec = NO_FORCING,
        ic: Optional[torch.Tensor] = None) -> TrajectoryRecord:
    """Fine-grid run; a blow-up here is a hard error."""
    g = fine_grid(cfg)
    dtype = cfg.torch_dtype("dns_dtype")
    if ic is None:
        ic = random_initial_condition(g, seed, cfg.kappa_max, cfg.target_energy, dtype=dtype)
    sim = SimConfig(dt=cfg.dt, n_steps=steps_for(t_end, cfg.dt), nu=cfg.nu, forcing=forcing, snapshot_stride=stride)
    rec = simulate(ic.to(dtype), sim, g)
    if not rec.stable:
        raise BlowUp(rec.blowup_time, "in the fine-grid reference run")
    return rec


def les(model: ClosureModel, ic: torch.Tensor, cfg: ExperimentConfig, t_end: float,
        forcing: ForcingSpec = NO_FORCING, grid: Optional[Grid] = None, callback=None) -> TrajectoryRecord:
    grid = coarse_grid(cfg) if grid is None else grid
    sim = SimConfig(dt=cfg.dt_coarse, n_steps=steps_for(t_end, cfg.dt_coarse), nu=cfg.nu, forcing=forcing,
                    closure=model.closure())
    return simulate(ic.to(cfg.torch_dtype("les_dtype")), sim, grid, callback=callback)


def builtin_models(cfg: ExperimentConfig) -> dict:
    return {"NC": ClosureModel("NC"), "SMAG": ClosureModel("SMAG", cs=cfg.cs)}


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash, "fine_res": cfg.fine_n, "coarse_res": cfg.train_coarse, "dt": cfg.dt,
            "dt_coarse": cfg.dt_coarse, "t_train": cfg.t_train, "t_eval": cfg.t_eval}


# ---- data --------------------------------------------------------------------------

def generate_training_data(cfg: ExperimentConfig, run_dir=None) -> dict:
    """``{coarse n: [dataset per simulation]}`` of filtered DNS snapshots every ``dt_multiplier`` steps."""
    g = fine_grid(cfg)
    filters = [FaceAverageFilter(g, cfg.fine_n // n) for n in cfg.coarse]
    out = {n: [] for n in cfg.coarse}
    for i in range(cfg.n_train_sims):
        seed = cfg.train_seed + i
        traj = dns(cfg, seed, cfg.t_train, cfg.dt_multiplier)
        sets = build_fdns_dataset(traj, filters, cfg.nu, NO_FORCING, seed,
                                  extra={"config_hash": cfg.hash, "sim": i, "kind": "train"})
        for n, ds in sets.items():
            out[n].append(ds)
            if run_dir is not None:
                ds.save(Path(run_dir) / f"train_{n}_{i}.lesd")
        log.info("training simulation %d (seed %d) done", i, seed)
    return out


def generate_planted_data(cfg: ExperimentConfig, cs: float, n_sims: int = 1, run_dir=None) -> list:
    """Coarse SMAG(cs) runs stored like filtered DNS, for checking the calibration."""
    g = coarse_grid(cfg)
    model = ClosureModel("SMAG", cs=cs)
    dtype = cfg.torch_dtype("les_dtype")
    out = []
    for i in range(n_sims):
        seed = cfg.train_seed + i
        ic = random_initial_condition(g, seed, min(cfg.kappa_max, g.nx / 2 - 1), cfg.target_energy, dtype=dtype)
        rec = les(model, ic, cfg, cfg.t_calibrate, grid=g)
        ds = SnapshotDataset(g, cfg.dt_coarse, cfg.nu, NO_FORCING, seed, list(rec.times),
                             [s.to(torch.float64) for s in rec.snapshots],
                             {"config_hash": cfg.hash, "kind": "planted", "planted_cs": cs, "stride": 1})
        if run_dir is not None:
            ds.save(Path(run_dir) / f"planted_{g.nx}_{i}.lesd")
        out.append(ds)
    return out


def load_datasets(run_dir, n: int, prefix: str = "train") -> list:
    paths = sorted(Path(run_dir).glob(f"{prefix}_{n}_*.lesd"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    return [SnapshotDataset.load(p) for p in paths]


# ---- calibration ---------------------------------------------------------------------

def calibrate_smagorinsky(datasets, cfg: ExperimentConfig, cs_grid=None):
    """Grid search for the ``Cs`` whose LES spectrum at ``t_calibrate`` best matches the data.

    Returns ``(cs, [(cs, misfit), ...])``; ties go to the smaller constant.
    """
    cs_grid = cfg.cs_grid() if cs_grid is None else sorted(cs_grid)
    dtype = cfg.torch_dtype("les_dtype")
    targets = []
    for ds in datasets:
        k = ds.index_of_time(cfg.t_calibrate)
        targets.append((ds, k, energy_spectrum(ds.snapshots[k], ds.grid)))
    table = []
    for cs in cs_grid:
        model = ClosureModel("SMAG", cs=cs)
        misfit = 0.0
        for ds, k, ref in targets:
            sim = SimConfig(dt=ds.dt, n_steps=k, nu=ds.nu, forcing=ds.forcing, closure=model.closure())
            rec = simulate(ds.snapshots[0].to(dtype), sim, ds.grid, t0=ds.times[0])
            if not rec.stable:
                misfit = math.inf
                break
            spec = energy_spectrum(rec.snapshots[-1], ds.grid)
            keep = (spec.energy > 0) & (ref.energy > 0)
            misfit += float(np.sum((np.log10(spec.energy[keep]) - np.log10(ref.energy[keep])) ** 2))
        table.append((cs, math.sqrt(misfit)))
    best = min(range(len(table)), key=lambda i: (table[i][1], table[i][0]))
    return table[best][0], table


# ---- training ------------------------------------------------------------------------

def train_cfg(cfg: ExperimentConfig, seed: int, epochs: Optional[int] = None) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs if epochs is None else epochs, batch_size=cfg.batch_size,
                       n_unroll=cfg.n_unroll, lr=cfg.lr, seed=seed, dtype=cfg.torch_dtype("train_dtype"))


def train_closure(variant: str, datasets, cfg: ExperimentConfig, seed: Optional[int] = None,
                  epochs: Optional[int] = None, run_dir=None, tag: Optional[str] = None):
    seed = cfg.model_seed if seed is None else seed
    init = make_model(variant, seed, hidden=cfg.hidden, n_hidden=cfg.n_hidden)
    t0 = time.time()
    store, history = train(datasets, init, train_cfg(cfg, seed, epochs))
    log.info("trained %s in %.0fs", variant, time.time() - t0)
    model = ClosureModel(variant, init.spec, store)
    if run_dir is not None:
        tag = tag or variant
        save_checkpoint(Path(run_dir) / f"{tag}.lesp", variant, init.spec, store)
        write_history(Path(run_dir) / f"loss_{tag}.csv", history)
    return model, history


def load_model(path, variant: Optional[str] = None) -> ClosureModel:
    """Load a checkpoint; ``variant="CNNC"`` reuses trained CNN weights with clipping."""
    ck = load_checkpoint(path)
    return ClosureModel(variant or ck.variant, ck.spec, ck.store)


# ---- decaying turbulence ---------------------------------------------------------------

def evaluation_reference(cfg: ExperimentConfig, seed: Optional[int] = None) -> SnapshotDataset:
    seed = cfg.eval_seed if seed is None else seed
    traj = dns(cfg, seed, cfg.t_eval, cfg.dt_multiplier)
    filt = FaceAverageFilter(fine_grid(cfg), cfg.fine_n // cfg.train_coarse)
    return build_fdns_dataset(traj, [filt], cfg.nu, NO_FORCING, seed,
                              extra={"config_hash": cfg.hash, "kind": "eval"})[cfg.train_coarse]


def evaluate_decay(model: ClosureModel, ref: SnapshotDataset, cfg: ExperimentConfig) -> dict:
    rec = les(model, ref.snapshots[0], cfg, cfg.t_eval, grid=ref.grid)
    err = trajectory_error(rec.snapshots, ref.snapshots)
    k_mid = ref.index_of_time(cfg.t_train)
    out = {"stable": rec.stable, "blowup_time": rec.blowup_time, "times": np.asarray(ref.times[:len(err)]),
           "error": err, "record": rec, "spectra": {}, "spectrum_error": {}}
    for label, k in (("mid", k_mid), ("final", len(ref) - 1)):
        ref_spec = energy_spectrum(ref.snapshots[k], ref.grid)
        out["spectra"][("fdns", label)] = ref_spec
        if k < len(rec.snapshots):
            s = energy_spectrum(rec.snapshots[k], ref.grid)
            out["spectra"][("model", label)] = s
            out["spectrum_error"][label] = spectrum_error(s, ref_spec)
        else:
            out["spectrum_error"][label] = math.nan
    return out


def run_decaying_experiment(models: dict, cfg: ExperimentConfig, run_dir=None,
                            ref: Optional[SnapshotDataset] = None) -> dict:
    """Evaluate NC, SMAG and the given closures on a fresh-seed decaying run to ``t_eval``."""
    ref = evaluation_reference(cfg) if ref is None else ref
    all_models = {**builtin_models(cfg), **models}
    results = {name: evaluate_decay(m, ref, cfg) for name, m in all_models.items()}
    report = {"provenance": provenance(cfg), "seed": ref.seed, "train_horizon": cfg.t_train,
              "results": results, "ref": ref}
    if run_dir is not None:
        d = Path(run_dir)
        for name, r in results.items():
            write_error_series(d / f"decay_error_{name}.csv", r["times"], r["error"])
            write_timeseries(d / f"decay_series_{name}.csv", r["record"])
            for (who, label), s in r["spectra"].items():
                if who == "model":
                    write_spectrum(d / f"decay_spectrum_{name}_{label}.csv", s)
        for label in ("mid", "final"):
            write_spectrum(d / f"decay_spectrum_FDNS_{label}.csv", results["NC"]["spectra"][("fdns", label)])
        lines = [f"decaying turbulence, eval seed {ref.seed}, horizon {cfg.t_eval} "
                 f"(extrapolation beyond t={cfg.t_train})"]
        for name, r in results.items():
            outcome = "stable" if r["stable"] else f"BLOW-UP at t={r['blowup_time']:.4g}"
            lines.append(f"  {name:6s} {outcome}; final error {r['error'][-1]:.4g}; "
                         f"spectrum error mid {r['spectrum_error']['mid']:.4g} final {r['spectrum_error']['final']:.4g}")
        append_report(run_dir, cfg, "run-decay", lines)
    return report


# ---- ensembles ---------------------------------------------------------------------------

def run_ensemble(variant: str, datasets, cfg: ExperimentConfig, n_replicas: Optional[int] = None,
                 epochs: Optional[int] = None, ref: Optional[SnapshotDataset] = None, run_dir=None) -> dict:
    """Train replicas with distinct seeds and record each one's decaying-run outcome."""
    n_replicas = cfg.n_replicas if n_replicas is None else n_replicas
    if n_replicas < 2:
        raise ValueError("an ensemble needs at least two replicas")
    epochs = cfg.ensemble_epochs if epochs is None else epochs
    ref = evaluation_reference(cfg) if ref is None else ref
    replicas = []
    for r in range(n_replicas):
        seed = cfg.model_seed + 1 + r
        entry = {"replica": r, "seed": seed, "trained": True}
        try:
            model, history = train_closure(variant, datasets, cfg, seed=seed, epochs=epochs, run_dir=run_dir,
                                           tag=f"ensemble_{variant}_{r}")
            entry["relative_loss"] = history[-1].relative_loss if history else math.nan
        except NonFiniteGradient as err:
            entry.update(trained=False, stable=False, blowup_time=None, note=str(err))
            replicas.append(entry)
            continue
        ev = evaluate_decay(model, ref, cfg)
        entry.update(stable=ev["stable"], blowup_time=ev["blowup_time"], final_error=float(ev["error"][-1]),
                     spectrum_error=ev["spectrum_error"]["final"], model=model, eval=ev)
        replicas.append(entry)
    report = {"variant": variant, "n_replicas": n_replicas, "replicas": replicas, "provenance": provenance(cfg)}
    if run_dir is not None:
        rows = [(e["replica"], e["seed"], int(e["trained"]), int(e["stable"]),
                 "" if e.get("blowup_time") is None else e["blowup_time"],
                 e.get("final_error", math.nan), e.get("spectrum_error", math.nan)) for e in replicas]
        write_table(Path(run_dir) / f"ensemble_{variant}.csv",
                    ["replica", "seed", "trained", "stable", "blowup_time", "final_error", "spectrum_error"], rows)
        lines = [f"ensemble {variant}: {n_replicas} replicas, {epochs} epochs each"]
        for e in replicas:
            if not e["trained"]:
                lines.append(f"  replica {e['replica']} seed {e['seed']}: training failed ({e['note']})")
            elif e["stable"]:
                lines.append(f"  replica {e['replica']} seed {e['seed']}: stable, final error {e['final_error']:.4g}")
            else:
                lines.append(f"  replica {e['replica']} seed {e['seed']}: BLOW-UP at t={e['blowup_time']:.4g}")
        append_report(run_dir, cfg, "run-ensemble", lines)
    return report


# ---- Kolmogorov flow -------------------------------------------------------------------------

def run_kolmogorov_experiment(models: dict, cfg: ExperimentConfig, run_dir=None) -> dict:
    """Warm up forced DNS, filter its final state and run every closure over the long horizon."""
    warm = dns(cfg, cfg.kf_seed, cfg.kf_warmup, steps_for(cfg.kf_warmup, cfg.dt), KOLMOGOROV)
    filt = FaceAverageFilter(fine_grid(cfg), cfg.fine_n // cfg.train_coarse)
    ic = apply_filter(warm.snapshots[-1], filt).to(torch.float64)
    g = filt.coarse
    all_models = {**builtin_models(cfg), **models}
    results = {}
    for name in cfg.kf_variants:
        if name not in all_models:
            raise KeyError(f"no model supplied for {name}")
        spectra = []

        def grab(step, t, vel, spectra=spectra):
            if step % cfg.kf_spectrum_every == 0:
                spectra.append(energy_spectrum(vel, g))

        t0 = time.time()
        rec = les(all_models[name], ic, cfg, cfg.kf_horizon, KOLMOGOROV, g, grab)
        log.info("kolmogorov %s: %s in %.0fs", name, "stable" if rec.stable else "blow-up", time.time() - t0)
        avg = mean_spectrum(spectra) if spectra else None
        energy = np.asarray(rec.energy)
        results[name] = {"stable": rec.stable, "blowup_time": rec.blowup_time, "record": rec, "spectrum": avg,
                         "max_closure_energy": float(np.max(rec.closure_energy)),
                         "mean_energy": float(energy.mean()), "top_bin": float(avg.energy[-1]) if avg else math.nan}
    fdns_spec = None
    if cfg.kf_fdns_horizon > 0:
        ref = dns(cfg, cfg.kf_seed, cfg.kf_fdns_horizon, cfg.dt_multiplier * cfg.kf_spectrum_every, KOLMOGOROV,
                  ic=warm.snapshots[-1])
        fdns_spec = mean_spectrum([energy_spectrum(apply_filter(s, filt), g) for s in ref.snapshots[1:]])
    report = {"results": results, "fdns_spectrum": fdns_spec, "provenance": provenance(cfg),
              "warmup": cfg.kf_warmup, "horizon": cfg.kf_horizon}
    if run_dir is not None:
        d = Path(run_dir)
        energies = [np.asarray(r["record"].energy) for r in results.values()]
        lo = min(e.min() for e in energies)
        hi = max(e.max() for e in energies)
        grid_e = np.linspace(lo - 0.1 * (hi - lo + 1e-12), hi + 0.1 * (hi - lo + 1e-12), 200)
        for name, r in results.items():
            write_timeseries(d / f"kf_series_{name}.csv", r["record"])
            if r["spectrum"] is not None:
                write_spectrum(d / f"kf_spectrum_{name}.csv", r["spectrum"])
            e = np.asarray(r["record"].energy)
            if e.size >= 2 and np.ptp(e) > 0:
                write_table(d / f"kf_energy_kde_{name}.csv", ["E", "density"], zip(grid_e, gaussian_kde(e, grid_e)))
        if fdns_spec is not None:
            write_spectrum(d / "kf_spectrum_FDNS.csv", fdns_spec)
        lines = [f"kolmogorov flow, seed {cfg.kf_seed}, warm-up {cfg.kf_warmup}, horizon {cfg.kf_horizon}"]
        for name, r in results.items():
            outcome = "stable" if r["stable"] else f"BLOW-UP at t={r['blowup_time']:.4g}"
            lines.append(f"  {name:6s} {outcome}; mean E {r['mean_energy']:.4g}; top-bin E {r['top_bin']:.4g}; "
                         f"max closure energy {r['max_closure_energy']:.3g}")
        append_report(run_dir, cfg, "run-kolmogorov", lines)
    return report


# ---- SKEW term analysis -------------------------------------------------------------------------

def skew_term_diagnostics(model: ClosureModel, ic: torch.Tensor, cfg: ExperimentConfig, t_end: Optional[float] = None,
                          grid: Optional[Grid] = None, run_dir=None) -> dict:
    """Energy contribution and magnitude of the K- and Q-paths along a SKEW trajectory, plus ablations."""
    if model.variant != "SKEW":
        raise ValueError("skew diagnostics need a SKEW model")
    grid = coarse_grid(cfg) if grid is None else grid
    t_end = cfg.t_eval if t_end is None else t_end
    rows = []
    p64 = model.params(torch.float64)

    def probe(vel, t):
        # paths are evaluated in double precision so the K-path cancellation is visible at 1e-12
        v64 = vel.to(torch.float64)
        parts = skew_parts(v64, rhs_m(v64, cfg.nu, grid), grid, model.spec, p64)
        rows.append((t, float(closure_energy(v64, parts.k_path)), float(closure_energy(v64, parts.q_path)),
                     float(parts.k_path.norm()), float(parts.q_path.norm()), float((parts.q_vec**2).sum()),
                     float(v64.norm())))

    probe(ic, 0.0)
    rec = les(model, ic, cfg, t_end, grid=grid, callback=lambda step, t, vel: probe(vel, t))
    ablations = {}
    for terms in ("K", "Q"):
        r = les(model.with_terms(terms), ic, cfg, t_end, grid=grid)
        ablations[terms] = {"stable": r.stable, "blowup_time": r.blowup_time, "final_energy": r.energy[-1]}
    arr = np.asarray(rows)
    report = {"rows": arr, "stable": rec.stable, "ablations": ablations,
              # |<u, K-path>| relative to |u| |K-path|, the scale of an uncancelled product
              "max_rel_k_energy": float(np.max(np.abs(arr[:, 1]) / np.maximum(arr[:, 3] * arr[:, 6], 1e-300))),
              "max_q_energy": float(arr[:, 2].max())}
    if run_dir is not None:
        write_table(Path(run_dir) / "skew_diag.csv", ["t", "energy_K", "energy_Q", "norm_K", "norm_Q", "q_norm2", "norm_u"], rows)
        lines = [f"SKEW term diagnostics to t={t_end}: full run {'stable' if rec.stable else 'BLOW-UP'}",
                 f"  max |K-path energy| / scale {report['max_rel_k_energy']:.3g}; max Q-path energy {report['max_q_energy']:.3g}"]
        for k, a in ablations.items():
            lines.append(f"  SKEW-{k}: {'stable' if a['stable'] else 'BLOW-UP at t=%.4g' % a['blowup_time']}")
        append_report(run_dir, cfg, "skew-diag", lines)
    return report


# ---- run directory ------------------------------------------------------------------------------

def prepare_run_dir(run_dir, cfg: ExperimentConfig) -> Path:
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.snapshot").write_text(cfg.to_text())
    return d


def append_report(run_dir, cfg: ExperimentConfig, command: str, lines) -> None:
    p = provenance(cfg)
    head = (f"[{command}] config {p['config_hash']} fine {p['fine_res']}^2 coarse {p['coarse_res']}^2 "
            f"dt {p['dt']} dt_coarse {p['dt_coarse']} t_train {p['t_train']} t_eval {p['t_eval']}")
    with (Path(run_dir) / "report.txt").open("a") as f:
        f.write("\n".join([head, *lines]) + "\n\n")
