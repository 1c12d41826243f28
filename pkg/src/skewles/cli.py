"""Command line entry point: ``skewles <command> --run-dir DIR [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import pipeline as P
from .config import ExperimentConfig
from .dataset import SnapshotDataset
from .diagnostics import energy_spectrum, write_spectrum


def _overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(args) -> ExperimentConfig:
    over = _overrides(args.set)
    if args.config:
        return ExperimentConfig.load(args.config, over)
    return ExperimentConfig.from_text("", over)


def _cs_for(run_dir: Path, cfg: ExperimentConfig) -> ExperimentConfig:
    p = run_dir / "cs.txt"
    if p.exists():
        return cfg.replace(cs=float(p.read_text().split()[0]))
    return cfg


def _trained(run_dir: Path, variants) -> dict:
    models = {}
    for v in variants:
        src = "CNN" if v == "CNNC" else v
        path = run_dir / f"{src}.lesp"
        if not path.exists():
            raise SystemExit(f"missing checkpoint {path}; run `train --variant {src}` first")
        models[v] = P.load_model(path, v)
    return models


def cmd_gen_data(args, cfg, run_dir):
    if args.planted_cs is not None:
        sets = P.generate_planted_data(cfg, args.planted_cs, max(cfg.n_train_sims, 1), run_dir)
        P.append_report(run_dir, cfg, "gen-data", [f"planted SMAG({args.planted_cs}) data: {len(sets)} runs"])
        return
    sets = P.generate_training_data(cfg, run_dir)
    lines = [f"{len(v)} datasets at {n}^2, {len(v[0]) if v else 0} snapshots each" for n, v in sets.items()]
    P.append_report(run_dir, cfg, "gen-data", lines)


def cmd_calibrate(args, cfg, run_dir):
    prefix = "planted" if args.planted else "train"
    data = P.load_datasets(run_dir, cfg.train_coarse, prefix)
    if not data:
        raise SystemExit(f"no {prefix} datasets in {run_dir}")
    cs, table = P.calibrate_smagorinsky(data, cfg)
    P.write_table(run_dir / "calibration.csv", ["cs", "misfit"], table)
    if not args.planted:
        (run_dir / "cs.txt").write_text(f"{cs}\n")
    P.append_report(run_dir, cfg, "calibrate-smag", [f"best Cs = {cs} ({prefix} data)"])
    print(cs)


def cmd_train(args, cfg, run_dir):
    data = P.load_datasets(run_dir, cfg.train_coarse)
    if not data:
        raise SystemExit(f"no training datasets in {run_dir}; run gen-data first")
    variants = [args.variant] if args.variant else list(cfg.variants)
    for v in variants:
        _, hist = P.train_closure(v, data, cfg, run_dir=run_dir)
        rel = hist[-1].relative_loss if hist else float("nan")
        P.append_report(run_dir, cfg, "train", [f"{v}: {len(hist)} epochs, final relative loss {rel:.4g}"])


def cmd_run_decay(args, cfg, run_dir):
    cfg = _cs_for(run_dir, cfg)
    P.run_decaying_experiment(_trained(run_dir, cfg.variants), cfg, run_dir)


def cmd_run_kolmogorov(args, cfg, run_dir):
    cfg = _cs_for(run_dir, cfg)
    needed = [v for v in cfg.kf_variants if v not in ("NC", "SMAG", "DYNSMAG")]
    models = _trained(run_dir, needed)
    if "DYNSMAG" in cfg.kf_variants:
        models["DYNSMAG"] = P.ClosureModel("DYNSMAG")
    P.run_kolmogorov_experiment(models, cfg, run_dir)


def cmd_run_ensemble(args, cfg, run_dir):
    data = P.load_datasets(run_dir, cfg.train_coarse)
    if not data:
        raise SystemExit(f"no training datasets in {run_dir}; run gen-data first")
    ref = P.evaluation_reference(cfg)
    for v in ([args.variant] if args.variant else cfg.ensemble_variants):
        P.run_ensemble(v, data, cfg, ref=ref, run_dir=run_dir)


def cmd_spectrum(args, cfg, run_dir):
    ds = SnapshotDataset.load(args.input)
    k = args.index if args.index >= 0 else len(ds) + args.index
    spec = energy_spectrum(ds.snapshots[k], ds.grid)
    out = run_dir / (args.output or f"spectrum_{Path(args.input).stem}_{k}.csv")
    write_spectrum(out, spec)
    for lo, hi, e in zip(spec.low, spec.high, spec.energy):
        print(f"[{lo:g}, {hi:g})  {e:.6e}")


def cmd_skew_diag(args, cfg, run_dir):
    model = _trained(run_dir, ["SKEW"])["SKEW"]
    ref = P.evaluation_reference(cfg)
    P.skew_term_diagnostics(model, ref.snapshots[0], cfg, run_dir=run_dir)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "calibrate-smag": cmd_calibrate,
    "train": cmd_train,
    "run-decay": cmd_run_decay,
    "run-kolmogorov": cmd_run_kolmogorov,
    "run-ensemble": cmd_run_ensemble,
    "spectrum": cmd_spectrum,
    "skew-diag": cmd_skew_diag,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="skewles", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--run-dir", required=True, type=Path)
        p.add_argument("--config", type=Path)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "gen-data":
            p.add_argument("--planted-cs", type=float, default=None,
                           help="generate coarse SMAG data with this constant instead of filtered DNS")
        if name == "calibrate-smag":
            p.add_argument("--planted", action="store_true", help="calibrate against planted data")
        if name in ("train", "run-ensemble"):
            p.add_argument("--variant", choices=["CNN", "DIV", "SKEW", "CNNC"])
        if name == "spectrum":
            p.add_argument("--input", required=True, type=Path)
            p.add_argument("--index", type=int, default=-1)
            p.add_argument("--output")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    cfg = load_config(args)
    run_dir = P.prepare_run_dir(args.run_dir, cfg)
    COMMANDS[args.command](args, cfg, run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
