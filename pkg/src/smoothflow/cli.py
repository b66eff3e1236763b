"""Command-line interface.

Subcommands cover the whole pipeline: ``simulate`` writes a synthetic sparse
dataset, ``denoise`` smooths it, ``fit`` trains the generative model,
``generate`` samples curves from it, ``evaluate`` scores ensembles,
``predict`` runs the one-step-ahead harness, and ``bench`` runs replicated
desk-scale experiments.

Every run writes a ``manifest.json`` (resolved config + seed + versions)
next to its outputs; rerunning a command with the same manifest reproduces
the CSV outputs bitwise.  Outputs are long-format CSV, ready for plotting.
Set ``SFM_LOG`` (DEBUG/INFO/WARNING/ERROR) to control log verbosity.

Exit codes: 0 success, 2 validation/usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .dataset import IrregularDataset, RegularGrid, load_csv
from .errors import SmoothflowError, ValidationError
from .evaluate import fpca_summary, mse_against_truth, prediction_task, wasserstein2
from .flow import FlowTrainingConfig
from .generator import GeneratedEnsemble, SfmModel, fit, generate, resample_ensemble
from .harness import run_noise_study, run_replications, simulation_replication, summarize
from .regress import denoise_dataset
from .simgen import SamplingSpec, TruthOracle, simulate

logger = logging.getLogger(__name__)

DEFAULTS = {
    "simulate": {
        "kind": "gaussian", "n": 100, "j_min": 2, "j_max": 6,
        "grid_size": 50, "noise_level": 0.0, "k": 4, "mean_dim": 6, "seed": 0,
    },
    "denoise": {"data": None, "grid_size": 50},
    "fit": {
        "data": None, "base": "gaussian", "H": 10, "F": 15, "steps": 50,
        "surface_dim": 10, "grid_size": 50, "seed": 0,
    },
    "generate": {"model": None, "m": 100, "steps": None, "grid_size": None, "seed": 0},
    "evaluate": {"curves": None, "reference": None, "truth": None, "k": 2},
    "predict": {"train": None, "validation": None, "horizons": "1,2,3", "dim": 5},
    "bench": {
        "case": "gaussian", "replications": 5, "n": 100, "j_min": 6, "j_max": 10,
        "grid_size": 50, "m_eval": 100, "threads": 1, "seed": 0,
        "noise_levels": "0.01,0.04", "base": "gaussian", "H": 10, "F": 15,
        "steps": 50,
    },
}


def _setup_logging() -> None:
    name = os.environ.get("SFM_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(args: argparse.Namespace, command: str) -> dict:
    """Merge defaults < --config file < explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        if isinstance(loaded, dict) and {"command", "config"} <= set(loaded):
            if loaded["command"] != command:
                raise ValidationError(
                    f"manifest is for '{loaded['command']}', not '{command}'")
            loaded = loaded["config"]
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ValidationError(
                f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _require(cfg: dict, command: str, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValidationError(
            f"{command}: missing required option(s): "
            + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: dict) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "smoothflow": __version__,
        },
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_rows(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, str) else repr(float(x)) if
                        isinstance(x, float) else x for x in row])


def _parse_floats(value) -> list:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    try:
        return [float(v) for v in str(value).split(",") if v.strip()]
    except ValueError as e:
        raise ValidationError(f"bad numeric list {value!r}: {e}") from e


def _parse_ints(value) -> list:
    return [int(v) for v in _parse_floats(value)]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, "simulate")
    out = _out_dir(args)
    grid = RegularGrid(0.0, 1.0, int(cfg["grid_size"]))
    sampling = SamplingSpec(n=int(cfg["n"]),
                            j_range=(int(cfg["j_min"]), int(cfg["j_max"])),
                            grid=grid, noise_level=float(cfg["noise_level"]))
    ds, truth = simulate(cfg["kind"], sampling, seed=int(cfg["seed"]),
                         k=int(cfg["k"]), mean_dim=int(cfg["mean_dim"]))
    ds.to_csv(out / "dataset.csv")
    truth.to_json(out / "truth.json")
    _write_manifest(out, "simulate", cfg)
    print(f"wrote {out / 'dataset.csv'} ({ds.n_subjects} subjects, "
          f"{ds.n_observations} observations)")
    return 0


def cmd_denoise(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, "denoise")
    _require(cfg, "denoise", "data")
    out = _out_dir(args)
    ds = load_csv(cfg["data"], grid_size=int(cfg["grid_size"]))
    denoise_dataset(ds).to_csv(out / "denoised.csv")
    _write_manifest(out, "denoise", cfg)
    print(f"wrote {out / 'denoised.csv'}")
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, "fit")
    _require(cfg, "fit", "data")
    out = _out_dir(args)
    ds = load_csv(cfg["data"], grid_size=int(cfg["grid_size"]))
    flow_cfg = FlowTrainingConfig(H=int(cfg["H"]), F=int(cfg["F"]),
                                  seed=int(cfg["seed"]))
    model = fit(ds, flow_cfg, base_family=cfg["base"],
                surface_dim=int(cfg["surface_dim"]), steps=int(cfg["steps"]))
    model.save(out / "model.json")
    _write_manifest(out, "fit", cfg)
    nu = model.base.nu
    print(f"wrote {out / 'model.json'} (base={model.base.family}"
          + (f", nu={nu:.2f}" if nu is not None else "") + ")")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, "generate")
    _require(cfg, "generate", "model")
    out = _out_dir(args)
    model = SfmModel.load(cfg["model"])
    steps = None if cfg["steps"] is None else int(cfg["steps"])
    ens = generate(model, int(cfg["m"]), seed=int(cfg["seed"]), steps=steps)
    if cfg["grid_size"] is not None and int(cfg["grid_size"]) != ens.grid.n_points:
        # Post-processing: the model generates on its own grid; finer output
        # grids are spline interpolation of the generated curves.
        ens = resample_ensemble(ens, int(cfg["grid_size"]))
    ens.to_csv(out / "curves.csv")
    _write_manifest(out, "generate", cfg)
    print(f"wrote {out / 'curves.csv'} ({ens.n_curves} curves)")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, "evaluate")
    _require(cfg, "evaluate", "curves")
    if cfg["reference"] is None and cfg["truth"] is None:
        raise ValidationError("evaluate: need --reference and/or --truth")
    out = _out_dir(args)
    ens = GeneratedEnsemble.from_csv(cfg["curves"])
    rows = []
    if cfg["truth"] is not None:
        truth = TruthOracle.from_json(cfg["truth"])
        summary = fpca_summary(ens, k=int(cfg["k"]))
        for name, value in mse_against_truth(summary, truth).items():
            rows.append((name, value))
    if cfg["reference"] is not None:
        ref = GeneratedEnsemble.from_csv(cfg["reference"])
        if ref.grid.n_points != ens.grid.n_points:
            raise ValidationError("ensembles live on different grids")
        rows.append(("W2", wasserstein2(ens.curves, ref.curves, ens.grid)))
    _write_rows(out / "metrics.csv", ["metric", "value"], rows)
    _write_manifest(out, "evaluate", cfg)
    for name, value in rows:
        print(f"{name}: {value:.6g}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, "predict")
    _require(cfg, "predict", "train", "validation")
    out = _out_dir(args)
    train = GeneratedEnsemble.from_csv(cfg["train"])
    val = GeneratedEnsemble.from_csv(cfg["validation"])
    horizons = _parse_ints(cfg["horizons"])
    errors = prediction_task(train.curves, train.grid, val.curves,
                             horizons=horizons, dim=int(cfg["dim"]))
    _write_rows(out / "errors.csv", ["horizon", "error"],
                list(zip(horizons, errors)))
    _write_manifest(out, "predict", cfg)
    for g, e in zip(horizons, errors):
        print(f"Error_{g}: {e:.6g}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, "bench")
    out = _out_dir(args)
    common = dict(n=int(cfg["n"]),
                  j_range=(int(cfg["j_min"]), int(cfg["j_max"])),
                  grid_size=int(cfg["grid_size"]), m_eval=int(cfg["m_eval"]),
                  steps=int(cfg["steps"]), h_pool=int(cfg["H"]),
                  f_grid=int(cfg["F"]))
    reps = int(cfg["replications"])
    threads = int(cfg["threads"])
    seed = int(cfg["seed"])
    if cfg["case"] in ("gaussian", "gamma"):
        results = run_replications(simulation_replication, reps, seed,
                                   threads=threads, kind=cfg["case"],
                                   base_family=cfg["base"], **common)
    elif cfg["case"] == "noise":
        results = run_noise_study(reps, seed,
                                  noise_levels=_parse_floats(cfg["noise_levels"]),
                                  threads=threads, **common)
    else:
        raise ValidationError(f"unknown bench case {cfg['case']!r}")

    rows = []
    for res in results:
        for key, value in res.items():
            if key == "rep":
                continue
            rows.append((res["rep"], cfg["case"], key,
                         value if isinstance(value, str)
                         else float(value)))
    _write_rows(out / "results.csv", ["rep", "case", "metric", "value"], rows)
    with open(out / "summary.json", "w") as f:
        json.dump(summarize(results), f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(out, "bench", cfg)
    print(f"wrote {out / 'results.csv'} ({reps} replications)")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothflow",
        description="Generative modelling of sparse functional data.")
    parser.add_argument("--version", action="version",
                        version=f"smoothflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def new(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="JSON config (or a manifest.json)")
        p.add_argument("--out", help="output directory (default: .)")
        return p

    p = new("simulate", cmd_simulate, "write a synthetic sparse dataset")
    p.add_argument("--kind", choices=["gaussian", "gamma"])
    p.add_argument("--n", type=int, help="number of subjects")
    p.add_argument("--j-min", dest="j_min", type=int)
    p.add_argument("--j-max", dest="j_max", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--noise-level", dest="noise_level", type=float)
    p.add_argument("--k", type=int, help="number of variance components")
    p.add_argument("--mean-dim", dest="mean_dim", type=int)
    p.add_argument("--seed", type=int)

    p = new("denoise", cmd_denoise, "smooth each subject's observations")
    p.add_argument("--data", help="input dataset CSV")
    p.add_argument("--grid-size", dest="grid_size", type=int)

    p = new("fit", cmd_fit, "fit the generative model to a dataset")
    p.add_argument("--data", help="input dataset CSV")
    p.add_argument("--base", choices=["gaussian", "student-t"])
    p.add_argument("--H", type=int, help="base curves per observation")
    p.add_argument("--F", type=int, help="flow-time grid size")
    p.add_argument("--steps", type=int, help="ODE steps")
    p.add_argument("--surface-dim", dest="surface_dim", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--seed", type=int)

    p = new("generate", cmd_generate, "sample curves from a fitted model")
    p.add_argument("--model", help="model JSON from fit")
    p.add_argument("--m", type=int, help="number of curves")
    p.add_argument("--steps", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int,
                   help="resample output onto this many points")
    p.add_argument("--seed", type=int)

    p = new("evaluate", cmd_evaluate, "score an ensemble")
    p.add_argument("--curves", help="ensemble CSV to score")
    p.add_argument("--reference", help="reference ensemble CSV (Wasserstein)")
    p.add_argument("--truth", help="truth JSON from simulate (MSEs)")
    p.add_argument("--k", type=int, help="eigenfunctions to compare")

    p = new("predict", cmd_predict, "one-step-ahead prediction errors")
    p.add_argument("--train", help="training curves CSV")
    p.add_argument("--validation", help="validation curves CSV")
    p.add_argument("--horizons", help="comma-separated horizons")
    p.add_argument("--dim", type=int)

    p = new("bench", cmd_bench, "replicated desk-scale experiments")
    p.add_argument("--case", choices=["gaussian", "gamma", "noise"])
    p.add_argument("--replications", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--j-min", dest="j_min", type=int)
    p.add_argument("--j-max", dest="j_max", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--m-eval", dest="m_eval", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-levels", dest="noise_levels")
    p.add_argument("--base", choices=["gaussian", "student-t"])
    p.add_argument("--H", type=int)
    p.add_argument("--F", type=int)
    p.add_argument("--steps", type=int)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"smoothflow: error: {e}", file=sys.stderr)
        return 2
    except SmoothflowError as e:
        print(f"smoothflow: error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
