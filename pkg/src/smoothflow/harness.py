"""Replication harness for the desk-scale simulation experiments.

Each replication simulates a fresh dataset, fits the generative model plus
the GP/KL baselines, and reports summary metrics (integrated MSEs against
the truth, Wasserstein distances, flow roundtrip errors, correlation-matrix
diagnostics) as a flat dict.  Replications are deterministic given
(master_seed, counter) and can run in a process pool.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy.special import ndtri

from .baselines import fit_gp, sample_gp, sample_kl
from .dataset import RegularGrid
from .evaluate import fpca_summary, mse_against_truth, wasserstein2
from .flow import FlowTrainingConfig, roundtrip_error
from .generator import fit as fit_model
from .generator import generate
from .regress import denoise_dataset
from .simgen import SamplingSpec, simulate

logger = logging.getLogger(__name__)

DEFAULT_N = 200
DEFAULT_J_RANGE = (6, 10)
DEFAULT_M_EVAL = 100
DEFAULT_M_MSE = 40
ROUNDTRIP_PROBES = 20


def _seed(master: int, counter: int, stream: int) -> list:
    """Deterministic child seed: master seed plus counters as entropy."""
    return [int(master), int(counter), int(stream)]


def _flow_config(master, counter, h, f):
    return FlowTrainingConfig(H=h, F=f, seed=_seed(master, counter, 1))


def surface_diagnostics(model) -> dict:
    mat = model.base.surface.grid_matrix
    eigs = np.linalg.eigvalsh(mat)
    return {
        "surface_min_eig": float(eigs[0]),
        "surface_diag_err": float(np.max(np.abs(np.diag(mat) - 1.0))),
    }


def roundtrip_diagnostics(field, steps: int = 50,
                          n_probes: int = ROUNDTRIP_PROBES) -> dict:
    """Roundtrip error over an n x n probe grid.

    Value probes sit at standard-normal quantiles (1%..99%), i.e. where the
    base measure that the forward flow transports actually has mass; time
    probes span the field's time domain.
    """
    probes = ndtri(np.linspace(0.01, 0.99, n_probes))
    lo, hi = field.x_domain
    probes = np.clip(probes, lo, hi)
    t0, t1 = field.tensor.bases[1].domain
    t_grid = RegularGrid(t0, t1, n_probes)
    stats = roundtrip_error(field, t_grid, probes, steps=steps)
    return {"roundtrip_mean": stats["mean"], "roundtrip_max": stats["max"]}


def _metric_block(prefix: str, metrics: dict) -> dict:
    return {f"{prefix}_{k}": float(v) for k, v in metrics.items()}


def simulation_replication(master_seed: int, counter: int,
                           kind: str = "gaussian",
                           n: int = DEFAULT_N,
                           j_range=DEFAULT_J_RANGE,
                           grid_size: int = 50,
                           m_eval: int = DEFAULT_M_EVAL,
                           m_mse: int = DEFAULT_M_MSE,
                           base_family: str = "gaussian",
                           steps: int = 50,
                           h_pool: int = 10,
                           f_grid: int = 15,
                           mean_dim: int = 6,
                           k_components: int = 4,
                           kl_components: int = 4,
                           surface_dim: int = 10) -> dict:
    """One full replication: simulate, fit all methods, score them.

    Wasserstein distances use m_eval generated curves per method; the
    MF/EF/MDF summaries use the first m_mse of them.
    """
    grid = RegularGrid(0.0, 1.0, grid_size)
    sampling = SamplingSpec(n=n, j_range=tuple(j_range), grid=grid)
    ds, truth = simulate(kind, sampling, seed=_seed(master_seed, counter, 0),
                         k=k_components, mean_dim=mean_dim)

    cfg = _flow_config(master_seed, counter, h_pool, f_grid)
    model = fit_model(ds, cfg, base_family=base_family,
                      surface_dim=surface_dim, steps=steps)
    ens = generate(model, m_eval, seed=_seed(master_seed, counter, 2))

    gp_model = fit_gp(ds)
    gp_ens = sample_gp(gp_model, m_eval, seed=_seed(master_seed, counter, 3))
    kl_ens = sample_kl(gp_model, kl_components, m_eval,
                       seed=_seed(master_seed, counter, 4))
    truth_sample = truth.sample_dense(m_eval, seed=_seed(master_seed, counter, 5))

    m_mse = min(int(m_mse), int(m_eval))
    out = {"rep": int(counter), "kind": kind, "n": int(n)}
    for prefix, sample in (("sfm", ens.curves), ("gp", gp_ens.curves),
                           ("kl", kl_ens.curves)):
        summary = fpca_summary(sample[:m_mse], grid=grid)
        out.update(_metric_block(prefix, mse_against_truth(summary, truth)))
    out["w_sfm"] = wasserstein2(ens.curves, truth_sample, grid)
    out["w_gp"] = wasserstein2(gp_ens.curves, truth_sample, grid)
    out["w_kl"] = wasserstein2(kl_ens.curves, truth_sample, grid)
    out["sfm_positive_frac"] = float(np.mean(ens.curves > 0))
    out["field_converged"] = bool(model.field.fit_info.get("converged", True))
    out.update(roundtrip_diagnostics(model.field, steps=steps))
    out.update(surface_diagnostics(model))
    return out


def noise_replication(master_seed: int, counter: int, noise_level: float,
                      n: int = DEFAULT_N,
                      j_range=DEFAULT_J_RANGE,
                      grid_size: int = 50,
                      m_eval: int = DEFAULT_M_EVAL,
                      steps: int = 50,
                      h_pool: int = 10,
                      f_grid: int = 15,
                      mean_dim: int = 6,
                      k_components: int = 4,
                      surface_dim: int = 10) -> dict:
    """Noise-sensitivity replication: SFM on noisy vs denoised input.

    Both arms share the same simulated data, flow seed, and generation seed,
    so the comparison is paired.
    """
    grid = RegularGrid(0.0, 1.0, grid_size)
    sampling = SamplingSpec(n=n, j_range=tuple(j_range), grid=grid,
                            noise_level=float(noise_level))
    ds_noisy, truth = simulate("gamma", sampling,
                               seed=_seed(master_seed, counter, 0),
                               k=k_components, mean_dim=mean_dim)
    truth_sample = truth.sample_dense(m_eval, seed=_seed(master_seed, counter, 5))
    cfg = _flow_config(master_seed, counter, h_pool, f_grid)

    def _wasserstein_for(dataset):
        model = fit_model(dataset, cfg, base_family="gaussian",
                          surface_dim=surface_dim, steps=steps)
        ens = generate(model, m_eval, seed=_seed(master_seed, counter, 2))
        return wasserstein2(ens.curves, truth_sample, grid)

    w_noisy = _wasserstein_for(ds_noisy)
    w_denoised = _wasserstein_for(denoise_dataset(ds_noisy))
    return {"rep": int(counter), "noise_level": float(noise_level),
            "w_noisy": float(w_noisy), "w_denoised": float(w_denoised)}


def run_replications(worker, n_reps: int, master_seed: int, threads: int = 1,
                     **kwargs) -> list:
    """Run ``worker(master_seed, counter, **kwargs)`` for counter 0..n-1."""
    if n_reps < 1:
        raise ValueError("need at least one replication")
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=int(threads)) as pool:
            futures = [pool.submit(worker, master_seed, i, **kwargs)
                       for i in range(n_reps)]
            return [f.result() for f in futures]
    return [worker(master_seed, i, **kwargs) for i in range(n_reps)]


def run_noise_study(n_reps: int, master_seed: int,
                    noise_levels=(0.01, 0.04), threads: int = 1,
                    **kwargs) -> list:
    """Noise replications for every level; one worker call per (rep, level)."""
    jobs = [(lv, i) for lv in noise_levels for i in range(n_reps)]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=int(threads)) as pool:
            futures = [pool.submit(noise_replication, master_seed, i,
                                   noise_level=lv, **kwargs)
                       for lv, i in jobs]
            return [f.result() for f in futures]
    return [noise_replication(master_seed, i, noise_level=lv, **kwargs)
            for lv, i in jobs]


def summarize(results: list, keys=None) -> dict:
    """Mean/std/min/max per numeric key across replication dicts."""
    if not results:
        return {}
    if keys is None:
        keys = [k for k, v in results[0].items()
                if isinstance(v, (int, float)) and not isinstance(v, bool)]
    out = {}
    for key in keys:
        vals = np.asarray([float(r[key]) for r in results if key in r])
        if vals.size == 0:
            continue
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std()),
                    "min": float(vals.min()), "max": float(vals.max())}
    return out
