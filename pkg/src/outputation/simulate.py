"""Monte Carlo experiments: type I error, power, and variance trajectories.

Data come from a random-intercepts model

    Y_ij = beta0 + b_i + beta1 * X_ij + eps_ij,
    b_i ~ Normal(0, tau^2),  eps_ij ~ Normal(0, sigma^2),

so the within-cluster outcome correlation is rho = tau^2/(sigma^2+tau^2).
The covariate is standard normal per observation by default; a
cluster-constant variant is available but note that subsampling more
observations per cluster buys nothing when the covariate has no
within-cluster variation.

Replicates are independent jobs keyed by (master_seed, replicate), so
reports are identical for any worker count.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from ._rng import derive_seed
from .data import INTERCEPT_NAME, ClusteredDataset
from .engine import OutputationPlan, run_outputations
from .gee import EXCHANGEABLE, INDEPENDENCE, MANCL_DEROUEN
from .inference import moment_variance, stabilized_variance

_METHODS = ("stabilized", "moment", "stabilized_bc", "moment_bc")
_SLOPE = 1  # covariates are (intercept, x)

# seed-stream salts so data, plans, and sub-experiments never collide
_SALT_PLAN = 11
_SALT_POWER_PAIR = 23
_SALT_TRAJECTORY = 37


@dataclass(frozen=True)
class SimulationSpec:
    """Configuration of one Monte Carlo experiment."""

    n: int
    m: int
    beta0: float = 0.0
    beta1: float = 0.0
    tau: float = 1.0
    sigma: float = 1.0
    B: tuple = (1,)
    M: int = 300
    n_sims: int = 500
    alphas: tuple = (0.05, 0.01)
    corr: str = INDEPENDENCE
    methods: tuple = ("stabilized", "moment")
    bias_correction: bool = False
    master_seed: int = 0
    covariate_level: str = "observation"

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("need n >= 1 clusters and m >= 1 observations")
        if self.tau < 0 or self.sigma <= 0:
            raise ValueError("need tau >= 0 and sigma > 0")
        object.__setattr__(self, "B", tuple(int(b) for b in self.B))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "methods", tuple(self.methods))
        if any(not 1 <= b <= self.m for b in self.B):
            raise ValueError("every B must satisfy 1 <= B <= m")
        if any(not 0.0 < a <= 1.0 for a in self.alphas):
            raise ValueError("alpha levels must be in (0, 1]")
        for meth in self.methods:
            if meth not in _METHODS:
                raise ValueError(f"unknown variance method {meth!r}")
            if meth.endswith("_bc") and not self.bias_correction:
                raise ValueError(f"{meth} requires bias_correction=True")
        if self.corr not in (INDEPENDENCE, EXCHANGEABLE):
            raise ValueError(f"unknown working correlation {self.corr!r}")
        if self.covariate_level not in ("observation", "cluster"):
            raise ValueError("covariate_level must be 'observation' or 'cluster'")

    @property
    def rho(self) -> float:
        """Within-cluster outcome correlation tau^2/(sigma^2+tau^2)."""
        return self.tau ** 2 / (self.sigma ** 2 + self.tau ** 2)


def gen_random_intercepts(spec: SimulationSpec, replicate: int) -> ClusteredDataset:
    """One simulated dataset; draws depend only on (master_seed, replicate).

    Draw order is fixed (covariates, intercepts, noise) so datasets are
    reproducible.  Covariates are (1, x).
    """
    ss = np.random.SeedSequence(entropy=spec.master_seed & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(int(replicate),))
    rng = np.random.default_rng(ss)
    n, m = spec.n, spec.m
    if spec.covariate_level == "observation":
        x = rng.normal(size=(n, m))
    else:
        x = np.broadcast_to(rng.normal(size=(n, 1)), (n, m)).copy()
    b = rng.normal(scale=spec.tau, size=n) if spec.tau > 0 else np.zeros(n)
    eps = rng.normal(scale=spec.sigma, size=(n, m))
    y = spec.beta0 + b[:, None] + spec.beta1 * x + eps
    X = np.column_stack([np.ones(n * m), x.reshape(-1)])
    return ClusteredDataset(
        y=y.reshape(-1), X=X, sizes=np.full(n, m, dtype=np.int64),
        ids=tuple(f"c{i:05d}" for i in range(n)),
        columns=(INTERCEPT_NAME, "x"), intercept=True)


def _method_variance(acc, B, sizes, method):
    which = "bias_corrected" if method.endswith("_bc") else "plain"
    if method.startswith("stabilized"):
        return float(stabilized_variance(acc, B, sizes, which=which)[_SLOPE, _SLOPE])
    var, _ = moment_variance(acc, which=which)
    return float(var[_SLOPE, _SLOPE])


def _analyze_replicate(spec: SimulationSpec, replicate: int) -> dict:
    """Slope-coordinate summaries of one replicate, for every B."""
    data = gen_random_intercepts(spec, replicate)
    bias = MANCL_DEROUEN if spec.bias_correction else "none"
    rec = {}
    for B in spec.B:
        plan = OutputationPlan(
            B=B, M=spec.M,
            master_seed=derive_seed(spec.master_seed, _SALT_PLAN, B, replicate))
        acc = run_outputations(data, plan, corr=spec.corr, bias_correction=bias)
        entry = {
            "beta1": float(acc.mean_beta[_SLOPE]),
            "sigma_bar": float(acc.mean_sigma[_SLOPE, _SLOPE]),
            "s2": float(acc.s2[_SLOPE, _SLOPE]),
            "n_failed": acc.n_failed,
            "n_excluded": acc.n_excluded,
        }
        for meth in spec.methods:
            var = _method_variance(acc, B, data.sizes, meth)
            entry[f"var_{meth}"] = var
            entry[f"z_{meth}"] = entry["beta1"] / np.sqrt(var) if var > 0 else np.nan
        rec[B] = entry
    return rec


def _replicate_task(args):
    spec, replicate = args
    return _analyze_replicate(spec, replicate)


def _map_replicates(spec: SimulationSpec, workers: int):
    tasks = [(spec, r) for r in range(spec.n_sims)]
    if workers > 1 and spec.n_sims > 1:
        chunk = max(1, spec.n_sims // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_replicate_task, tasks, chunksize=chunk))
    return [_replicate_task(t) for t in tasks]


@dataclass(frozen=True)
class SimulationReport:
    """Rejection-rate (or power / trajectory) table plus run metadata."""

    kind: str
    meta: dict
    rows: tuple
    variance_rows: tuple = ()

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "meta": self.meta,
                "rows": list(self.rows),
                "variance_rows": list(self.variance_rows)}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True,
                      allow_nan=True)
            fh.write("\n")

    def write_csv(self, path, rows: Optional[Sequence[dict]] = None) -> None:
        import csv

        rows = list(self.rows if rows is None else rows)
        if not rows:
            raise ValueError("no rows to write")
        fields = list(rows[0].keys())
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in row.items()})


def _spec_meta(spec: SimulationSpec) -> dict:
    meta = dataclasses.asdict(spec)
    meta["rho"] = spec.rho
    return meta


def run_type1(spec: SimulationSpec, workers: int = 1) -> SimulationReport:
    """Null-hypothesis rejection rates per (B, variance method, alpha).

    Replicates whose moment-based variance is non-positive on the slope
    are discarded from that method's denominator and counted; the
    stabilized methods never discard.
    """
    if spec.beta1 != 0.0:
        raise ValueError("type I error runs require beta1 = 0")
    records = _map_replicates(spec, workers)
    rows = []
    variance_rows = []
    for B in spec.B:
        entries = [rec[B] for rec in records]
        for meth in spec.methods:
            zs = np.array([e[f"z_{meth}"] for e in entries])
            ok = ~np.isnan(zs)
            discarded = int((~ok).sum())
            n_eff = int(ok.sum())
            for alpha in spec.alphas:
                crit = stats.norm.ppf(1.0 - alpha / 2.0)
                n_rej = int((np.abs(zs[ok]) > crit).sum())
                rate = n_rej / n_eff if n_eff else float("nan")
                mc_se = (np.sqrt(rate * (1.0 - rate) / n_eff)
                         if n_eff else float("nan"))
                rows.append({
                    "B": B, "method": meth, "alpha": alpha,
                    "n_rejected": n_rej, "n_effective": n_eff,
                    "n_discarded": discarded, "rate": rate,
                    "mc_se": float(mc_se),
                })
        vrow = {
            "B": B,
            "mean_sigma_bar": float(np.mean([e["sigma_bar"] for e in entries])),
            "mean_s2": float(np.mean([e["s2"] for e in entries])),
            "n_failed": int(sum(e["n_failed"] for e in entries)),
            "n_excluded": int(sum(e["n_excluded"] for e in entries)),
        }
        for meth in spec.methods:
            vals = np.array([e[f"var_{meth}"] for e in entries])
            vrow[f"mean_var_{meth}"] = float(np.mean(vals))
            vrow[f"n_negative_{meth}"] = int((vals <= 0).sum())
        variance_rows.append(vrow)
    return SimulationReport(kind="type1", meta=_spec_meta(spec),
                            rows=tuple(rows), variance_rows=tuple(variance_rows))


def run_power(spec: SimulationSpec, sigma_tau_pairs: Sequence[tuple],
              workers: int = 1, calibrate: bool = True,
              target_power: float = 0.25) -> SimulationReport:
    """Power of the stabilized-variance Wald test across correlations.

    For each (sigma, tau) pair the replicates are simulated under the
    alternative; with ``calibrate=True`` the per-correlation critical
    value is the empirical (1 - target_power) quantile of |z| at B = 1,
    so B = 1 power is approximately ``target_power`` everywhere and the
    other B values show the efficiency gain at the same threshold.
    """
    if spec.beta1 == 0.0:
        raise ValueError("power runs require beta1 != 0")
    if spec.corr != EXCHANGEABLE:
        raise ValueError("power runs use the exchangeable working correlation")
    if calibrate and 1 not in spec.B:
        raise ValueError("calibration requires B = 1 in the B list")
    if "stabilized" not in spec.methods:
        spec = replace(spec, methods=("stabilized",) + spec.methods)
    rows = []
    for j, (sig, tau) in enumerate(sigma_tau_pairs):
        sub = replace(spec, sigma=float(sig), tau=float(tau),
                      master_seed=derive_seed(spec.master_seed, _SALT_POWER_PAIR, j))
        records = _map_replicates(sub, workers)
        absz = {B: np.abs(np.array([rec[B]["z_stabilized"] for rec in records]))
                for B in sub.B}
        if calibrate:
            crit = float(np.quantile(absz[1], 1.0 - target_power))
        else:
            crit = float(stats.norm.ppf(1.0 - spec.alphas[0] / 2.0))
        for B in sub.B:
            power = float(np.mean(absz[B] > crit))
            rows.append({
                "rho": sub.rho, "sigma": float(sig), "tau": float(tau),
                "B": B, "power": power,
                "mc_se": float(np.sqrt(power * (1.0 - power) / sub.n_sims)),
                "critical_value": crit, "n_sims": sub.n_sims,
            })
    return SimulationReport(kind="power", meta=_spec_meta(spec), rows=tuple(rows))


def variance_trajectory(n: int = 200, B: int = 2, M: int = 250,
                        m_grid: Sequence[int] = tuple(range(2, 31, 2)),
                        repeats: int = 10, tau: float = 1.0,
                        sigma: float = 1.0, master_seed: int = 0,
                        workers: int = 1) -> SimulationReport:
    """Slope-variance components as the cluster size m grows.

    For each m the data are exchangeable (random intercepts) and analyzed
    as MO-B with an independence working correlation; each row records
    the mean sandwich, the between-outputation covariance, and the two
    variance estimates for one repeat, ready for external plotting.
    """
    tasks = []
    for m in m_grid:
        sub = SimulationSpec(
            n=n, m=m, tau=tau, sigma=sigma, B=(B,), M=M, n_sims=repeats,
            alphas=(0.05,), corr=INDEPENDENCE,
            methods=("stabilized", "moment"),
            master_seed=derive_seed(master_seed, _SALT_TRAJECTORY, m))
        for r in range(repeats):
            tasks.append((sub, r))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_task, tasks,
                                    chunksize=max(1, len(tasks) // (workers * 8))))
    else:
        results = [_replicate_task(t) for t in tasks]
    rows = []
    for (sub, r), rec in zip(tasks, results):
        entry = rec[B]
        rows.append({
            "m": sub.m, "repeat": r,
            "sigma_bar": entry["sigma_bar"], "s2": entry["s2"],
            "var_moment": entry["var_moment"],
            "var_stabilized": entry["var_stabilized"],
            "moment_negative": entry["var_moment"] <= 0,
        })
    meta = {"n": n, "B": B, "M": M, "repeats": repeats, "tau": tau,
            "sigma": sigma, "master_seed": master_seed,
            "m_grid": [int(m) for m in m_grid]}
    return SimulationReport(kind="variance_trajectory", meta=meta,
                            rows=tuple(rows))
