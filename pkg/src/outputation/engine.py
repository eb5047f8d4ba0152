"""Resampling engine: index draws, per-draw fits, streaming aggregation.

One outputation draws B observations per cluster without replacement,
fits the working-correlation GEE on the subsampled data, and feeds the
coefficient vector and its sandwich covariance into a mergeable
accumulator.  Draw k of cluster i depends only on (master_seed, k, i),
so streams are reproducible for any worker count; outputations are
processed in fixed-size chunks whose partial accumulators are merged in
chunk order, which makes results bit-identical across worker counts.
"""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _rng
from .data import ClusteredDataset
from .exceptions import (
    EnumerationLimitError,
    MergeError,
    SingularDesignError,
    SizeViolationError,
)
from .gee import EXCHANGEABLE, INDEPENDENCE, _fit_grouped

_CHUNK = 128


@dataclass(frozen=True)
class OutputationPlan:
    """How many observations to draw per cluster (B), how many
    outputations to run (M), and the master seed for the draw streams."""

    B: int
    M: int
    master_seed: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.M < 2:
            raise ValueError("M must be >= 2")


@dataclass(frozen=True)
class IndexDraw:
    """Within-cluster observation indices for one outputation.

    ``indices`` has shape (n, B); row i is the sorted 0-based B-subset
    drawn without replacement from cluster i's observations.
    """

    indices: np.ndarray

    @property
    def B(self) -> int:
        return self.indices.shape[1]


def draw_indices(plan: OutputationPlan, k: int, sizes) -> IndexDraw:
    """Deterministic subsample indices for outputation ``k``.

    Each cluster's draw comes from its own stream keyed by
    (master_seed, k, cluster index), so the result does not depend on
    platform, worker count, or evaluation order.
    """
    if not 0 <= k < plan.M:
        raise ValueError(f"outputation number {k} outside [0, {plan.M})")
    sizes = np.asarray(sizes, dtype=np.int64)
    return IndexDraw(_draw_matrix(plan.master_seed, k, sizes, plan.B))


def _draw_matrix(master_seed: int, k: int, sizes: np.ndarray, B: int,
                 salt: int = 0) -> np.ndarray:
    small = np.flatnonzero(sizes < B)
    if small.size:
        raise SizeViolationError(
            f"B={B} exceeds the size of clusters {small.tolist()}",
            clusters=small.tolist())
    seeds = _rng.stream_seeds(master_seed, k, sizes.size, salt=salt)
    out = np.empty((sizes.size, B), dtype=np.int64)
    for m in np.unique(sizes):
        which = np.flatnonzero(sizes == m)
        out[which] = _rng.sample_without_replacement(seeds[which].copy(), B, int(m))
    return out


@dataclass
class OutputationAccumulator:
    """Streaming means of coefficients and covariances across outputations.

    Keeps the running mean of the coefficient vectors and of the
    per-outputation sandwich covariances, plus the centered sum of outer
    products whose divisor (count - 1) gives the between-outputation
    sample covariance.  ``merge`` combines two partial streams with the
    pairwise update formulas, so parallel workers can aggregate privately
    and combine at the end.

    ``n_failed`` counts absorbed fits that did not converge; fits that
    were excluded outright (singular design even after the retry draw)
    are counted in ``n_excluded`` and contribute nothing to the means.
    """

    p: int
    key: Optional[tuple] = None
    track_bc: bool = False
    count: int = 0
    mean_beta: np.ndarray = field(default=None)
    mean_sigma: np.ndarray = field(default=None)
    comoment: np.ndarray = field(default=None)
    mean_sigma_bc: Optional[np.ndarray] = field(default=None)
    n_failed: int = 0
    n_excluded: int = 0

    def __post_init__(self):
        if self.mean_beta is None:
            self.mean_beta = np.zeros(self.p)
        if self.mean_sigma is None:
            self.mean_sigma = np.zeros((self.p, self.p))
        if self.comoment is None:
            self.comoment = np.zeros((self.p, self.p))
        if self.track_bc and self.mean_sigma_bc is None:
            self.mean_sigma_bc = np.zeros((self.p, self.p))

    def absorb(self, beta, sigma, sigma_bc=None, converged: bool = True) -> None:
        """Fold one outputation's fit into the running aggregates."""
        beta = np.asarray(beta, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        self.count += 1
        delta = beta - self.mean_beta
        self.mean_beta = self.mean_beta + delta / self.count
        self.comoment = self.comoment + np.outer(delta, beta - self.mean_beta)
        self.mean_sigma = self.mean_sigma + (sigma - self.mean_sigma) / self.count
        if self.track_bc:
            if sigma_bc is None:
                raise ValueError("accumulator tracks bias-corrected covariances "
                                 "but none was supplied")
            self.mean_sigma_bc = self.mean_sigma_bc + (
                np.asarray(sigma_bc, dtype=np.float64) - self.mean_sigma_bc) / self.count
        if not converged:
            self.n_failed += 1

    @property
    def s2(self) -> np.ndarray:
        """Between-outputation sample covariance (divisor count - 1)."""
        if self.count < 2:
            raise ValueError("sample covariance needs at least two outputations")
        return self.comoment / (self.count - 1)


def merge(acc_a: OutputationAccumulator,
          acc_b: OutputationAccumulator) -> OutputationAccumulator:
    """Combine two partial streams as if absorbed sequentially.

    Both accumulators must have been built under the same plan/model
    settings; the result's aggregates equal sequential absorption of the
    union up to floating-point reordering (within 1e-12 relative).
    """
    if acc_a.p != acc_b.p or acc_a.key != acc_b.key or acc_a.track_bc != acc_b.track_bc:
        raise MergeError("accumulators were built under different settings")
    na, nb = acc_a.count, acc_b.count
    out = OutputationAccumulator(p=acc_a.p, key=acc_a.key, track_bc=acc_a.track_bc)
    out.n_failed = acc_a.n_failed + acc_b.n_failed
    out.n_excluded = acc_a.n_excluded + acc_b.n_excluded
    out.count = na + nb
    if na == 0:
        src = acc_b
    elif nb == 0:
        src = acc_a
    else:
        src = None
    if src is not None:
        out.mean_beta = src.mean_beta.copy()
        out.mean_sigma = src.mean_sigma.copy()
        out.comoment = src.comoment.copy()
        if out.track_bc:
            out.mean_sigma_bc = src.mean_sigma_bc.copy()
        return out
    n = na + nb
    delta = acc_b.mean_beta - acc_a.mean_beta
    out.mean_beta = acc_a.mean_beta + delta * (nb / n)
    out.comoment = (acc_a.comoment + acc_b.comoment
                    + np.outer(delta, delta) * (na * nb / n))
    out.mean_sigma = (na * acc_a.mean_sigma + nb * acc_b.mean_sigma) / n
    if out.track_bc:
        out.mean_sigma_bc = (na * acc_a.mean_sigma_bc + nb * acc_b.mean_sigma_bc) / n
    return out


def _subsample(data: ClusteredDataset, indices: np.ndarray):
    """Balanced (n, B) outcome and (n, B, p) covariate views for a draw."""
    rows = data.offsets[:-1][:, None] + indices
    return data.y[rows], data.X[rows]


def _effective_corr(corr: str, B: int) -> str:
    # a single observation per cluster has no within-cluster pairs
    return INDEPENDENCE if B == 1 else corr


def _settings_key(data: ClusteredDataset, plan: OutputationPlan, corr: str,
                  bias_correction: str) -> tuple:
    return (plan.B, plan.M, plan.master_seed,
            _effective_corr(corr, plan.B), bias_correction, data.p)


def _run_chunk(data: ClusteredDataset, plan: OutputationPlan, corr: str,
               bias_correction: str, k_lo: int, k_hi: int,
               key: tuple) -> OutputationAccumulator:
    corr_eff = _effective_corr(corr, plan.B)
    track_bc = bias_correction != "none"
    acc = OutputationAccumulator(p=data.p, key=key, track_bc=track_bc)
    n_sub = data.n * plan.B
    for k in range(k_lo, k_hi):
        fit = None
        for salt in (0, 1):
            idx = _draw_matrix(plan.master_seed, k, data.sizes, plan.B, salt=salt)
            yb, Xb = _subsample(data, idx)
            try:
                fit = _fit_grouped([(plan.B, yb, Xb)], n_sub, data.p,
                                   corr=corr_eff, bias_correction=bias_correction)
                break
            except SingularDesignError:
                fit = None
        if fit is None:
            acc.n_excluded += 1
            continue
        acc.absorb(fit.beta, fit.sigma, sigma_bc=fit.sigma_bc,
                   converged=fit.converged)
    return acc


def _chunk_task(args):
    return _run_chunk(*args)


def run_outputations(data: ClusteredDataset, plan: OutputationPlan,
                     corr: str = INDEPENDENCE, bias_correction: str = "none",
                     workers: int = 1) -> OutputationAccumulator:
    """Run plan.M outputations and aggregate their fits.

    B = 1 always fits under independence (there are no within-cluster
    pairs to weight).  A fit whose subsampled design is singular is
    retried once on a derived draw stream; if that also fails the
    outputation is excluded from the aggregates.  Non-converged fits are
    absorbed but tallied in ``n_failed``.

    ``workers`` > 1 distributes fixed-size chunks of the k-range over
    processes; results are identical to ``workers=1`` because chunk
    accumulators are merged in chunk order.
    """
    small = np.flatnonzero(data.sizes < plan.B)
    if small.size:
        bad = [data.ids[i] for i in small]
        raise SizeViolationError(
            f"B={plan.B} exceeds the size of clusters {bad}", clusters=bad)
    key = _settings_key(data, plan, corr, bias_correction)
    bounds = list(range(0, plan.M, _CHUNK)) + [plan.M]
    tasks = [(data, plan, corr, bias_correction, lo, hi, key)
             for lo, hi in zip(bounds[:-1], bounds[1:])]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_task, tasks))
    else:
        parts = [_run_chunk(*t) for t in tasks]
    acc = parts[0]
    for part in parts[1:]:
        acc = merge(acc, part)
    if acc.n_excluded > 0.01 * plan.M:
        warnings.warn(
            f"{acc.n_excluded} of {plan.M} outputations were excluded "
            f"after repeated singular-design failures", stacklevel=2)
    return acc


@dataclass(frozen=True)
class EnumerationSummary:
    """Exact aggregates over every possible outputation.

    ``s2`` carries the population divisor (equal weight per combination),
    the limit of the sampled between-outputation covariance.
    """

    count: int
    beta_bar: np.ndarray
    sigma_bar: np.ndarray
    s2: np.ndarray


def enumerate_all_outputations(data: ClusteredDataset, B: int,
                               corr: str = INDEPENDENCE,
                               cap: int = 10 ** 6) -> EnumerationSummary:
    """Visit every per-cluster B-subset combination exactly once.

    Combinations are enumerated in mixed-radix order (last cluster
    fastest, lexicographic subsets within a cluster) and averaged with
    equal weight.  Refuses to start when the combination count
    prod(comb(m_i, B)) exceeds ``cap``.
    """
    sizes = data.sizes
    small = np.flatnonzero(sizes < B)
    if small.size:
        bad = [data.ids[i] for i in small]
        raise SizeViolationError(
            f"B={B} exceeds the size of clusters {bad}", clusters=bad)
    total = math.prod(math.comb(int(m), B) for m in sizes)
    if total > cap:
        raise EnumerationLimitError(
            f"{total} combinations exceed the cap of {cap}", count=total)
    corr_eff = _effective_corr(corr, B)
    per_cluster = [list(itertools.combinations(range(int(m)), B)) for m in sizes]
    acc = OutputationAccumulator(p=data.p)
    n_sub = data.n * B
    idx = np.empty((data.n, B), dtype=np.int64)
    for combo in itertools.product(*per_cluster):
        for i, subset in enumerate(combo):
            idx[i] = subset
        yb, Xb = _subsample(data, idx)
        fit = _fit_grouped([(B, yb, Xb)], n_sub, data.p, corr=corr_eff)
        acc.absorb(fit.beta, fit.sigma)
    return EnumerationSummary(count=acc.count, beta_bar=acc.mean_beta,
                              sigma_bar=acc.mean_sigma,
                              s2=acc.comoment / acc.count)
