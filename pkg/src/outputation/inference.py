"""Variance estimators and Wald inference for outputation averages.

Two variance estimates for the averaged coefficient vector:

* moment-based: mean per-outputation sandwich minus the
  between-outputation sample covariance.  Unbiased in the classical
  decomposition but not sign-constrained; its diagonal can come out
  negative when the two terms nearly cancel (large clusters, modest
  number of outputations), so negative entries are flagged and never
  silently clipped.
* stabilized: mean sandwich scaled by the shrink factor
  (1/n) * sum_i B/m_i, which replaces the between-outputation covariance
  with its OLS-limit expectation.  Strictly positive on the diagonal
  whenever the mean sandwich is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import stats

from .engine import OutputationAccumulator
from .exceptions import CannotAssessError, InsufficientOutputationsError

NEG_POLICY_UNDEFINED = "undefined"
NEG_POLICY_FALLBACK = "fallback-stabilized"


def shrink_factor(B: int, sizes) -> float:
    """(1/n) * sum_i B/m_i; in (0, 1], equal to 1 iff B = m_i for all i."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if (sizes < B).any():
        raise ValueError("B exceeds some cluster size")
    return float(np.mean(B / sizes))


def _mean_sigma(acc: OutputationAccumulator, which: str) -> np.ndarray:
    if which == "plain":
        return acc.mean_sigma
    if which == "bias_corrected":
        if acc.mean_sigma_bc is None:
            raise ValueError("accumulator did not track bias-corrected covariances")
        return acc.mean_sigma_bc
    raise ValueError(f"unknown covariance selector {which!r}")


def moment_variance(acc: OutputationAccumulator, which: str = "plain"):
    """Mean sandwich minus between-outputation sample covariance.

    Returns (variance matrix, negativity flags); flag j is set when the
    j-th diagonal entry is <= 0.
    """
    if acc.count < 2:
        raise InsufficientOutputationsError(
            f"moment variance needs at least 2 outputations, have {acc.count}")
    var = _mean_sigma(acc, which) - acc.s2
    return var, np.diag(var) <= 0.0


def stabilized_variance(acc: OutputationAccumulator, B: int, sizes,
                        which: str = "plain") -> np.ndarray:
    """Mean sandwich scaled by the shrink factor (1/n) * sum B/m_i.

    The same scalar multiplies every entry, so the result inherits the
    mean sandwich's positive diagonal.
    """
    if acc.count < 1:
        raise InsufficientOutputationsError("empty accumulator")
    return _mean_sigma(acc, which) * shrink_factor(B, sizes)


def overlap_probability_exact(b: int, B: int, m: int) -> Fraction:
    """P(|J cap J'| = b) for two independent B-subsets of an m-set.

    Exact hypergeometric mass C(B,b) * C(m-B, B-b) / C(m,B).
    """
    if not (0 <= b <= B <= m):
        raise ValueError(f"need 0 <= b <= B <= m, got b={b}, B={B}, m={m}")
    return Fraction(math.comb(B, b) * math.comb(m - B, B - b), math.comb(m, B))


def overlap_probability(b: int, B: int, m: int) -> float:
    """Float value of :func:`overlap_probability_exact`."""
    return float(overlap_probability_exact(b, B, m))


def outputations_for_ratio(ratio: float, delta: float = 0.02,
                           gamma: float = 0.95) -> int:
    """Outputations needed for one coordinate at spread ratio S^2/var.

    ceil((z_{(1+gamma)/2} / delta)^2 * ratio) from the normal
    approximation of the Monte Carlo error of the averaged coefficient.
    """
    if ratio < 0:
        raise ValueError("variance ratio must be nonnegative")
    z = stats.norm.ppf(0.5 * (1.0 + gamma))
    return math.ceil((z / delta) ** 2 * ratio)


def required_outputations(acc: OutputationAccumulator, B: int, sizes,
                          delta: float = 0.02, gamma: float = 0.95,
                          method: str = "stabilized",
                          which: str = "plain") -> int:
    """Outputation count that keeps the Monte Carlo error of the Wald
    statistic below ``delta`` with probability ``gamma``.

    Applied per coordinate against the chosen variance (stabilized by
    default); returns the maximum over coordinates.

    Raises
    ------
    CannotAssessError
        If the chosen variance is non-positive for some coordinate.
    """
    if acc.count < 2:
        raise InsufficientOutputationsError(
            f"need at least 2 outputations, have {acc.count}")
    if method == "stabilized":
        var = stabilized_variance(acc, B, sizes, which=which)
    elif method == "moment":
        var, _ = moment_variance(acc, which=which)
    else:
        raise ValueError(f"unknown variance method {method!r}")
    v = np.diag(var)
    s = np.diag(acc.s2)
    bad = np.flatnonzero(v <= 0.0)
    if bad.size:
        raise CannotAssessError(
            f"non-positive {method} variance for coordinates {bad.tolist()}",
            coordinates=bad.tolist())
    return max(outputations_for_ratio(float(sj / vj), delta, gamma)
               for sj, vj in zip(s, v))


@dataclass(frozen=True)
class WaldResult:
    """Coordinate-wise z statistics, two-sided p-values and CIs.

    Coordinates whose variance is non-positive report NaN throughout.
    """

    z: np.ndarray
    p: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray


def wald_inference(beta_bar, variance, level: float = 0.95) -> WaldResult:
    """Normal-theory tests of each coordinate against zero."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    beta_bar = np.asarray(beta_bar, dtype=np.float64)
    v = np.diag(np.asarray(variance, dtype=np.float64)).copy()
    ok = v > 0.0
    se = np.full_like(v, np.nan)
    se[ok] = np.sqrt(v[ok])
    z = beta_bar / se
    p = 2.0 * stats.norm.sf(np.abs(z))
    q = stats.norm.ppf(0.5 * (1.0 + level))
    return WaldResult(z=z, p=p, ci_low=beta_bar - q * se, ci_high=beta_bar + q * se)


@dataclass(frozen=True)
class MoInference:
    """Full inference record for one outputation run.

    ``var_moment`` may have non-positive diagonal entries; those
    coordinates are flagged in ``moment_negative``.  The Wald block
    (z, p, ci) is computed for ``method``; with the moment method and
    the ``fallback-stabilized`` policy, flagged coordinates use the
    stabilized variance instead and are listed in ``fallback_coords``.
    """

    B: int
    M: int
    beta_bar: np.ndarray
    sigma_bar: np.ndarray
    s2: np.ndarray
    var_moment: np.ndarray
    var_stabilized: np.ndarray
    moment_negative: np.ndarray
    shrink_factor: float
    method: str
    level: float
    z: np.ndarray
    p: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    var_moment_bc: Optional[np.ndarray] = None
    var_stabilized_bc: Optional[np.ndarray] = None
    fallback_coords: tuple = ()
    n_failed: int = 0
    n_excluded: int = 0


def mo_inference(acc: OutputationAccumulator, B: int, sizes,
                 method: str = "stabilized", level: float = 0.95,
                 neg_policy: str = NEG_POLICY_UNDEFINED,
                 which: str = "plain") -> MoInference:
    """Assemble both variance estimates and Wald inference for a run.

    ``which`` selects the per-outputation covariance stream feeding both
    estimators ("plain" sandwich or "bias_corrected").
    """
    if method not in ("stabilized", "moment"):
        raise ValueError(f"unknown variance method {method!r}")
    if neg_policy not in (NEG_POLICY_UNDEFINED, NEG_POLICY_FALLBACK):
        raise ValueError(f"unknown negative-variance policy {neg_policy!r}")
    var_moment, neg = moment_variance(acc, which=which)
    var_stab = stabilized_variance(acc, B, sizes, which=which)
    var_moment_bc = None
    var_stab_bc = None
    if acc.mean_sigma_bc is not None:
        var_moment_bc, _ = moment_variance(acc, which="bias_corrected")
        var_stab_bc = stabilized_variance(acc, B, sizes, which="bias_corrected")

    fallback = ()
    if method == "stabilized":
        chosen = var_stab
    else:
        chosen = var_moment.copy()
        if neg_policy == NEG_POLICY_FALLBACK and neg.any():
            idx = np.flatnonzero(neg)
            chosen[idx, idx] = var_stab[idx, idx]
            fallback = tuple(int(i) for i in idx)

    wald = wald_inference(acc.mean_beta, chosen, level=level)
    return MoInference(
        B=B, M=acc.count, beta_bar=acc.mean_beta, sigma_bar=acc.mean_sigma,
        s2=acc.s2, var_moment=var_moment, var_stabilized=var_stab,
        moment_negative=neg, shrink_factor=shrink_factor(B, sizes),
        method=method, level=level, z=wald.z, p=wald.p,
        ci_low=wald.ci_low, ci_high=wald.ci_high,
        var_moment_bc=var_moment_bc, var_stabilized_bc=var_stab_bc,
        fallback_coords=fallback, n_failed=acc.n_failed,
        n_excluded=acc.n_excluded)
