"""Probabilistic verification: CRPS (ensemble and Gaussian closed forms),
spread, skill, spread-skill binning, SSRAT and SSREL.

Spread is the predictive standard deviation, skill the RMSE of the
predictive mean. SSRAT is the global RMS-spread / RMSE ratio (ideal 1);
SSREL aggregates the binned |spread - skill| gaps (ideal 0).
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import ContractViolation


def crps_ensemble(members, truth):
    """CRPS of an equiprobable ensemble against a scalar truth per cell.

    members: (..., M); truth: (...). Returns an array of shape (...).
    Uses the sorted-member identity for the pairwise term, O(M log M).
    """
    members = np.asarray(members, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if members.ndim == 0 or members.shape[-1] < 1:
        raise ContractViolation("crps_ensemble: need at least one member")
    M = members.shape[-1]
    term1 = np.mean(np.abs(truth[..., None] - members), axis=-1)
    srt = np.sort(members, axis=-1)
    # sum_{i<j} (x_(j) - x_(i)) = sum_i (2i + 1 - M) x_(i), i zero-based
    coeff = 2.0 * np.arange(M) + 1.0 - M
    pairwise = np.sum(coeff * srt, axis=-1)  # = sum_{ij} |x_i - x_j| / 2 * 2
    term2 = pairwise / (M * M)
    return term1 - term2


def crps_gaussian(mu, sigma, truth):
    """Closed-form CRPS of a Gaussian N(mu, sigma²) forecast."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractViolation("crps_gaussian: sigma must be positive")
    z = (truth - mu) / sigma
    return sigma * (z * (2.0 * norm.cdf(z) - 1.0)
                    + 2.0 * norm.pdf(z) - 1.0 / np.sqrt(np.pi))


@dataclass
class SpreadSkillTable:
    bin_lo: np.ndarray
    bin_hi: np.ndarray
    mean_spread: np.ndarray   # RMS spread per bin
    skill: np.ndarray         # RMSE per bin
    count: np.ndarray
    ssrat: float
    ssrel: float
    dropped_bins: int = 0

    def rows(self):
        for lo, hi, sp, sk, c in zip(self.bin_lo, self.bin_hi,
                                     self.mean_spread, self.skill, self.count):
            yield lo, hi, sp, sk, int(c)


def spread_skill(spread, mean, truth, n_bins=20, weighted=True):
    """Bin cells by spread (equal-count bins) and compare binned spread
    against binned skill.

    spread, mean, truth: flat arrays over cells. SSRAT = RMS spread / RMSE
    globally; SSREL sums per-bin |spread - skill|, count-weighted by
    default. Empty bins are dropped and counted in `dropped_bins`.
    """
    spread = np.asarray(spread, dtype=np.float64).ravel()
    mean = np.asarray(mean, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if spread.size == 0:
        raise ContractViolation("spread_skill: no cells")
    if not (spread.size == mean.size == truth.size):
        raise ContractViolation("spread_skill: length mismatch")
    if n_bins < 1:
        raise ContractViolation("spread_skill: n_bins must be >= 1")

    err2 = (mean - truth) ** 2
    rmse = float(np.sqrt(np.mean(err2)))
    rms_spread = float(np.sqrt(np.mean(spread ** 2)))
    ssrat = rms_spread / rmse if rmse > 0 else np.inf

    qs = np.linspace(0.0, 1.0, n_bins + 1)
    edges = np.quantile(spread, qs)
    edges[0] -= 1e-12
    edges[-1] += 1e-12
    idx = np.clip(np.searchsorted(edges, spread, side="right") - 1, 0, n_bins - 1)

    lo, hi, sp_b, sk_b, cnt = [], [], [], [], []
    dropped = 0
    for b in range(n_bins):
        sel = idx == b
        c = int(np.count_nonzero(sel))
        if c == 0:
            dropped += 1
            continue
        lo.append(edges[b])
        hi.append(edges[b + 1])
        sp_b.append(np.sqrt(np.mean(spread[sel] ** 2)))
        sk_b.append(np.sqrt(np.mean(err2[sel])))
        cnt.append(c)
    lo, hi = np.asarray(lo), np.asarray(hi)
    sp_b, sk_b, cnt = np.asarray(sp_b), np.asarray(sk_b), np.asarray(cnt)

    gaps = np.abs(sp_b - sk_b)
    if weighted:
        ssrel = float(np.sum(cnt / cnt.sum() * gaps))
    else:
        ssrel = float(np.sum(gaps))

    return SpreadSkillTable(bin_lo=lo, bin_hi=hi, mean_spread=sp_b,
                            skill=sk_b, count=cnt, ssrat=float(ssrat),
                            ssrel=ssrel, dropped_bins=dropped)


def write_metrics_csv(path, metrics):
    with open(path, "w") as fh:
        fh.write("# assimlab metrics schema v1\n")
        fh.write("metric,value\n")
        for k, v in metrics.items():
            fh.write(f"{k},{v:.17g}\n")


def write_spread_skill_csv(path, table):
    with open(path, "w") as fh:
        fh.write("# assimlab spread-skill schema v1\n")
        fh.write("bin_lo,bin_hi,mean_spread,skill,count\n")
        for lo, hi, sp, sk, c in table.rows():
            fh.write(f"{lo:.17g},{hi:.17g},{sp:.17g},{sk:.17g},{c}\n")
