"""Reconstruction-quality metrics and batch assignment.

sMAPE is the headline number (bounded [0, 2], comparable across
datasets); MAE and MSE ride along. For batches larger than one the
reconstruction order is arbitrary, so samples are matched to ground truth
by the permutation minimizing mean sMAPE; identity-order numbers are
reported too so both conventions stay inspectable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

EXHAUSTIVE_MATCH_LIMIT = 8
_ZERO_EPS = 1e-12


class MetricError(ValueError):
    pass


def smape(actual: np.ndarray, predicted: np.ndarray) -> float:
    """Mean of 2|a-p| / (|a|+|p|); a term is 0 when both magnitudes vanish."""
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if a.shape != p.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {p.shape}")
    num = 2.0 * np.abs(a - p)
    den = np.abs(a) + np.abs(p)
    both_zero = (np.abs(a) < _ZERO_EPS) & (np.abs(p) < _ZERO_EPS)
    terms = np.where(both_zero, 0.0, num / np.where(both_zero, 1.0, den))
    return float(terms.mean())


def mae(actual: np.ndarray, predicted: np.ndarray) -> float:
    a, p = np.asarray(actual), np.asarray(predicted)
    if a.shape != p.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {p.shape}")
    return float(np.abs(a - p).mean())


def mse(actual: np.ndarray, predicted: np.ndarray) -> float:
    a, p = np.asarray(actual), np.asarray(predicted)
    if a.shape != p.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {p.shape}")
    return float(((a - p) ** 2).mean())


@dataclass
class MetricReport:
    smape_obs: float
    smape_tar: float
    mae_obs: float
    mae_tar: float
    mse_obs: float
    mse_tar: float
    permutation: tuple[int, ...]
    matching: str  # identity | exhaustive | greedy
    identity_smape_obs: float
    identity_smape_tar: float
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "smape_obs": self.smape_obs,
            "smape_tar": self.smape_tar,
            "mae_obs": self.mae_obs,
            "mae_tar": self.mae_tar,
            "mse_obs": self.mse_obs,
            "mse_tar": self.mse_tar,
            "permutation": list(self.permutation),
            "matching": self.matching,
            "identity_smape_obs": self.identity_smape_obs,
            "identity_smape_tar": self.identity_smape_tar,
            "per_sample": self.per_sample,
        }


def _pairwise_smape(recon_full: np.ndarray, true_full: np.ndarray) -> np.ndarray:
    b = recon_full.shape[0]
    cost = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            cost[i, j] = smape(true_full[i], recon_full[j])
    return cost


def _greedy_assignment(cost: np.ndarray) -> tuple[int, ...]:
    b = cost.shape[0]
    perm = [-1] * b
    free = set(range(b))
    order = sorted(
        ((cost[i, j], i, j) for i in range(b) for j in range(b)), key=lambda t: (t[0], t[1], t[2])
    )
    for c, i, j in order:
        if perm[i] == -1 and j in free:
            perm[i] = j
            free.discard(j)
    return tuple(perm)


def match_batch(
    recon_obs: np.ndarray,
    recon_tar: np.ndarray,
    true_obs: np.ndarray,
    true_tar: np.ndarray,
) -> MetricReport:
    """Assign reconstructed samples to ground truth, then score.

    ``permutation[i]`` is the reconstructed index matched to true sample
    i. Up to B=8 the search is exhaustive over mean sMAPE of the
    concatenated obs+tar sequences; beyond that a greedy assignment is
    used and flagged in the report.
    """
    b = true_obs.shape[0]
    if recon_obs.shape[0] != b or recon_tar.shape[0] != b or true_tar.shape[0] != b:
        raise MetricError("batch sizes differ between reconstruction and truth")
    recon_full = np.concatenate(
        [recon_obs.reshape(b, -1), recon_tar.reshape(b, -1)], axis=1
    )
    true_full = np.concatenate([true_obs.reshape(b, -1), true_tar.reshape(b, -1)], axis=1)

    identity = tuple(range(b))
    if b == 1:
        best, matching = identity, "identity"
    elif b <= EXHAUSTIVE_MATCH_LIMIT:
        cost = _pairwise_smape(recon_full, true_full)
        best = min(permutations(range(b)), key=lambda p: sum(cost[i, p[i]] for i in range(b)))
        matching = "exhaustive"
    else:
        cost = _pairwise_smape(recon_full, true_full)
        best = _greedy_assignment(cost)
        matching = "greedy"

    def side_metrics(perm):
        ro = recon_obs[list(perm)]
        rt = recon_tar[list(perm)]
        return (
            smape(true_obs, ro),
            smape(true_tar, rt),
            mae(true_obs, ro),
            mae(true_tar, rt),
            mse(true_obs, ro),
            mse(true_tar, rt),
        )

    s_obs, s_tar, a_obs, a_tar, q_obs, q_tar = side_metrics(best)
    id_obs, id_tar = smape(true_obs, recon_obs), smape(true_tar, recon_tar)
    per_sample = [
        {
            "true_index": i,
            "recon_index": int(best[i]),
            "smape_obs": smape(true_obs[i], recon_obs[best[i]]),
            "smape_tar": smape(true_tar[i], recon_tar[best[i]]),
        }
        for i in range(b)
    ]
    return MetricReport(
        smape_obs=s_obs,
        smape_tar=s_tar,
        mae_obs=a_obs,
        mae_tar=a_tar,
        mse_obs=q_obs,
        mse_tar=q_tar,
        permutation=tuple(int(i) for i in best),
        matching=matching,
        identity_smape_obs=id_obs,
        identity_smape_tar=id_tar,
        per_sample=per_sample,
    )
