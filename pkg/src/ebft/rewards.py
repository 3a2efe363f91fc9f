"""Feature-matching rewards, leave-one-out baselines, and the REINFORCE estimate."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .policy import Policy

log = logging.getLogger(__name__)


class BaselineUnavailable(ValueError):
    """The corrected leave-one-out baseline needs n >= 3."""


@dataclass
class RewardSet:
    rewards: np.ndarray
    alignment: np.ndarray
    diversity: np.ndarray
    alpha: float = 1.0
    baselines: np.ndarray | None = None
    # pairwise kernel entering the diversity term; needed to build baselines
    kernel: np.ndarray | None = field(default=None, repr=False)
    variant: str = "none"
    degenerate: int = 0

    @property
    def n(self) -> int:
        return len(self.rewards)

    @property
    def advantages(self) -> np.ndarray:
        if self.baselines is None:
            return self.rewards.copy()
        return self.rewards - self.baselines

    def diagnostics(self) -> dict:
        return {
            "AT": self.alignment.tolist(),
            "DT": self.diversity.tolist(),
            "b": (self.baselines if self.baselines is not None else np.zeros(self.n)).tolist(),
            "r": self.rewards.tolist(),
        }


@dataclass
class GradientEstimate:
    vector: np.ndarray
    n: int
    context_id: int | None = None


def _check(features, gt):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if features.shape[1] != gt.size:
        raise ValueError(f"dimension mismatch: rollouts d={features.shape[1]}, ground truth d={gt.size}")
    return features, gt


def diversity_from_kernel(kernel: np.ndarray) -> np.ndarray:
    n = kernel.shape[0]
    off = kernel.sum(1) - np.diag(kernel)
    return 2.0 / (n - 1) * off


def fm_rewards(features, gt, alpha: float = 1.0) -> RewardSet:
    """r_j = 2<phi_j, psi> - alpha * 2/(n-1) sum_{j' != j} <phi_j, phi_j'>."""
    features, gt = _check(features, gt)
    n = features.shape[0]
    if n < 2:
        raise ValueError("diversity term needs n >= 2 rollouts")
    at = 2.0 * features @ gt
    K = features @ features.T
    dt = diversity_from_kernel(K)
    return RewardSet(at - alpha * dt, at, dt, alpha, kernel=K)


def rloo_from_terms(alignment: np.ndarray, kernel: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """Leave-one-out baseline for rewards AT_j - alpha * DT_j whose diversity
    term is built from ``kernel``. Every T2 term that involved rollout j is
    replaced by its (n-2)-sample version without j."""
    n = len(alignment)
    if n < 3:
        raise BaselineUnavailable(f"leave-one-out correction needs n >= 3, got {n}")
    dt = diversity_from_kernel(kernel)
    b = np.empty(n)
    for j in range(n):
        others = [k for k in range(n) if k != j]
        t2_wo_j = (n - 1) / (n - 2) * dt[others] - 2.0 / (n - 2) * kernel[j, others]
        b[j] = np.mean(alignment[others] - alpha * t2_wo_j)
    return b


def rloo_baselines(features, gt, alpha: float = 1.0) -> np.ndarray:
    """b_j = 1/(n-1) sum_{j'!=j} T1_j' - alpha/(n-2) sum_{j'!=j} T2_j' + alpha/(n-2) T2_j."""
    features, gt = _check(features, gt)
    n = features.shape[0]
    if n < 3:
        raise BaselineUnavailable(f"leave-one-out correction needs n >= 3, got {n}")
    t1 = 2.0 * features @ gt
    t2 = diversity_from_kernel(features @ features.T)
    s1, s2 = t1.sum(), t2.sum()
    return (s1 - t1) / (n - 1) - alpha * (s2 - t2) / (n - 2) + alpha * t2 / (n - 2)


def attach_baselines(rs: RewardSet, use_baseline: bool = True) -> RewardSet:
    """Fill ``rs.baselines``; falls back to zeros (with a warning) when n == 2."""
    if not use_baseline:
        rs.baselines = np.zeros(rs.n)
        return rs
    if rs.n >= 3 and np.all(rs.alignment == rs.alignment[0]) and np.all(rs.kernel == rs.kernel[0, 0]):
        # interchangeable rollouts: the baseline equals the reward, set it exactly
        rs.baselines = rs.rewards.copy()
        return rs
    try:
        rs.baselines = rloo_from_terms(rs.alignment, rs.kernel, rs.alpha)
    except BaselineUnavailable:
        log.warning("n=%d rollouts: leave-one-out baseline unavailable, using zero baseline", rs.n)
        rs.baselines = np.zeros(rs.n)
    return rs


def reinforce_gradient(policy: Policy, context, completions, rs: RewardSet,
                       clip: float | None = None, context_id: int | None = None) -> GradientEstimate:
    """-(1/n) sum_j grad log p(y_j | c) (r_j - b_j): the gradient of the loss."""
    if len(completions) != rs.n:
        raise ValueError(f"{len(completions)} rollouts but {rs.n} rewards")
    adv = rs.advantages
    if clip is not None:
        adv = np.clip(adv, -clip, clip)
    n = rs.n
    if not np.any(adv):
        return GradientEstimate(np.zeros(policy.num_params), n, context_id)
    vec = policy.grad_weighted(context, completions, -adv / n)
    return GradientEstimate(vec, n, context_id)
