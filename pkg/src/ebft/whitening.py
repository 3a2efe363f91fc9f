"""Per-context whitening of rollout features and the whitened reward variants.

Two normalizations of the second-moment matrix appear here:

* ``fit_whitener`` uses the empirical mean ``Sigma = (1/n) sum phi phi^T``;
  this is what the rewards use.
* ``whitened_features`` uses the unnormalized ``Phi Phi^T``. Under that
  scaling the whitened rollouts satisfy the clean multiplicity identities
  (<phi~_j, phi~_j'> = 1/n_k for repeats, 0 otherwise). The two differ by a
  factor sqrt(n).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .rewards import RewardSet, diversity_from_kernel

log = logging.getLogger(__name__)

SV_TOL = 1e-8
VARIANTS = ("basic", "i", "ii", "iii")


@dataclass
class WhitenTransform:
    factor: np.ndarray
    rank: int
    n: int
    singular_values: np.ndarray  # of the second-moment matrix, descending

    def __call__(self, x):
        return whiten(self, x)

    def diagnostics(self) -> dict:
        return {"rank": self.rank, "n": self.n, "singular_values": self.singular_values.tolist()}


def fit_whitener(features, weights=None, tol: float = SV_TOL) -> WhitenTransform:
    """(Sigma^+)^{1/2} for Sigma = sum_j w_j phi_j phi_j^T (default w_j = 1/n).

    Computed from the SVD of the weighted feature matrix rather than an
    eigendecomposition of Sigma. Singular values below ``tol * max`` are dropped.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n, d = features.shape
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    A = features.T * np.sqrt(w)
    U, S, _ = np.linalg.svd(A, full_matrices=False)
    if S.size == 0 or S[0] == 0:
        return WhitenTransform(np.zeros((d, d)), 0, n, S**2)
    keep = S > tol * S[0]
    Uk = U[:, keep]
    factor = (Uk / S[keep]) @ Uk.T
    return WhitenTransform(factor, int(keep.sum()), n, S**2)


def whiten(transform: WhitenTransform, x) -> np.ndarray:
    """Apply the factor to a vector (d,) or to row vectors (m, d)."""
    x = np.asarray(x, dtype=np.float64)
    d = transform.factor.shape[0]
    if x.shape[-1] != d:
        raise ValueError(f"dimension mismatch: feature d={x.shape[-1]}, whitener d={d}")
    return x @ transform.factor  # factor is symmetric


def second_moment(features, weights=None) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = features.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights)
    return (features.T * w) @ features


@dataclass
class WhitenedFeatures:
    phi: np.ndarray            # (n, d) whitened rollouts, one per row
    psi: np.ndarray            # (d,) whitened ground truth
    multiplicity: np.ndarray   # (n,) n_{k_j}
    group: np.ndarray          # (n,) distinct-feature index k_j
    K: int
    x_psi: np.ndarray          # (K,) projection coefficients of psi on the distinct features
    assumptions_hold: bool


def _groups(features, keys=None):
    if keys is None:
        keys = [row.tobytes() for row in features]
    else:
        keys = [tuple(k) for k in keys]
    first, group = {}, np.empty(len(keys), dtype=int)
    for j, k in enumerate(keys):
        group[j] = first.setdefault(k, len(first))
    counts = np.bincount(group)
    reps = [keys.index(k) for k in first]
    return group, counts, reps


def whitened_features(features, gt, keys=None, tol: float = SV_TOL) -> WhitenedFeatures:
    """Whitening with Phi Phi^T (no 1/n). ``keys`` (e.g. token tuples) decide
    which rollouts are repeats; by default exact feature equality is used."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    gt = np.asarray(gt, dtype=np.float64)
    n = features.shape[0]
    T = fit_whitener(features, weights=np.ones(n), tol=tol)
    group, counts, reps = _groups(features, keys)
    distinct = features[reps].T
    x_psi = np.linalg.lstsq(distinct, gt, rcond=None)[0]
    ok = n <= features.shape[1] and np.linalg.matrix_rank(distinct) == len(reps)
    if not ok:
        log.warning("whitening: distinct rollout features are not linearly independent (or n > d); "
                    "closed-form identities do not apply, using matrix-level values")
    return WhitenedFeatures(whiten(T, features), whiten(T, gt), counts[group], group,
                            len(reps), x_psi, bool(ok))


def _safe_div(num, den):
    ok = den > 0
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0), int(np.size(ok) - np.count_nonzero(ok))


def whitened_rewards(features, gt, variant: str = "i", alpha: float = 1.0,
                     tol: float = SV_TOL) -> RewardSet:
    """Rewards on whitened features (whitener treated as a constant).

    variant ``basic`` (alias ``none``): plain whitened dot products.
    ``i``: alignment cosine-normalized, diversity unnormalized.
    ``ii``: both terms cosine-normalized.
    ``iii``: alignment normalized by the whitened ground-truth norm only.
    A normalized term whose whitened norm is zero is set to 0 and counted in
    ``degenerate``.
    """
    if variant == "none":
        variant = "basic"
    if variant not in VARIANTS:
        raise ValueError(f"unknown whitening variant {variant!r}")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if features.shape[1] != gt.size:
        raise ValueError(f"dimension mismatch: rollouts d={features.shape[1]}, ground truth d={gt.size}")
    n = features.shape[0]
    if n < 2:
        raise ValueError("diversity term needs n >= 2 rollouts")
    T = fit_whitener(features, tol=tol)
    ft, gtt = whiten(T, features), whiten(T, gt)
    K = ft @ ft.T
    raw = ft @ gtt
    fnorm = np.sqrt(np.clip(np.diag(K), 0, None))
    gnorm = float(np.linalg.norm(gtt))
    bad = 0
    if variant == "basic":
        at = 2 * raw
    elif variant in ("i", "ii"):
        at, bad = _safe_div(2 * raw, fnorm * gnorm)
    else:
        at, bad = _safe_div(2 * raw, np.full(n, gnorm))
    if variant == "ii":
        K, b2 = _safe_div(K, np.outer(fnorm, fnorm))
        bad += b2
    dt = diversity_from_kernel(K)
    return RewardSet(at - alpha * dt, at, dt, alpha, kernel=K, variant=variant, degenerate=bad)


def whitened_fm_proxy(rs: RewardSet) -> float:
    """(1/n) sum_j (AT_j - DT_j / 2). Larger is better: up to a constant this
    is the negated whitened feature-matching loss."""
    return float(np.mean(rs.alignment - 0.5 * rs.diversity))


# ---------------------------------------------------------------------------
# population-level divergences on enumerable outcome spaces


def kl_divergence(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def chi2_divergence(p, q) -> float:
    """sum_y (p(y) - q(y))^2 / q(y)."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return float(np.sum((p - q) ** 2 / q))


def population_whitened_fm(p, q, features, tol: float = SV_TOL) -> float:
    """(mu_P - mu_Q)^T Sigma_Q^+ (mu_P - mu_Q) with Sigma_Q = E_Q[phi phi^T]."""
    features = np.asarray(features, dtype=np.float64)
    T = fit_whitener(features, weights=q, tol=tol)
    diff = whiten(T, (np.asarray(p) - np.asarray(q)) @ features)
    return float(diff @ diff)


def chi2_variational_objective(f, p, q) -> float:
    """2 (E_P f - E_Q f) - E_Q f^2."""
    f, p, q = (np.asarray(a, dtype=np.float64) for a in (f, p, q))
    return float(2 * (p @ f - q @ f) - q @ f**2)


def chi2_variational_sup(p, q) -> tuple[float, np.ndarray]:
    """Maximize the variational objective over all f with E_Q f = 0 by
    solving the KKT system of the concave quadratic program."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    N = p.size
    A = np.zeros((N + 1, N + 1))
    A[:N, :N] = 2 * np.diag(q)
    A[:N, N] = q
    A[N, :N] = q
    rhs = np.concatenate([2 * (p - q), [0.0]])
    f = np.linalg.solve(A, rhs)[:N]
    return chi2_variational_objective(f, p, q), f
