"""Evaluation: conditional feature-matching loss, FM profiles, validation CE."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import all_sequences
from .ebm import TiltResult, ebm_tilt_oracle  # noqa: F401  (re-exported)
from .features import FeatureMapSpec, feature_matrix
from .policy import Policy, sample_completions
from .rollouts import EmptyPlanError, plan_strides


@dataclass
class CFMEstimate:
    value: float
    stderr: float
    G: int
    m: int
    n: int


@dataclass
class ProfilePoint:
    G: int
    cfm: float
    stderr: float
    offset: float | None = None
    m: int = 0


def strided_pairs(sequences: Sequence[Sequence[int]], G: int, stride: int):
    """(context, completion) pairs from strided prefixes of each sequence."""
    pairs = []
    for seq in sequences:
        try:
            plan = plan_strides(len(seq), stride, G)
        except EmptyPlanError:
            continue
        pairs.extend(plan.pairs(seq))
    return pairs


def cfm_u_statistic(rollout_features, gt) -> float:
    """Unbiased estimate of ||E phi(y^) - psi||^2 from n >= 2 i.i.d. rollouts:
    the mean of <phi_i - psi, phi_j - psi> over ordered pairs i != j."""
    D = np.atleast_2d(rollout_features) - np.asarray(gt)
    n = D.shape[0]
    if n < 2:
        raise ValueError("the unbiased estimator needs n >= 2 rollouts")
    S = D.sum(0)
    return float((S @ S - np.einsum("ij,ij->", D, D)) / (n * (n - 1)))


def _seed(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def cfm_loss(model: Policy, pairs, spec: FeatureMapSpec, n: int = 4, seed: int = 0,
             temperature: float = 1.0) -> CFMEstimate:
    if not pairs:
        raise ValueError("empty held-out set")
    if n < 2:
        raise ValueError("cfm_loss needs n >= 2")
    G = len(pairs[0][1])
    spec = spec.for_gen_len(G)
    vals = np.empty(len(pairs))
    for i, (c, y) in enumerate(pairs):
        rolls = sample_completions(model, c, G, n, temperature, _seed(seed, i))
        feats = feature_matrix(spec, [(c, y)] + [(c, r.tokens) for r in rolls])
        vals[i] = cfm_u_statistic(feats[1:], feats[0])
    m = len(vals)
    se = float(vals.std(ddof=1) / np.sqrt(m)) if m >= 2 else float("inf")
    return CFMEstimate(float(vals.mean()), se, G, m, n)


def completion_distribution(dist, context, G: int) -> np.ndarray:
    """Exact p(y | c) over V^G (lexicographic) for a policy or a synthetic source."""
    if isinstance(dist, Policy):
        seqs = all_sequences(dist.vocab.size, G)
        return np.exp([dist.log_prob(context, y).total for y in seqs])
    return dist.completion_dist(context, G)


def _enumerated_features(spec, context, V, G):
    seqs = all_sequences(V, G)
    return feature_matrix(spec, [(context, y) for y in seqs])


def exact_cfm(model, pairs, spec: FeatureMapSpec) -> float:
    """E over pairs of ||E_{y^ ~ model}[phi] - phi(c:y)||^2 by enumeration."""
    V = spec.vocab_size if spec.kind == "one-hot" else spec.network.vocab.size
    G = len(pairs[0][1])
    spec = spec.for_gen_len(G)
    total = 0.0
    for c, y in pairs:
        F = _enumerated_features(spec, c, V, G)
        mu = completion_distribution(model, c, G) @ F
        psi = feature_matrix(spec, [(c, y)])[0]
        total += float(np.sum((mu - psi) ** 2))
    return total / len(pairs)


def exact_offset(truth, contexts, spec: FeatureMapSpec, G: int) -> float:
    """E_c Var[phi_c(y) | c] under the true conditionals, averaged over ``contexts``."""
    V = spec.vocab_size if spec.kind == "one-hot" else spec.network.vocab.size
    spec = spec.for_gen_len(G)
    total = 0.0
    for c in contexts:
        F = _enumerated_features(spec, c, V, G)
        p = completion_distribution(truth, c, G)
        mu = p @ F
        total += float(p @ np.einsum("ij,ij->i", F, F) - mu @ mu)
    return total / len(contexts)


def context_feature_variance(spec: FeatureMapSpec, contexts) -> float:
    """Var_c[phi(c)] = E||phi(c)||^2 - ||E phi(c)||^2 over the given contexts."""
    if spec.kind != "frozen-network" or spec.pooling != "last-token":
        raise ValueError("context features need a last-token network feature map")
    F = feature_matrix(spec, [(c, ()) for c in contexts])
    mu = F.mean(0)
    return float(np.einsum("ij,ij->", F, F) / len(F) - mu @ mu)


def fm_profile(model: Policy, sequences, spec: FeatureMapSpec, G_list, stride: int,
               n: int = 4, seed: int = 0, truth=None, temperature: float = 1.0) -> list[ProfilePoint]:
    """CFM estimate at each completion length; when ``truth`` is given the exact
    optimal offset E_c Var[phi_c(y)|c] is attached to every point."""
    G_list = list(G_list)
    min_len = min(len(s) for s in sequences)
    if max(G_list) >= min_len:
        raise ValueError(f"max G {max(G_list)} must be below the shortest sequence length {min_len}")
    out = []
    for G in G_list:
        pairs = strided_pairs(sequences, G, stride)
        est = cfm_loss(model, pairs, spec, n, seed + G, temperature)
        offset = exact_offset(truth, [c for c, _ in pairs], spec, G) if truth is not None else None
        out.append(ProfilePoint(G, est.value, est.stderr, offset, est.m))
    return out


def ce_eval(model: Policy, pairs) -> float:
    """Mean negative log-likelihood per completion (summed over its tokens)."""
    if not pairs:
        raise ValueError("empty held-out set")
    return float(np.mean([-model.log_prob(c, y).total for c, y in pairs]))


PROFILE_COLUMNS = ("G", "cfm", "stderr", "offset")
METRIC_COLUMNS = ("step", "metric", "value", "stderr")


def write_profile_csv(path, points: Sequence[ProfilePoint]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PROFILE_COLUMNS)
        for p in points:
            w.writerow([p.G, repr(p.cfm), repr(p.stderr), "" if p.offset is None else repr(p.offset)])


def write_metrics_csv(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow(row)
