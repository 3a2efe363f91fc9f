import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ebft.data import MarkovSource, generate_synthetic
from ebft.features import embed, feature_matrix, one_hot_features, snapshot_feature_network
from ebft.metrics import (CFMEstimate, PROFILE_COLUMNS, ProfilePoint, ce_eval, cfm_loss,
                          cfm_u_statistic, completion_distribution, context_feature_variance,
                          exact_cfm, exact_offset, fm_profile, strided_pairs, write_metrics_csv,
                          write_profile_csv)
from ebft.policy import TabularPolicy, TransformerPolicy

from ._oracles import lex_index, one_hot, population_profile, tuple_distribution


def peaked_policy(V, token):
    m = TabularPolicy(V, 1)
    m.params = m.params.copy()
    m.table[:] = -800.0
    m.table[:, token] = 800.0
    return m


# --- the U-statistic ------------------------------------------------------------


@given(st.integers(0, 2**31), st.sampled_from([2, 3]))
def test_u_statistic_unbiased_by_enumeration(seed, n):
    rng = np.random.default_rng(seed)
    N, d = 4, 3
    F = rng.standard_normal((N, d))
    q = rng.dirichlet(np.ones(N))
    psi = rng.standard_normal(d)
    mean = sum(w * cfm_u_statistic(F[list(t)], psi) for t, w in tuple_distribution(q, n))
    assert mean == pytest.approx(np.sum((q @ F - psi) ** 2), abs=1e-10)


def test_u_statistic_small_example():
    # two rollouts: <phi_1 - psi, phi_2 - psi>
    assert cfm_u_statistic([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]) == 0.0
    assert cfm_u_statistic([[1.0, 1.0], [2.0, 0.0]], [0.0, 0.0]) == 2.0


def test_u_statistic_needs_two():
    with pytest.raises(ValueError):
        cfm_u_statistic([[1.0]], [0.0])


# --- cfm_loss -----------------------------------------------------------------------


def test_deterministic_model_scores_zero():
    m = peaked_policy(3, 2)
    pairs = [((0, 1), (2, 2)), ((1,), (2, 2))]
    est = cfm_loss(m, pairs, one_hot_features(3, 2), n=3)
    assert est.value == 0.0 and est.m == 2 and est.G == 2


def test_estimate_within_three_se_of_enumeration():
    src = MarkovSource.random(3, 1, seed=4)
    corpus, _ = generate_synthetic(src, 30, 9, seed=1)
    pairs = strided_pairs(corpus.sequences, 2, 3)
    model = TabularPolicy.random(3, 1, scale=0.7, seed=2)
    spec = one_hot_features(3, 2)
    est = cfm_loss(model, pairs, spec, n=4, seed=5)
    exact = exact_cfm(model, pairs, spec)
    assert abs(est.value - exact) < 3 * est.stderr


def test_cfm_loss_reproducible_and_seed_sensitive():
    model = TabularPolicy.random(3, 1, seed=1)
    pairs = [((0,), (1, 2)), ((1, 2), (0, 0)), ((2,), (2, 1))]
    spec = one_hot_features(3, 2)
    a = cfm_loss(model, pairs, spec, seed=3)
    assert a == cfm_loss(model, pairs, spec, seed=3)
    assert a.value != cfm_loss(model, pairs, spec, seed=4).value


def test_cfm_loss_errors():
    model = TabularPolicy(3, 1)
    with pytest.raises(ValueError, match="empty"):
        cfm_loss(model, [], one_hot_features(3, 1))
    with pytest.raises(ValueError):
        cfm_loss(model, [((0,), (1,))], one_hot_features(3, 1), n=1)


def test_single_pair_has_infinite_stderr():
    est = cfm_loss(TabularPolicy(2, 1), [((0,), (1,))], one_hot_features(2, 1), n=2)
    assert est.m == 1 and math.isinf(est.stderr)


def test_exact_cfm_hand_value():
    # uniform over V=2, G=1: ||(1/2, 1/2) - e_y||^2 = 1/2
    assert exact_cfm(TabularPolicy(2, 1), [((0,), (1,))], one_hot_features(2, 1)) == pytest.approx(0.5)


def test_exact_cfm_is_offset_plus_fm_for_truth():
    # the conditional loss of the true model, averaged over y ~ p, is its offset
    src = MarkovSource.random(2, 1, seed=3)
    spec = one_hot_features(2, 2)
    c = (1, 0)
    p = src.completion_dist(c, 2)
    pairs_weighted = sum(p[lex_index(y, 2)] * exact_cfm(src.as_policy(), [(c, y)], spec)
                         for y in itertools.product(range(2), repeat=2))
    assert pairs_weighted == pytest.approx(exact_offset(src, [c], spec, 2), abs=1e-12)
    assert exact_offset(src, [c], spec, 2) == pytest.approx(1 - np.sum(p**2), abs=1e-12)


def test_completion_distribution_policy_and_source_agree():
    src = MarkovSource.random(3, 1, seed=0)
    a = completion_distribution(src, (2, 1), 3)
    b = completion_distribution(src.as_policy(), (2, 1), 3)
    assert np.allclose(a, b, atol=1e-12) and a.sum() == pytest.approx(1.0)


# --- profiles -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def profile_setup():
    src = MarkovSource.random(2, 1, concentration=1.0, floor=0.05, seed=5)
    corpus, _ = generate_synthetic(src, 30, 25, seed=2)
    net = TransformerPolicy(2, depth=2, width=16, heads=2, max_len=32, seed=7)
    spec = snapshot_feature_network(net, window=4)
    return src, corpus.sequences, spec


def test_profile_columns_and_offsets(profile_setup):
    src, seqs, spec = profile_setup
    pts = fm_profile(src.as_policy(), seqs, spec, [1, 2, 4], stride=4, n=3, truth=src)
    assert [p.G for p in pts] == [1, 2, 4]
    assert all(p.offset is not None and p.offset >= 0 for p in pts)
    assert all(p.m == len(strided_pairs(seqs, p.G, 4)) for p in pts)


def test_profile_single_g_is_cfm_loss(profile_setup):
    src, seqs, spec = profile_setup
    model = src.as_policy()
    (pt,) = fm_profile(model, seqs, spec, [2], stride=4, n=3, seed=10)
    est = cfm_loss(model, strided_pairs(seqs, 2, 4), spec, n=3, seed=12)
    assert (pt.cfm, pt.stderr) == (est.value, est.stderr)


def test_population_profile_monotone_and_bounded(profile_setup):
    src, _, spec = profile_setup
    offsets, bound = population_profile(src, spec, 4, [1, 2, 3, 4])
    assert all(a <= b + 1e-12 for a, b in zip(offsets, offsets[1:]))
    assert offsets[-1] <= bound + 1e-12


def test_context_variance_matches_direct_computation(profile_setup):
    _, seqs, spec = profile_setup
    contexts = [c for c, _ in strided_pairs(seqs, 4, 4)]
    F = np.stack([feature_matrix(spec, [(c, ())])[0] for c in contexts])
    assert context_feature_variance(spec, contexts) == pytest.approx(F.var(0).sum(), abs=1e-12)


def test_profile_rejects_long_g(profile_setup):
    src, seqs, spec = profile_setup
    with pytest.raises(ValueError, match="max G"):
        fm_profile(src.as_policy(), seqs, spec, [1, 30], stride=4)


def test_context_variance_needs_last_token_network():
    with pytest.raises(ValueError):
        context_feature_variance(one_hot_features(2, 1), [(0,), (1,)])


# --- cross-entropy ----------------------------------------------------------------------


def test_ce_uniform():
    assert ce_eval(TabularPolicy(4, 1), [((0,), (1, 2))]) == pytest.approx(2 * math.log(4), rel=1e-14)


def test_ce_deterministic_correct():
    assert ce_eval(peaked_policy(3, 1), [((0,), (1, 1, 1))]) == 0.0


def test_ce_matches_enumeration_weighted():
    model = TabularPolicy.random(3, 1, seed=9)
    src = MarkovSource.random(3, 1, seed=1)
    c = (2,)
    p = src.completion_dist(c, 2)
    q = completion_distribution(model, c, 2)
    ys = list(itertools.product(range(3), repeat=2))
    weighted = sum(p[i] * ce_eval(model, [(c, y)]) for i, y in enumerate(ys))
    assert weighted == pytest.approx(-p @ np.log(q), abs=1e-12)


def test_ce_empty():
    with pytest.raises(ValueError):
        ce_eval(TabularPolicy(2, 1), [])


# --- CSV ------------------------------------------------------------------------------


def test_profile_csv(tmp_path):
    path = tmp_path / "p.csv"
    write_profile_csv(path, [ProfilePoint(1, 0.5, 0.1, 0.25), ProfilePoint(2, 0.75, 0.125)])
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == PROFILE_COLUMNS
    assert rows[1] == ["1", "0.5", "0.1", "0.25"] and rows[2][3] == ""


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [(0, "cfm", 1.5, 0.2)])
    assert open(path).read().splitlines() == ["step,metric,value,stderr", "0,cfm,1.5,0.2"]


def test_estimate_fields():
    e = CFMEstimate(0.1, 0.01, 2, 5, 4)
    assert (e.G, e.m, e.n) == (2, 5, 4)


def test_one_hot_features_use_joint_index():
    spec = one_hot_features(2, 2)
    assert np.array_equal(embed(spec, (0,), (1, 0)).values, one_hot(lex_index((1, 0), 2), 4))
