import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from ebft.policy import (TabularPolicy, TransformerPolicy, _softmax, log_prob, next_token_dist,
                         sample_completions)
from ebft.rollouts import (CapacityError, EmptyPlanError, InterleavedBuffer, build_mask,
                           deinterleave, gather_pairs, interleave, masked_next_logits,
                           parallel_sample, plan_strides, positions)

# Published grid for T=12, s=4, G=4 at the fourth call (1 = attend).
FIGURE_ROWS = [
    "10000000000000",
    "11000000000000",
    "11100000000000",
    "11110000000000",
    "11111000000000",
    "11111100000000",
    "11111110000000",
    "11111111000000",
    "11110000100000",
    "11111111010000",
    "11110000101000",
    "11111111010100",
    "11110000101010",
    "11111111010101",
]


# --- plans -------------------------------------------------------------------


def test_plan_example():
    plan = plan_strides(12, 4, 4)
    seq = list(range(12))
    assert plan.B == 2
    assert plan.pairs(seq) == [(tuple(range(4)), (4, 5, 6, 7)), (tuple(range(8)), (8, 9, 10, 11))]


def test_plan_boundary():
    plan = plan_strides(5, 1, 4)
    assert plan.B == 1 and plan.pairs([0, 1, 2, 3, 4]) == [((0,), (1, 2, 3, 4))]


@pytest.mark.parametrize("T,s,G", [(4, 2, 4), (3, 1, 5), (5, 4, 2)])
def test_plan_too_short(T, s, G):
    with pytest.raises(EmptyPlanError):
        plan_strides(T, s, G)


def test_plan_rejects_bad_arguments():
    with pytest.raises(ValueError):
        plan_strides(10, 0, 2)
    with pytest.raises(ValueError):
        plan_strides(10, 2, 0)


@given(st.integers(2, 60), st.integers(1, 8), st.integers(1, 8))
def test_plan_pairs_are_strided_windows(T, s, G):
    if T <= G or (T - G) // s == 0:
        return
    plan = plan_strides(T, s, G)
    seq = list(range(T))
    for b, (c, y) in enumerate(plan.pairs(seq), start=1):
        assert len(c) == b * s and y == tuple(range(b * s, b * s + G))
    assert plan.anchors[-1] + G <= T


# --- masks -----------------------------------------------------------------------


def test_figure_grid_reproduced():
    m = build_mask(plan_strides(12, 4, 4), 3)
    assert m.side == 14
    assert ["".join("1" if a else "0" for a in row) for row in m.allowed] == FIGURE_ROWS


def test_grid_text_layout():
    grid = build_mask(plan_strides(12, 4, 4), 3).to_grid().splitlines()
    assert len(grid) == 14 + 3
    assert grid[0].split() == ["0"] + ["inf"] * 7 + ["|", "inf", "inf"] * 3


def test_first_call_single_branch_is_causal():
    plan = plan_strides(6, 5, 1)
    m = build_mask(plan, 0)
    assert m.side == 5 and np.array_equal(m.allowed, np.tril(np.ones((5, 5), dtype=bool)))
    m1 = build_mask(plan_strides(8, 5, 2), 1)
    assert m1.side == 6 and m1.allowed[5].all()


def test_call_index_range():
    plan = plan_strides(12, 4, 4)
    with pytest.raises(ValueError):
        build_mask(plan, 4)
    with pytest.raises(ValueError):
        build_mask(plan, -1)


def test_additive_form():
    add = build_mask(plan_strides(12, 4, 4), 2).additive
    assert set(np.unique(add)) == {0.0, -np.inf}


def branch_of(plan, col):
    """Branch owning a column: 0 for the shared prefix."""
    if col < plan.prefix_len:
        return 0
    return (col - plan.prefix_len) % plan.B + 1


def test_branch_isolation_exhaustive():
    for B, G, s in itertools.product(range(1, 5), range(1, 5), range(1, 4)):
        plan = plan_strides(B * s + G, s, G)
        assert plan.B == B
        for g in range(G):
            m = build_mask(plan, g)
            for i in range(plan.prefix_len, m.side):
                b = branch_of(plan, i)
                for j in np.flatnonzero(m.allowed[i]):
                    owner = branch_of(plan, j)
                    if owner == 0:
                        assert j < b * s
                    else:
                        assert owner == b and j <= i


def test_positions_continue_each_branch():
    plan = plan_strides(12, 4, 4)
    assert positions(plan, 2).tolist() == list(range(8)) + [4, 8, 5, 9]


# --- interleaving ------------------------------------------------------------------


def test_interleave_example():
    tokens = interleave([[10, 11], [20, 21], [30, 31]])
    assert tokens == [10, 20, 30, 11, 21, 31]
    assert deinterleave(tokens, 3, 2)[1] == (20, 21)


def test_single_branch_gather_is_identity():
    plan = plan_strides(6, 2, 3)
    seq = [0, 1, 2, 3, 4, 5]
    out = gather_pairs(plan, seq, InterleavedBuffer([3, 1, 2], 1, 3))
    assert out == [((0, 1), (2, 3, 4), (3, 1, 2))]


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31))
def test_interleave_round_trip(B, G, seed):
    rng = np.random.default_rng(seed)
    branches = rng.integers(0, 50, size=(B, G)).tolist()
    flat = interleave(branches)
    assert [list(b) for b in deinterleave(flat, B, G)] == branches


def test_deinterleave_length_check():
    with pytest.raises(ValueError):
        deinterleave([1, 2, 3], 2, 2)


def test_incomplete_buffer_rejected():
    plan = plan_strides(8, 2, 2)
    with pytest.raises(ValueError, match="incomplete"):
        gather_pairs(plan, list(range(8)), InterleavedBuffer([0, 1], 3, 2))


# --- sampling -------------------------------------------------------------------------


def small(seed=0, V=5, max_len=40):
    return TransformerPolicy(V, depth=2, width=8, heads=2, max_len=max_len, seed=seed)


def check_logit_equivalence(model, plan, seq, seed):
    """Masked logits at every call against a plain forward pass per branch."""
    rng = np.random.default_rng(seed)
    gen = [[] for _ in range(plan.B)]
    worst = 0.0
    for _ in range(plan.gen_len):
        masked = masked_next_logits(model, plan, seq, gen)
        for b in range(plan.B):
            ref = model.logits(list(seq[: (b + 1) * plan.stride]) + gen[b])
            worst = max(worst, np.abs(masked[b] - ref).max())
        for b in range(plan.B):
            gen[b].append(int(rng.integers(0, model.vocab.size)))
    return worst


def test_masked_logits_match_sequential_20_seeds():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        B, G, s = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
        plan = plan_strides(B * s + G, s, G)
        seq = rng.integers(0, 5, size=plan.T).tolist()
        worst = max(worst, check_logit_equivalence(small(seed), plan, seq, seed))
    assert worst < 1e-5


def test_parallel_uses_g_forward_calls_and_records_logprobs():
    model = small(1)
    plan = plan_strides(14, 3, 5)
    seq = list(np.random.default_rng(0).integers(0, 5, size=14))
    buf, lps = parallel_sample(model, plan, seq, seed=4)
    assert buf.forward_calls == 5 and buf.complete
    for (c, _, yhat), lp in zip(gather_pairs(plan, seq, buf), lps):
        assert lp.total == pytest.approx(log_prob(model, c, yhat).total, abs=1e-9)


@pytest.mark.parametrize("kind", ["tabular", "transformer"])
def test_single_branch_matches_sample_completions(kind):
    model = TabularPolicy.random(4, 2, seed=3) if kind == "tabular" else small(2, V=4)
    seq = [1, 2, 3, 0, 1, 2, 3]
    plan = plan_strides(7, 3, 4)
    for seed in range(5):
        buf, _ = parallel_sample(model, plan, seq, temperature=0.8, seed=seed)
        ref = sample_completions(model, seq[:3], 4, 1, temperature=0.8, seed=seed)[0]
        assert tuple(buf.tokens) == tuple(ref.tokens)


def test_tabular_branch_distribution_is_sequential_chain():
    model = TabularPolicy.random(3, 1, seed=6)
    plan = plan_strides(7, 2, 3)
    seq = [2, 0, 1, 1, 0, 2, 1]
    for b in range(plan.B):
        c = seq[: (b + 1) * 2]
        for y in itertools.product(range(3), repeat=3):
            gen = [[] for _ in range(plan.B)]
            prob = 1.0
            for t, tok in enumerate(y):
                prob *= _softmax(masked_next_logits(model, plan, seq, gen)[b], 1.0)[tok]
                for bb in range(plan.B):
                    gen[bb].append(tok)
            chain = 1.0
            for t, tok in enumerate(y):
                chain *= next_token_dist(model, list(c) + list(y[:t]))[tok]
            assert prob == chain


def test_transformer_branch_marginal_chi_square():
    model = small(3, V=3)
    plan = plan_strides(6, 2, 2)
    seq = [0, 1, 2, 0, 1, 2]
    counts = np.zeros((plan.B, 9))
    for seed in range(1500):
        buf, _ = parallel_sample(model, plan, seq, seed=seed)
        for b, y in enumerate(deinterleave(buf.tokens, plan.B, 2)):
            counts[b, y[0] * 3 + y[1]] += 1
    for b in range(plan.B):
        c = seq[: (b + 1) * 2]
        expect = np.array([np.exp(log_prob(model, c, y).total)
                           for y in itertools.product(range(3), repeat=2)]) * 1500
        assert stats.chisquare(counts[b], expect).pvalue > 1e-3


def test_independent_passes_differ_per_seed():
    model = small(4)
    plan = plan_strides(12, 2, 4)
    seq = [1] * 12
    draws = {tuple(parallel_sample(model, plan, seq, seed=k)[0].tokens) for k in range(6)}
    assert len(draws) > 1


def test_capacity_error():
    model = small(0, max_len=10)
    with pytest.raises(CapacityError):
        parallel_sample(model, plan_strides(12, 4, 4), list(range(5)) * 2 + [0, 1])
