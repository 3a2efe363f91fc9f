"""Strided block-parallel rollouts.

A source sequence x[0:T] yields B = floor((T - G) / s) nested pairs
(c_b, y_b) = (x[0:b*s], x[b*s:b*s+G]). All B branches are continued at once:
call g feeds the shared prefix x[0:B*s] plus every token generated so far,
under a mask that lets a generated token see only its own anchor prefix and
its own branch. Generated token t of branch b takes position id b*s + t, the
position it would have in a sequential continuation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .policy import (LogProbRecord, Policy, TransformerPolicy, _log_softmax, _softmax, as_rng,
                     draw_token)


class EmptyPlanError(ValueError):
    """The sequence is too short to hold a single (context, completion) pair."""


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class StridedPlan:
    T: int
    stride: int
    gen_len: int

    @property
    def B(self) -> int:
        return (self.T - self.gen_len) // self.stride

    @property
    def anchors(self) -> list[int]:
        return [b * self.stride for b in range(1, self.B + 1)]

    @property
    def prefix_len(self) -> int:
        return self.B * self.stride

    def pairs(self, sequence: Sequence[int]) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        seq = tuple(int(t) for t in sequence)
        if len(seq) < self.T:
            raise ValueError(f"sequence length {len(seq)} < plan length {self.T}")
        return [(seq[:a], seq[a:a + self.gen_len]) for a in self.anchors]


def plan_strides(T: int, s: int, G: int) -> StridedPlan:
    if s < 1:
        raise ValueError("stride must be >= 1")
    if G < 1:
        raise ValueError("generation length must be >= 1")
    if T <= G:
        raise EmptyPlanError(f"T={T} must exceed G={G}")
    plan = StridedPlan(T, s, G)
    if plan.B == 0:
        raise EmptyPlanError(f"T={T}, s={s}, G={G} gives no anchors")
    return plan


@dataclass
class BlockMask:
    allowed: np.ndarray  # bool (side, side); allowed[i, j]: row i attends column j
    call_index: int
    plan: StridedPlan

    @property
    def side(self) -> int:
        return self.allowed.shape[0]

    @property
    def additive(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, -np.inf)

    def to_grid(self) -> str:
        """Text grid in the layout of the published figure: 0 where attention is
        allowed, inf where it is masked (the whole matrix is negated), with
        rules between the prefix block and each generated block."""
        P, B = self.plan.prefix_len, self.plan.B
        cuts = {P + k * B for k in range(self.call_index)}
        lines = []
        for i in range(self.side):
            if i in cuts:
                lines.append("-" * len(lines[0]))
            cells = []
            for j in range(self.side):
                if j in cuts:
                    cells.append("|")
                cells.append("  0" if self.allowed[i, j] else "inf")
            lines.append(" ".join(cells))
        return "\n".join(lines)


def _gen_index(plan: StridedPlan, b: int, t: int) -> int:
    """Column of generated token t (0-based) of branch b (1-based)."""
    return plan.prefix_len + t * plan.B + (b - 1)


def build_mask(plan: StridedPlan, g: int) -> BlockMask:
    """Mask for the (0-based) g-th forward call; side = B*s + B*g."""
    if not 0 <= g < plan.gen_len:
        raise ValueError(f"call index {g} outside [0, {plan.gen_len})")
    P, B, s = plan.prefix_len, plan.B, plan.stride
    side = P + B * g
    allowed = np.zeros((side, side), dtype=bool)
    allowed[:P, :P] = np.tril(np.ones((P, P), dtype=bool))
    for t in range(g):
        for b in range(1, B + 1):
            i = _gen_index(plan, b, t)
            allowed[i, : b * s] = True
            for t2 in range(t + 1):
                allowed[i, _gen_index(plan, b, t2)] = True
    return BlockMask(allowed, g, plan)


def positions(plan: StridedPlan, g: int) -> np.ndarray:
    pos = list(range(plan.prefix_len))
    for t in range(g):
        for b in range(1, plan.B + 1):
            pos.append(b * plan.stride + t)
    return np.asarray(pos)


@dataclass
class InterleavedBuffer:
    tokens: list[int]
    B: int
    G: int
    forward_calls: int = 0

    @property
    def complete(self) -> bool:
        return len(self.tokens) == self.B * self.G


def interleave(branches: Sequence[Sequence[int]]) -> list[int]:
    """[[y_10, y_11], [y_20, y_21]] -> [y_10, y_20, y_11, y_21]."""
    arr = np.asarray(branches, dtype=np.int64)
    return arr.T.reshape(-1).tolist()


def deinterleave(tokens: Sequence[int], B: int, G: int) -> list[tuple[int, ...]]:
    if len(tokens) != B * G:
        raise ValueError(f"buffer holds {len(tokens)} tokens, expected B*G = {B * G}")
    arr = np.asarray(tokens, dtype=np.int64).reshape(G, B).T
    return [tuple(int(t) for t in row) for row in arr]


def _check_capacity(policy: Policy, plan: StridedPlan):
    last = plan.prefix_len + plan.gen_len - 1
    if policy.max_len is not None and last >= policy.max_len:
        raise CapacityError(f"strided plan needs positions up to {last}, model max_len is {policy.max_len}")


def masked_next_logits(policy: Policy, plan: StridedPlan, sequence: Sequence[int],
                       generated: Sequence[Sequence[int]]) -> np.ndarray:
    """Next-token logits (B, V) for every branch at call g = len(generated[0]).

    Transformers run one masked forward over prefix + generated tokens; other
    policies have no attention to share, so each branch is evaluated on its own.
    """
    B, s = plan.B, plan.stride
    g = len(generated[0]) if B else 0
    if isinstance(policy, TransformerPolicy):
        prefix = list(sequence[: plan.prefix_len])
        toks = prefix + interleave(generated) if g else prefix
        mask = build_mask(plan, g).additive
        with torch.no_grad():
            logits, _ = policy.forward([toks], positions(plan, g), mask)
        logits = logits[0].numpy()
        rows = [b * s - 1 if g == 0 else _gen_index(plan, b, g - 1) for b in range(1, B + 1)]
        return logits[rows].copy()
    return np.stack([policy.logits(list(sequence[: b * s]) + list(generated[b - 1]))
                     for b in range(1, B + 1)])


def parallel_sample(policy: Policy, plan: StridedPlan, sequence: Sequence[int],
                    temperature: float = 1.0, seed=0) -> tuple[InterleavedBuffer, list[LogProbRecord]]:
    """Sample one length-G continuation per anchor using G forward calls.

    Uniforms are consumed call-major, branch-minor; with B = 1 this matches
    ``sample_completions(..., n=1)`` token for token.
    """
    _check_capacity(policy, plan)
    policy.vocab.check(sequence[: plan.T])
    rng = as_rng(seed)
    B, G = plan.B, plan.gen_len
    generated = [[] for _ in range(B)]
    lps = np.zeros((B, G))
    buf = InterleavedBuffer([], B, G)
    for g in range(G):
        logits = masked_next_logits(policy, plan, sequence, generated)
        buf.forward_calls += 1
        for b in range(B):
            tok = draw_token(_softmax(logits[b], temperature), rng.random())
            lps[b, g] = _log_softmax(logits[b])[tok]
            generated[b].append(tok)
            buf.tokens.append(tok)
    return buf, [LogProbRecord(lps[b]) for b in range(B)]


def gather_pairs(plan: StridedPlan, sequence: Sequence[int], buffer: InterleavedBuffer):
    """(context, ground-truth completion, sampled completion) per anchor."""
    if not buffer.complete:
        raise ValueError(f"incomplete buffer: {len(buffer.tokens)} of {buffer.B * buffer.G} tokens")
    sampled = deinterleave(buffer.tokens, buffer.B, buffer.G)
    return [(c, y, yhat) for (c, y), yhat in zip(plan.pairs(sequence), sampled)]
