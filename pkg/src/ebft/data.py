"""Corpora, tokenization, and synthetic sources with exact conditionals."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import TabularPolicy, Vocab

MAX_ENUM = 4096


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    sequences: list[tuple[int, ...]]
    vocab: Vocab
    provenance: str = "file"

    def __post_init__(self):
        self.sequences = [tuple(int(t) for t in s) for s in self.sequences]
        for i, s in enumerate(self.sequences):
            try:
                self.vocab.check(s)
            except ValueError as e:
                raise CorpusError(f"sequence {i}: {e}") from None

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)


def char_vocab(texts: Sequence[str]) -> Vocab:
    symbols = sorted(set("".join(texts)))
    if len(symbols) < 2:
        symbols = symbols + [s for s in ("\0", "\1") if s not in symbols][: 2 - len(symbols)]
    return Vocab(len(symbols), tuple(symbols))


def load_corpus(path, tokenizer: str = "char", vocab: Vocab | None = None) -> Corpus:
    """Read JSON-lines records ``{"text": ...}`` or ``{"tokens": [...]}``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    texts, token_lists = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise CorpusError(f"{path}:{lineno}: record must be an object")
        if tokenizer == "char":
            if not isinstance(rec.get("text"), str):
                raise CorpusError(f'{path}:{lineno}: expected a "text" string')
            texts.append(rec["text"])
        elif tokenizer == "ids":
            toks = rec.get("tokens")
            if not isinstance(toks, list) or not all(isinstance(t, int) for t in toks):
                raise CorpusError(f'{path}:{lineno}: expected "tokens" as a list of ints')
            token_lists.append(tuple(toks))
        else:
            raise ValueError(f"unknown tokenizer {tokenizer!r}")
    if not texts and not token_lists:
        raise CorpusError(f"{path}: empty corpus")
    if tokenizer == "char":
        vocab = vocab or char_vocab(texts)
        try:
            seqs = [vocab.encode(t) for t in texts]
        except KeyError as e:
            raise CorpusError(f"character {e} not in supplied vocab") from None
        return Corpus(seqs, vocab, "file")
    if vocab is None:
        vocab = Vocab(max(2, max(max(s) for s in token_lists if s) + 1))
    return Corpus(token_lists, vocab, "file")


def save_corpus(corpus: Corpus, path, as_text: bool = False) -> None:
    with open(path, "w") as f:
        for s in corpus.sequences:
            if as_text:
                f.write(json.dumps({"text": corpus.vocab.decode(s)}) + "\n")
            else:
                f.write(json.dumps({"tokens": list(s)}) + "\n")


def all_sequences(vocab_size: int, length: int) -> list[tuple[int, ...]]:
    if vocab_size**length > MAX_ENUM:
        raise ValueError(f"|V|^G = {vocab_size**length} exceeds enumeration cap {MAX_ENUM}")
    return list(itertools.product(range(vocab_size), repeat=length))


@dataclass
class MarkovSource:
    """Order-k Markov chain. ``transition[r]`` is the next-token distribution
    after the k-token state with base-V index r; the first k tokens are drawn
    from ``initial`` (a distribution over V^k states)."""

    transition: np.ndarray
    order: int = 1
    initial: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.vocab_size = self.transition.shape[1]
        if self.transition.shape[0] != self.vocab_size**self.order:
            raise ValueError("transition table must have V^order rows")
        if not np.allclose(self.transition.sum(1), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if self.initial is None:
            self.initial = self.stationary()
        self.initial = np.asarray(self.initial, dtype=np.float64)

    @classmethod
    def random(cls, vocab_size, order=1, concentration=1.0, floor=0.0, seed=0) -> "MarkovSource":
        rng = np.random.default_rng(seed)
        t = rng.dirichlet(np.full(vocab_size, concentration), size=vocab_size**order)
        t = (t + floor) / (1 + floor * vocab_size)
        return cls(t, order, seed=seed)

    def _state(self, tokens) -> int:
        idx = 0
        for t in tokens:
            idx = idx * self.vocab_size + int(t)
        return idx

    def stationary(self) -> np.ndarray:
        V, k = self.vocab_size, self.order
        n = V**k
        if k == 0:
            return self.transition[0].copy()
        P = np.zeros((n, n))
        for s in range(n):
            for y in range(V):
                P[s, (s * V + y) % n] += self.transition[s, y]
        w, vecs = np.linalg.eig(P.T)
        v = np.real(vecs[:, np.argmin(np.abs(w - 1))])
        return v / v.sum()

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        k, V = self.order, self.vocab_size
        if len(context) >= k:
            return self.transition[self._state(context[len(context) - k:] if k else ())].copy()
        # marginal of the initial block given the observed prefix
        init = self.initial.reshape((V,) * k)
        sub = init[tuple(int(t) for t in context)]
        sub = sub.reshape(V, -1).sum(1)
        return sub / sub.sum()

    def completion_dist(self, context: Sequence[int], G: int) -> np.ndarray:
        """Exact p(y | c) over V^G in lexicographic order."""
        seqs = all_sequences(self.vocab_size, G)
        out = np.empty(len(seqs))
        for i, y in enumerate(seqs):
            out[i] = self.cond_prob(context, y)
        return out

    def cond_prob(self, context, completion) -> float:
        seq = list(context)
        p = 1.0
        for tok in completion:
            p *= self.next_dist(seq)[tok]
            seq.append(int(tok))
        return p

    def sample(self, count: int, length: int, rng) -> list[tuple[int, ...]]:
        V, k = self.vocab_size, self.order
        out = []
        for _ in range(count):
            first = rng.choice(V**k, p=self.initial) if k else None
            seq = []
            if k:
                for _ in range(k):
                    seq.append(first % V)
                    first //= V
                seq = seq[::-1][:length]
            while len(seq) < length:
                probs = self.next_dist(seq)
                seq.append(int(rng.choice(V, p=probs)))
            out.append(tuple(seq))
        return out

    def as_policy(self) -> TabularPolicy:
        """The ground-truth distribution as a tabular policy (order k)."""
        V, k = self.vocab_size, self.order
        model = TabularPolicy(V, k)
        rows = {}
        for r in range(model.n_rows):
            digits = []
            x = r
            for _ in range(k):
                digits.append(x % (V + 1))
                x //= V + 1
            digits = digits[::-1]
            ctx = [d for d in digits if d != V]
            if any(d == V for d in digits[len(digits) - len(ctx):]):
                continue
            rows[r] = self.next_dist(ctx)
        return TabularPolicy.from_conditionals(V, k, rows)


@dataclass
class HMMSource:
    transition: np.ndarray
    emission: np.ndarray
    initial: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        for name, m in (("transition", self.transition), ("emission", self.emission)):
            if not np.allclose(m.sum(1), 1.0, atol=1e-12):
                raise ValueError(f"{name} rows must sum to 1")
        self.vocab_size = self.emission.shape[1]

    def _belief(self, context):
        b = self.initial.copy()
        for tok in context:
            b = b * self.emission[:, tok]
            b = (b / b.sum()) @ self.transition
        return b

    def next_dist(self, context):
        return self._belief(context) @ self.emission

    def cond_prob(self, context, completion) -> float:
        seq = list(context)
        p = 1.0
        for tok in completion:
            p *= self.next_dist(seq)[tok]
            seq.append(int(tok))
        return p

    def completion_dist(self, context, G):
        return np.array([self.cond_prob(context, y) for y in all_sequences(self.vocab_size, G)])

    def sample(self, count, length, rng):
        S = len(self.initial)
        out = []
        for _ in range(count):
            s = rng.choice(S, p=self.initial)
            seq = []
            for _ in range(length):
                seq.append(int(rng.choice(self.vocab_size, p=self.emission[s])))
                s = rng.choice(S, p=self.transition[s])
            out.append(tuple(seq))
        return out


def generate_synthetic(source, count: int, length: int, seed: int = 0):
    """Sample a corpus from ``source``; returns (corpus, source) where the
    source doubles as the exact-distribution handle."""
    rng = np.random.default_rng(seed)
    seqs = source.sample(count, length, rng)
    return Corpus(seqs, Vocab(source.vocab_size), "synthetic"), source


def split(corpus: Corpus, heldout_fraction: float, seed: int = 0) -> tuple[Corpus, Corpus]:
    if not 0 < heldout_fraction < 1:
        raise ValueError("heldout_fraction must lie in (0, 1)")
    n = len(corpus)
    if n < 2:
        raise CorpusError("need at least two sequences to split")
    perm = np.random.default_rng(seed).permutation(n)
    k = min(n - 1, max(1, int(round(heldout_fraction * n))))
    held = sorted(perm[:k].tolist())
    train = sorted(perm[k:].tolist())
    pick = lambda idx: Corpus([corpus.sequences[i] for i in idx], corpus.vocab, corpus.provenance)
    return pick(train), pick(held)
