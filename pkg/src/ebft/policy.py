"""Autoregressive policies with exact log-probabilities and parameter gradients.

Two kinds are provided:

* ``TabularPolicy``: an order-k softmax table, small enough for exact
  enumeration of completion distributions.
* ``TransformerPolicy``: a minimal pre-LN decoder-only transformer whose
  forward pass accepts explicit position ids and an additive attention mask
  (needed by the strided rollouts). Gradients come from torch autograd in
  float64.

Every policy stores its parameters as one flat float64 numpy vector; the
optimizer and the checkpoint format only ever see that vector.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

MODEL_MAGIC = "EBFT-MODEL-v1"


class LengthError(ValueError):
    """Context longer than the model's positional capacity."""


class EmptyGenerationError(ValueError):
    """Requested a completion of length zero."""


@dataclass(frozen=True)
class Vocab:
    size: int
    symbols: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")
        if self.symbols is not None and len(self.symbols) != self.size:
            raise ValueError("symbol table length does not match vocab size")

    def check(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            if not 0 <= int(t) < self.size:
                raise ValueError(f"token id {t} outside vocab [0, {self.size})")

    def encode(self, text: str) -> tuple[int, ...]:
        if self.symbols is None:
            raise ValueError("vocab has no symbol table")
        index = {s: i for i, s in enumerate(self.symbols)}
        return tuple(index[ch] for ch in text)

    def decode(self, tokens: Sequence[int]) -> str:
        if self.symbols is None:
            return " ".join(str(int(t)) for t in tokens)
        return "".join(self.symbols[int(t)] for t in tokens)

    def to_dict(self) -> dict:
        return {"size": self.size, "symbols": list(self.symbols) if self.symbols else None}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        syms = d.get("symbols")
        return cls(int(d["size"]), tuple(syms) if syms else None)


@dataclass
class LogProbRecord:
    per_token: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.per_token))

    def __len__(self):
        return len(self.per_token)


@dataclass
class Rollout:
    tokens: tuple[int, ...]
    logprob: LogProbRecord


def _softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        out = np.zeros_like(logits)
        idx = np.argmax(logits, axis=-1)
        np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
        return out
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def draw_token(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw; one uniform per token keeps seed streams aligned."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class Policy:
    """Base class: subclasses implement ``logits`` and ``grad_weighted``."""

    kind: str = "abstract"
    vocab: Vocab
    params: np.ndarray
    max_len: int | None = None

    @property
    def num_params(self) -> int:
        return int(self.params.size)

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.params.shape:
            raise ValueError(f"parameter shape {params.shape} != {self.params.shape}")
        self.params = params.copy()

    def copy(self) -> "Policy":
        return copy.deepcopy(self)

    def _check_context(self, context: Sequence[int]) -> None:
        if self.max_len is not None and len(context) > self.max_len:
            raise LengthError(f"context length {len(context)} exceeds max_len {self.max_len}")

    def logits(self, context: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def next_token_dist(self, context: Sequence[int], temperature: float = 1.0) -> np.ndarray:
        self._check_context(context)
        self.vocab.check(context)
        return _softmax(self.logits(context), temperature)

    def token_logprobs(self, context: Sequence[int], completion: Sequence[int]) -> np.ndarray:
        """Per-position log p(y_t | c, y_<t) at temperature 1."""
        seq = list(context)
        out = np.empty(len(completion))
        for t, tok in enumerate(completion):
            out[t] = _log_softmax(self.logits(seq))[tok]
            seq.append(int(tok))
        return out

    def log_prob(self, context: Sequence[int], completion: Sequence[int]) -> LogProbRecord:
        if len(completion) == 0:
            raise EmptyGenerationError("completion must have length >= 1")
        self.vocab.check(context)
        self.vocab.check(completion)
        self._check_context(list(context) + list(completion)[:-1])
        return LogProbRecord(self.token_logprobs(context, completion))

    def grad_log_prob(self, context: Sequence[int], completion: Sequence[int]) -> np.ndarray:
        return self.grad_weighted(context, [completion], np.ones(1))

    def grad_weighted(self, context, completions, weights) -> np.ndarray:
        """Sum_j weights[j] * grad log p(completions[j] | context)."""
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.descriptor(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.params).tobytes())
        return h.hexdigest()[:16]


class TabularPolicy(Policy):
    """Order-k softmax table. Contexts shorter than k are left-padded with a
    dedicated pad symbol (id ``vocab.size``), so every context has a row."""

    kind = "tabular"

    def __init__(self, vocab: Vocab | int, order: int = 1, params: np.ndarray | None = None):
        self.vocab = vocab if isinstance(vocab, Vocab) else Vocab(int(vocab))
        if order < 0:
            raise ValueError("order must be >= 0")
        self.order = order
        self.max_len = None
        self.n_rows = (self.vocab.size + 1) ** order
        shape = self.n_rows * self.vocab.size
        if params is None:
            params = np.zeros(shape)
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != shape:
            raise ValueError(f"expected {shape} parameters, got {params.size}")
        self.params = params.copy()

    @classmethod
    def random(cls, vocab, order=1, scale=1.0, seed=0) -> "TabularPolicy":
        vocab = vocab if isinstance(vocab, Vocab) else Vocab(int(vocab))
        rows = (vocab.size + 1) ** order
        rng = np.random.default_rng(seed)
        return cls(vocab, order, scale * rng.standard_normal(rows * vocab.size))

    @classmethod
    def from_conditionals(cls, vocab, order, table: dict | np.ndarray) -> "TabularPolicy":
        """Build a policy whose rows are log of the given next-token probabilities.

        ``table`` maps a row index (see ``row_index``) to a probability vector, or
        is a full (n_rows, V) array.
        """
        vocab = vocab if isinstance(vocab, Vocab) else Vocab(int(vocab))
        model = cls(vocab, order)
        logits = model.table.copy()
        items = table.items() if isinstance(table, dict) else enumerate(np.asarray(table))
        for r, probs in items:
            probs = np.asarray(probs, dtype=np.float64)
            with np.errstate(divide="ignore"):
                row = np.log(probs)
            logits[r] = np.where(np.isfinite(row), row, -60.0)
        model.params = logits.ravel()
        return model

    @property
    def table(self) -> np.ndarray:
        return self.params.reshape(self.n_rows, self.vocab.size)

    def row_index(self, context: Sequence[int]) -> int:
        if self.order == 0:
            return 0
        pad = self.vocab.size
        tail = list(context[-self.order:]) if len(context) else []
        tail = [pad] * (self.order - len(tail)) + [int(t) for t in tail]
        idx = 0
        for t in tail:
            idx = idx * (pad + 1) + t
        return idx

    def logits(self, context):
        return self.table[self.row_index(context)].copy()

    def token_logprobs(self, context, completion):
        seq = list(context)
        out = np.empty(len(completion))
        for t, tok in enumerate(completion):
            out[t] = _log_softmax(self.table[self.row_index(seq)])[tok]
            seq.append(int(tok))
        return out

    def grad_weighted(self, context, completions, weights):
        self.vocab.check(context)
        grad = np.zeros((self.n_rows, self.vocab.size))
        for comp, w in zip(completions, weights):
            if len(comp) == 0:
                raise EmptyGenerationError("completion must have length >= 1")
            self.vocab.check(comp)
            if w == 0:
                continue
            seq = list(context)
            for tok in comp:
                r = self.row_index(seq)
                probs = _softmax(self.table[r])
                grad[r] -= w * probs
                grad[r, tok] += w
                seq.append(int(tok))
        return grad.ravel()

    def descriptor(self):
        return {"kind": self.kind, "order": self.order, "vocab_size": self.vocab.size}


def _gelu(x):
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


def causal_mask(length: int) -> np.ndarray:
    """Additive 0/-inf lower-triangular mask."""
    m = np.full((length, length), -np.inf)
    m[np.tril_indices(length)] = 0.0
    return m


class TransformerPolicy(Policy):
    """Pre-LN decoder-only transformer with learned positional embeddings."""

    kind = "transformer"

    def __init__(self, vocab: Vocab | int, depth: int = 4, width: int = 64, heads: int = 4,
                 max_len: int = 64, seed: int = 0, params: np.ndarray | None = None):
        self.vocab = vocab if isinstance(vocab, Vocab) else Vocab(int(vocab))
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.depth, self.width, self.heads, self.max_len = depth, width, heads, max_len
        self.seed = seed
        self._shapes = self._param_shapes()
        n = sum(int(np.prod(s)) for _, s in self._shapes)
        if params is None:
            params = self._init_params(seed)
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != n:
            raise ValueError(f"expected {n} parameters, got {params.size}")
        self.params = params.copy()

    def _param_shapes(self):
        V, W, L = self.vocab.size, self.width, self.max_len
        shapes = [("tok_emb", (V, W)), ("pos_emb", (L, W))]
        for i in range(self.depth):
            shapes += [
                (f"l{i}.ln1_g", (W,)), (f"l{i}.ln1_b", (W,)),
                (f"l{i}.w_qkv", (W, 3 * W)), (f"l{i}.b_qkv", (3 * W,)),
                (f"l{i}.w_o", (W, W)), (f"l{i}.b_o", (W,)),
                (f"l{i}.ln2_g", (W,)), (f"l{i}.ln2_b", (W,)),
                (f"l{i}.w_1", (W, 4 * W)), (f"l{i}.b_1", (4 * W,)),
                (f"l{i}.w_2", (4 * W, W)), (f"l{i}.b_2", (W,)),
            ]
        shapes += [("lnf_g", (W,)), ("lnf_b", (W,)), ("unembed", (W, V))]
        return shapes

    @staticmethod
    def count_params(vocab_size, depth, width, max_len) -> int:
        W = width
        per_layer = 2 * W + (3 * W * W + 3 * W) + (W * W + W) + 2 * W + (4 * W * W + 4 * W) + (4 * W * W + W)
        return vocab_size * W + max_len * W + depth * per_layer + 2 * W + W * vocab_size

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        chunks = []
        for name, shape in self._shapes:
            base = name.split(".")[-1]
            if base.startswith("ln") and base.endswith("_g"):
                chunks.append(np.ones(shape))
            elif base.startswith(("b_", "ln")):
                chunks.append(np.zeros(shape))
            elif base in ("tok_emb", "pos_emb"):
                chunks.append(rng.standard_normal(shape))
            else:
                chunks.append(rng.standard_normal(shape) / math.sqrt(shape[0]))
        return np.concatenate([c.ravel() for c in chunks])

    def unpack(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        out, i = {}, 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = flat[i:i + n].view(shape)
            i += n
        return out

    def forward(self, tokens, positions=None, mask=None, flat: torch.Tensor | None = None):
        """Batched forward pass.

        tokens: (N, L) int array; positions: (L,) or (N, L) ids (default 0..L-1);
        mask: (L, L) additive mask (default causal).
        Returns (logits (N, L, V), hidden states after each layer [depth x (N, L, W)]).
        """
        if flat is None:
            flat = torch.tensor(self.params)
        p = self.unpack(flat)
        tok = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
        if tok.dim() == 1:
            tok = tok[None]
        N, L = tok.shape
        if positions is None:
            positions = np.arange(L)
        pos = torch.as_tensor(np.asarray(positions, dtype=np.int64))
        if int(pos.max()) >= self.max_len:
            raise LengthError(f"position {int(pos.max())} exceeds max_len {self.max_len}")
        m = torch.as_tensor(causal_mask(L) if mask is None else np.asarray(mask, dtype=np.float64))
        x = p["tok_emb"][tok] + p["pos_emb"][pos]
        H, hd = self.heads, self.width // self.heads
        hiddens = []
        for i in range(self.depth):
            h = _layer_norm(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            qkv = h @ p[f"l{i}.w_qkv"] + p[f"l{i}.b_qkv"]
            q, k, v = qkv.split(self.width, dim=-1)
            q = q.view(N, L, H, hd).transpose(1, 2)
            k = k.view(N, L, H, hd).transpose(1, 2)
            v = v.view(N, L, H, hd).transpose(1, 2)
            att = q @ k.transpose(-1, -2) / math.sqrt(hd) + m
            att = torch.softmax(att, dim=-1)
            y = (att @ v).transpose(1, 2).reshape(N, L, self.width)
            x = x + y @ p[f"l{i}.w_o"] + p[f"l{i}.b_o"]
            h = _layer_norm(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            x = x + _gelu(h @ p[f"l{i}.w_1"] + p[f"l{i}.b_1"]) @ p[f"l{i}.w_2"] + p[f"l{i}.b_2"]
            hiddens.append(x)
        x = _layer_norm(x, p["lnf_g"], p["lnf_b"])
        return x @ p["unembed"], hiddens

    def _need_context(self, context):
        if len(context) == 0:
            raise ValueError("transformer policies need a non-empty context")

    def logits(self, context):
        self._need_context(context)
        with torch.no_grad():
            logits, _ = self.forward([list(context)])
        return logits[0, -1].numpy().copy()

    def token_logprobs(self, context, completion):
        self._need_context(context)
        seq = list(context) + list(completion)[:-1]
        with torch.no_grad():
            logits, _ = self.forward([seq])
        lp = torch.log_softmax(logits[0, len(context) - 1:], dim=-1).numpy()
        return lp[np.arange(len(completion)), np.asarray(completion)]

    def grad_weighted(self, context, completions, weights):
        self._need_context(context)
        self.vocab.check(context)
        comps = [list(c) for c in completions]
        if any(len(c) == 0 for c in comps):
            raise EmptyGenerationError("completion must have length >= 1")
        for c in comps:
            self.vocab.check(c)
        G = len(comps[0])
        if any(len(c) != G for c in comps):
            raise ValueError("completions must share a length")
        flat = torch.tensor(self.params, requires_grad=True)
        seqs = [list(context) + c[:-1] for c in comps]
        logits, _ = self.forward(seqs, flat=flat)
        lp = torch.log_softmax(logits[:, len(context) - 1:], dim=-1)
        tgt = torch.as_tensor(np.asarray(comps, dtype=np.int64))
        per_seq = lp.gather(-1, tgt[..., None])[..., 0].sum(-1)
        obj = (per_seq * torch.as_tensor(np.asarray(weights, dtype=np.float64))).sum()
        obj.backward()
        return flat.grad.numpy().copy()

    def descriptor(self):
        return {"kind": self.kind, "depth": self.depth, "width": self.width, "heads": self.heads,
                "max_len": self.max_len, "vocab_size": self.vocab.size, "seed": self.seed}


# ---------------------------------------------------------------------------
# module-level operations


def next_token_dist(model: Policy, context, temperature: float = 1.0) -> np.ndarray:
    return model.next_token_dist(context, temperature)


def log_prob(model: Policy, context, completion) -> LogProbRecord:
    return model.log_prob(context, completion)


def grad_log_prob(model: Policy, context, completion) -> np.ndarray:
    if len(completion) == 0:
        raise EmptyGenerationError("completion must have length >= 1")
    return model.grad_log_prob(context, completion)


def sample_completions(model: Policy, context, G: int, n: int, temperature: float = 1.0,
                       seed=0) -> list[Rollout]:
    """Draw n completions of length G. Log-probs are recorded at temperature 1,
    so they always agree with ``log_prob`` regardless of the sampling temperature."""
    if G <= 0:
        raise EmptyGenerationError("G must be >= 1")
    if n < 1:
        raise ValueError("n must be >= 1")
    model.vocab.check(context)
    rng = as_rng(seed)
    out = []
    for _ in range(n):
        seq = list(context)
        lps = np.empty(G)
        for t in range(G):
            model._check_context(seq)
            logits = model.logits(seq)
            tok = draw_token(_softmax(logits, temperature), rng.random())
            lps[t] = _log_softmax(logits)[tok]
            seq.append(tok)
        out.append(Rollout(tuple(seq[len(context):]), LogProbRecord(lps)))
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def to_dict(self):
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "t": self.t}


def apply_update(model: Policy, grad: np.ndarray, state: AdamState, lr: float | None = None) -> Policy:
    """One Adam step on ``model.params`` (in place); returns the model."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {model.params.shape}")
    if state.m is None:
        state.m = np.zeros_like(grad)
        state.v = np.zeros_like(grad)
    b1, b2 = state.betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad**2
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    step = (state.lr if lr is None else lr) * m_hat / (np.sqrt(v_hat) + state.eps)
    model.params = model.params - step
    return model


# ---------------------------------------------------------------------------
# checkpoints


def policy_from_descriptor(desc: dict, vocab: Vocab, params=None) -> Policy:
    if desc["kind"] == "tabular":
        return TabularPolicy(vocab, desc["order"], params)
    if desc["kind"] == "transformer":
        return TransformerPolicy(vocab, desc["depth"], desc["width"], desc["heads"],
                                 desc["max_len"], desc.get("seed", 0), params)
    raise ValueError(f"unknown policy kind {desc['kind']!r}")


def save_checkpoint(model: Policy, path, extra: dict | None = None) -> str:
    blob = {
        "magic": MODEL_MAGIC,
        "descriptor": model.descriptor(),
        "vocab": model.vocab.to_dict(),
        "params": model.params.tolist(),
        "hash": model.content_hash(),
    }
    if extra:
        blob["extra"] = extra
    Path(path).write_text(json.dumps(blob))
    return blob["hash"]


def load_checkpoint(path) -> Policy:
    try:
        blob = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("magic") != MODEL_MAGIC:
        raise ValueError(f"{path} is not an {MODEL_MAGIC} checkpoint")
    vocab = Vocab.from_dict(blob["vocab"])
    return policy_from_descriptor(blob["descriptor"], vocab, np.asarray(blob["params"]))
