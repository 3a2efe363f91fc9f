"""Feature maps over concatenated context:completion sequences."""
from __future__ import annotations

import copy
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .policy import Policy, TransformerPolicy

DEFAULT_FRACTIONS = (0.25, 0.50, 0.75)
ONE_HOT_CAP = 4096


@dataclass(frozen=True)
class FeatureMapSpec:
    kind: str
    layer_fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    pooling: str = "last-token"
    block_normalize: bool = True
    network: TransformerPolicy | None = field(default=None, compare=False, repr=False)
    vocab_size: int | None = None
    gen_len: int | None = None
    # read only the most recent ``window`` tokens of c:y (positions renumbered from 0)
    window: int | None = None

    def __post_init__(self):
        if self.kind not in ("one-hot", "frozen-network"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.pooling not in ("last-token", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        fr = tuple(self.layer_fractions)
        if any(not 0 < f < 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("layer fractions must be strictly increasing in (0, 1)")
        if self.kind == "one-hot":
            if self.vocab_size is None or self.gen_len is None:
                raise ValueError("one-hot features need vocab_size and gen_len")
            if self.vocab_size**self.gen_len > ONE_HOT_CAP:
                raise ValueError(f"|V|^G = {self.vocab_size ** self.gen_len} exceeds cap {ONE_HOT_CAP}")
        elif self.network is None:
            raise ValueError("frozen-network features need a source network")
        if self.window is not None and (self.window < 1 or self.kind != "frozen-network"
                                        or self.window > self.network.max_len):
            raise ValueError(f"window needs network features and 1 <= window <= max_len, got {self.window}")

    @property
    def tapped_layers(self) -> list[int]:
        """1-indexed layers: fraction f taps the output of layer ceil(f * depth)."""
        if self.kind != "frozen-network":
            return []
        depth = self.network.depth
        return [max(1, math.ceil(round(f * depth, 9))) for f in self.layer_fractions]

    @property
    def dim(self) -> int:
        if self.kind == "one-hot":
            return self.vocab_size**self.gen_len
        return len(self.layer_fractions) * self.network.width

    @property
    def offsets(self) -> tuple[int, ...]:
        if self.kind == "one-hot":
            return (0, self.dim)
        w = self.network.width
        return tuple(i * w for i in range(len(self.layer_fractions) + 1))

    def for_gen_len(self, G: int) -> "FeatureMapSpec":
        """Feature spec for completion length G (only one-hot depends on G)."""
        if self.kind == "one-hot":
            return replace(self, gen_len=G)
        return self


@dataclass
class FeatureVector:
    values: np.ndarray
    offsets: tuple[int, ...]

    @property
    def dim(self):
        return self.values.size


def one_hot_features(vocab_size: int, gen_len: int) -> FeatureMapSpec:
    return FeatureMapSpec("one-hot", vocab_size=vocab_size, gen_len=gen_len)


def snapshot_feature_network(model: Policy, layer_fractions=DEFAULT_FRACTIONS,
                             pooling: str = "last-token", block_normalize: bool = True,
                             reseed: int | None = None, window: int | None = None) -> FeatureMapSpec:
    """Freeze a copy of ``model`` as the feature network.

    ``reseed`` builds a freshly initialized network of the same architecture
    instead (the random-weights ablation). ``window`` truncates every input to
    its last ``window`` tokens, which makes the map shift-invariant.
    """
    if not isinstance(model, TransformerPolicy):
        raise TypeError("frozen-network features need a transformer policy")
    if reseed is not None:
        net = TransformerPolicy(model.vocab, model.depth, model.width, model.heads,
                                model.max_len, seed=reseed)
    else:
        net = copy.deepcopy(model)
    net.params = net.params.copy()
    net.params.flags.writeable = False
    return FeatureMapSpec("frozen-network", tuple(layer_fractions), pooling, block_normalize, net,
                          window=window)


def _normalize_blocks(x: np.ndarray, offsets) -> np.ndarray:
    x = x.copy()
    for a, b in zip(offsets, offsets[1:]):
        blk = x[..., a:b]
        norm = np.linalg.norm(blk, axis=-1, keepdims=True)
        x[..., a:b] = np.where(norm > 0, blk / np.where(norm > 0, norm, 1.0), 0.0)
    return x


def _one_hot_index(completion, V) -> int:
    idx = 0
    for t in completion:
        if not 0 <= int(t) < V:
            raise ValueError(f"token id {t} outside vocab [0, {V})")
        idx = idx * V + int(t)
    return idx


def _network_features(spec: FeatureMapSpec, contexts, completions) -> np.ndarray:
    """Features for a group of pairs sharing (|c|, |y|)."""
    net = spec.network
    seqs = [list(c) + list(y) for c, y in zip(contexts, completions)]
    L = len(seqs[0])
    cl = len(contexts[0])
    if spec.window is not None and L > spec.window:
        seqs = [s[L - spec.window:] for s in seqs]
        cl = max(0, cl - (L - spec.window))
        L = spec.window
    if L > net.max_len:
        raise ValueError(f"sequence length {L} exceeds feature network max_len {net.max_len}")
    with torch.no_grad():
        _, hiddens = net.forward(seqs)
    blocks = []
    for layer in spec.tapped_layers:
        h = hiddens[layer - 1].numpy()
        if spec.pooling == "last-token":
            blocks.append(h[:, -1])
        else:
            if L == cl:
                raise ValueError("mean pooling needs a non-empty completion")
            blocks.append(h[:, cl:].mean(axis=1))
    return np.concatenate(blocks, axis=-1)


def feature_matrix(spec: FeatureMapSpec, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> np.ndarray:
    """(N, d) features for (context, completion) pairs; rows in input order."""
    N = len(pairs)
    out = np.zeros((N, spec.dim))
    if spec.kind == "one-hot":
        for i, (c, y) in enumerate(pairs):
            if len(y) != spec.gen_len:
                raise ValueError(f"batch element {i}: completion length {len(y)} != {spec.gen_len}")
            try:
                out[i, _one_hot_index(y, spec.vocab_size)] = 1.0
            except ValueError as e:
                raise ValueError(f"batch element {i}: {e}") from None
        return out
    groups = defaultdict(list)
    for i, (c, y) in enumerate(pairs):
        if len(c) + len(y) == 0:
            raise ValueError(f"batch element {i}: empty sequence")
        try:
            spec.network.vocab.check(list(c) + list(y))
        except ValueError as e:
            raise ValueError(f"batch element {i}: {e}") from None
        groups[(len(c), len(y))].append(i)
    for idx in groups.values():
        try:
            out[idx] = _network_features(spec, [pairs[i][0] for i in idx], [pairs[i][1] for i in idx])
        except (ValueError, IndexError) as e:
            raise ValueError(f"batch element {idx[0]}: {e}") from None
    if spec.block_normalize:
        out = _normalize_blocks(out, spec.offsets)
    return out


def embed(spec: FeatureMapSpec, context: Sequence[int], completion: Sequence[int] = ()) -> FeatureVector:
    """phi(c:y). For network features ``completion`` may be empty with
    last-token pooling, which embeds the context on its own."""
    if len(context) + len(completion) == 0:
        raise ValueError("cannot embed an empty sequence")
    try:
        row = feature_matrix(spec, [(context, completion)])[0]
    except ValueError as e:
        raise ValueError(str(e).replace("batch element 0: ", "")) from None
    return FeatureVector(row, spec.offsets)


def embed_batch(spec: FeatureMapSpec, pairs) -> list[FeatureVector]:
    mat = feature_matrix(spec, pairs)
    return [FeatureVector(row, spec.offsets) for row in mat]


def dump_features(path, vectors: Sequence[FeatureVector], labels: Sequence[str] | None = None) -> None:
    """JSON-lines: a header record with dimension and block offsets, then one row per vector."""
    if not vectors:
        raise ValueError("nothing to dump")
    with open(path, "w") as f:
        f.write(json.dumps({"dim": vectors[0].dim, "offsets": list(vectors[0].offsets)}) + "\n")
        for i, v in enumerate(vectors):
            rec = {"values": v.values.tolist()}
            if labels is not None:
                rec["label"] = labels[i]
            f.write(json.dumps(rec) + "\n")
