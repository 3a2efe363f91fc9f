"""Training loop: strided rollouts, feature rewards, leave-one-out advantages,
and one Adam update per batch of source sequences, for L = L_FM + gamma * L_CE."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import FeatureMapSpec, feature_matrix
from .policy import AdamState, Policy, apply_update, save_checkpoint
from .rewards import attach_baselines, fm_rewards, reinforce_gradient
from .rollouts import EmptyPlanError, deinterleave, parallel_sample, plan_strides
from .whitening import whitened_fm_proxy, whitened_rewards

log = logging.getLogger(__name__)

WHITEN_CHOICES = ("none", "basic", "i", "ii", "iii")


class ConfigError(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "ebft"
    samples_per_prompt: int = 4
    gen_len: int = 8
    stride: int = 8
    alpha: float = 1.0
    gamma: float = 0.0
    whiten: str = "none"
    temperature: float = 1.0
    lr: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup: float = 0.03
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    use_baseline: bool = True
    clip_advantage: float | None = None
    max_steps: int | None = None
    checkpoint_every: int = 0
    eval_every: int = 0
    jobs: int = 1
    # model and features, used by the command-line driver
    policy: str = "transformer"
    order: int = 1
    depth: int = 4
    width: int = 64
    heads: int = 4
    max_len: int = 64
    features: str = "network"
    heldout_fraction: float = 0.1

    def validate(self) -> "TrainConfig":
        if self.method not in ("ebft", "sft"):
            raise ConfigError(f"method must be ebft or sft, got {self.method!r}")
        if self.samples_per_prompt < 2:
            raise ConfigError("samples_per_prompt must be >= 2")
        if self.gen_len < 1 or self.stride < 1:
            raise ConfigError("gen_len and stride must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.whiten not in WHITEN_CHOICES:
            raise ConfigError(f"whiten must be one of {WHITEN_CHOICES}")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.lr < 0 or not 0 <= self.warmup <= 1:
            raise ConfigError("lr must be >= 0 and warmup in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.jobs < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, jobs >= 1 required")
        if self.policy not in ("tabular", "transformer"):
            raise ConfigError(f"policy must be tabular or transformer, got {self.policy!r}")
        if self.features not in ("one-hot", "network", "random-network"):
            raise ConfigError(f"features must be one-hot, network or random-network, got {self.features!r}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


def published_defaults(**overrides) -> TrainConfig:
    """The published EBFT run settings (temperature 0.6, lr 1e-6, n=4, G=s=8)."""
    base = dict(samples_per_prompt=4, gen_len=8, stride=8, lr=1e-6, temperature=0.6,
                betas=(0.9, 0.95), warmup=0.03, epochs=1, batch_size=16)
    base.update(overrides)
    return TrainConfig(**base)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        if default is None or name in ("clip_advantage", "max_steps"):
            return None
    if name == "betas":
        parts = [float(x) for x in raw.replace("(", "").replace(")", "").split(",")]
        if len(parts) != 2:
            raise ConfigError("betas needs two comma-separated values")
        return tuple(parts)
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int) or name == "max_steps":
        return int(raw)
    if isinstance(default, float) or name == "clip_advantage":
        return float(raw)
    return raw


def config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    known = {f.name: f for f in fields(TrainConfig)}
    updates = {}
    for key, raw in values.items():
        name = key.replace("-", "_")
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(base, name)
        try:
            updates[name] = _parse_value(name, raw, default) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    return dataclasses.replace(base, **updates).validate()


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return config_from_mapping(values, base)


def dump_config(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class StepReport:
    step: int
    mean_reward: float
    mean_advantage: float
    ce: float
    grad_norm: float
    fm_grad_norm: float
    ce_grad_norm: float
    whitened_proxy: float
    lr: float
    n_pairs: int
    degenerate: int = 0
    wall_time: float = 0.0

    def record(self, with_time: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d


@dataclass
class TrainResult:
    model: Policy
    history: list[StepReport] = field(default_factory=list)
    optimizer: AdamState | None = None
    evals: list[dict] = field(default_factory=list)


def ce_gradient(model: Policy, context, completion) -> np.ndarray:
    """Gradient of -log p(y | c), summed over completion tokens."""
    return -model.grad_log_prob(context, completion)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup over ceil(warmup * total) steps, then constant."""
    warm = math.ceil(config.warmup * total_steps) if total_steps else 0
    if warm and step < warm:
        return config.lr * (step + 1) / warm
    return config.lr


def rollout_rng(seed: int, step: int, seq_idx: int, sample: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, seq_idx, sample]))


@dataclass
class _SeqResult:
    fm_grad: np.ndarray | None
    ce_grad: np.ndarray | None
    rewards: list
    advantages: list
    ce: list
    proxies: list
    n_pairs: int
    degenerate: int


def _rewards_for(feats, gt, config: TrainConfig):
    if config.whiten == "none":
        return fm_rewards(feats, gt, config.alpha)
    return whitened_rewards(feats, gt, variant=config.whiten, alpha=config.alpha)


def _sequence_terms(model: Policy, seq, seq_idx: int, step: int, config: TrainConfig,
                    spec: FeatureMapSpec | None, fm_weight: float, gamma: float) -> _SeqResult:
    n, G = config.samples_per_prompt, config.gen_len
    P = model.num_params
    try:
        plan = plan_strides(len(seq), config.stride, G)
    except EmptyPlanError:
        return _SeqResult(None, None, [], [], [], [], 0, 0)
    pairs = plan.pairs(seq)
    fm_grad = np.zeros(P) if fm_weight else None
    ce_grad = np.zeros(P) if gamma else None
    rewards, advs, ces, proxies, degenerate = [], [], [], [], 0
    if fm_weight:
        spec = spec.for_gen_len(G)
        # samples[k][b]: k-th independent strided pass, branch b
        samples = []
        for k in range(n):
            buf, _ = parallel_sample(model, plan, seq, config.temperature,
                                     rollout_rng(config.seed, step, seq_idx, k))
            samples.append(deinterleave(buf.tokens, buf.B, buf.G))
        flat = []
        for b, (c, y) in enumerate(pairs):
            flat.append((c, y))
            flat.extend((c, samples[k][b]) for k in range(n))
        F = feature_matrix(spec, flat).reshape(len(pairs), n + 1, -1)
        for b, (c, y) in enumerate(pairs):
            gt, feats = F[b, 0], F[b, 1:]
            rs = attach_baselines(_rewards_for(feats, gt, config), config.use_baseline)
            degenerate += rs.degenerate
            comps = [samples[k][b] for k in range(n)]
            fm_grad += reinforce_gradient(model, c, comps, rs, config.clip_advantage).vector
            rewards.extend(rs.rewards.tolist())
            advs.extend(rs.advantages.tolist())
            proxies.append(whitened_fm_proxy(whitened_rewards(feats, gt, "basic", config.alpha)))
    for c, y in pairs:
        ces.append(-model.log_prob(c, y).total)
        if gamma:
            ce_grad += ce_gradient(model, c, y)
    return _SeqResult(fm_grad, ce_grad, rewards, advs, ces, proxies, len(pairs), degenerate)


def _step(model: Policy, batch: Sequence[Sequence[int]], config: TrainConfig,
          spec: FeatureMapSpec | None, opt: AdamState, step: int, lr: float,
          fm_weight: float, gamma: float, seq_offset: int = 0) -> StepReport:
    t0 = time.perf_counter()
    jobs = max(1, min(config.jobs, len(batch)))

    def work(i):
        return _sequence_terms(model, batch[i], seq_offset + i, step, config, spec, fm_weight, gamma)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(work, range(len(batch))))
    else:
        results = [work(i) for i in range(len(batch))]
    # reduction in sequence order so the sum is independent of scheduling
    P = model.num_params
    fm, ce = np.zeros(P), np.zeros(P)
    n_pairs = sum(r.n_pairs for r in results)
    if n_pairs == 0:
        raise EmptyPlanError("no sequence in the batch is long enough for a strided pair")
    for r in results:
        if r.fm_grad is not None:
            fm += r.fm_grad
        if r.ce_grad is not None:
            ce += r.ce_grad
    fm /= n_pairs
    ce /= n_pairs
    grad = fm_weight * fm + gamma * ce
    if not np.all(np.isfinite(grad)):
        bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
        raise NonFiniteGradient(f"step {step}: {bad} non-finite gradient entries "
                                f"(|fm|={np.linalg.norm(np.nan_to_num(fm)):.3e}, "
                                f"|ce|={np.linalg.norm(np.nan_to_num(ce)):.3e}); update skipped")
    apply_update(model, grad, opt, lr)

    def mean(key):
        vals = [v for r in results for v in getattr(r, key)]
        return float(np.mean(vals)) if vals else 0.0

    return StepReport(step, mean("rewards"), mean("advantages"), mean("ce"),
                      float(np.linalg.norm(grad)), float(np.linalg.norm(fm)),
                      float(np.linalg.norm(ce)), mean("proxies"), float(lr), n_pairs,
                      sum(r.degenerate for r in results), time.perf_counter() - t0)


def make_optimizer(config: TrainConfig) -> AdamState:
    return AdamState(config.lr, tuple(config.betas), config.eps)


def ebft_step(model: Policy, batch, config: TrainConfig, spec: FeatureMapSpec,
              opt: AdamState | None = None, step: int = 0, lr: float | None = None,
              fm_weight: float = 1.0, seq_offset: int = 0) -> StepReport:
    """One update on ``batch`` (source sequences); ``model`` is updated in place.

    The FM gradient is averaged over every strided (c, y) pair of the batch;
    gamma times the mean CE gradient on the same pairs is added.
    """
    config.validate()
    if spec is not None and spec.kind == "frozen-network" and spec.network.params.flags.writeable:
        raise ValueError("feature network must be frozen (use snapshot_feature_network)")
    opt = opt or make_optimizer(config)
    return _step(model, batch, config, spec, opt, step, config.lr if lr is None else lr,
                 fm_weight, config.gamma, seq_offset)


def sft_baseline_step(model: Policy, batch, config: TrainConfig, opt: AdamState | None = None,
                      step: int = 0, lr: float | None = None, seq_offset: int = 0) -> StepReport:
    """Pure CE update on the ground-truth completions of the strided pairs."""
    config.validate()
    opt = opt or make_optimizer(config)
    return _step(model, batch, config, None, opt, step, config.lr if lr is None else lr,
                 0.0, 1.0, seq_offset)


def count_steps(n_sequences: int, config: TrainConfig) -> int:
    per_epoch = math.ceil(n_sequences / config.batch_size)
    total = per_epoch * config.epochs
    return total if config.max_steps is None else min(total, config.max_steps)


def run_training(model: Policy, corpus, config: TrainConfig, spec: FeatureMapSpec | None = None,
                 log_path=None, checkpoint_dir=None,
                 eval_hook: Callable[[Policy, int], dict] | None = None) -> TrainResult:
    """Iterate ebft_step (or sft_baseline_step for method ``sft``) over the corpus.

    ``log_path`` receives one JSON line per step; wall-clock times go to a
    sibling ``*.timing.jsonl`` so the main log is reproducible bit for bit.
    """
    config.validate()
    sequences = list(getattr(corpus, "sequences", corpus))
    if not sequences:
        raise ValueError("empty corpus")
    if config.method == "ebft" and spec is None:
        raise ValueError("ebft needs a feature spec")
    feat_hash = spec.network.content_hash() if spec is not None and spec.network is not None else None
    total = count_steps(len(sequences), config)
    opt = make_optimizer(config)
    result = TrainResult(model, [], opt)
    logf = timef = None
    if log_path is not None:
        log_path = Path(log_path)
        logf = open(log_path, "w")
        timef = open(log_path.with_suffix(".timing.jsonl"), "w")
    try:
        step = 0
        for epoch in range(config.epochs):
            order = np.random.default_rng(np.random.SeedSequence([config.seed, 1_000_003, epoch]))\
                .permutation(len(sequences))
            for start in range(0, len(order), config.batch_size):
                if step >= total:
                    break
                idx = order[start:start + config.batch_size]
                batch = [sequences[i] for i in idx]
                lr = lr_at(step, total, config)
                if config.method == "ebft":
                    rep = ebft_step(model, batch, config, spec, opt, step, lr, seq_offset=start)
                else:
                    rep = sft_baseline_step(model, batch, config, opt, step, lr, seq_offset=start)
                result.history.append(rep)
                if logf:
                    logf.write(json.dumps(rep.record()) + "\n")
                    logf.flush()
                    timef.write(json.dumps({"step": step, "wall_time": rep.wall_time}) + "\n")
                log.info("step %d reward %.4f ce %.4f |g| %.3e", step, rep.mean_reward, rep.ce, rep.grad_norm)
                step += 1
                if checkpoint_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(model, Path(checkpoint_dir) / f"step{step:06d}.json", {"step": step})
                if eval_hook is not None and config.eval_every and step % config.eval_every == 0:
                    result.evals.append({"step": step, **eval_hook(model, step)})
    finally:
        if logf:
            logf.close()
            timef.close()
    if feat_hash is not None and spec.network.content_hash() != feat_hash:
        raise RuntimeError("feature network changed during training")
    return result
