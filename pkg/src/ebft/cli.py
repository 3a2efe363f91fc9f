"""ebft command line: train / eval / profile / oracle / inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import ebm, metrics, whitening
from .data import CorpusError, load_corpus, split
from .features import one_hot_features, snapshot_feature_network
from .policy import TabularPolicy, TransformerPolicy, load_checkpoint, save_checkpoint
from .rollouts import build_mask, plan_strides
from .trainer import (WHITEN_CHOICES, ConfigError, TrainConfig, config_from_mapping, dump_config,
                      load_config, run_training)

log = logging.getLogger("ebft")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# flags that map one-to-one onto TrainConfig keys
TRAIN_FLAGS = {
    "method": dict(choices=["sft", "ebft"]),
    "gamma": dict(type=float),
    "alpha": dict(type=float),
    "samples_per_prompt": dict(type=int),
    "gen_len": dict(type=int),
    "stride": dict(type=int),
    "whiten": dict(choices=list(WHITEN_CHOICES)),
    "temperature": dict(type=float),
    "lr": dict(type=float),
    "epochs": dict(type=int),
    "seed": dict(type=int),
    "jobs": dict(type=int),
    "batch_size": dict(type=int),
    "warmup": dict(type=float),
    "max_steps": dict(type=int),
    "checkpoint_every": dict(type=int),
    "policy": dict(choices=["tabular", "transformer"]),
    "order": dict(type=int),
    "depth": dict(type=int),
    "width": dict(type=int),
    "heads": dict(type=int),
    "max_len": dict(type=int),
    "features": dict(choices=["one-hot", "network", "random-network"]),
    "heldout_fraction": dict(type=float),
}


def _sha(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.hexdigest()[:16]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out: Path, payload: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise UsageError(f"expected positive integers, got {text!r}")
    return vals


def _load_corpus(path, tokenizer, vocab=None):
    try:
        return load_corpus(path, tokenizer, vocab)
    except FileNotFoundError:
        raise UsageError(f"corpus not found: {path}") from None
    except CorpusError as e:
        raise UsageError(str(e)) from None


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as e:
        raise RuntimeError(f"bad checkpoint: {e}") from None


def _feature_spec(kind: str, model, gen_len: int, seed: int):
    if kind == "one-hot":
        return one_hot_features(model.vocab.size, gen_len)
    if not isinstance(model, TransformerPolicy):
        raise UsageError("network features need a transformer policy; use --features one-hot")
    return snapshot_feature_network(model, reseed=seed + 1 if kind == "random-network" else None)


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = TrainConfig()
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config not found: {args.config}")
        cfg = load_config(args.config)
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k, None) is not None}
    cfg = config_from_mapping(overrides, cfg)
    if not Path(args.corpus).exists():
        raise UsageError(f"corpus not found: {args.corpus}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [Path(args.corpus).read_bytes(), dump_config(cfg).encode()]
    if args.init:
        inputs.append(Path(args.init).read_bytes())
    manifest = {"config": cfg.to_dict(), "inputs_hash": _sha(*inputs), "out": str(out.resolve()),
                "corpus": str(args.corpus), "init": args.init, "started": _now()}
    _write_manifest(out, manifest)
    (out / "config.txt").write_text(dump_config(cfg))

    corpus = _load_corpus(args.corpus, args.tokenizer)
    if args.init:
        model = _load_model(args.init)
        if model.vocab.size < corpus.vocab.size:
            raise UsageError("checkpoint vocabulary is smaller than the corpus vocabulary")
        corpus = _load_corpus(args.corpus, args.tokenizer, model.vocab if args.tokenizer == "char" else None)
    elif cfg.policy == "tabular":
        model = TabularPolicy(corpus.vocab, cfg.order)
    else:
        model = TransformerPolicy(corpus.vocab, cfg.depth, cfg.width, cfg.heads, cfg.max_len, seed=cfg.seed)
    train, held = split(corpus, cfg.heldout_fraction, cfg.seed) if len(corpus) >= 2 else (corpus, corpus)
    spec = _feature_spec(cfg.features, model, cfg.gen_len, cfg.seed) if cfg.method == "ebft" else None
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    result = run_training(model, train, cfg, spec, log_path=out / "train.jsonl", checkpoint_dir=ckpt_dir)
    model_hash = save_checkpoint(model, out / "model.json", {"steps": len(result.history)})

    pairs = metrics.strided_pairs(held.sequences, cfg.gen_len, cfg.stride)
    rows = []
    if pairs:
        rows.append((len(result.history), "ce", metrics.ce_eval(model, pairs), ""))
        eval_spec = spec or _feature_spec("one-hot" if cfg.policy == "tabular" else "network",
                                          model, cfg.gen_len, cfg.seed)
        est = metrics.cfm_loss(model, pairs, eval_spec, cfg.samples_per_prompt, cfg.seed, cfg.temperature)
        rows.append((len(result.history), "cfm", est.value, est.stderr))
    metrics.write_metrics_csv(out / "metrics.csv", rows)
    manifest.update(finished=_now(), steps=len(result.history), model_hash=model_hash)
    _write_manifest(out, manifest)
    print(f"trained {len(result.history)} steps; model {model_hash} -> {out / 'model.json'}")
    for step, name, value, se in rows:
        print(f"  {name} = {value:.6f}" + (f" +/- {se:.6f}" if se != "" else ""))
    return EXIT_OK


def _eval_spec(args, model):
    if args.features == "one-hot":
        return one_hot_features(model.vocab.size, args.gen_len)
    source = _load_model(args.feature_checkpoint) if args.feature_checkpoint else model
    return _feature_spec(args.features, source, args.gen_len, args.seed)


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = _load_corpus(args.corpus, args.tokenizer, model.vocab if args.tokenizer == "char" else None)
    pairs = metrics.strided_pairs(corpus.sequences, args.gen_len, args.stride)
    if not pairs:
        raise UsageError("no strided pairs: sequences too short for --gen-len/--stride")
    ce = metrics.ce_eval(model, pairs)
    est = metrics.cfm_loss(model, pairs, _eval_spec(args, model), args.samples_per_prompt,
                           args.seed, args.temperature)
    rows = [(0, "ce", ce, ""), (0, "cfm", est.value, est.stderr)]
    if args.out:
        metrics.write_metrics_csv(args.out, rows)
    print(f"ce  = {ce:.6f}")
    print(f"cfm = {est.value:.6f} +/- {est.stderr:.6f}  (m={est.m}, n={est.n}, G={est.G})")
    return EXIT_OK


def cmd_profile(args) -> int:
    model = _load_model(args.checkpoint)
    corpus = _load_corpus(args.corpus, args.tokenizer, model.vocab if args.tokenizer == "char" else None)
    G_list = _int_list(args.G_list)
    spec = _eval_spec(args, model)
    truth = model if args.with_offset else None
    try:
        points = metrics.fm_profile(model, corpus.sequences, spec, G_list, args.stride,
                                    args.samples_per_prompt, args.seed, truth, args.temperature)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.out:
        metrics.write_profile_csv(args.out, points)
    print(",".join(metrics.PROFILE_COLUMNS))
    for p in points:
        off = "" if p.offset is None else f"{p.offset:.6f}"
        print(f"{p.G},{p.cfm:.6f},{p.stderr:.6f},{off}")
    return EXIT_OK


def _oracle_instance(rng, N, d):
    Phi = rng.standard_normal((N, d))
    q = rng.dirichlet(np.ones(N))
    p = rng.dirichlet(np.ones(N))
    return Phi, q, p


def cmd_oracle(args) -> int:
    rng = np.random.default_rng(args.seed)
    alphas = [float(a) for a in args.alphas.split(",")]
    ok = True
    print(f"{'case':<12}{'alpha':>8}{'beta~':>12}{'|chi|':>12}{'cos':>14}{'gap':>11}{'tilt_res':>11}  status")

    def line(name, a, r, cos):
        nonlocal ok
        good = r.gap <= 1e-6 and r.tilt_residual <= 1e-5 and r.converged
        ok &= good
        print(f"{name:<12}{a:>8.3g}{r.beta_tilde:>12.5g}{np.linalg.norm(r.chi):>12.5g}{cos:>14.10f}"
              f"{r.gap:>11.2e}{r.tilt_residual:>11.2e}  {'PASS' if good else 'FAIL'}")

    sweeps = []
    for k in range(args.instances):
        Phi, q, p = _oracle_instance(rng, args.outcomes, args.dim)
        mu = p @ Phi
        align = []
        sweeps.append(align)
        for a in alphas:
            a_eff = a if a > 0 else 1e-6  # alpha -> 0+
            r = ebm.ebm_tilt_oracle(q, p, Phi, args.beta, a_eff)
            cos = float(-mu @ r.chi / (np.linalg.norm(mu) * np.linalg.norm(r.chi) + 1e-300))
            line(f"inst{k}", a_eff, r, cos)
            align.append(float(mu @ (r.rho @ Phi)))
    Phi, q, _ = _oracle_instance(rng, args.outcomes, args.dim)
    r = ebm.ebm_tilt_oracle(q, q, Phi, args.beta, 1.0)
    chi_ok = np.linalg.norm(r.chi) <= 1e-8
    ok &= bool(chi_ok)
    print(f"{'p=q':<12}{1.0:>8.3g}{r.beta_tilde:>12.5g}{np.linalg.norm(r.chi):>12.5g}{'':>14}"
          f"{r.gap:>11.2e}{r.tilt_residual:>11.2e}  {'PASS' if chi_ok else 'FAIL'}")

    # m* is a proximal map of mu_p / alpha, so its alignment with mu_p cannot grow with alpha
    order = np.argsort(alphas)
    mono = all(np.all(np.diff(np.asarray(b)[order]) <= 1e-9 * np.abs(b).max()) for b in sweeps)
    ok &= mono
    print(f"alpha sweep: mu_p . E_rho*[phi] non-increasing in alpha on every instance: {'yes' if mono else 'no'}")
    print()
    print(f"{'identity':<34}{'residual':>12}  status")
    V, G = 3, 2
    N = V**G
    p, q = rng.dirichlet(np.ones(N)), rng.dirichlet(np.ones(N))
    res = abs(whitening.population_whitened_fm(p, q, np.eye(N)) - whitening.chi2_divergence(p, q))
    checks = [("whitened FM = chi2 (one-hot)", res, 1e-10)]
    for eps in (1e-2, 1e-3):
        z = rng.uniform(-1, 1, N)
        pe = q * (1 + eps * (z - q @ z))
        ratio = whitening.kl_divergence(pe, q) / (0.5 * whitening.chi2_divergence(pe, q))
        checks.append((f"KL / (chi2/2) - 1, eps={eps:g}", abs(ratio - 1), 5 * eps))
    val, f = whitening.chi2_variational_sup(p, q)
    checks.append(("variational argmax = p/q - 1", float(np.max(np.abs(f - (p / q - 1)))), 1e-8))
    checks.append(("variational sup = chi2", abs(val - whitening.chi2_divergence(p, q)), 1e-8))
    for name, resid, tol in checks:
        good = resid <= tol
        ok &= good
        print(f"{name:<34}{resid:>12.3e}  {'PASS' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def _print_masks(spec_text: str, call: int | None) -> None:
    vals = _int_list(spec_text)
    if len(vals) != 3:
        raise UsageError("--mask expects T,s,G")
    T, s, G = vals
    plan = plan_strides(T, s, G)
    calls = [call] if call else range(1, G + 1)
    for c in calls:
        if not 1 <= c <= G:
            raise UsageError(f"--call must lie in [1, {G}]")
        m = build_mask(plan, c - 1)
        print(f"mask T={T} s={s} G={G} call {c} (side {m.side}):")
        print(m.to_grid())
        print()


def _last_log_record(path: Path):
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        return None, 0
    return json.loads(lines[-1]), len(lines)


def cmd_inspect(args) -> int:
    if args.path is None and not args.mask:
        raise UsageError("inspect needs a checkpoint, log, run directory, or --mask")
    if args.path is not None:
        path = Path(args.path)
        if not path.exists():
            raise RuntimeError(f"cannot read {path}")
        if path.is_dir():
            if (path / "manifest.json").exists():
                man = json.loads((path / "manifest.json").read_text())
                print(f"run: {man.get('out')}  inputs {man.get('inputs_hash')}  started {man.get('started')}")
            if (path / "model.json").exists():
                _inspect_checkpoint(path / "model.json")
            if (path / "train.jsonl").exists():
                _inspect_log(path / "train.jsonl")
        elif path.suffix == ".jsonl":
            _inspect_log(path)
        else:
            _inspect_checkpoint(path)
    if args.mask:
        _print_masks(args.mask, args.call)
    return EXIT_OK


def _inspect_checkpoint(path: Path) -> None:
    model = _load_model(path)
    print(f"model: {json.dumps(model.descriptor(), sort_keys=True)}")
    print(f"params: {model.num_params}")
    print(f"hash: {model.content_hash()}")


def _inspect_log(path: Path) -> None:
    try:
        rec, n = _last_log_record(path)
    except json.JSONDecodeError as e:
        raise RuntimeError(f"unreadable log {path}: {e}") from None
    if rec is None:
        print("no steps")
        return
    print(f"steps: {n}")
    print("last: " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ebft", description="Energy-based fine-tuning toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train with EBFT or the SFT baseline")
    t.add_argument("--config", help="flat key = value config file; flags override it")
    t.add_argument("--corpus", required=True)
    t.add_argument("--tokenizer", choices=["char", "ids"], default="char")
    t.add_argument("--init", help="warm-start checkpoint")
    t.add_argument("--out", default="runs/ebft")
    for key, kw in TRAIN_FLAGS.items():
        t.add_argument("--" + key.replace("_", "-"), dest=key, default=None, **kw)
    t.set_defaults(func=cmd_train)

    def eval_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--tokenizer", choices=["char", "ids"], default="char")
        p.add_argument("--stride", type=int, default=8)
        p.add_argument("--samples-per-prompt", type=int, default=4)
        p.add_argument("--temperature", type=float, default=1.0)
        p.add_argument("--features", choices=["one-hot", "network", "random-network"], default="network")
        p.add_argument("--feature-checkpoint", help="frozen feature network (default: the evaluated model)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")

    e = sub.add_parser("eval", help="held-out CE and CFM")
    eval_args(e)
    e.add_argument("--gen-len", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="CFM loss as a function of completion length")
    eval_args(p)
    p.add_argument("--G-list", dest="G_list", default="1,2,4,8")
    p.add_argument("--with-offset", action="store_true",
                   help="attach exact offsets, treating the checkpoint as the true distribution")
    p.set_defaults(func=cmd_profile, gen_len=1)

    o = sub.add_parser("oracle", help="exponential-tilt oracle and divergence identity checks")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--instances", type=int, default=3)
    o.add_argument("--outcomes", type=int, default=16)
    o.add_argument("--dim", type=int, default=3)
    o.add_argument("--beta", type=float, default=1.0)
    o.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    o.set_defaults(func=cmd_oracle)

    i = sub.add_parser("inspect", help="describe a checkpoint, log or run directory; print masks")
    i.add_argument("path", nargs="?")
    i.add_argument("--mask", help="T,s,G: print the block-parallel attention masks")
    i.add_argument("--call", type=int, help="1-based forward call to print (default: all)")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("EBFT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"ebft {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"ebft {args.command}: error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
