import csv
import json

import pytest

from ebft.cli import main
from ebft.policy import TransformerPolicy, load_checkpoint, save_checkpoint
from ebft.rollouts import build_mask, plan_strides

from .test_rollouts import FIGURE_ROWS

TINY = ["--policy", "tabular", "--features", "one-hot", "--gen-len", "2", "--stride", "2",
        "--samples-per-prompt", "3", "--batch-size", "4", "--lr", "0.05", "--epochs", "1"]


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    texts = ["abcabcabca", "aabbccabca", "cbacbacbaa", "abacabacab", "ccbbaaccbb", "bcabcabcab"]
    path.write_text("\n".join(json.dumps({"text": t}) for t in texts) + "\n")
    return path


def train(tmp_path, corpus, name, *extra):
    out = tmp_path / name
    code = main(["train", "--corpus", str(corpus), "--out", str(out), *TINY, *extra])
    return code, out


# --- train ------------------------------------------------------------------------


def test_train_writes_artifacts(tmp_path, corpus, capsys):
    code, out = train(tmp_path, corpus, "run", "--checkpoint-every", "1")
    assert code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["features"] == "one-hot" and "finished" in man and len(man["inputs_hash"]) == 16
    for name in ("config.txt", "train.jsonl", "train.timing.jsonl", "model.json", "metrics.csv"):
        assert (out / name).exists(), name
    assert list((out / "checkpoints").glob("step*.json"))
    assert "trained" in capsys.readouterr().out


def test_sft_and_ebft_logs_are_comparable(tmp_path, corpus):
    _, a = train(tmp_path, corpus, "sft", "--method", "sft")
    _, b = train(tmp_path, corpus, "ebft", "--method", "ebft", "--gamma", "0.1")
    ka = json.loads((a / "train.jsonl").read_text().splitlines()[0]).keys()
    kb = json.loads((b / "train.jsonl").read_text().splitlines()[0]).keys()
    assert ka == kb


@pytest.mark.parametrize("alpha", ["0", "0.5", "1"])
@pytest.mark.parametrize("gamma", ["0", "0.03", "0.1"])
def test_sweep_values_accepted(tmp_path, corpus, alpha, gamma):
    code, _ = train(tmp_path, corpus, "run", "--alpha", alpha, "--gamma", gamma, "--max-steps", "1")
    assert code == 0


def test_config_file_overridden_by_flags(tmp_path, corpus):
    cfg = tmp_path / "c.txt"
    cfg.write_text("alpha = 0.25\nlr = 0.5\n")
    code, out = train(tmp_path, corpus, "run", "--config", str(cfg), "--max-steps", "1")
    man = json.loads((out / "manifest.json").read_text())
    assert code == 0 and man["config"]["alpha"] == 0.25 and man["config"]["lr"] == 0.05


def test_train_is_deterministic(tmp_path, corpus):
    _, a = train(tmp_path, corpus, "a")
    _, b = train(tmp_path, corpus, "b")
    assert (a / "train.jsonl").read_bytes() == (b / "train.jsonl").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_missing_corpus_is_usage_error(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 2
    assert "corpus not found" in capsys.readouterr().err


def test_bad_config_value_is_usage_error(tmp_path, corpus):
    assert train(tmp_path, corpus, "run", "--alpha", "3")[0] == 2


def test_unknown_flag_is_usage_error(tmp_path, corpus):
    assert main(["train", "--corpus", str(corpus), "--bogus"]) == 2


def test_transformer_network_features(tmp_path, corpus):
    code, out = train(tmp_path, corpus, "net", "--policy", "transformer", "--features", "network",
                      "--depth", "2", "--width", "8", "--heads", "2", "--max-len", "16", "--max-steps", "1")
    assert code == 0 and (out / "model.json").exists()


# --- eval and profile ------------------------------------------------------------------


@pytest.fixture
def checkpoint(tmp_path, corpus):
    _, out = train(tmp_path, corpus, "base", "--max-steps", "2")
    return out / "model.json"


def test_eval_writes_csv(tmp_path, corpus, checkpoint, capsys):
    out = tmp_path / "eval.csv"
    code = main(["eval", "--checkpoint", str(checkpoint), "--corpus", str(corpus), "--features", "one-hot",
                 "--gen-len", "2", "--stride", "2", "--out", str(out)])
    assert code == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["step", "metric", "value", "stderr"] and [r[1] for r in rows[1:]] == ["ce", "cfm"]
    assert "cfm =" in capsys.readouterr().out


def test_profile_five_points_and_determinism(tmp_path, corpus, checkpoint):
    outs = []
    for k in range(2):
        out = tmp_path / f"p{k}.csv"
        code = main(["profile", "--checkpoint", str(checkpoint), "--corpus", str(corpus), "--features", "one-hot",
                     "--G-list", "1,2,3,4,5", "--stride", "2", "--with-offset", "--out", str(out)])
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    rows = list(csv.reader(outs[0].decode().splitlines()))
    assert rows[0] == ["G", "cfm", "stderr", "offset"] and [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5"]


@pytest.mark.parametrize("glist", ["1,x", "0,2", ""])
def test_profile_bad_g_list(corpus, checkpoint, glist):
    assert main(["profile", "--checkpoint", str(checkpoint), "--corpus", str(corpus), "--features", "one-hot",
                 "--G-list", glist]) == 2


def test_profile_g_too_long(corpus, checkpoint):
    assert main(["profile", "--checkpoint", str(checkpoint), "--corpus", str(corpus), "--features", "one-hot",
                 "--G-list", "1,12"]) == 2


def test_bad_checkpoint_is_runtime_failure(tmp_path, corpus):
    bad = tmp_path / "bad.json"
    bad.write_text('{"magic": "x"}')
    assert main(["profile", "--checkpoint", str(bad), "--corpus", str(corpus)]) == 1


def test_network_eval_with_separate_feature_checkpoint(tmp_path, corpus, capsys):
    _, out = train(tmp_path, corpus, "net", "--policy", "transformer", "--features", "network",
                   "--depth", "2", "--width", "8", "--heads", "2", "--max-len", "16", "--max-steps", "1")
    vocab = load_checkpoint(out / "model.json").vocab
    save_checkpoint(TransformerPolicy(vocab, depth=2, width=8, heads=2, max_len=16, seed=9), tmp_path / "f.json")
    code = main(["eval", "--checkpoint", str(out / "model.json"), "--corpus", str(corpus),
                 "--feature-checkpoint", str(tmp_path / "f.json"), "--gen-len", "2", "--stride", "3"])
    assert code == 0 and "cfm =" in capsys.readouterr().out


def test_network_features_need_transformer(corpus, checkpoint):
    assert main(["eval", "--checkpoint", str(checkpoint), "--corpus", str(corpus), "--features", "network",
                 "--gen-len", "2", "--stride", "2"]) == 2


# --- oracle ---------------------------------------------------------------------------


def test_oracle_table(capsys):
    assert main(["oracle", "--instances", "2", "--outcomes", "9", "--dim", "2"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 2 * 5 + 1 + 5
    pq = next(line for line in out.splitlines() if line.startswith("p=q"))
    assert float(pq.split()[3]) <= 1e-8
    assert "non-increasing in alpha on every instance: yes" in out


# --- inspect --------------------------------------------------------------------------


def test_inspect_mask_call_four(capsys):
    assert main(["inspect", "--mask", "12,4,4", "--call", "4"]) == 0
    out = capsys.readouterr().out
    assert "side 14" in out
    grid = [ln for ln in out.splitlines() if ln.strip() and not ln.startswith(("mask", "-"))]
    cells = [["1" if c == "0" else "0" for c in ln.split() if c != "|"] for ln in grid]
    assert ["".join(row) for row in cells] == FIGURE_ROWS


def test_inspect_mask_all_calls(capsys):
    assert main(["inspect", "--mask", "12,4,4"]) == 0
    out = capsys.readouterr().out
    assert out.count("mask T=12") == 4
    assert build_mask(plan_strides(12, 4, 4), 0).side == 8


@pytest.mark.parametrize("argv", [["--mask", "12,4"], ["--mask", "12,4,4", "--call", "5"], []])
def test_inspect_usage_errors(argv):
    assert main(["inspect", *argv]) == 2


def test_inspect_empty_log(tmp_path, capsys):
    log = tmp_path / "train.jsonl"
    log.write_text("")
    assert main(["inspect", str(log)]) == 0
    assert "no steps" in capsys.readouterr().out


def test_inspect_checkpoint_echoes_hash(checkpoint, capsys):
    assert main(["inspect", str(checkpoint)]) == 0
    assert f"hash: {load_checkpoint(checkpoint).content_hash()}" in capsys.readouterr().out


def test_inspect_run_directory(checkpoint, capsys):
    assert main(["inspect", str(checkpoint.parent)]) == 0
    out = capsys.readouterr().out
    assert "run:" in out and "steps: 2" in out


def test_inspect_unreadable(tmp_path):
    assert main(["inspect", str(tmp_path / "missing.json")]) == 1
    garbled = tmp_path / "x.jsonl"
    garbled.write_text("{not json\n")
    assert main(["inspect", str(garbled)]) == 1
