import json
from pathlib import Path

import pytest

from carpref import config as C
from carpref.cli import main
from carpref.errors import ConfigError
from carpref.search import read_report

CFG = """
oracle: {n_targets: 2, n_per_target: 500}
data: {t_c: 2.5, t_r: 0.0, k_context: 2, val_fraction: 0.15}
model: {d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_len: 48}
pretrain: {corpus_size: 200, epochs: 1, batch_size: 32}
train: {epochs: 1, batch_size: 32, eval_every: 10}
"""


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text(CFG)
    assert run("synth-gen", "--config", cfg, "--out", root / "s") == 0
    assert run("build-dataset", "--config", cfg, "--scores", root / "s/scores.tsv", "--out", root / "d") == 0
    assert run("pretrain", "--config", cfg, "--out", root / "p") == 0
    assert run("finetune", "--config", cfg, "--checkpoint", root / "p/pretrained.ckpt",
               "--train", root / "d/train.jsonl", "--val", root / "d/val.jsonl", "--out", root / "f") == 0
    first = json.loads((root / "d/train.jsonl").read_text().splitlines()[0])
    return root, cfg, first["chosen"], first["context"]


def outputs(run_dir: Path) -> dict:
    return {k: v["sha256"] for k, v in json.loads((run_dir / "manifest.json").read_text())["outputs"].items()}


def test_manifest_contents(pipeline):
    root, *_ = pipeline
    m = json.loads((root / "d/manifest.json").read_text())
    assert m["command"] == "build-dataset"
    assert m["config"]["data"]["t_c"] == 2.5
    assert set(m["inputs"]) == {"scores"} and len(m["inputs"]["scores"]["sha256"]) == 64
    assert set(m["outputs"]) == {"train.jsonl", "val.jsonl", "stats.json"}
    assert m["seeds"]["data"] == 0 and m["version"]
    assert m["started_at"] <= m["finished_at"]
    stats = json.loads((root / "d/stats.json").read_text())
    assert stats["n_train"] + stats["n_val"] + stats["discarded_straddlers"] == sum(stats["pairs_per_target"].values())


def test_rerun_is_byte_identical(pipeline, tmp_path):
    root, cfg, *_ = pipeline
    assert run("synth-gen", "--config", cfg, "--out", tmp_path / "s") == 0
    assert run("build-dataset", "--config", cfg, "--scores", tmp_path / "s/scores.tsv", "--out", tmp_path / "d") == 0
    assert run("pretrain", "--config", cfg, "--out", tmp_path / "p") == 0
    assert run("finetune", "--config", cfg, "--checkpoint", tmp_path / "p/pretrained.ckpt",
               "--train", tmp_path / "d/train.jsonl", "--val", tmp_path / "d/val.jsonl", "--out", tmp_path / "f") == 0
    for stage in "sdpf":
        assert outputs(root / stage) == outputs(tmp_path / stage), stage


def test_search_thread_invariance_and_count(pipeline, tmp_path):
    root, cfg, parent, ctx = pipeline
    args = ["search", "--config", cfg, "--checkpoint", root / "f/finetuned.ckpt", "--parent", parent,
            "--context", ",".join(ctx), "--max-subs", 1, "--top-m", 0, "--exclude-file", root / "d/train.jsonl"]
    assert run(*args, "--threads", 1, "--out", tmp_path / "a") == 0
    assert run(*args, "--threads", 4, "--out", tmp_path / "b") == 0
    a, b = (tmp_path / "a/report.csv").read_bytes(), (tmp_path / "b/report.csv").read_bytes()
    assert a == b
    assert len(read_report(tmp_path / "a/report.csv")) == 19 * len(parent)
    summary = json.loads((tmp_path / "a/summary.json").read_text())
    assert summary["n_scored"] == 19 * len(parent)


def test_greedy_within_exhaustive(pipeline, tmp_path):
    root, cfg, parent, ctx = pipeline
    base = ["search", "--config", cfg, "--checkpoint", root / "f/finetuned.ckpt", "--parent", parent,
            "--context", ",".join(ctx), "--top-m", 0]
    assert run(*base, "--mode", "greedy", "--out", tmp_path / "g") == 0
    assert run(*base, "--mode", "exhaustive", "--out", tmp_path / "e") == 0
    greedy = {r["sequence"]: float(r["avg_loss"]) for r in read_report(tmp_path / "g/report.csv")}
    exhaustive = {r["sequence"]: float(r["avg_loss"]) for r in read_report(tmp_path / "e/report.csv")}
    assert greedy and set(greedy) <= set(exhaustive)
    assert all(greedy[s] == exhaustive[s] for s in greedy)
    assert json.loads((tmp_path / "e/summary.json").read_text())["n_scored"] == len(exhaustive)


def test_evaluate_with_oracle(pipeline, tmp_path):
    root, cfg, parent, ctx = pipeline
    assert run("search", "--config", cfg, "--checkpoint", root / "f/finetuned.ckpt", "--parent", parent,
               "--context", ",".join(ctx), "--max-subs", 1, "--top-m", 20, "--out", tmp_path / "x") == 0
    target = json.loads((root / "d/train.jsonl").read_text().splitlines()[0])["target_id"]
    assert run("evaluate", "--config", cfg, "--report", tmp_path / "x/report.csv", "--oracle", root / "s/oracles.json",
               "--target", target, "--out", tmp_path / "e") == 0
    summary = json.loads((tmp_path / "e/correlation.json").read_text())
    assert summary["n"] == 20 and -1 <= summary["r"] <= 1
    rows = (tmp_path / "e/scatter.csv").read_text().splitlines()
    assert len(rows) == 22 and rows[-1].startswith("__summary__")


def test_evaluate_with_plates(pipeline, tmp_path):
    root, cfg, parent, ctx = pipeline
    assert run("search", "--config", cfg, "--checkpoint", root / "f/finetuned.ckpt", "--parent", parent,
               "--context", ",".join(ctx), "--max-subs", 1, "--top-m", 4, "--out", tmp_path / "x") == 0
    seqs = [r["sequence"] for r in read_report(tmp_path / "x/report.csv")]
    (tmp_path / "a.tsv").write_text(f"sequence\tactivation\n{parent}\t10\n{seqs[0]}\t4\n{seqs[1]}\t2\n")
    (tmp_path / "b.tsv").write_text(f"sequence\tactivation\n{parent}\t5\n{seqs[2]}\t3\n{seqs[3]}\t1\n")
    assert run("evaluate", "--config", cfg, "--report", tmp_path / "x/report.csv", "--activations", tmp_path / "a.tsv",
               "--plate-b", tmp_path / "b.tsv", "--reference-id", parent, "--out", tmp_path / "e") == 0
    summary = json.loads((tmp_path / "e/correlation.json").read_text())
    assert summary["baseline"] == 10.0
    acts = [float(line.split(",")[3]) for line in (tmp_path / "e/scatter.csv").read_text().splitlines()[1:-1]]
    assert acts == [4.0, 2.0, 6.0, 2.0]


def test_resume_continues_steps(pipeline, tmp_path):
    root, cfg, *_ = pipeline
    common = ["--config", cfg, "--train", root / "d/train.jsonl", "--val", root / "d/val.jsonl"]
    assert run("finetune", *common, "--checkpoint", root / "f/finetuned.ckpt", "--out", tmp_path / "r") == 2
    assert run("finetune", *common, "--checkpoint", root / "f/finetuned.ckpt", "--reference",
               root / "p/pretrained.ckpt", "--out", tmp_path / "r") == 0
    prev = (root / "f/train_log.csv").read_text().splitlines()
    new = (tmp_path / "r/train_log.csv").read_text().splitlines()
    assert int(new[1].split(",")[0]) == int(prev[-1].split(",")[0])


def test_step0_log_matches_init_constant(pipeline):
    root, *_ = pipeline
    row = (root / "f/train_log.csv").read_text().splitlines()[1].split(",")
    assert row[0] == "0" and abs(float(row[3]) - 0.5) <= 1e-9 and float(row[7]) == 0.0


@pytest.mark.parametrize("argv,code,message", [
    (["build-dataset", "--set", "data.t_c=1", "--scores", "x"], 2, "data.t_r"),
    (["build-dataset", "--set", "data.t_c=0", "--set", "data.t_r=1", "--scores", "x"], 2, "must not exceed"),
    (["synth-gen", "--set", "oracle.n_targets=0"], 2, "oracle.n_targets"),
    (["build-dataset", "--set", "data.t_c=1", "--set", "data.t_r=0", "--scores", "missing.tsv"], 3, "missing.tsv"),
])
def test_exit_codes(tmp_path, argv, code, message, capsys):
    assert run(*argv, "--out", tmp_path / "o") == code
    assert message in capsys.readouterr().err


def test_wrong_context_size(pipeline, tmp_path):
    root, cfg, parent, ctx = pipeline
    (tmp_path / "ctx.txt").write_text("\n".join(ctx[:1]) + "\n")
    code = run("search", "--config", cfg, "--checkpoint", root / "f/finetuned.ckpt", "--parent", parent,
               "--context", tmp_path / "ctx.txt", "--out", tmp_path / "o")
    assert code == 2


def test_unknown_loss_variant(pipeline, tmp_path):
    root, cfg, *_ = pipeline
    assert run("finetune", "--config", cfg, "--set", "loss.variant=ipo", "--checkpoint", root / "p/pretrained.ckpt",
               "--train", root / "d/train.jsonl", "--val", root / "d/val.jsonl", "--out", tmp_path / "o") == 2


def test_corrupt_input_is_io_error(pipeline, tmp_path):
    root, cfg, *_ = pipeline
    bad = tmp_path / "bad.tsv"
    bad.write_text("target_id\tcdr3\tscore\nT0\tACX\t1.0\n")
    assert run("build-dataset", "--config", cfg, "--scores", bad, "--out", tmp_path / "o") == 3


def test_gradcheck_command(tmp_path):
    assert run("gradcheck", "--draws", 1, "--seed", 3, "--out", tmp_path / "a") == 0
    assert run("gradcheck", "--draws", 1, "--seed", 3, "--out", tmp_path / "b") == 0
    a, b = (json.loads((tmp_path / d / "gradcheck.json").read_text()) for d in "ab")
    assert a == b and a["passed"] and a["max_rel_error"] < 1e-4
    assert run("gradcheck", "--draws", 1, "--corrupt", 1e-3, "--out", tmp_path / "c") == 4


def test_config_layering(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"data": {"t_c": 1, "t_r": 0}, "train": {"lr": 0.01}}')
    cfg = C.build_config(path, ["train.epochs=3", "loss.variant=hinge"], seed=7)
    assert cfg["train"]["lr"] == 0.01 and cfg["train"]["epochs"] == 3 and cfg["train"]["seed"] == 7
    assert C.loss_config(cfg).variant == "hinge"
    assert C.dataset_config(cfg).seed == 7
    with pytest.raises(ConfigError, match="data.t_c"):
        C.dataset_config(C.build_config(None, ["data.t_r=0"]))
    with pytest.raises(ConfigError):
        C.build_config(None, ["novalue"])
    with pytest.raises(ConfigError, match="model.d_model"):
        C.model_config(C.build_config(None, ["model.d_model=abc"]))
