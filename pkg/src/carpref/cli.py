"""``carpref`` command line: one subcommand per pipeline stage.

Every command reads the layered configuration (defaults, ``--config``,
``--set``, ``--seed``), writes its outputs under ``--out`` and records a
``manifest.json`` next to them.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import torch

from . import __version__
from . import config as C
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    build_dataset,
    group_by_cdr3,
    ingest_scores,
    load_pairs,
    serialize_pairs,
    write_scores,
)
from .errors import CarprefError, ConfigError, NonFiniteError, ParseError
from .evalkit import (
    OracleConfig,
    PlatePair,
    background_corpus,
    emit_scatter_report,
    generate_scored_candidates,
    normalized_scores,
    oracle_fitness,
    permutation_pvalue,
)
from .gradcheck import run_gradcheck
from .search import (
    ContextSet,
    MutantScore,
    enumerate_mutants,
    exhaustive_search,
    greedy_search,
    read_report,
    score_candidate,
    write_report,
)
from .seq import Cdr3Seq, diff_mutations
from .trainer import finetune, pretrain

log = logging.getLogger("carpref")

EXIT_IO = 3


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Run:
    """Output directory plus the manifest being assembled for one command."""

    def __init__(self, command: str, args, cfg: dict):
        self.command, self.args, self.cfg = command, args, cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, dict] = {}
        self.started = dt.datetime.now(dt.timezone.utc).isoformat()

    def input(self, name: str, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"{name}: no such file {path}")
        self.inputs[name] = {"path": str(path), "sha256": sha256_file(path)}
        return path

    def output(self, name: str) -> Path:
        path = self.out / name
        self.outputs[name] = {"path": str(path)}
        return path

    def finish(self, summary: dict | None = None) -> None:
        for entry in self.outputs.values():
            entry["sha256"] = sha256_file(entry["path"])
        params = {k: v for k, v in vars(self.args).items() if k not in ("func", "config", "out", "set", "verbose")}
        write_json(
            {
                "command": self.command,
                "version": __version__,
                "config": self.cfg,
                "arguments": params,
                "inputs": self.inputs,
                "seeds": {s: self.cfg[s].get("seed") for s in C.SEEDED},
                "outputs": self.outputs,
                "summary": summary or {},
                "started_at": self.started,
                "finished_at": dt.datetime.now(dt.timezone.utc).isoformat(),
            },
            self.out / "manifest.json",
        )


# --------------------------------------------------------------------------- commands


def cmd_synth_gen(run: Run):
    cfg = run.cfg
    n_targets = C._typed(cfg, "oracle.n_targets", int)
    n_per = C._typed(cfg, "oracle.n_per_target", int)
    if n_targets < 1 or n_per < 1:
        raise ConfigError("oracle.n_targets and oracle.n_per_target must be >= 1")
    cands, oracles = generate_scored_candidates(C.oracle_settings(cfg), n_per, n_targets)
    write_scores(cands, run.output("scores.tsv"))
    write_json({t: o.to_dict() for t, o in oracles.items()}, run.output("oracles.json"))
    return {"n_candidates": len(cands), "targets": sorted(oracles)}


def cmd_build_dataset(run: Run):
    dcfg = C.dataset_config(run.cfg)
    grouped = group_by_cdr3(ingest_scores(run.input("scores", run.args.scores)))
    train, val, stats = build_dataset(grouped, dcfg)
    serialize_pairs(train, run.output("train.jsonl"))
    serialize_pairs(val, run.output("val.jsonl"))
    write_json(stats.to_dict(), run.output("stats.json"))
    return {"n_train": stats.n_train, "n_val": stats.n_val, "discarded_straddlers": stats.discarded}


def _resume_step(ck) -> int:
    extra = ck.provenance.extra or {}
    return int(extra.get("final_step", ck.provenance.step or 0))


def cmd_pretrain(run: Run):
    cfg, args = run.cfg, run.args
    mcfg = C.model_config(cfg)
    tcfg = C.train_config(cfg, "pretrain")
    if args.corpus:
        lines = run.input("corpus", args.corpus).read_text(encoding="utf-8").split()
        corpus = [Cdr3Seq(s) for s in lines]
    else:
        corpus = background_corpus(
            C._typed(cfg, "pretrain.corpus_size", int), tcfg.seed,
            C._typed(cfg, "oracle.len_min", int), C._typed(cfg, "oracle.len_max", int),
            C.get(cfg, "pretrain.concentration"), C._typed(cfg, "pretrain.chain", int),
        )
    model, start = None, 0
    if args.checkpoint:
        ck = load_checkpoint(run.input("checkpoint", args.checkpoint))
        model, start, mcfg = ck.to_model(), _resume_step(ck), ck.config
    ck, tlog = pretrain(corpus, mcfg, tcfg, model=model, start_step=start)
    save_checkpoint(ck, run.output("pretrained.ckpt"))
    tlog.to_csv(run.output("train_log.csv"))
    return {"best_step": tlog.best_step, "validation_loss": ck.provenance.validation_loss}


def cmd_finetune(run: Run):
    cfg, args = run.cfg, run.args
    tcfg = C.train_config(cfg, "finetune")
    start_ck = load_checkpoint(run.input("checkpoint", args.checkpoint))
    reference, start = None, 0
    if start_ck.provenance.phase == "finetuned":
        if not args.reference:
            raise ConfigError("resuming from a fine-tuned checkpoint requires --reference (the pretrained checkpoint)")
        start = _resume_step(start_ck)
    if args.reference:
        reference = load_checkpoint(run.input("reference", args.reference))
    train = load_pairs(run.input("train", args.train))
    val = load_pairs(run.input("val", args.val))
    ck, tlog = finetune(start_ck, train, val, tcfg, reference=reference, start_step=start)
    save_checkpoint(ck, run.output("finetuned.ckpt"))
    tlog.to_csv(run.output("train_log.csv"))
    last = tlog.records[-1]
    return {"best_step": tlog.best_step, "validation_loss": ck.provenance.validation_loss, "final_accuracy": last.accuracy}


def _read_list(run: Run, name: str, value: str) -> list[str]:
    """Comma-separated values, or a file with one entry per line (pairs files contribute every CDR3)."""
    if os.path.isfile(value):
        path = run.input(name, value)
        if path.suffix == ".jsonl":
            return sorted({str(c) for p in load_pairs(path) for c in p.cdr3s()})
        return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [v.strip() for v in value.split(",") if v.strip()]


def cmd_search(run: Run):
    cfg, args = run.cfg, run.args
    k = C._typed(cfg, "data.k_context", int)
    members = _read_list(run, "context", args.context)
    if len(members) != k:
        raise ConfigError(f"context has {len(members)} entries but data.k_context={k}")
    ctx = ContextSet(members)
    parent = Cdr3Seq(args.parent)
    mode = args.mode or C.get(cfg, "search.mode")
    max_subs = args.max_subs or C._typed(cfg, "search.max_subs", int)
    top_m = args.top_m if args.top_m is not None else C.get(cfg, "search.top_m")
    top_m = int(top_m) if top_m else None
    exclusions = _read_list(run, "exclude", args.exclude_file) if args.exclude_file else []
    ck = load_checkpoint(run.input("checkpoint", args.checkpoint))
    model = ck.to_model()
    if mode == "exhaustive":
        n_scored = len(enumerate_mutants(parent, max_subs))
        kept, dropped = exhaustive_search(model, ctx, parent, max_subs, top_m, exclusions, args.threads, return_excluded=True)
    elif mode == "greedy":
        topk = args.topk or C._typed(cfg, "search.topk", int)
        k_subs = C._typed(cfg, "search.k_subs", int)
        ctx_order = members  # generation follows the order given on the command line
        kept, dropped = greedy_search(model, ctx, parent, k_subs, topk, top_m, exclusions, ctx_order,
                                      args.threads, return_excluded=True)
        n_scored = None
    else:
        raise ConfigError(f"search.mode must be greedy or exhaustive, got {mode!r}")
    write_report(kept, dropped, run.output("report.csv"))
    base = score_candidate(model, ctx, parent)
    summary = {
        "mode": mode,
        "parent": str(parent),
        "baseline_avg_loss": base.avg_loss,
        "n_kept": len(kept),
        "n_excluded": len(dropped),
    }
    if n_scored is not None:
        summary["n_scored"] = n_scored
    write_json(summary, run.output("summary.json"))
    return summary


def _read_activations(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["sequence", "activation"]:
            raise ParseError(1, "expected header sequence<TAB>activation", path)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                out[str(Cdr3Seq(parts[0]))] = float(parts[1])
            except (IndexError, ValueError) as exc:
                raise ParseError(lineno, str(exc), path) from exc
    return out


def cmd_evaluate(run: Run):
    args = run.args
    rows = [r for r in read_report(run.input("report", args.report)) if not r["excluded_reason"]]
    if not rows:
        raise ConfigError("search report has no ranked rows")
    parent = Cdr3Seq(rows[0]["parent"])
    scores = [
        MutantScore(parent, tuple(diff_mutations(parent, r["sequence"])), Cdr3Seq(r["sequence"]), (), float(r["avg_loss"]), "report")
        for r in rows
    ]
    if args.oracle:
        oracles = json.loads(run.input("oracle", args.oracle).read_text(encoding="utf-8"))
        if args.target not in oracles:
            raise ConfigError(f"--target {args.target!r} not in oracle file (have {sorted(oracles)})")
        oracle = OracleConfig.from_dict(oracles[args.target])
        fit = lambda s: oracle_fitness(oracle, s, noiseless=not args.noisy)
        acts = {str(s.sequence): fit(s.sequence) for s in scores}
        baseline = fit(parent)
    elif args.activations:
        acts = _read_activations(run.input("activations", args.activations))
        if args.plate_b:
            if not args.reference_id:
                raise ConfigError("--plate-b requires --reference-id")
            plate_b = _read_activations(run.input("plate_b", args.plate_b))
            acts = normalized_scores(PlatePair(args.reference_id, acts, plate_b))
        baseline = acts.get(str(parent), math.nan)
    else:
        raise ConfigError("evaluate needs --oracle/--target or --activations")
    r, p = emit_scatter_report(scores, acts, baseline, run.output("scatter.csv"))
    summary = {"n": len(scores), "r": r, "p_value": p, "baseline": baseline}
    if args.permutations and len(scores) >= 3 and not math.isnan(r):
        summary["permutation_p_value"] = permutation_pvalue(
            [s.avg_loss for s in scores], [acts[str(s.sequence)] for s in scores], args.permutations,
            C._typed(run.cfg, "data.seed", int),
        )
    write_json(summary, run.output("correlation.json"))
    return summary


def cmd_gradcheck(run: Run):
    args = run.args
    seed = args.seed if args.seed is not None else 0
    res = run_gradcheck(seed=seed, draws=args.draws, corrupt=args.corrupt)
    summary = {
        "max_rel_error": res.max_rel_error,
        "n_checked": res.n_checked,
        "per_objective": res.per_objective,
        "tolerance": args.tol,
        "passed": res.passed(args.tol),
    }
    write_json(summary, run.output("gradcheck.json"))
    print(f"gradcheck {'PASS' if summary['passed'] else 'FAIL'}: max relative error {res.max_rel_error:.3e}")
    return summary


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for scoring")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", required=True, help="run directory for outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="carpref", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"carpref {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="score a synthetic library with the oracle")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("build-dataset", parents=[common], help="turn scored candidates into preference pairs")
    p.add_argument("--scores", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("pretrain", parents=[common], help="next-token pretraining")
    p.add_argument("--corpus", help="one CDR3 per line (default: generated background corpus)")
    p.add_argument("--checkpoint", help="continue from this checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="preference fine-tuning")
    p.add_argument("--checkpoint", required=True, help="pretrained (or fine-tuned, to resume) checkpoint")
    p.add_argument("--reference", help="frozen reference checkpoint (required when resuming)")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("search", parents=[common], help="rank mutants of a parent CDR3")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--parent", required=True)
    p.add_argument("--context", required=True, help="comma-separated CDR3s or a file with one per line")
    p.add_argument("--mode", choices=("greedy", "exhaustive"))
    p.add_argument("--max-subs", type=int, choices=(1, 2))
    p.add_argument("--top-m", type=int, help="keep this many ranked mutants (0 keeps all)")
    p.add_argument("--topk", type=int, help="substitutions followed per position (greedy)")
    p.add_argument("--exclude-file", help="CDR3s to drop: one per line, or a pairs .jsonl file")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", parents=[common], help="correlate search losses with activations")
    p.add_argument("--report", required=True, help="search report CSV")
    p.add_argument("--oracle", help="oracles.json from synth-gen")
    p.add_argument("--target", help="target id inside the oracle file")
    p.add_argument("--noisy", action="store_true", help="use noisy oracle measurements")
    p.add_argument("--activations", help="TSV with header sequence<TAB>activation")
    p.add_argument("--plate-b", help="second plate, normalized to the first via --reference-id")
    p.add_argument("--reference-id", help="reference CDR3 present on both plates")
    p.add_argument("--permutations", type=int, default=0, help="also report a permutation-test p-value")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--draws", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, CarprefError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # single-threaded kernels keep every reduction order fixed; --threads only splits work
    torch.set_num_threads(1)
    try:
        cfg = C.build_config(args.config, args.set, args.seed)
        run = Run(args.command, args, cfg)
        summary = args.func(run)
        run.finish(summary)
    except (CarprefError, OSError, ValueError) as exc:
        print(f"carpref {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    if args.command == "gradcheck" and not summary["passed"]:
        return NonFiniteError.exit_code
    return 0
