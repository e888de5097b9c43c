"""Hit-maturation search around a parent CDR3.

Candidates are ranked by completion cross-entropy averaged over every
ordering of the context set (lower is better).  Two generators are
provided: greedy left-to-right diversification driven by the model's own
top substitutions, and exhaustive enumeration of single/double mutants.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .checkpoint import as_model
from .errors import OverLengthError
from .model import CausalLM, continuation_token_logprobs, forward_logits, prefix_state
from .seq import (
    AMINO_ACIDS,
    EOS_ID,
    RESIDUE_IDS,
    VOCAB,
    Cdr3Seq,
    Mutation,
    apply_mutations,
    diff_mutations,
    encode_prefix,
    tokenize,
)

MAX_CONTEXT = 6
SCORE_CHUNK = 1024
REPORT_COLUMNS = (
    "parent", "sequence", "mutations", "n_mutations", "avg_loss",
    "min_perm_loss", "max_perm_loss", "rank", "excluded_reason",
)


@dataclass(frozen=True)
class ContextSet:
    """Unordered set of context CDR3s, stored sorted."""

    members: tuple[Cdr3Seq, ...]

    def __init__(self, members: Iterable[str]):
        members = tuple(Cdr3Seq(m) for m in members)
        if not members:
            raise ValueError("context set is empty")
        if len(set(members)) != len(members):
            raise ValueError("context members must be distinct")
        if len(members) > MAX_CONTEXT:
            raise ValueError(f"at most {MAX_CONTEXT} context members (k! orderings are scored)")
        object.__setattr__(self, "members", tuple(sorted(members)))

    def __len__(self):
        return len(self.members)

    def permutations(self) -> list[tuple[Cdr3Seq, ...]]:
        return list(itertools.permutations(self.members))


@dataclass(frozen=True)
class MutantScore:
    parent: Cdr3Seq
    mutations: tuple[Mutation, ...]
    sequence: Cdr3Seq
    per_perm_losses: tuple[float, ...]
    avg_loss: float
    source: str = "exhaustive"

    @property
    def n_mutations(self) -> int:
        return len(self.mutations)

    @property
    def label(self) -> str:
        return "+".join(m.label(self.parent) for m in self.mutations)

    def sort_key(self):
        return (self.avg_loss, self.n_mutations, str(self.sequence))


def score_matrix(model, ctx: ContextSet, candidates: Sequence[str], threads: int = 1) -> np.ndarray:
    """Completion cross-entropy of each candidate under each context ordering.

    Returns ``[len(candidates), k!]``.  The prefix of every ordering is
    encoded once and its keys/values reused for all candidates.  Work is
    split into fixed chunks, so the result does not depend on ``threads``.
    """
    model = as_model(model)
    perms = ctx.permutations()
    cands = [Cdr3Seq(c) for c in candidates]
    out = np.empty((len(cands), len(perms)), dtype=np.float64)
    if not cands:
        return out
    by_len: dict[int, list[int]] = {}
    for i, c in enumerate(cands):
        by_len.setdefault(len(c), []).append(i)
    prefix_len = len(encode_prefix(perms[0]))
    longest = max(by_len)
    if prefix_len + longest + 1 > model.config.max_len:
        raise OverLengthError(f"{prefix_len + longest + 1} tokens exceed max_len={model.config.max_len}")

    chunks = []
    for length, idx in sorted(by_len.items()):
        for s in range(0, len(idx), SCORE_CHUNK):
            part = idx[s : s + SCORE_CHUNK]
            toks = torch.tensor([tokenize(cands[i]) + [EOS_ID] for i in part], dtype=torch.long)
            chunks.append((part, toks))

    def run(j):
        state = prefix_state(model, encode_prefix(perms[j]))
        for part, toks in chunks:
            out[part, j] = -continuation_token_logprobs(model, state, toks).mean(dim=1).numpy()

    with torch.no_grad():
        if threads <= 1:
            for j in range(len(perms)):
                run(j)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run, range(len(perms))))
    return out


def _to_scores(parent, cands, matrix, source) -> list[MutantScore]:
    parent = Cdr3Seq(parent)
    return [
        MutantScore(parent, tuple(diff_mutations(parent, c)), Cdr3Seq(c), tuple(row.tolist()), float(np.mean(row)), source)
        for c, row in zip(cands, matrix)
    ]


def score_candidate(model, ctx: ContextSet, candidate: str, parent: str | None = None) -> MutantScore:
    candidate = Cdr3Seq(candidate)
    parent = candidate if parent is None else Cdr3Seq(parent)
    return _to_scores(parent, [candidate], score_matrix(model, ctx, [candidate]), "single")[0]


def score_candidates(model, ctx: ContextSet, parent: str, candidates: Sequence[str], source: str = "exhaustive", threads: int = 1):
    return _to_scores(parent, candidates, score_matrix(model, ctx, candidates, threads), source)


# --------------------------------------------------------------------------- generators


def enumerate_mutants(parent: str, max_subs: int = 2) -> list[Cdr3Seq]:
    """All single (and, for ``max_subs=2``, double) substitution mutants."""
    if max_subs not in (1, 2):
        raise ValueError("max_subs must be 1 or 2")
    parent = Cdr3Seq(parent)
    alts = [[a for a in AMINO_ACIDS if a != r] for r in parent]
    out = [apply_mutations(parent, [Mutation(i, a)]) for i in range(len(parent)) for a in alts[i]]
    if max_subs == 2:
        for i, j in itertools.combinations(range(len(parent)), 2):
            for a in alts[i]:
                for b in alts[j]:
                    out.append(apply_mutations(parent, [Mutation(i, a), Mutation(j, b)]))
    return out


def n_mutants(length: int, max_subs: int = 2) -> int:
    n = 19 * length
    if max_subs == 2:
        n += math.comb(length, 2) * 19 * 19
    return n


@torch.no_grad()
def greedy_gen(model, ctx_ordered: Sequence[str], parent: str, k_subs: int = 2, topk: int = 3) -> list[Cdr3Seq]:
    """Greedy diversification of ``parent`` under one context ordering.

    At every recursion level a single forward pass over prompt + fixed
    residues + remaining residues proposes the ``topk`` highest-logit tokens
    for each remaining position except the first; each proposal that is a
    residue different from the incumbent is fixed and the remainder
    recursed on with one substitution fewer.  Returns deduplicated
    sequences in discovery order; the first entry is always the parent.
    """
    if k_subs < 0 or topk < 1:
        raise ValueError("k_subs must be >= 0 and topk >= 1")
    model = as_model(model)
    parent = Cdr3Seq(parent)
    prompt = encode_prefix([Cdr3Seq(c) for c in ctx_ordered])
    if len(prompt) + len(parent) + 1 > model.config.max_len:
        raise OverLengthError("greedy prompt exceeds max_len")
    residue_ids = set(RESIDUE_IDS)
    found: dict[str, None] = {}

    def recurse(left: str, right: str, k: int):
        found.setdefault(left + right, None)
        if k == 0 or len(right) < 2:
            return
        logits = forward_logits(model, prompt + tokenize(left + right))
        base = len(prompt) + len(left)
        for p in range(1, len(right)):
            # row base+p-1 predicts the token at base+p; stable sort keeps ties in id order
            order = torch.argsort(logits[base + p - 1], descending=True, stable=True)[:topk]
            for s in order.tolist():
                if s in residue_ids and VOCAB[s] != right[p]:
                    recurse(left + right[:p] + VOCAB[s], right[p + 1 :], k - 1)

    recurse("", str(parent), k_subs)
    return [Cdr3Seq(s) for s in found]


def rank(scores: Iterable[MutantScore], exclusions: Iterable[str] = (), top_m: int | None = None):
    """Sort ascending by (avg_loss, n_mutations, sequence); returns (kept, excluded)."""
    excl = {str(e) for e in exclusions}
    ordered = sorted(scores, key=MutantScore.sort_key)
    kept = [s for s in ordered if str(s.sequence) not in excl]
    dropped = [s for s in ordered if str(s.sequence) in excl]
    if top_m:
        kept = kept[:top_m]
    return kept, dropped


def exhaustive_search(model, ctx: ContextSet, parent: str, max_subs: int = 2, top_m: int | None = 8,
                      exclusions: Iterable[str] = (), threads: int = 1, return_excluded: bool = False):
    parent = Cdr3Seq(parent)
    cands = enumerate_mutants(parent, max_subs)
    kept, dropped = rank(score_candidates(model, ctx, parent, cands, "exhaustive", threads), exclusions, top_m)
    return (kept, dropped) if return_excluded else kept


def greedy_search(model, ctx: ContextSet, parent: str, k_subs: int = 2, topk: int = 3, top_m: int | None = None,
                  exclusions: Iterable[str] = (), ctx_order: Sequence[str] | None = None, threads: int = 1,
                  return_excluded: bool = False):
    """Greedy candidates re-scored with the permutation-averaged loss.

    ``ctx_order`` is the ordering used for generation (defaults to the sorted
    set).  The parent is not part of the ranking; score it separately as the
    baseline.
    """
    parent = Cdr3Seq(parent)
    order = list(ctx_order) if ctx_order is not None else list(ctx.members)
    cands = [c for c in greedy_gen(model, order, parent, k_subs, topk) if c != parent]
    kept, dropped = rank(score_candidates(model, ctx, parent, cands, "greedy", threads), exclusions, top_m)
    return (kept, dropped) if return_excluded else kept


def write_report(kept: Sequence[MutantScore], excluded: Sequence[MutantScore], path, reason: str = "training_set") -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        rows = [(s, i + 1, "") for i, s in enumerate(kept)] + [(s, "", reason) for s in excluded]
        for s, r, why in rows:
            w.writerow([
                s.parent, s.sequence, s.label, s.n_mutations, repr(s.avg_loss),
                repr(min(s.per_perm_losses)), repr(max(s.per_perm_losses)), r, why,
            ])


def read_report(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
