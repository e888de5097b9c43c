"""Scored candidates -> preference pairs with a CDR3-disjoint train/val split."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .errors import ConfigError, DegenerateSplitError, ParseError, SequenceError
from .seq import Cdr3Seq

log = logging.getLogger(__name__)

SCORES_HEADER = ("target_id", "cdr3", "score")
PAIR_FIELDS = ("target_id", "context", "chosen", "rejected")


@dataclass(frozen=True)
class ScoredCandidate:
    target_id: str
    cdr3: Cdr3Seq
    score: float

    def __post_init__(self):
        object.__setattr__(self, "cdr3", Cdr3Seq(self.cdr3))
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for {self.cdr3}")


@dataclass(frozen=True)
class DatasetConfig:
    """Thresholds have no defaults: strict ``score > t_c`` is good, ``score < t_r`` is poor."""

    t_c: float
    t_r: float
    n: int = 10
    k: int = 5
    val_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.t_r > self.t_c:
            raise ConfigError(f"data.t_r={self.t_r} must not exceed data.t_c={self.t_c}")
        if self.n < 1:
            raise ConfigError("data.n_pairs must be >= 1")
        if self.k < 1:
            raise ConfigError("data.k_context must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("data.val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class PreferencePair:
    target_id: str
    context: tuple[Cdr3Seq, ...]
    chosen: Cdr3Seq
    rejected: Cdr3Seq

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(Cdr3Seq(c) for c in self.context))
        object.__setattr__(self, "chosen", Cdr3Seq(self.chosen))
        object.__setattr__(self, "rejected", Cdr3Seq(self.rejected))

    def cdr3s(self) -> tuple[Cdr3Seq, ...]:
        return self.context + (self.chosen, self.rejected)

    def to_record(self) -> dict:
        return {
            "target_id": self.target_id,
            "context": list(self.context),
            "chosen": str(self.chosen),
            "rejected": str(self.rejected),
        }


def ingest_scores(path) -> list[ScoredCandidate]:
    """Read a ``target_id<TAB>cdr3<TAB>score`` file."""
    path = Path(path)
    out = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            return out
        if tuple(h.strip() for h in header) != SCORES_HEADER:
            raise ParseError(1, f"expected header {'/'.join(SCORES_HEADER)}, got {header}", path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(lineno, f"expected 3 fields, got {len(row)}", path)
            try:
                out.append(ScoredCandidate(row[0], Cdr3Seq(row[1]), float(row[2])))
            except (SequenceError, ValueError) as exc:
                raise ParseError(lineno, str(exc), path) from exc
    return out


def write_scores(cands: Iterable[ScoredCandidate], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(SCORES_HEADER) + "\n")
        for c in cands:
            fh.write(f"{c.target_id}\t{c.cdr3}\t{c.score!r}\n")


def group_by_cdr3(cands: Iterable[ScoredCandidate]) -> dict[tuple[str, Cdr3Seq], float]:
    """Best score per (target, CDR3)."""
    grouped: dict[tuple[str, Cdr3Seq], float] = {}
    for c in cands:
        key = (c.target_id, c.cdr3)
        if key not in grouped or c.score > grouped[key]:
            grouped[key] = c.score
    return grouped


def _derived_rng(*parts) -> random.Random:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def _unit_hash(seed, text) -> float:
    digest = hashlib.sha256(f"{seed}\x1f{text}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64


def classify(grouped, cfg: DatasetConfig) -> dict[str, tuple[list[Cdr3Seq], list[Cdr3Seq]]]:
    """Per target: (sorted good performers, sorted poor performers)."""
    classes: dict[str, tuple[list, list]] = {}
    for (target, cdr3), score in grouped.items():
        good, poor = classes.setdefault(target, ([], []))
        if score > cfg.t_c:
            good.append(cdr3)
        elif score < cfg.t_r:
            poor.append(cdr3)
    return {t: (sorted(g), sorted(p)) for t, (g, p) in sorted(classes.items())}


def build_pairs(grouped, cfg: DatasetConfig, skipped: list | None = None) -> list[PreferencePair]:
    """Up to ``n`` pairs per good performer.

    Rejected partners are drawn without replacement from the poor pool; each
    pair gets its own ``k`` context members drawn from the other good
    performers.  Randomness is keyed on (seed, target, CDR3) so the output
    does not depend on iteration order.
    """
    pairs = []
    for target, (good, poor) in classify(grouped, cfg).items():
        if not good:
            continue
        if len(good) < cfg.k + 1 or not poor:
            log.warning(
                "target %s skipped: %d good (need %d), %d poor", target, len(good), cfg.k + 1, len(poor)
            )
            if skipped is not None:
                skipped.append(target)
            continue
        for g in good:
            rng = _derived_rng(cfg.seed, target, g)
            others = [c for c in good if c != g]
            for rejected in rng.sample(poor, min(cfg.n, len(poor))):
                pairs.append(PreferencePair(target, tuple(rng.sample(others, cfg.k)), g, rejected))
    return pairs


def is_val_cdr3(cdr3: str, cfg: DatasetConfig) -> bool:
    return _unit_hash(cfg.seed, cdr3) < cfg.val_fraction


class Split(NamedTuple):
    train: list
    val: list
    discarded: int


def split_train_val(pairs, cfg: DatasetConfig) -> Split:
    """Keep pairs whose CDR3s all fall on one side of the hashed partition."""
    train, val, discarded = [], [], 0
    for p in pairs:
        sides = {is_val_cdr3(c, cfg) for c in p.cdr3s()}
        if sides == {True}:
            val.append(p)
        elif sides == {False}:
            train.append(p)
        else:
            discarded += 1
    if not train or not val:
        raise DegenerateSplitError(f"split produced {len(train)} train / {len(val)} val pairs")
    return Split(train, val, discarded)


@dataclass
class DatasetStats:
    n_train: int
    n_val: int
    discarded: int
    skipped_targets: list = field(default_factory=list)
    pairs_per_target: dict = field(default_factory=dict)
    gap_histogram: dict = field(default_factory=dict)
    min_gap: float = math.nan

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_val": self.n_val,
            "discarded_straddlers": self.discarded,
            "skipped_targets": self.skipped_targets,
            "pairs_per_target": self.pairs_per_target,
            "score_gap_histogram": self.gap_histogram,
            "min_score_gap": self.min_gap,
        }


def build_dataset(grouped, cfg: DatasetConfig) -> tuple[list, list, DatasetStats]:
    """Partition CDR3s first, build pairs inside each side, then split.

    Building pairs over the whole universe and filtering afterwards would
    discard almost every pair once ``k + 2`` CDR3s must share a side.
    """
    sides = {True: {}, False: {}}
    for key, score in grouped.items():
        sides[is_val_cdr3(key[1], cfg)][key] = score
    skipped: list = []
    pairs = build_pairs(sides[False], cfg, skipped) + build_pairs(sides[True], cfg, skipped)
    train, val, discarded = split_train_val(pairs, cfg)
    gaps = [grouped[(p.target_id, p.chosen)] - grouped[(p.target_id, p.rejected)] for p in pairs]
    hist = Counter(math.floor(g * 2) / 2 for g in gaps)
    stats = DatasetStats(
        n_train=len(train),
        n_val=len(val),
        discarded=discarded,
        skipped_targets=sorted(set(skipped)),
        pairs_per_target=dict(sorted(Counter(p.target_id for p in pairs).items())),
        gap_histogram={f"{k:.1f}": v for k, v in sorted(hist.items())},
        min_gap=min(gaps) if gaps else math.nan,
    )
    return train, val, stats


def validate_pairs(pairs, grouped, cfg: DatasetConfig) -> None:
    """Re-check every pair invariant; raises ``AssertionError`` on the first violation."""
    for p in pairs:
        assert len(p.context) == cfg.k, p
        assert len(set(p.context)) == cfg.k, p
        assert p.chosen not in p.context, p
        assert p.chosen != p.rejected, p
        assert all(grouped[(p.target_id, c)] > cfg.t_c for c in p.context), p
        assert grouped[(p.target_id, p.chosen)] > cfg.t_c, p
        assert grouped[(p.target_id, p.rejected)] < cfg.t_r, p


def serialize_pairs(pairs: Iterable[PreferencePair], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_record()) + "\n")


def load_pairs(path) -> list[PreferencePair]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or set(rec) != set(PAIR_FIELDS):
                    raise ValueError(f"expected fields {PAIR_FIELDS}")
                if not isinstance(rec["context"], list):
                    raise ValueError("context must be an array")
                out.append(PreferencePair(str(rec["target_id"]), tuple(rec["context"]), rec["chosen"], rec["rejected"]))
            except (ValueError, TypeError) as exc:
                raise ParseError(lineno, str(exc), path) from exc
    return out
