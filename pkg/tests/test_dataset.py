import logging
import random

import pytest

from carpref.errors import ConfigError, DegenerateSplitError, ParseError
from carpref.dataset import (
    DatasetConfig,
    PreferencePair,
    ScoredCandidate,
    build_dataset,
    build_pairs,
    group_by_cdr3,
    ingest_scores,
    is_val_cdr3,
    load_pairs,
    serialize_pairs,
    split_train_val,
    validate_pairs,
    write_scores,
)
from carpref.seq import AMINO_ACIDS

CFG = DatasetConfig(t_c=0.5, t_r=0.0, n=10, k=5, val_fraction=0.2, seed=0)


def seqs(n, seed=0, length=8):
    rng = random.Random(seed)
    out = set()
    while len(out) < n:
        out.add("".join(rng.choice(AMINO_ACIDS) for _ in range(length)))
    return sorted(out)


def universe(n_good, n_poor, target="T0", seed=0):
    pool = seqs(n_good + n_poor, seed)
    g = {(target, s): 1.0 + i * 0.01 for i, s in enumerate(pool[:n_good])}
    g.update({(target, s): -1.0 - i * 0.01 for i, s in enumerate(pool[n_good:])})
    return g


def test_ingest(tmp_path):
    p = tmp_path / "s.tsv"
    p.write_text("target_id\tcdr3\tscore\nT0\tACD\t0.5\nT0\tEFG\t-1\nT1\tACD\t2.0\n")
    cands = ingest_scores(p)
    assert len(cands) == 3 and cands[2] == ScoredCandidate("T1", "ACD", 2.0)
    p.write_text("target_id\tcdr3\tscore\n")
    assert ingest_scores(p) == []
    p.write_text("target_id\tcdr3\tscore\nT0\tACD\t0.5\nT0\tACX\t1.0\n")
    with pytest.raises(ParseError) as err:
        ingest_scores(p)
    assert err.value.line == 3


def test_scores_roundtrip(tmp_path):
    cands = [ScoredCandidate("T0", "ACD", 0.1 + 0.2), ScoredCandidate("T1", "WY", -3.5)]
    write_scores(cands, tmp_path / "s.tsv")
    assert ingest_scores(tmp_path / "s.tsv") == cands


def test_group_by_cdr3():
    cands = [ScoredCandidate("T0", "ACD", 0.2), ScoredCandidate("T0", "ACD", 0.9),
             ScoredCandidate("T0", "EFG", 0.4), ScoredCandidate("T1", "ACD", -1.0)]
    g = group_by_cdr3(cands)
    assert g == {("T0", "ACD"): 0.9, ("T0", "EFG"): 0.4, ("T1", "ACD"): -1.0}


def test_config_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(t_c=0.0, t_r=1.0)
    with pytest.raises(ConfigError):
        DatasetConfig(t_c=1.0, t_r=0.0, val_fraction=1.0)
    with pytest.raises(TypeError):
        DatasetConfig()


def test_pair_counts_by_construction():
    # |good|=6, |poor|=1: the rejected pool is exhausted after one pair each
    assert len(build_pairs(universe(6, 1), CFG)) == 6
    pairs = build_pairs(universe(7, 25), CFG)
    assert len(pairs) == 70
    per = {}
    for p in pairs:
        per[p.chosen] = per.get(p.chosen, 0) + 1
    assert set(per.values()) == {10}


def test_skips_targets(caplog):
    skipped = []
    with caplog.at_level(logging.WARNING):
        assert build_pairs(universe(6, 0), CFG, skipped) == []
        assert build_pairs(universe(5, 10), CFG, skipped) == []
    assert skipped == ["T0", "T0"]
    assert "skipped" in caplog.text


def test_pair_invariants_and_sampling():
    g = universe(12, 15)
    pairs = build_pairs(g, CFG)
    validate_pairs(pairs, g, CFG)
    for chosen in {p.chosen for p in pairs}:
        rej = [p.rejected for p in pairs if p.chosen == chosen]
        assert len(rej) == len(set(rej))
    contexts = {p.context for p in pairs}
    assert len(contexts) > len(pairs) // 2


def test_thresholds_are_strict():
    g = {("T0", s): 0.5 for s in seqs(8)}
    g.update({("T0", s): 0.0 for s in seqs(4, seed=1)})
    assert build_pairs(g, CFG) == []


def test_build_is_order_independent():
    g = universe(9, 12)
    items = list(g.items())
    random.Random(3).shuffle(items)
    assert build_pairs(dict(items), CFG) == build_pairs(g, CFG)
    other = build_pairs(g, DatasetConfig(**{**CFG.__dict__, "seed": 1}))
    assert other != build_pairs(g, CFG)


def test_split_discards_straddlers():
    names = seqs(200, seed=5)
    val = [s for s in names if is_val_cdr3(s, CFG)]
    train = [s for s in names if not is_val_cdr3(s, CFG)]
    pv = PreferencePair("T0", tuple(val[:5]), val[5], val[6])
    pt = PreferencePair("T0", tuple(train[:5]), train[5], train[6])
    mixed = PreferencePair("T0", (val[0],) + tuple(train[:4]), train[5], train[6])
    split = split_train_val([pv, pt, mixed], CFG)
    assert split.train == [pt] and split.val == [pv] and split.discarded == 1
    with pytest.raises(DegenerateSplitError):
        split_train_val([pt], CFG)


def test_build_dataset_disjoint():
    g = {}
    for t in range(2):
        g.update(universe(60, 60, target=f"T{t}", seed=t))
    train, val, stats = build_dataset(g, CFG)
    assert stats.n_train == len(train) and stats.n_val == len(val) and stats.discarded == 0
    tr = {c for p in train for c in p.cdr3s()}
    va = {c for p in val for c in p.cdr3s()}
    assert tr and va and not tr & va
    validate_pairs(train + val, g, CFG)
    assert stats.min_gap > CFG.t_c - CFG.t_r


def test_serialization(tmp_path):
    pairs = build_pairs(universe(7, 3), CFG)
    path = tmp_path / "p.jsonl"
    serialize_pairs(pairs, path)
    assert load_pairs(path) == pairs
    raw = path.read_bytes()
    serialize_pairs(build_pairs(universe(7, 3), CFG), path)
    assert path.read_bytes() == raw
    serialize_pairs([], path)
    assert path.read_bytes() == b"" and load_pairs(path) == []
    path.write_text(raw.decode().splitlines()[0] + "\n{not json\n")
    with pytest.raises(ParseError) as err:
        load_pairs(path)
    assert err.value.line == 2
