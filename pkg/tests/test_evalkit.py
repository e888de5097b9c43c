import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import stats

from carpref.dataset import DatasetConfig, build_dataset, group_by_cdr3
from carpref.errors import (
    DegenerateVarianceError,
    LengthMismatchError,
    LengthOutOfRangeError,
    MissingActivationError,
    MissingReferenceError,
    ZeroReferenceError,
)
from carpref.evalkit import (
    SUMMARY_TAG,
    OracleConfig,
    OracleSettings,
    PlatePair,
    background_corpus,
    emit_scatter_report,
    generate_scored_candidates,
    normalized_scores,
    oracle_fitness,
    pearson,
    pearson_r,
    permutation_pvalue,
    plate_normalize,
    random_oracle,
)
from carpref.search import MutantScore
from carpref.seq import Mutation


def test_oracle_construction_examples():
    zero = OracleConfig(seed=0, len_min=5, len_max=5, position_weights=np.zeros((5, 20)))
    assert oracle_fitness(zero, "ACDEF") == 0.0
    motif = OracleConfig(seed=0, len_min=5, len_max=5, position_weights=np.zeros((5, 20)), motifs=(("WGQ", 2.0),))
    assert oracle_fitness(motif, "AWGQA") == 2.0
    assert oracle_fitness(motif, "AAAAA") == 0.0
    with pytest.raises(LengthOutOfRangeError):
        oracle_fitness(motif, "AAAA")


def test_oracle_noise_and_roundtrip():
    o = random_oracle(OracleSettings(seed=1), 0)
    s = "ACDEFGHIKL"
    assert oracle_fitness(o, s) == oracle_fitness(o, s)
    assert oracle_fitness(o, s, noiseless=False) == oracle_fitness(o, s, noiseless=False)
    assert oracle_fitness(o, s, noiseless=False) != oracle_fitness(o, s)
    back = OracleConfig.from_dict(o.to_dict())
    assert oracle_fitness(back, s) == oracle_fitness(o, s)
    assert back.motifs == o.motifs


def test_oracle_validation():
    with pytest.raises(ValueError):
        OracleConfig(seed=0, len_min=5, len_max=5, position_weights=np.zeros((5, 20)), noise_sd=-1)
    with pytest.raises(ValueError):
        OracleConfig(seed=0, len_min=5, len_max=5, position_weights=np.full((5, 20), np.inf))


def test_generate_class_occupancy():
    cands, oracles = generate_scored_candidates(OracleSettings(seed=0), 2000, 3)
    assert len(cands) == 6000 and sorted(oracles) == ["T0", "T1", "T2"]
    for t in oracles:
        scores = [c.score for c in cands if c.target_id == t]
        assert max(scores) > 2.5 and min(scores) < 0.0
    again, _ = generate_scored_candidates(OracleSettings(seed=0), 2000, 3)
    assert again == cands
    with pytest.raises(ValueError):
        generate_scored_candidates(OracleSettings(), 0, 3)


def test_default_pipeline_pair_volume():
    cands, _ = generate_scored_candidates(OracleSettings(seed=0), 2000, 3)
    train, val, stats_ = build_dataset(group_by_cdr3(cands), DatasetConfig(t_c=2.5, t_r=0.0, k=3, val_fraction=0.1))
    assert 4000 <= len(train) + len(val) <= 12000
    assert not stats_.skipped_targets


def test_background_corpus():
    a = background_corpus(50, 0)
    assert a == background_corpus(50, 0) and a != background_corpus(50, 1)
    assert all(10 <= len(s) <= 11 for s in a)
    assert background_corpus(20, 0, concentration=5.0) == background_corpus(20, 0, concentration=5.0)
    chained = background_corpus(30, 0, chain=4)
    assert len(chained) == 30 and all(40 <= len(s) <= 44 for s in chained)


def test_plate_normalize_examples():
    pp = PlatePair("ref", {"ref": 10.0, "a": 1.0}, {"ref": 5.0, "c": 3.0})
    n = plate_normalize(pp)
    assert n.plate_b["c"] == 6.0 and n.plate_b["ref"] == 10.0 and n.plate_a == pp.plate_a
    same = PlatePair("ref", {"ref": 2.0, "x": 1.0}, {"ref": 2.0, "x": 1.0})
    assert plate_normalize(same).plate_b == same.plate_b
    with pytest.raises(ZeroReferenceError):
        plate_normalize(PlatePair("ref", {"ref": 1.0}, {"ref": 0.0}))
    with pytest.raises(MissingReferenceError):
        plate_normalize(PlatePair("ref", {"ref": 1.0}, {"x": 1.0}))
    assert normalized_scores(pp) == {"ref": 10.0, "a": 1.0, "c": 6.0}


@given(st.floats(0.1, 100), st.floats(0.1, 100), st.dictionaries(st.text("abc", min_size=1), st.floats(-50, 50)))
def test_plate_exact_and_idempotent(ra, rb, rest):
    pp = PlatePair("ref", {"ref": ra}, {**rest, "ref": rb})
    once = plate_normalize(pp)
    assert once.plate_b["ref"] == ra
    assert plate_normalize(once) == once


def test_pearson_examples():
    xs = [1, 2, 3, 4, 5]
    assert pearson_r(xs, [2 * x + 1 for x in xs]) == pytest.approx(1.0, abs=1e-12)
    assert pearson_r(xs, [-x for x in xs]) == pytest.approx(-1.0, abs=1e-12)
    r, p = pearson(xs, [2, 1, 4, 3, 6])
    ref = stats.pearsonr(xs, [2, 1, 4, 3, 6])
    # by hand: sum dx*dy = 10, sum dx^2 = 10, sum dy^2 = 14.8
    assert r == pytest.approx(10 / math.sqrt(148), abs=1e-6)
    assert r == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, abs=1e-9)
    with pytest.raises(LengthMismatchError):
        pearson([1, 2, 3], [1, 2])
    with pytest.raises(DegenerateVarianceError):
        pearson([1, 1, 1], [1, 2, 3])


@given(st.lists(st.floats(-100, 100), min_size=4, max_size=20), st.floats(0.1, 10), st.floats(-10, 10))
def test_pearson_affine(xs, a, b):
    # a spread below float resolution of x + b is not an affine-invariance question
    assume(max(xs) - min(xs) > 1e-6)
    ys = [x * x + 0.5 * i for i, x in enumerate(xs)]
    try:
        r = pearson_r(xs, ys)
    except DegenerateVarianceError:
        return
    assert pearson_r([a * x + b for x in xs], ys) == pytest.approx(r, abs=1e-9)
    assert pearson_r(xs, [-y for y in ys]) == pytest.approx(-r, abs=1e-12)


def test_permutation_pvalue_agrees():
    rng = np.random.default_rng(0)
    x = rng.normal(size=30)
    y = 0.5 * x + rng.normal(size=30)
    _, p = pearson(x, y)
    assert permutation_pvalue(x, y, 4000, seed=1) == pytest.approx(p, abs=0.02)


def ms(seq, loss, muts):
    return MutantScore("AAAA", muts, seq, (loss,), loss)


def test_scatter_report(tmp_path):
    scores = [ms("CAAA", 1.0, (Mutation(0, "C"),)), ms("CDAA", 2.0, (Mutation(0, "C"), Mutation(1, "D"))),
              ms("AAAE", 1.5, (Mutation(3, "E"),))]
    acts = {"CAAA": 3.0, "CDAA": 1.0, "AAAE": 2.5}
    path = tmp_path / "s.csv"
    r, p = emit_scatter_report(scores, acts, 2.0, path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 4 and rows[-1]["sequence"] == SUMMARY_TAG
    assert float(rows[-1]["r"]) == r == pearson([1.0, 2.0, 1.5], [3.0, 1.0, 2.5])[0]
    assert float(rows[-1]["baseline"]) == 2.0
    assert {row["n_mutations"] for row in rows[:-1]} <= {"1", "2"}
    r2, _ = emit_scatter_report(scores[:2], acts, 2.0, path)
    assert len(list(csv.DictReader(path.open()))) == 3 and math.isnan(r2)
    with pytest.raises(MissingActivationError):
        emit_scatter_report(scores, {"CAAA": 1.0}, 0.0, path)
