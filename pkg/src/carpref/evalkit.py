"""Synthetic fitness oracle, plate normalization, correlation and reports.

The oracle replaces the wet-lab activation assay: fitness is a sum of
per-position residue contributions plus bonuses for target-specific motifs,
optionally with Gaussian measurement noise.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .dataset import ScoredCandidate
from .errors import (
    DegenerateVarianceError,
    LengthMismatchError,
    LengthOutOfRangeError,
    MissingActivationError,
    MissingReferenceError,
    ZeroReferenceError,
)
from .seq import AMINO_ACIDS, Cdr3Seq

AA_INDEX = {a: i for i, a in enumerate(AMINO_ACIDS)}


def _seed_from(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True, eq=False)
class OracleConfig:
    seed: int
    len_min: int = 10
    len_max: int = 11
    position_weights: np.ndarray = field(default_factory=lambda: np.zeros((11, 20)))
    motifs: tuple[tuple[str, float], ...] = ()
    noise_sd: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.position_weights, dtype=np.float64)
        object.__setattr__(self, "position_weights", w)
        object.__setattr__(self, "motifs", tuple((str(m), float(b)) for m, b in self.motifs))
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError("need 1 <= len_min <= len_max")
        if w.shape != (self.len_max, 20) or not np.isfinite(w).all():
            raise ValueError(f"position_weights must be a finite ({self.len_max}, 20) table")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "len_min": self.len_min,
            "len_max": self.len_max,
            "position_weights": self.position_weights.tolist(),
            "motifs": [list(m) for m in self.motifs],
            "noise_sd": self.noise_sd,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OracleConfig":
        return cls(d["seed"], d["len_min"], d["len_max"], np.asarray(d["position_weights"]),
                   tuple(tuple(m) for m in d["motifs"]), d["noise_sd"])


@dataclass(frozen=True)
class OracleSettings:
    """Knobs for drawing random per-target oracles and their candidate libraries."""

    seed: int = 0
    len_min: int = 10
    len_max: int = 11
    noise_sd: float = 0.6
    n_motifs: int = 2
    motif_len: int = 3
    motif_bonus: float = 1.0
    # residue preference shared by all positions vs. position-specific part
    composition_sd: float = 0.5
    # share of the composition variance common to every target
    shared_fraction: float = 0.8
    position_sd: float = 0.15
    # fraction of library members seeded with one of the target's motifs
    motif_rate: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must lie in [0, 1]")


def _standard(v: np.ndarray) -> np.ndarray:
    return (v - v.mean()) / v.std()


def random_oracle(settings: OracleSettings, target_index: int) -> OracleConfig:
    shared = _standard(np.random.default_rng(_seed_from(settings.seed, "shared")).normal(size=20))
    rng = np.random.default_rng(_seed_from(settings.seed, "oracle", target_index))
    own = _standard(rng.normal(size=20))
    pos = rng.normal(0.0, settings.position_sd, size=(settings.len_max, 20))
    # centred and rescaled so every target's random library has the same score spread
    f = settings.shared_fraction
    comp = _standard(np.sqrt(f) * shared + np.sqrt(1.0 - f) * own) * settings.composition_sd
    pos = pos - pos.mean(axis=1, keepdims=True)
    pos = pos / pos.std() * settings.position_sd
    motifs = []
    while len(motifs) < settings.n_motifs:
        m = "".join(rng.choice(list(AMINO_ACIDS), size=settings.motif_len))
        if m not in (x for x, _ in motifs):
            motifs.append((m, settings.motif_bonus))
    return OracleConfig(
        seed=_seed_from(settings.seed, "noise", target_index) % 2**31,
        len_min=settings.len_min,
        len_max=settings.len_max,
        position_weights=comp[None, :] + pos,
        motifs=tuple(motifs),
        noise_sd=settings.noise_sd,
    )


def oracle_fitness(cfg: OracleConfig, seq: str, noiseless: bool = True, noise_key=None) -> float:
    """Position-weight sum plus motif bonuses; noise is keyed on ``noise_key`` (default: the sequence)."""
    seq = Cdr3Seq(seq)
    if not cfg.len_min <= len(seq) <= cfg.len_max:
        raise LengthOutOfRangeError(f"length {len(seq)} outside {cfg.len_min}..{cfg.len_max}")
    w = cfg.position_weights
    value = float(sum(w[p, AA_INDEX[a]] for p, a in enumerate(seq)))
    value += sum(b for m, b in cfg.motifs if m in seq)
    if not noiseless and cfg.noise_sd > 0:
        rng = np.random.default_rng(_seed_from(cfg.seed, seq if noise_key is None else noise_key))
        value += float(rng.normal(0.0, cfg.noise_sd))
    return value


def sample_library(cfg: OracleConfig, n: int, rng: np.random.Generator, motif_rate: float) -> list[Cdr3Seq]:
    out = []
    for _ in range(n):
        length = int(rng.integers(cfg.len_min, cfg.len_max + 1))
        s = list(rng.choice(list(AMINO_ACIDS), size=length))
        if cfg.motifs and rng.random() < motif_rate:
            m = cfg.motifs[int(rng.integers(len(cfg.motifs)))][0]
            at = int(rng.integers(0, length - len(m) + 1))
            s[at : at + len(m)] = list(m)
        out.append(Cdr3Seq("".join(s)))
    return out


def generate_scored_candidates(settings: OracleSettings, n_per_target: int, n_targets: int):
    """Noisy oracle scores for ``n_per_target`` library members of each target.

    Returns (candidates, {target_id: OracleConfig}).  Target ids are
    ``T0, T1, ...``; the noise for each row is keyed on (target, row index)
    so duplicates within a library get independent measurements.
    """
    if n_per_target < 1:
        raise ValueError("n_per_target must be >= 1")
    if n_targets < 1:
        raise ValueError("n_targets must be >= 1")
    cands, oracles = [], {}
    for t in range(n_targets):
        tid = f"T{t}"
        oracle = random_oracle(settings, t)
        oracles[tid] = oracle
        rng = np.random.default_rng(_seed_from(settings.seed, "library", t))
        for i, s in enumerate(sample_library(oracle, n_per_target, rng, settings.motif_rate)):
            cands.append(ScoredCandidate(tid, s, oracle_fitness(oracle, s, noiseless=False, noise_key=(tid, i))))
    return cands, oracles


def background_corpus(n: int, seed: int, len_min: int = 10, len_max: int = 11,
                      concentration: float | None = None, chain: int = 1) -> list[Cdr3Seq]:
    """Target-agnostic pretraining corpus.

    By default every position has an exactly balanced residue composition
    (each residue fills the same number of slots, assigned by a seeded
    shuffle), so the corpus carries no residue preference that could line up
    with a target by chance.  With ``concentration`` each position instead
    draws i.i.d. from its own Dirichlet(concentration) residue profile.
    With ``chain`` > 1 each corpus entry joins ``chain`` such CDR3s, so the
    pretrained model also sees the positions a context prompt occupies.
    """
    if chain < 1:
        raise ValueError("chain must be >= 1")
    rng = np.random.default_rng(_seed_from(seed, "corpus"))
    lengths = rng.integers(len_min, len_max + 1, size=n * chain)
    letters = np.array(list(AMINO_ACIDS))
    columns = []
    for p in range(len_max):
        rows = int((lengths > p).sum())
        if concentration is None:
            col = np.resize(np.arange(20), rows)
            rng.shuffle(col)
        else:
            col = rng.choice(20, size=rows, p=rng.dirichlet(np.full(20, concentration)))
        columns.append(iter(col.tolist()))
    parts = ["".join(letters[next(columns[p])] for p in range(int(length))) for length in lengths]
    return [Cdr3Seq("".join(parts[i : i + chain])) for i in range(0, len(parts), chain)]


# --------------------------------------------------------------------------- plates


@dataclass(frozen=True)
class PlatePair:
    reference_id: str
    plate_a: Mapping[str, float]
    plate_b: Mapping[str, float]


def plate_normalize(pp: PlatePair) -> PlatePair:
    """Rescale plate B so the shared reference matches its plate A value exactly."""
    if pp.reference_id not in pp.plate_a or pp.reference_id not in pp.plate_b:
        raise MissingReferenceError(f"reference {pp.reference_id!r} missing from a plate")
    ref_a, ref_b = pp.plate_a[pp.reference_id], pp.plate_b[pp.reference_id]
    if ref_b == 0:
        raise ZeroReferenceError(f"reference {pp.reference_id!r} is zero on plate B")
    scale = ref_a / ref_b
    b = {k: v * scale for k, v in pp.plate_b.items()}
    b[pp.reference_id] = ref_a
    return PlatePair(pp.reference_id, dict(pp.plate_a), b)


def normalized_scores(pp: PlatePair) -> dict[str, float]:
    n = plate_normalize(pp)
    return {**n.plate_a, **n.plate_b}


# --------------------------------------------------------------------------- correlation


def _check_xy(xs, ys):
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatchError(f"got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise LengthMismatchError("need at least 3 points")
    return x, y


def pearson_r(xs, ys) -> float:
    x, y = _check_xy(xs, ys)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVarianceError("zero variance")
    return max(-1.0, min(1.0, float(dx @ dy) / math.sqrt(sxx * syy)))


def pearson(xs, ys) -> tuple[float, float]:
    """Sample correlation and two-sided p-value from the t statistic with n-2 dof."""
    r = pearson_r(xs, ys)
    n = len(xs)
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


def permutation_pvalue(xs, ys, n_perm: int = 10_000, seed: int = 0) -> float:
    """Two-sided permutation p-value for r, counting the observed labelling."""
    x, y = _check_xy(xs, ys)
    r0 = abs(pearson_r(x, y))
    rng = np.random.default_rng(seed)
    dx = (x - x.mean()) / np.linalg.norm(x - x.mean())
    dy = (y - y.mean()) / np.linalg.norm(y - y.mean())
    perms = np.array([rng.permutation(len(y)) for _ in range(n_perm)])
    rs = np.abs(dy[perms] @ dx)
    return float((np.count_nonzero(rs >= r0 - 1e-12) + 1) / (n_perm + 1))


# --------------------------------------------------------------------------- reports

SCATTER_COLUMNS = ("sequence", "n_mutations", "avg_loss", "activation", "r", "p_value", "baseline")
SUMMARY_TAG = "__summary__"


def emit_scatter_report(scores: Sequence, activations: Mapping[str, float], baseline: float, path) -> tuple[float, float]:
    """Loss-vs-activation CSV with one summary row carrying r, p and the parent baseline.

    With fewer than three rows (or a constant column) r and p are NaN.
    """
    missing = [str(s.sequence) for s in scores if str(s.sequence) not in activations]
    if missing:
        raise MissingActivationError(f"no activation for {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    losses = [s.avg_loss for s in scores]
    acts = [float(activations[str(s.sequence)]) for s in scores]
    try:
        r, p = pearson(losses, acts)
    except (LengthMismatchError, DegenerateVarianceError):
        r, p = math.nan, math.nan
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_COLUMNS)
        for s, a in zip(scores, acts):
            w.writerow([s.sequence, s.n_mutations, repr(s.avg_loss), repr(a), "", "", ""])
        w.writerow([SUMMARY_TAG, "", "", "", repr(r), repr(p), repr(float(baseline))])
    return r, p
