"""End-to-end synthetic pipeline and the evaluation protocols run on top of it.

synthetic oracle -> scored library -> preference pairs -> pretraining on a
target-agnostic corpus -> preference fine-tuning.  The protocols then probe
the trained models against the noiseless oracle.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass

from . import config as C
from .checkpoint import ModelCheckpoint
from .dataset import build_dataset, group_by_cdr3
from .evalkit import OracleConfig, background_corpus, generate_scored_candidates, oracle_fitness, pearson
from .search import ContextSet, enumerate_mutants, exhaustive_search, score_candidates
from .trainer import TrainLog, finetune, pretrain

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    cfg: dict
    oracles: dict[str, OracleConfig]
    grouped: dict
    train: list
    val: list
    stats: object
    pretrained: ModelCheckpoint
    pretrain_log: TrainLog
    finetuned: ModelCheckpoint
    finetune_log: TrainLog

    def training_cdr3s(self) -> set[str]:
        return {c for p in self.train for c in p.cdr3s()}

    def good_performers(self, target: str) -> list[str]:
        """Chosen CDR3s of the training split for ``target``, sorted."""
        return sorted({p.chosen for p in self.train if p.target_id == target})


def run_pipeline(cfg: dict) -> PipelineResult:
    settings = C.oracle_settings(cfg)
    dcfg = C.dataset_config(cfg)
    mcfg = C.model_config(cfg)
    cands, oracles = generate_scored_candidates(
        settings, C._typed(cfg, "oracle.n_per_target", int), C._typed(cfg, "oracle.n_targets", int)
    )
    grouped = group_by_cdr3(cands)
    train, val, stats = build_dataset(grouped, dcfg)
    log.info("dataset: %d train / %d val pairs", len(train), len(val))

    corpus = background_corpus(
        C._typed(cfg, "pretrain.corpus_size", int), C._typed(cfg, "pretrain.seed", int),
        settings.len_min, settings.len_max, C.get(cfg, "pretrain.concentration"), C._typed(cfg, "pretrain.chain", int),
    )
    pre, pre_log = pretrain(corpus, mcfg, C.train_config(cfg, "pretrain"))
    log.info("pretrained: val CE %.4f", pre.provenance.validation_loss)
    ft, ft_log = finetune(pre, train, val, C.train_config(cfg, "finetune"))
    log.info("finetuned: val loss %.4f, accuracy %.3f", ft.provenance.validation_loss, ft_log.records[-1].accuracy)
    return PipelineResult(cfg, oracles, grouped, train, val, stats, pre, pre_log, ft, ft_log)


def pick_parent(res: PipelineResult, rng: random.Random, target: str | None = None):
    """A held-in parent (training good performer) and a context of k other good performers."""
    targets = sorted(res.oracles)
    target = target or rng.choice(targets)
    goods = res.good_performers(target)
    parent = rng.choice(goods)
    k = C._typed(res.cfg, "data.k_context", int)
    ctx = ContextSet(rng.sample([g for g in goods if g != parent], k))
    return target, parent, ctx


@dataclass
class CorrelationTrial:
    target: str
    parent: str
    r_finetuned: float
    p_finetuned: float
    r_pretrained: float
    p_pretrained: float


def correlation_trial(res: PipelineResult, seed: int, n_mutants: int = 100) -> CorrelationTrial:
    """Pearson r between avg_loss and noiseless fitness on held-out mutants of one held-in parent."""
    rng = random.Random(seed)
    target, parent, ctx = pick_parent(res, rng)
    seen = res.training_cdr3s()
    pool = [m for m in enumerate_mutants(parent, 2) if m not in seen]
    muts = rng.sample(pool, n_mutants)
    fitness = [oracle_fitness(res.oracles[target], m) for m in muts]
    out = []
    for ck in (res.finetuned, res.pretrained):
        losses = [s.avg_loss for s in score_candidates(ck, ctx, parent, muts)]
        out.extend(pearson(losses, fitness))
    return CorrelationTrial(target, parent, *out)


@dataclass
class MaturationTrial:
    target: str
    parent: str
    parent_fitness: float
    top_fitness: list[float]

    @property
    def improved(self) -> bool:
        return max(self.top_fitness) > self.parent_fitness


def maturation_trials(res: PipelineResult, seed: int, n_parents: int = 10, top_m: int = 8,
                      threads: int = 1) -> list[MaturationTrial]:
    """Few-shot protocol: top-m exhaustive mutants (training CDR3s excluded) per parent."""
    rng = random.Random(seed)
    targets = sorted(res.oracles)
    seen = res.training_cdr3s()
    trials, used = [], set()
    while len(trials) < n_parents:
        target, parent, ctx = pick_parent(res, rng, targets[len(trials) % len(targets)])
        if parent in used:
            continue
        used.add(parent)
        oracle = res.oracles[target]
        kept = exhaustive_search(res.finetuned, ctx, parent, 2, top_m, seen, threads)
        trials.append(MaturationTrial(target, parent, oracle_fitness(oracle, parent),
                                      [oracle_fitness(oracle, s.sequence) for s in kept]))
    return trials
