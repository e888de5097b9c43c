"""Next-token pretraining and preference fine-tuning.

Both loops share the same regime: seeded per-epoch shuffling, gradient
accumulation, AdamW without weight decay, a learning rate decaying linearly
to zero over the run, periodic validation, and retention of the parameters
with the lowest validation loss.
"""

from __future__ import annotations

import copy
import csv
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .checkpoint import ModelCheckpoint, Provenance, as_model
from .dataset import PreferencePair
from .errors import ConfigError, EmptyBatchError, NonFiniteError
from .losses import LossConfig, PairLogps, diagnostics, kl_estimate, preference_loss, shift_pairings
from .model import CausalLM, ModelConfig, batch_logprobs, init_model
from .seq import encode_pair, encode_sequence

LOG_COLUMNS = ("step", "lr", "train_loss", "val_loss", "reward_chosen", "reward_rejected", "margin", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "finetune"
    learning_rate: float = 1e-3
    batch_size: int = 16
    grad_accum: int = 1
    epochs: int = 10
    eval_every: int = 50
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    # pretraining only: share of the corpus held out for validation
    val_fraction: float = 0.1
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown training phase {self.phase!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("train.lr must be non-negative")
        if self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("train.batch_size, train.grad_accum, train.epochs and train.eval_every must be >= 1")


@dataclass
class LogRecord:
    step: int
    lr: float
    train_loss: float
    val_loss: float
    reward_chosen: float = math.nan
    reward_rejected: float = math.nan
    margin: float = math.nan
    accuracy: float = math.nan
    wall_seconds: float = 0.0


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)
    best_step: int | None = None

    def append(self, rec: LogRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("log steps must increase")
        self.records.append(rec)

    @property
    def val_losses(self):
        return [r.val_loss for r in self.records]

    def to_csv(self, path) -> None:
        # wall-clock is left out so reruns produce identical files
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow(
                    [r.step]
                    + ["" if math.isnan(v) else repr(float(v)) for v in
                       (r.lr, r.train_loss, r.val_loss, r.reward_chosen, r.reward_rejected, r.margin, r.accuracy)]
                )


def linear_lr(lr0: float, step: int, total: int) -> float:
    return lr0 * (1.0 - step / total)


def _make_optimizer(model, cfg: TrainConfig, total_steps: int):
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0 - s / total_steps)
    return opt, sched


def _chunks(seq, size):
    return [seq[i : i + size] for i in range(0, len(seq), size)]


def _epoch_steps(n_items: int, cfg: TrainConfig) -> list[list[list[int]]]:
    """Index layout of one epoch: steps -> micro-batches -> item indices (unshuffled)."""
    micro = _chunks(list(range(n_items)), cfg.batch_size)
    return _chunks(micro, cfg.grad_accum)


def steps_per_epoch(n_items: int, cfg: TrainConfig) -> int:
    return len(_epoch_steps(n_items, cfg))


class _Loop:
    """Shared epoch/step/eval bookkeeping; subclasses supply the loss."""

    phase = ""

    def __init__(self, model: CausalLM, items: Sequence, cfg: TrainConfig, start_step: int = 0):
        if not items:
            raise EmptyBatchError("no training examples")
        self.model, self.items, self.cfg = model, list(items), cfg
        self.start_step = start_step
        self.total = cfg.epochs * steps_per_epoch(len(self.items), cfg)
        self.opt, self.sched = _make_optimizer(model, cfg, self.total)
        self.log = TrainLog()
        self.best_state, self.best_val, self.best_epoch = None, math.inf, 0

    def micro_loss(self, batch) -> torch.Tensor:
        raise NotImplementedError

    def validate(self) -> tuple[float, float, object]:
        """(train loss, val loss, diagnostics or None)"""
        raise NotImplementedError

    def _evaluate(self, step, epoch, lr, t0):
        self.model.eval()
        train_loss, val_loss, diag = self.validate()
        self.model.train()
        if not math.isfinite(val_loss):
            raise NonFiniteError("validation loss is not finite", step=step)
        rec = LogRecord(step, lr, train_loss, val_loss, wall_seconds=time.perf_counter() - t0)
        if diag is not None:
            rec.reward_chosen = diag.reward_chosen_mean
            rec.reward_rejected = diag.reward_rejected_mean
            rec.margin = diag.margin_mean
            rec.accuracy = diag.preference_accuracy
        self.log.append(rec)
        if val_loss < self.best_val:
            self.best_val, self.best_epoch = val_loss, epoch
            self.best_state = copy.deepcopy(self.model.state_dict())
            self.log.best_step = step

    def run(self):
        cfg, t0 = self.cfg, time.perf_counter()
        rng = random.Random(cfg.seed)
        self.model.train()
        step = 0
        self._evaluate(self.start_step, 0, cfg.learning_rate, t0)
        for epoch in range(1, cfg.epochs + 1):
            order = list(range(len(self.items)))
            rng.shuffle(order)
            for micro_batches in _epoch_steps(len(order), cfg):
                lr = self.sched.get_last_lr()[0]
                self.opt.zero_grad(set_to_none=True)
                for idx in micro_batches:
                    loss = self.micro_loss([self.items[order[i]] for i in idx])
                    if not torch.isfinite(loss):
                        raise NonFiniteError("training loss is not finite", step=self.start_step + step)
                    (loss / len(micro_batches)).backward()
                self.opt.step()
                self.sched.step()
                step += 1
                if step % cfg.eval_every == 0 or step == self.total:
                    self._evaluate(self.start_step + step, epoch, self.sched.get_last_lr()[0], t0)
        self.model.load_state_dict(self.best_state)
        return self.model, self.log


# --------------------------------------------------------------------------- pretraining


def _token_mean_ce(model, seqs, max_len) -> torch.Tensor:
    logp, n = batch_logprobs(model, [encode_sequence(s, max_len) for s in seqs])
    return -logp.sum() / n.sum()


class _PretrainLoop(_Loop):
    phase = "pretrained"

    def __init__(self, model, train_seqs, val_seqs, cfg, start_step=0):
        super().__init__(model, train_seqs, cfg, start_step)
        self.val_seqs = list(val_seqs)
        self.train_probe = random.Random(cfg.seed).sample(self.items, min(len(self.items), len(self.val_seqs)))

    def micro_loss(self, batch):
        return _token_mean_ce(self.model, batch, self.model.config.max_len)

    @torch.no_grad()
    def _ce(self, seqs):
        total, count = 0.0, 0
        for chunk in _chunks(seqs, self.cfg.eval_batch_size):
            logp, n = batch_logprobs(self.model, [encode_sequence(s, self.model.config.max_len) for s in chunk])
            total += -logp.sum().item()
            count += int(n.sum())
        return total / count

    def validate(self):
        return self._ce(self.train_probe), self._ce(self.val_seqs), None


def pretrain(corpus: Sequence[str], model_cfg: ModelConfig, train_cfg: TrainConfig, model: CausalLM | None = None,
             start_step: int = 0):
    """Next-token cross-entropy on ``BOS seq EOS``; returns (checkpoint, log).

    A seeded ``val_fraction`` of the corpus is held out (at least one
    sequence; a single-sequence corpus validates on itself).
    """
    if not corpus:
        raise EmptyBatchError("empty pretraining corpus")
    seqs = list(corpus)
    random.Random(train_cfg.seed).shuffle(seqs)
    n_val = max(1, int(round(train_cfg.val_fraction * len(seqs))))
    val, train = (seqs[:n_val], seqs[n_val:]) if len(seqs) > 1 else (seqs, seqs)
    model = copy.deepcopy(as_model(model)) if model is not None else init_model(model_cfg)
    torch.manual_seed(train_cfg.seed)
    loop = _PretrainLoop(model, train, val, train_cfg, start_step)
    model, log = loop.run()
    prov = Provenance(
        phase="pretrained",
        learning_rate=train_cfg.learning_rate,
        epoch=loop.best_epoch,
        step=log.best_step,
        validation_loss=loop.best_val,
        extra={"total_steps": loop.total, "final_step": start_step + loop.total},
    )
    return ModelCheckpoint.from_model(model, prov), log


# --------------------------------------------------------------------------- preference fine-tuning


def pair_encodings(pairs: Sequence[PreferencePair], max_len: int):
    chosen = [encode_pair(p.context, p.chosen, max_len) for p in pairs]
    rejected = [encode_pair(p.context, p.rejected, max_len) for p in pairs]
    return chosen, rejected


def pair_logps(policy: CausalLM, reference: CausalLM, pairs: Sequence[PreferencePair], grad: bool = True) -> PairLogps:
    """Policy and reference log-probabilities on one shared batch layout.

    Sharing the layout makes policy and reference values bitwise equal when
    the parameters are equal, so untrained pairs tie exactly.
    """
    chosen, rejected = pair_encodings(pairs, policy.config.max_len)
    encs = chosen + rejected
    b = len(pairs)
    with torch.set_grad_enabled(grad):
        lp, _ = batch_logprobs(policy, encs)
    with torch.no_grad():
        rp, _ = batch_logprobs(reference, encs)
    return PairLogps(lp[:b], lp[b:], rp[:b], rp[b:])


@torch.no_grad()
def batch_kl(policy: CausalLM, reference: CausalLM, pairs: Sequence[PreferencePair]) -> torch.Tensor:
    """KL reference point over mismatched (context, completion) pairings.

    The batch is unrolled into its 2n (context, completion) examples, chosen
    first then rejected, and each context is paired with the completion of
    the next example.
    """
    contexts = [p.context for p in pairs] * 2
    completions = [p.chosen for p in pairs] + [p.rejected for p in pairs]
    shift = shift_pairings(len(completions))
    encs = [encode_pair(c, completions[j], policy.config.max_len) for c, j in zip(contexts, shift)]
    lp, _ = batch_logprobs(policy, encs)
    rp, _ = batch_logprobs(reference, encs)
    return kl_estimate(lp, rp)


def batch_objective(policy, reference, pairs, loss_cfg: LossConfig, grad: bool = True):
    p = pair_logps(policy, reference, pairs, grad=grad)
    kl = batch_kl(policy, reference, pairs) if loss_cfg.variant == "kto" else 0.0
    return preference_loss(p, loss_cfg, kl), p


@torch.no_grad()
def _evaluate_models(policy, reference, pairs, loss_cfg, batch_size):
    if not pairs:
        raise EmptyBatchError("no evaluation pairs")
    total, parts = 0.0, []
    for chunk in _chunks(list(pairs), batch_size):
        loss, p = batch_objective(policy, reference, chunk, loss_cfg, grad=False)
        total += loss.item() * len(chunk)
        parts.append(p)
    merged = PairLogps(*(torch.cat([getattr(p, f) for p in parts]) for f in
                         ("policy_chosen", "policy_rejected", "ref_chosen", "ref_rejected")))
    return total / len(pairs), diagnostics(merged, loss_cfg.beta)


def evaluate(checkpoint, val_pairs, loss_cfg: LossConfig, reference, batch_size: int = 64):
    """Validation loss and reward diagnostics; parameters are not touched.

    ``reference`` is the frozen pretrained model (checkpoint or module).
    The KL reference point for KTO is estimated per evaluation batch.
    """
    policy, ref = as_model(checkpoint), as_model(reference)
    was_training = policy.training
    policy.eval()
    try:
        return _evaluate_models(policy, ref, val_pairs, loss_cfg, batch_size)
    finally:
        policy.train(was_training)


class _FinetuneLoop(_Loop):
    phase = "finetuned"

    def __init__(self, policy, reference, train_pairs, val_pairs, cfg, start_step=0):
        super().__init__(policy, train_pairs, cfg, start_step)
        if not val_pairs:
            raise EmptyBatchError("no validation pairs")
        self.reference = reference
        self.val_pairs = list(val_pairs)
        # a seeded random subset of training pairs, as large as the validation set
        self.train_probe = random.Random(cfg.seed).sample(self.items, min(len(self.items), len(self.val_pairs)))

    def micro_loss(self, batch):
        loss, _ = batch_objective(self.model, self.reference, batch, self.cfg.loss)
        return loss

    def validate(self):
        train_loss, _ = _evaluate_models(self.model, self.reference, self.train_probe, self.cfg.loss, self.cfg.eval_batch_size)
        val_loss, diag = _evaluate_models(self.model, self.reference, self.val_pairs, self.cfg.loss, self.cfg.eval_batch_size)
        return train_loss, val_loss, diag


def finetune(pretrained, train_pairs, val_pairs, train_cfg: TrainConfig, reference=None, start_step: int = 0):
    """Preference fine-tuning from a pretrained checkpoint; returns (checkpoint, log).

    The reference model is a frozen copy of ``pretrained`` unless an explicit
    ``reference`` is given (used when resuming from a fine-tuned checkpoint).
    """
    policy = copy.deepcopy(as_model(pretrained))
    reference = copy.deepcopy(as_model(reference if reference is not None else pretrained))
    for p in reference.parameters():
        p.requires_grad_(False)
    reference.eval()
    torch.manual_seed(train_cfg.seed)
    loop = _FinetuneLoop(policy, reference, train_pairs, val_pairs, train_cfg, start_step)
    policy, log = loop.run()
    lc = train_cfg.loss
    prov = Provenance(
        phase="finetuned",
        loss_variant=lc.variant,
        beta=lc.beta,
        learning_rate=train_cfg.learning_rate,
        epoch=loop.best_epoch,
        step=log.best_step,
        validation_loss=loop.best_val,
        extra={"total_steps": loop.total, "final_step": start_step + loop.total},
    )
    return ModelCheckpoint.from_model(policy, prov), log
