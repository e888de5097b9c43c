"""Preference objectives (sigmoid/DPO, hinge, KTO) and reward diagnostics.

All losses are written to be minimized and take batched log-probabilities as
float64 tensors.  They only see the log-ratios ``policy - reference`` of the
chosen and rejected completions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, EmptyBatchError

VARIANTS = ("sigmoid", "hinge", "kto")

# value of each loss when policy == reference
INIT_LOSS = {"sigmoid": float(torch.log(torch.tensor(2.0, dtype=torch.float64))), "hinge": 1.0, "kto": 0.5}


def _t(x):
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass(frozen=True)
class PairLogps:
    """Log-probabilities of chosen/rejected completions under policy and reference.

    Fields may be python floats or (batched) tensors.
    """

    policy_chosen: torch.Tensor
    policy_rejected: torch.Tensor
    ref_chosen: torch.Tensor
    ref_rejected: torch.Tensor

    def __post_init__(self):
        for name in ("policy_chosen", "policy_rejected", "ref_chosen", "ref_rejected"):
            object.__setattr__(self, name, torch.atleast_1d(_t(getattr(self, name))))

    def __len__(self):
        return self.policy_chosen.shape[0]

    @property
    def chosen_logratio(self):
        return self.policy_chosen - self.ref_chosen

    @property
    def rejected_logratio(self):
        return self.policy_rejected - self.ref_rejected

    def validate(self):
        for name in ("policy_chosen", "policy_rejected", "ref_chosen", "ref_rejected"):
            v = getattr(self, name)
            if not (torch.isfinite(v).all() and (v <= 0).all()):
                raise ValueError(f"{name} must be finite and <= 0")
        return self


@dataclass(frozen=True)
class LossConfig:
    variant: str = "kto"
    beta: float = 0.1
    kto_lambda_w: float = 1.0
    kto_lambda_u: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"loss.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.beta > 0:
            raise ConfigError("loss.beta must be positive")
        if self.kto_lambda_w < 0 or self.kto_lambda_u < 0:
            raise ConfigError("KTO weights must be non-negative")


def loss_sigmoid(p: PairLogps, beta: float) -> torch.Tensor:
    """Per-pair ``-log sigmoid(beta * (dw - du))``."""
    return -F.logsigmoid(beta * (p.chosen_logratio - p.rejected_logratio))


def loss_hinge(p: PairLogps, beta: float) -> torch.Tensor:
    # relu has subgradient 0 at the kink
    return torch.relu(1.0 - beta * (p.chosen_logratio - p.rejected_logratio))


def kl_estimate(policy_logps, reference_logps) -> torch.Tensor:
    """Clamped mean log-ratio over mismatched (context, completion) pairings.

    The caller builds the mismatched pairings (``shift_pairings``); the result
    carries no gradient.
    """
    policy_logps, reference_logps = _t(policy_logps), _t(reference_logps)
    if policy_logps.numel() == 0:
        raise EmptyBatchError("KL estimate needs at least one pairing")
    return (policy_logps - reference_logps).detach().mean().clamp(min=0.0)


def shift_pairings(n: int) -> list[int]:
    """Completion index paired with each context for the KL estimate (shift by one)."""
    return [(i + 1) % n for i in range(n)]


def kto_terms(p: PairLogps, beta: float, kl) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pair ``1 - v`` for the chosen and for the rejected completion."""
    kl = _t(kl).detach()
    chosen = 1.0 - torch.sigmoid(beta * (p.chosen_logratio - kl))
    rejected = 1.0 - torch.sigmoid(beta * (kl - p.rejected_logratio))
    return chosen, rejected


def loss_kto(p: PairLogps, beta: float, kl, lambda_w: float = 1.0, lambda_u: float = 1.0) -> torch.Tensor:
    """Batch-mean KTO loss over all chosen and rejected terms."""
    chosen, rejected = kto_terms(p, beta, kl)
    return torch.cat([lambda_w * chosen, lambda_u * rejected]).mean()


def preference_loss(p: PairLogps, cfg: LossConfig, kl=0.0) -> torch.Tensor:
    """Scalar batch loss for the configured variant."""
    if len(p) == 0:
        raise EmptyBatchError("empty batch")
    if cfg.variant == "sigmoid":
        return loss_sigmoid(p, cfg.beta).mean()
    if cfg.variant == "hinge":
        return loss_hinge(p, cfg.beta).mean()
    return loss_kto(p, cfg.beta, kl, cfg.kto_lambda_w, cfg.kto_lambda_u)


@dataclass(frozen=True)
class BatchDiagnostics:
    reward_chosen_mean: float
    reward_rejected_mean: float
    margin_mean: float
    preference_accuracy: float


def diagnostics(p: PairLogps, beta: float) -> BatchDiagnostics:
    if len(p) == 0:
        raise EmptyBatchError("empty batch")
    with torch.no_grad():
        rc = beta * p.chosen_logratio
        rr = beta * p.rejected_logratio
        # ties count as incorrect; compared unscaled so beta cannot flip a ranking
        acc = (p.chosen_logratio > p.rejected_logratio).double().mean()
        rcm, rrm = rc.mean().item(), rr.mean().item()
    return BatchDiagnostics(rcm, rrm, rcm - rrm, acc.item())
