"""Central finite-difference verification of the analytic gradients."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

import torch

from .dataset import PreferencePair
from .losses import VARIANTS, LossConfig, preference_loss
from .model import CausalLM, ModelConfig, gradients, init_model
from .seq import AMINO_ACIDS
from .trainer import _token_mean_ce, batch_kl, pair_logps

GRADCHECK_CONFIG = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=40)


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_checked: int
    worst: tuple = ()
    per_objective: dict = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_difference_check(model: CausalLM, objective, step: float = 1e-4, per_tensor: int = 8,
                            rng: random.Random | None = None, corrupt: float = 0.0) -> GradcheckResult:
    """Compare ``gradients(model, objective)`` with central differences.

    Up to ``per_tensor`` randomly chosen coordinates of every parameter tensor
    are perturbed by +/- ``step``.  ``corrupt`` scales the analytic gradient
    by ``1 + corrupt`` (a hook for testing that the check can fail).
    """
    rng = rng or random.Random(0)
    analytic = gradients(model, objective)
    worst, max_err, count = (), 0.0, 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            coords = range(flat.numel()) if flat.numel() <= per_tensor else rng.sample(range(flat.numel()), per_tensor)
            g = analytic[name].view(-1)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                up = objective(model).item()
                flat[i] = orig - step
                down = objective(model).item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                a = g[i].item() * (1.0 + corrupt)
                err = relative_error(a, numeric)
                count += 1
                if err > max_err:
                    max_err, worst = err, (name, i, a, numeric)
    return GradcheckResult(max_err, count, worst)


def _random_seq(rng, lo=3, hi=6):
    return "".join(rng.choice(AMINO_ACIDS) for _ in range(rng.randint(lo, hi)))


def random_pairs(rng: random.Random, n: int = 3, k: int = 2) -> list[PreferencePair]:
    return [
        PreferencePair("T", tuple(_random_seq(rng) for _ in range(k)), _random_seq(rng), _random_seq(rng))
        for _ in range(n)
    ]


def _perturbed(cfg: ModelConfig, seed: int, scale: float) -> CausalLM:
    model = init_model(replace(cfg, seed=seed))
    gen = torch.Generator().manual_seed(seed + 7919)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return model


def preference_objective(reference: CausalLM, pairs, loss_cfg: LossConfig, kl):
    """Batch loss as a function of the policy, with the KTO reference point held fixed."""
    def objective(policy):
        return preference_loss(pair_logps(policy, reference, pairs), loss_cfg, kl)
    return objective


def run_gradcheck(model_cfg: ModelConfig = GRADCHECK_CONFIG, seed: int = 0, draws: int = 10,
                  variants=VARIANTS + ("pretrain",), beta: float = 0.1, step: float = 1e-4,
                  per_tensor: int = 6, corrupt: float = 0.0) -> GradcheckResult:
    """Random (parameters, batch) draws for every objective; reports the worst relative error."""
    rng = random.Random(seed)
    total = GradcheckResult(0.0, 0)
    for draw in range(draws):
        policy = _perturbed(model_cfg, seed * 1000 + 2 * draw, 0.3)
        reference = _perturbed(model_cfg, seed * 1000 + 2 * draw + 1, 0.3)
        pairs = random_pairs(rng)
        for variant in variants:
            if variant == "pretrain":
                seqs = [_random_seq(rng) for _ in range(3)]
                objective = lambda m, seqs=seqs: _token_mean_ce(m, seqs, model_cfg.max_len)
            else:
                cfg = LossConfig(variant, beta)
                kl = batch_kl(policy, reference, pairs) if variant == "kto" else 0.0
                objective = preference_objective(reference, pairs, cfg, kl)
            res = finite_difference_check(policy, objective, step, per_tensor, rng, corrupt)
            total.n_checked += res.n_checked
            prev = total.per_objective.get(variant, 0.0)
            total.per_objective[variant] = max(prev, res.max_rel_error)
            if res.max_rel_error > total.max_rel_error:
                total.max_rel_error, total.worst = res.max_rel_error, (variant, draw) + res.worst
    return total
