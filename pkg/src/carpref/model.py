"""Small decoder-only transformer over the residue vocabulary.

Everything runs in float64.  Scoring helpers return natural-log
probabilities; the "model loss" used for ranking is the per-token
cross-entropy of the completion (completion residues plus EOS).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .errors import ConfigError, NonFiniteError, OverLengthError
from .seq import PAD_ID, VOCAB_SIZE, PromptEncoding

DTYPE = torch.float64
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"model.d_model={self.d_model} is not divisible by model.n_heads={self.n_heads}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, dtype=DTYPE)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, dtype=DTYPE)

    def _split(self, t):
        b, n, _ = t.shape
        return t.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x, past=None):
        b, n, d = x.shape
        q, k, v = (self._split(t) for t in self.qkv(x).split(d, dim=-1))
        present = (k, v)
        n_past = 0
        if past is not None:
            pk, pv = past
            n_past = pk.shape[2]
            k = torch.cat([pk.expand(b, -1, -1, -1), k], dim=2)
            v = torch.cat([pv.expand(b, -1, -1, -1), v], dim=2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        # query i sits at absolute position n_past + i and sees keys 0..n_past + i
        allowed = torch.ones(n, n_past + n, dtype=torch.bool).tril(diagonal=n_past)
        att = att.masked_fill(~allowed, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(y), present


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model, dtype=DTYPE),
        )

    def forward(self, x, past=None):
        a, present = self.attn(self.ln1(x), past)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, present


class CausalLM(nn.Module):
    """Pre-norm GPT with learned absolute positions and an untied output head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model, dtype=DTYPE)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False, dtype=DTYPE)

    def forward(self, ids: torch.Tensor, past=None, return_present: bool = False):
        """Logits for every position of ``ids`` (shape ``[B, T]``).

        ``past`` is a per-layer list of cached (key, value) tensors for a
        shared prefix; the positions of ``ids`` then continue after it.
        """
        offset = 0 if past is None else past[0][0].shape[2]
        n = ids.shape[1]
        if offset + n > self.config.max_len:
            raise OverLengthError(f"{offset + n} positions exceed max_len={self.config.max_len}")
        pos = torch.arange(offset, offset + n)
        x = self.tok_emb(ids) + self.pos_emb(pos)
        presents = []
        for i, block in enumerate(self.blocks):
            x, present = block(x, None if past is None else past[i])
            presents.append(present)
        logits = self.head(self.ln_f(x))
        if return_present:
            return logits, presents
        return logits


def init_model(config: ModelConfig) -> CausalLM:
    """Deterministic small-variance initialization from ``config.seed``."""
    model = CausalLM(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * INIT_STD)
    return model


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    return shifted - shifted.exp().sum(dim=-1, keepdim=True).log()


def forward_logits(model: CausalLM, token_ids: Sequence[int]) -> torch.Tensor:
    """``[T, V]`` logits; row p scores the token at position p + 1."""
    ids = torch.as_tensor(list(token_ids), dtype=torch.long).unsqueeze(0)
    return model(ids)[0]


def collate(encodings: Sequence[PromptEncoding]):
    """Right-pad to a batch; returns (ids, scored-mask) tensors."""
    width = max(len(e) for e in encodings)
    ids = torch.full((len(encodings), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(encodings), width), dtype=torch.bool)
    for i, e in enumerate(encodings):
        ids[i, : len(e)] = torch.tensor(e.token_ids)
        mask[i, : len(e)] = torch.tensor(e.completion_mask)
    return ids, mask


def batch_logprobs(model: CausalLM, encodings: Sequence[PromptEncoding]):
    """Summed completion log-probabilities and scored-token counts.

    Differentiable with respect to the model parameters.  Right padding
    needs no attention mask: real tokens only ever attend to earlier
    real tokens, and padded positions are never scored.
    """
    ids, mask = collate(encodings)
    logp = log_softmax(model(ids[:, :-1]))
    tok = logp.gather(-1, ids[:, 1:].unsqueeze(-1)).squeeze(-1)
    m = mask[:, 1:]
    return (tok * m).sum(dim=1), m.sum(dim=1)


def completion_logprob(model: CausalLM, enc: PromptEncoding) -> torch.Tensor:
    return batch_logprobs(model, [enc])[0][0]


def completion_cross_entropy(model: CausalLM, enc: PromptEncoding) -> torch.Tensor:
    logp, n = batch_logprobs(model, [enc])
    return -logp[0] / n[0]


@torch.no_grad()
def prefix_state(model: CausalLM, prefix_ids: Sequence[int]):
    """Cached keys/values of a prompt prefix plus its last logits row."""
    ids = torch.as_tensor(list(prefix_ids), dtype=torch.long).unsqueeze(0)
    logits, presents = model(ids, return_present=True)
    return presents, log_softmax(logits[0, -1])


@torch.no_grad()
def continuation_token_logprobs(model: CausalLM, state, continuations: torch.Tensor) -> torch.Tensor:
    """Per-token log-probabilities ``[N, L]`` of equal-length continuations of a cached prefix."""
    past, first_logp = state
    out = torch.empty(continuations.shape, dtype=DTYPE)
    out[:, 0] = first_logp[continuations[:, 0]]
    if continuations.shape[1] > 1:
        logp = log_softmax(model(continuations[:, :-1], past=past))
        out[:, 1:] = logp.gather(-1, continuations[:, 1:].unsqueeze(-1)).squeeze(-1)
    return out


def gradients(model: CausalLM, objective: Callable[[CausalLM], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Exact gradient of a scalar ``objective(model)`` keyed by parameter name."""
    value = objective(model)
    if not torch.isfinite(value).all():
        raise NonFiniteError(f"objective evaluated to {value.item()}")
    names, params = zip(*model.named_parameters())
    if not value.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}
    grads = torch.autograd.grad(value, params, allow_unused=True)
    out = {}
    for n, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {n}")
        out[n] = g
    return out


def n_parameters(model: CausalLM) -> int:
    return sum(p.numel() for p in model.parameters())
