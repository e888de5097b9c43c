"""Residue alphabet, tokenization, mutations and prompt encoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    DuplicatePositionError,
    IdentitySubstitutionError,
    OutOfRangeError,
    OverLengthError,
    SequenceError,
)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")

PAD_ID, BOS_ID, EOS_ID, SEP_ID = range(len(SPECIAL_TOKENS))
VOCAB = SPECIAL_TOKENS + tuple(AMINO_ACIDS)
VOCAB_SIZE = len(VOCAB)
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
RESIDUE_IDS = tuple(TOKEN_TO_ID[aa] for aa in AMINO_ACIDS)

MAX_CDR3_LEN = 64


class Cdr3Seq(str):
    """Upper-case CDR3 string over the 20 canonical residues.

    Behaves as a plain ``str``; construction is the only validation point.
    """

    __slots__ = ()

    def __new__(cls, value: str, max_len: int = MAX_CDR3_LEN):
        if isinstance(value, Cdr3Seq) and len(value) <= max_len:
            return value
        s = str(value).strip().upper()
        if not s:
            raise SequenceError("empty CDR3 sequence")
        if len(s) > max_len:
            raise SequenceError(f"CDR3 length {len(s)} exceeds maximum {max_len}")
        bad = sorted(set(s) - set(AMINO_ACIDS))
        if bad:
            raise SequenceError(f"non-canonical residue(s) {''.join(bad)!r} in {s!r}")
        return super().__new__(cls, s)


def tokenize(seq: str) -> list[int]:
    seq = Cdr3Seq(seq)
    return [TOKEN_TO_ID[aa] for aa in seq]


def detokenize(ids: Iterable[int]) -> Cdr3Seq:
    """Inverse of :func:`tokenize`; special tokens are rejected."""
    out = []
    for i in ids:
        i = int(i)
        if i < len(SPECIAL_TOKENS) or i >= VOCAB_SIZE:
            raise SequenceError(f"token id {i} is not a residue")
        out.append(VOCAB[i])
    return Cdr3Seq("".join(out))


@dataclass(frozen=True)
class PromptEncoding:
    """Token layout ``BOS c1 SEP ... ck SEP completion EOS``.

    ``completion_mask`` marks the completion residues and the final EOS; these
    are the positions whose next-token probabilities make up the likelihood.
    """

    token_ids: tuple[int, ...]
    completion_mask: tuple[bool, ...]
    context_cdr3s: tuple[Cdr3Seq, ...]
    completion_cdr3: Cdr3Seq

    def __len__(self):
        return len(self.token_ids)

    @property
    def prefix_len(self) -> int:
        return len(self.token_ids) - len(self.completion_cdr3) - 1

    @property
    def n_scored(self) -> int:
        return len(self.completion_cdr3) + 1


def encode_prefix(context: Sequence[str]) -> list[int]:
    if len(context) < 1:
        raise ValueError("context must hold at least one CDR3")
    ids = [BOS_ID]
    for c in context:
        ids.extend(tokenize(c))
        ids.append(SEP_ID)
    return ids


def encode_pair(context: Sequence[str], completion: str, max_len: int | None = None) -> PromptEncoding:
    context = tuple(Cdr3Seq(c) for c in context)
    completion = Cdr3Seq(completion)
    prefix = encode_prefix(context)
    ids = prefix + tokenize(completion) + [EOS_ID]
    if max_len is not None and len(ids) > max_len:
        raise OverLengthError(f"encoding has {len(ids)} tokens, max_len is {max_len}")
    mask = [False] * len(prefix) + [True] * (len(completion) + 1)
    return PromptEncoding(tuple(ids), tuple(mask), context, completion)


def encode_sequence(seq: str, max_len: int | None = None) -> PromptEncoding:
    """``BOS seq EOS`` with every token after BOS scored (pretraining layout)."""
    seq = Cdr3Seq(seq)
    ids = [BOS_ID] + tokenize(seq) + [EOS_ID]
    if max_len is not None and len(ids) > max_len:
        raise OverLengthError(f"encoding has {len(ids)} tokens, max_len is {max_len}")
    return PromptEncoding(tuple(ids), (False,) + (True,) * (len(seq) + 1), (), seq)


@dataclass(frozen=True, order=True)
class Mutation:
    """Substitution at a 0-based ``position``."""

    position: int
    replacement: str

    def __post_init__(self):
        if self.replacement not in AMINO_ACIDS or len(self.replacement) != 1:
            raise SequenceError(f"invalid replacement residue {self.replacement!r}")

    def label(self, parent: str) -> str:
        """Conventional 1-based label, e.g. ``D5G``."""
        return f"{parent[self.position]}{self.position + 1}{self.replacement}"


def apply_mutations(parent: str, muts: Iterable[Mutation]) -> Cdr3Seq:
    parent = Cdr3Seq(parent)
    residues = list(parent)
    seen = set()
    for m in muts:
        if not 0 <= m.position < len(parent):
            raise OutOfRangeError(f"position {m.position} outside 0..{len(parent) - 1}")
        if m.position in seen:
            raise DuplicatePositionError(f"position {m.position} mutated twice")
        if parent[m.position] == m.replacement:
            raise IdentitySubstitutionError(f"{m.replacement}{m.position} is an identity substitution")
        seen.add(m.position)
        residues[m.position] = m.replacement
    return Cdr3Seq("".join(residues))


def diff_mutations(parent: str, seq: str) -> list[Mutation]:
    """Substitutions turning ``parent`` into the equal-length ``seq``."""
    if len(parent) != len(seq):
        raise ValueError("sequences differ in length")
    return [Mutation(i, b) for i, (a, b) in enumerate(zip(parent, seq)) if a != b]


def hamming(a: str, b: str) -> int:
    if len(a) != len(b):
        raise ValueError("sequences differ in length")
    return sum(x != y for x, y in zip(a, b))
