"""Token-level language model contract shared by all backends.

A language model maps a conditioning context to a log-probability
distribution over the next token, where a token is a single character
(n-gram backend) or a single byte (recurrent backend).  Scoring of a
token sequence is the mean of the per-token conditional log-probs,
optionally restricted to a trailing window of terms.  All log values
are natural logs.
"""

import math
from dataclasses import dataclass

import numpy as np

# Sentinel symbols for the character vocabulary.  Real symbols are
# single characters, so multi-char names can never collide.
BOS = "<s>"
UNK = "<unk>"

# Window length meaning "average over the whole sequence".
UNBOUNDED = None

# Probability floor used for never-predicted entries (the BOS sentinel
# and the UNK escape slot inside a distribution vector).  Matches the
# conventional -99 log10 placeholder so serialization round-trips.
LOG_FLOOR = -99.0 * math.log(10.0)

# Byte values kept by the byte-level backend: NUL (used as padding and
# as the line-start sentinel) plus everything from space upward.  The
# control range 1..31 is excluded.
KEPT_BYTES = (0,) + tuple(range(32, 256))


class TrainingError(Exception):
    """Model estimation or optimization failed."""


class Vocabulary:
    """Bijective symbol <-> id table with reserved sentinel slots."""

    def __init__(self, symbols, bos_id, unk_id=None, pad_id=None):
        self.symbols = tuple(symbols)
        self.bos_id = bos_id
        self.unk_id = unk_id
        self.pad_id = pad_id
        self._index = {s: i for i, s in enumerate(self.symbols)}
        if len(self._index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self._index

    def id_of(self, symbol):
        """Id for a symbol; unknown symbols map to UNK when present."""
        i = self._index.get(symbol)
        if i is not None:
            return i
        if self.unk_id is not None:
            return self.unk_id
        raise KeyError(f"symbol {symbol!r} not in vocabulary")

    def symbol_of(self, token_id):
        return self.symbols[token_id]

    @classmethod
    def for_chars(cls, chars):
        """Character vocabulary: BOS, UNK, then sorted distinct chars."""
        extra = sorted(set(chars) - {BOS, UNK})
        for c in extra:
            if len(c) != 1:
                raise ValueError(f"character symbols must be single chars, got {c!r}")
        return cls((BOS, UNK) + tuple(extra), bos_id=0, unk_id=1)

    @classmethod
    def for_bytes(cls):
        """Byte vocabulary: NUL plus bytes 32..255 (225 values)."""
        return cls(KEPT_BYTES, bos_id=0, pad_id=0)


@dataclass(frozen=True)
class ScoreParams:
    """Scoring window and conditioning history length."""

    win: int | None  # UNBOUNDED (None) or >= 1
    rho: int | None  # tokens of history a backend conditions on; None = all

    def __post_init__(self):
        if self.win is not UNBOUNDED and self.win < 1:
            raise ValueError(f"win must be >= 1 or UNBOUNDED, got {self.win}")
        if self.rho is not None and self.rho < 1:
            raise ValueError(f"rho must be >= 1, got {self.rho}")


class LanguageModel:
    """Base class for next-token scorers.

    Backends implement an incremental interface: ``start`` yields the
    context standing for "beginning of line", ``step`` consumes one
    token returning its conditional log-prob and the advanced context,
    and ``logprobs`` exposes the full distribution at a context.  The
    stateless helpers below are defined on top of it, so incremental
    and from-scratch scoring agree by construction.
    """

    vocab: Vocabulary
    rho: int | None = None  # finite conditioning window, None = unlimited

    def start(self):
        raise NotImplementedError

    def step(self, ctx, token_id):
        """Return (log P(token_id | ctx), advanced context)."""
        raise NotImplementedError

    def logprobs(self, ctx) -> np.ndarray:
        """Full next-token distribution at ctx, natural log."""
        raise NotImplementedError

    # --- tokenization plumbing used by the segmenter and trainers ---

    def units(self, text: str) -> list:
        """Split text into scoreable units (chars or byte values)."""
        raise NotImplementedError

    def unit_id(self, unit) -> int:
        raise NotImplementedError

    def unit_text(self, units) -> str:
        """Join units back into a string."""
        raise NotImplementedError

    def boundary_ok_before(self, unit) -> bool:
        """Whether a boundary may be inserted directly before this unit."""
        return True

    def encode(self, text: str) -> list[int]:
        return [self.unit_id(u) for u in self.units(text)]

    def _check_ids(self, ids):
        n = len(self.vocab)
        for t in ids:
            if not 0 <= t < n:
                raise ValueError(f"token id {t} out of range for vocabulary of {n}")


def next_log_probs(model: LanguageModel, history) -> np.ndarray:
    """Distribution over the next token given at most the model's last
    rho tokens of history; empty history means line-start context."""
    history = list(history)
    model._check_ids(history)
    if model.rho is not None:
        history = history[-model.rho:]
    ctx = model.start()
    for t in history:
        _, ctx = model.step(ctx, t)
    return model.logprobs(ctx)


def per_token_log_probs(model: LanguageModel, tokens) -> list[float]:
    """Conditional log-prob of each token given its preceding context."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("token sequence must be non-empty")
    model._check_ids(tokens)
    ctx = model.start()
    out = []
    for t in tokens:
        lp, ctx = model.step(ctx, t)
        out.append(lp)
    return out

def sequence_score(model: LanguageModel, tokens) -> float:
    """Mean per-token conditional log-prob of the sequence."""
    lps = per_token_log_probs(model, tokens)
    return sum(lps) / len(lps)


def windowed_score(model: LanguageModel, tokens, win) -> float:
    """Mean of the last min(win, len) per-token log-probs.

    The window restricts which terms are averaged; every term is still
    conditioned on its true preceding context within the full sequence.
    """
    if win is not UNBOUNDED and win < 1:
        raise ValueError(f"win must be >= 1 or UNBOUNDED, got {win}")
    lps = per_token_log_probs(model, tokens)
    if win is not UNBOUNDED:
        lps = lps[-win:]
    return sum(lps) / len(lps)
