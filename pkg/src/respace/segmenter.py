"""Beam search that re-inserts word boundaries into boundary-free text.

The input is consumed one token at a time.  Every surviving partial
candidate is extended with the next token, and additionally with a
boundary before that token whenever the candidate-so-far scores above
the acceptance threshold.  After each step the beam keeps the
``beam_width`` best candidates; at the end the best ``num_results``
are rendered.

Scores are mean per-token log-probs, optionally over only the last
``win`` tokens.  The threshold ``t`` bounds the mean *negative*
log-prob: a candidate is acceptable while its windowed score stays
above ``-t``, so larger ``t`` is more permissive and ``t = inf``
disables the check.  The boundary symbol is scored like any other
token, which is how the language model votes on boundary placement.

Candidates are ranked by score (higher first); exact ties prefer
fewer boundaries, then an earlier last boundary, then the
lexicographically earlier boundary layout, so runs are reproducible.
"""

from dataclasses import dataclass

from .lm import UNBOUNDED


@dataclass(frozen=True)
class SegmenterConfig:
    threshold: float = 10.0     # bound on mean negative log-prob
    beam_width: int = 500
    num_results: int = 1
    wb: str = " "
    win: int | None = UNBOUNDED

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if not 1 <= self.num_results <= self.beam_width:
            raise ValueError("need 1 <= num_results <= beam_width")
        if len(self.wb) != 1:
            raise ValueError(f"boundary symbol must be one char, got {self.wb!r}")
        if self.win is not UNBOUNDED and self.win < 1:
            raise ValueError(f"win must be >= 1 or UNBOUNDED, got {self.win}")


# Tuned operating points per backend (overridable from the CLI).
NGRAM_DEFAULTS = SegmenterConfig(threshold=10.0, beam_width=500, win=UNBOUNDED)
RNN_DEFAULTS = SegmenterConfig(threshold=8.0, beam_width=10, win=64)


class Candidate:
    """A partial segmentation: boundary positions over the consumed
    prefix plus cached score terms and the language-model context."""

    __slots__ = ("bounds", "ctx", "n_tok", "total", "recent", "wsum", "score")

    def __init__(self, bounds, ctx, n_tok, total, recent, wsum):
        self.bounds = bounds    # input positions with a boundary before them
        self.ctx = ctx
        self.n_tok = n_tok      # scored tokens so far, boundaries included
        self.total = total      # sum of all per-token log-probs
        self.recent = recent    # last `win` log-probs, or None if unbounded
        self.wsum = wsum        # sum over `recent` (== total when unbounded)
        self.score = wsum / (n_tok if recent is None else len(recent))

    def extend(self, lps, ctx, win, pos=None):
        """Child candidate after scoring tokens ``lps``; ``pos`` is the
        input position gaining a boundary, if any."""
        total = self.total
        recent, wsum = self.recent, self.wsum
        for lp in lps:
            total += lp
            if recent is not None:
                if len(recent) == win:
                    wsum -= recent[0]
                recent = recent[1:] + (lp,) if len(recent) == win else recent + (lp,)
                wsum += lp
            else:
                wsum = total
        bounds = self.bounds if pos is None else self.bounds + (pos,)
        return Candidate(bounds, ctx, self.n_tok + len(lps), total, recent, wsum)

    def sort_key(self):
        b = self.bounds
        return (-self.score, len(b), b[-1] if b else -1, b)


def strip_boundaries(text: str, wb: str = " ", lenient: bool = False) -> str:
    """Drop every boundary symbol (and, leniently, all whitespace)."""
    if lenient:
        return "".join(c for c in text if c != wb and not c.isspace())
    return text.replace(wb, "")


def _start_candidate(model, first_id, win):
    lp, ctx = model.step(model.start(), first_id)
    recent = None if win is UNBOUNDED else (lp,)
    return Candidate((), ctx, 1, lp, recent, lp)


def bnd(cand: Candidate, c: int, model, config: SegmenterConfig, wb_id=None):
    """Boundary extension cand + wb + c, or None if it scores below
    the acceptance threshold."""
    if wb_id is None:
        wb_id = resolve_wb_id(model, config.wb)
    lp_wb, ctx = model.step(cand.ctx, wb_id)
    lp_c, ctx = model.step(ctx, c)
    pos = cand.n_tok - len(cand.bounds)  # input index of token c
    child = cand.extend((lp_wb, lp_c), ctx, config.win, pos=pos)
    return child if child.score > -config.threshold else None


def xpd(cands, c: int, model, config: SegmenterConfig,
        wb_id=None, allow_boundary=True):
    """All extensions of the beam with token c: the plain continuation
    for every candidate, plus the accepted boundary variants."""
    if wb_id is None:
        wb_id = resolve_wb_id(model, config.wb)
    out = []
    for cand in cands:
        lp, ctx = model.step(cand.ctx, c)
        out.append(cand.extend((lp,), ctx, config.win))
        if allow_boundary:
            child = bnd(cand, c, model, config, wb_id)
            if child is not None:
                out.append(child)
    return out


def top_n(cands, n: int):
    """The n best candidates, best first, with deterministic ties."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return sorted(cands, key=Candidate.sort_key)[:n]


def beam_step(beam, c: int, model, config: SegmenterConfig,
              wb_id=None, allow_boundary=True):
    return top_n(
        xpd(beam, c, model, config, wb_id, allow_boundary), config.beam_width)


def resolve_wb_id(model, wb: str) -> int:
    """Token id of the boundary symbol; the model must know it."""
    units = model.units(wb)
    if len(units) != 1:
        raise ValueError(f"boundary symbol {wb!r} is not a single token")
    vocab = model.vocab
    if vocab.unk_id is not None and wb not in vocab:
        raise ValueError(
            f"boundary symbol {wb!r} unknown to the model; "
            "was it trained on text without boundaries?")
    return model.unit_id(units[0])


def segment_line(text: str, model, config: SegmenterConfig):
    """Best segmentations of one line as (text, score) pairs.

    The input is stripped of boundary symbols first, so already- or
    mis-segmented text is re-segmented from scratch.  Stripping the
    boundaries from any returned candidate reproduces the stripped
    input exactly.
    """
    stripped = strip_boundaries(text, config.wb)
    units = model.units(stripped)
    if not units:
        return [("", 0.0)]
    ids = [model.unit_id(u) for u in units]
    wb_id = resolve_wb_id(model, config.wb)

    beam = [_start_candidate(model, ids[0], config.win)]
    for pos in range(1, len(units)):
        beam = beam_step(beam, ids[pos], model, config, wb_id,
                         allow_boundary=model.boundary_ok_before(units[pos]))
    wb_unit = model.units(config.wb)[0]
    results = []
    for cand in top_n(beam, config.num_results):
        marked = set(cand.bounds)
        out = []
        for pos, unit in enumerate(units):
            if pos in marked:
                out.append(wb_unit)
            out.append(unit)
        results.append((model.unit_text(out), cand.score))
    return results
