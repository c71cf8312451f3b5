"""Character-level backoff n-gram language model with interpolated
Kneser-Ney smoothing.

Counting, estimation and querying all work on plain Python strings: a
k-gram is a length-k string whose characters are the tokens, with the
line-start sentinel written as the control char BOS_CHAR (real corpus
text never contains control characters).  Models serialize to the
standard ARPA text format (log10 values, one line per n-gram).

Smoothing variant: plain interpolated Kneser-Ney with a single
discount per order.  Highest order uses raw counts, lower orders use
continuation counts (number of distinct predecessor types), except
that grams starting with the line-start sentinel keep raw counts since
nothing can precede them.  Discounts come from the count-of-counts
formula D = n1/(n1 + 2*n2), computed from the pre-pruning counts in
use at each order.  Pruning removes entries from storage only; the
statistics (denominators, continuation counts, discounts) stay those
of the unpruned tables, so the pruned mass drains into the backoff
weight and each context still sums to one exactly.
"""

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .lm import BOS, LOG_FLOOR, UNK, LanguageModel, TrainingError, Vocabulary

# Line-start sentinel inside gram strings.
BOS_CHAR = "\x01"

# ARPA token escapes: grams are written space-separated, so the space
# symbol (and the sentinels) need printable names.
_CHAR_TO_ARPA = {BOS_CHAR: BOS, " ": "<sp>"}
_ARPA_TO_CHAR = {v: k for k, v in _CHAR_TO_ARPA.items()}

_NEG_INF = float("-inf")
_LN10 = math.log(10.0)


class ArpaError(Exception):
    """Malformed ARPA input; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _ln(x):
    return math.log(x) if x > 0.0 else _NEG_INF


class PruneConfig:
    """Per-order count thresholds; grams with raw count below the
    threshold are not stored.  Unigrams are never pruned."""

    def __init__(self, min_count=None):
        self.min_count = dict(min_count or {})
        if self.min_count.get(1, 1) != 1:
            raise ValueError("unigrams cannot be pruned (min_count[1] must be 1)")

    def threshold(self, order):
        if order == 1:
            return 1
        return self.min_count.get(order, 1)

    @classmethod
    def uniform(cls, count, max_order, start_order=2):
        """Same threshold for every order from start_order up."""
        return cls({k: count for k in range(start_order, max_order + 1)})


class NgramCounts:
    """Raw k-gram occurrence tables for k = 1..order."""

    def __init__(self, order):
        if order < 2:
            raise ValueError(f"order must be >= 2, got {order}")
        self.order = order
        self.tables = {k: {} for k in range(1, order + 1)}

    def add_line(self, line):
        padded = BOS_CHAR * (self.order - 1) + line
        for i in range(self.order - 1, len(padded)):
            # grams ending at each real character; the sentinel is
            # context only, never a predicted event
            for k in range(1, self.order + 1):
                gram = padded[i - k + 1 : i + 1]
                table = self.tables[k]
                table[gram] = table.get(gram, 0) + 1

    def chars(self):
        return sorted(self.tables[1])


def count_ngrams(lines, order) -> NgramCounts:
    """Exact k-gram counts over lines padded with order-1 sentinels."""
    counts = NgramCounts(order)
    for line in lines:
        counts.add_line(line)
    return counts


@dataclass
class KNParams:
    """Discount per order and the count-of-counts that produced it."""

    discounts: dict = field(default_factory=dict)
    count_of_counts: dict = field(default_factory=dict)


def _discount(n1, n2):
    if n2 > 0:
        return n1 / (n1 + 2.0 * n2)
    # degenerate corpora with no doubleton: keep the discount sane
    return max(0.0, min(0.99, n1 / (n1 + 2.0)))


def estimate_kn(counts: NgramCounts, prune: PruneConfig | None = None) -> "NgramModel":
    """Estimate an interpolated Kneser-Ney model from raw counts."""
    prune = prune or PruneConfig()
    n = counts.order
    for k in range(1, n + 1):
        if not counts.tables[k]:
            raise TrainingError(f"no {k}-grams in the training data")

    # counts in use per order: raw at the top, continuation below
    # (raw for sentinel-initial grams, which have no predecessors)
    use = {n: dict(counts.tables[n])}
    for k in range(n - 1, 0, -1):
        cont = Counter(g[1:] for g in counts.tables[k + 1])
        use[k] = {
            g: (c if g[0] == BOS_CHAR else cont[g])
            for g, c in counts.tables[k].items()
        }

    params = KNParams()
    for k in range(1, n + 1):
        coc = Counter(use[k].values())
        params.count_of_counts[k] = (coc[1], coc[2])
        # the unigram level is the recursion floor: plain continuation
        # frequencies, no discounting
        params.discounts[k] = 0.0 if k == 1 else _discount(coc[1], coc[2])

    surviving = {
        k: {g for g, c in counts.tables[k].items() if c >= prune.threshold(k)}
        for k in range(1, n + 1)
    }
    for k in range(1, n + 1):
        if not surviving[k]:
            raise TrainingError(f"pruning left no {k}-grams (min_count {prune.threshold(k)})")

    prob = {}     # gram -> ln P(last char | context), interpolated
    backoff = {}  # context -> ln(backoff weight)

    total1 = sum(use[1].values())
    p_linear = {w: use[1][w] / total1 for w in use[1]}  # level-1 probs
    for w, p in p_linear.items():
        prob[w] = _ln(p)

    def lower_p(h, w):
        # interpolated probability at level len(h)+1, read from the
        # already-built levels, backing off past pruned entries
        g = h + w
        if g in prob:
            return math.exp(prob[g])
        if not h:
            return 0.0  # unreachable for in-vocabulary w
        gamma = math.exp(backoff[h]) if h in backoff else 1.0
        return gamma * lower_p(h[1:], w)

    for k in range(2, n + 1):
        d = params.discounts[k]
        ctx_total = Counter()
        for g, c in use[k].items():
            ctx_total[g[:-1]] += c
        by_ctx = {}
        for g in surviving[k]:
            by_ctx.setdefault(g[:-1], []).append(g)
        for h, grams in by_ctx.items():
            total = ctx_total[h]
            kept = 0.0
            discounted = {}
            for g in grams:
                f = max(use[k][g] - d, 0.0) / total
                discounted[g] = f
                kept += f
            gamma = max(1.0 - kept, 0.0)
            backoff[h] = _ln(gamma)
            for g in grams:
                p = discounted[g] + gamma * lower_p(h[1:], g[-1])
                prob[g] = _ln(p)

    unk_log_prob = _ln(0.1 * min(p_linear.values()))
    vocab = Vocabulary.for_chars(counts.chars())
    return NgramModel(counts.order, vocab, prob, backoff, unk_log_prob, params)


class NgramModel(LanguageModel):
    """Queryable backoff representation of the estimated model.

    Queries run on an integer-state transition index (context id plus
    token id) so that scoring cost depends on the backoff chain length,
    never on table size.
    """

    def __init__(self, order, vocab, prob, backoff, unk_log_prob, params=None):
        self.order = order
        self.vocab = vocab
        self.prob = prob
        self.backoff = backoff
        self.unk_log_prob = unk_log_prob
        self.params = params
        self.rho = order - 1
        self._build_index()

    # --- index construction ---

    def _char_of_id(self, token_id):
        if token_id == self.vocab.bos_id:
            return BOS_CHAR
        return self.vocab.symbol_of(token_id)

    def _build_index(self):
        # a state is any context that can be extended: every stored
        # gram's context plus everything carrying a backoff weight
        states = {"": 0}
        for g in self.prob:
            if len(g) > 1:
                states.setdefault(g[:-1], len(states))
        for h in self.backoff:
            states.setdefault(h, len(states))
        self._state_of_str = states

        nstates = len(states)
        suffix = [0] * nstates
        weight = [0.0] * nstates
        for h, sid in states.items():
            weight[sid] = self.backoff.get(h, 0.0)
            t = h[1:]
            while t and t not in states:
                t = t[1:]
            suffix[sid] = states[t]
        self._suffix = suffix
        self._weight = weight

        id_of = {}
        for i, s in enumerate(self.vocab.symbols):
            id_of[s] = i
        id_of[BOS_CHAR] = self.vocab.bos_id

        ext = {}
        maxctx = self.order - 1
        for g, lp in self.prob.items():
            h = g[:-1]
            sid = states.get(h)
            if sid is None:
                continue  # entry whose context never survived; unreachable
            t = g if len(g) <= maxctx else g[1:]
            while t and t not in states:
                t = t[1:]
            w = id_of.get(g[-1])
            if w is None:
                raise ArpaError(f"{len(g)}-gram uses token {g[-1]!r} absent from unigrams")
            ext[(sid, w)] = (lp, states[t] if t else 0)
        # sentinel transitions so that explicit BOS tokens in a history
        # advance the context like the implicit padding does
        bos = self.vocab.bos_id
        for j in range(1, self.order + 1):
            src = self._resolve(BOS_CHAR * (j - 1))
            dst = self._resolve(BOS_CHAR * min(j, maxctx))
            ext.setdefault((src, bos), (LOG_FLOOR, dst))
        self._ext = ext
        self._start = self._resolve(BOS_CHAR * maxctx)

    def _resolve(self, h):
        while h and h not in self._state_of_str:
            h = h[1:]
        return self._state_of_str[h] if h else 0

    # --- LanguageModel interface ---

    def start(self):
        return self._start

    def step(self, ctx, token_id):
        ext = self._ext
        weight = self._weight
        suffix = self._suffix
        bo = 0.0
        cur = ctx
        while True:
            hit = ext.get((cur, token_id))
            if hit is not None:
                return hit[0] + bo, hit[1]
            if cur == 0:
                # not even a unigram: out-of-vocabulary escape
                return self.unk_log_prob, 0
            bo += weight[cur]
            cur = suffix[cur]

    def logprobs(self, ctx):
        out = np.full(len(self.vocab), LOG_FLOOR)
        bos, unk = self.vocab.bos_id, self.vocab.unk_id
        for t in range(len(self.vocab)):
            if t == bos or t == unk:
                continue
            out[t] = self.step(ctx, t)[0]
        return out

    def log_prob(self, history, token_id) -> float:
        """Backoff probability of one token after a token-id history."""
        self._check_ids(history)
        self._check_ids([token_id])
        ctx = self._start
        for t in list(history)[-(self.order - 1):]:
            _, ctx = self.step(ctx, t)
        return self.step(ctx, token_id)[0]

    def units(self, text):
        return list(text)

    def unit_id(self, unit):
        return self.vocab.id_of(unit)

    def unit_text(self, units):
        return "".join(units)

    def num_ngrams(self):
        """Stored entry count per order (serialized lines, sentinel
        placeholders included)."""
        per_order = Counter(len(g) for g in self.prob)
        for h in self.backoff:
            if h not in self.prob:
                per_order[len(h)] += 1
        per_order[1] += 1  # the <unk> line
        return dict(per_order)


def train_ngram(lines, order, prune=None) -> NgramModel:
    """Count and estimate in one go."""
    return estimate_kn(count_ngrams(lines, order), prune)


# --- ARPA serialization ---


def _gram_to_arpa(gram):
    return " ".join(_CHAR_TO_ARPA.get(c, c) for c in gram)


def _arpa_to_gram(tokens):
    chars = []
    for tok in tokens:
        c = _ARPA_TO_CHAR.get(tok, tok)
        if len(c) != 1 and tok != UNK:
            raise ValueError(f"token {tok!r} is not a single character")
        chars.append(c)
    return "".join(chars)


def _log10(ln_value):
    if ln_value == _NEG_INF:
        return -99.0
    return max(ln_value / _LN10, -99.0)


def write_arpa(model: NgramModel, destination):
    """Write the model as standard ARPA text (log10 values)."""
    if hasattr(destination, "write"):
        _write_arpa(model, destination)
    else:
        with open(destination, "w", encoding="utf-8") as fh:
            _write_arpa(model, fh)


def _write_arpa(model, fh):
    entries = {k: {} for k in range(1, model.order + 1)}
    for g, lp in model.prob.items():
        entries[len(g)][g] = lp
    for h in model.backoff:
        entries[len(h)].setdefault(h, _NEG_INF)  # context-only placeholder
    entries[1][UNK] = model.unk_log_prob

    fh.write("\\data\\\n")
    for k in range(1, model.order + 1):
        fh.write(f"ngram {k}={len(entries[k])}\n")
    for k in range(1, model.order + 1):
        fh.write(f"\n\\{k}-grams:\n")
        for g in sorted(entries[k]):
            line = f"{_log10(entries[k][g]):.7f}\t{_gram_to_arpa(g) if g != UNK else UNK}"
            if g in model.backoff:
                line += f"\t{_log10(model.backoff[g]):.7f}"
            fh.write(line + "\n")
    fh.write("\n\\end\\\n")


def read_arpa(source) -> NgramModel:
    """Parse an ARPA file back into a queryable model."""
    if hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()

    i = 0
    while i < len(lines) and lines[i].strip() != "\\data\\":
        if lines[i].strip():
            raise ArpaError("expected \\data\\ header", i + 1)
        i += 1
    if i == len(lines):
        raise ArpaError("missing \\data\\ header")
    i += 1

    declared = {}
    while i < len(lines) and lines[i].strip():
        m = lines[i].strip()
        if not m.startswith("ngram "):
            raise ArpaError(f"bad count line {m!r}", i + 1)
        try:
            k, cnt = m[len("ngram "):].split("=")
            declared[int(k)] = int(cnt)
        except ValueError:
            raise ArpaError(f"bad count line {m!r}", i + 1) from None
        i += 1
    if not declared or sorted(declared) != list(range(1, max(declared) + 1)):
        raise ArpaError("incomplete ngram count declarations")
    order = max(declared)

    prob = {}
    backoff = {}
    unk_log_prob = None
    seen = {k: 0 for k in declared}
    current = None
    ended = False
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line == "\\end\\":
            ended = True
            break
        if line.endswith("-grams:") and line.startswith("\\"):
            try:
                current = int(line[1:].split("-")[0])
            except ValueError:
                raise ArpaError(f"bad section header {line!r}", i) from None
            if current not in declared:
                raise ArpaError(f"section {current} not declared", i)
            continue
        if current is None:
            raise ArpaError(f"entry before any section: {line!r}", i)
        fields = line.split("\t")
        if len(fields) == 1:
            # tolerate space-separated files: prob, k tokens, [backoff]
            parts = line.split()
            if len(parts) == current + 1:
                fields = [parts[0], " ".join(parts[1:])]
            elif len(parts) == current + 2:
                fields = [parts[0], " ".join(parts[1:-1]), parts[-1]]
            else:
                raise ArpaError(f"expected prob<TAB>gram: {line!r}", i)
        if len(fields) < 2:
            raise ArpaError(f"expected prob<TAB>gram: {line!r}", i)
        try:
            lp = float(fields[0]) * _LN10
        except ValueError:
            raise ArpaError(f"non-numeric probability {fields[0]!r}", i) from None
        tokens = fields[1].split(" ")
        if len(tokens) != current and fields[1] != UNK:
            raise ArpaError(f"{current}-gram has {len(tokens)} tokens", i)
        try:
            gram = _arpa_to_gram(tokens) if fields[1] != UNK else UNK
        except ValueError as e:
            raise ArpaError(str(e), i) from None
        if gram == UNK:
            unk_log_prob = lp
        else:
            prob[gram] = lp
        if len(fields) >= 3:
            try:
                backoff[gram] = float(fields[2]) * _LN10
            except ValueError:
                raise ArpaError(f"non-numeric backoff {fields[2]!r}", i) from None
        seen[current] += 1
    if not ended:
        raise ArpaError("missing \\end\\ terminator")
    for k, cnt in declared.items():
        if seen[k] != cnt:
            raise ArpaError(f"declared {cnt} {k}-grams but found {seen[k]}")

    chars = sorted(g for g in prob if len(g) == 1 and g != BOS_CHAR)
    vocab = Vocabulary.for_chars(chars)
    if unk_log_prob is None:
        floor = min(prob[c] for c in chars)
        unk_log_prob = floor + math.log(0.1)
    return NgramModel(order, vocab, prob, backoff, unk_log_prob)
