"""Inside-outside charts for a PCFG in Chomsky normal form.

Spans use 1-based inclusive word positions ``1 <= i <= j <= L``, as in the
usual presentation of the recursions; nonterminals are addressed by name or
by index. The binary rule tensor ``R[a, b, c] = Pr[a -> b c]`` has the
parent as its first mode, so the inside update

    p_in(i, j, a) = sum_{k, b, c} R[a, b, c] p_in(i, k, b) p_in(k+1, j, c)

is a triple sum of the same shape as a cycle contraction. :func:`inside`
accepts ``rule_factors`` (cycle factors of ``R``) and then evaluates the sum
without ever forming ``R``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .tensor import CycleFactors, tensorize

NORMALIZATION_TOL = 1e-9


class GrammarError(ValueError):
    def __init__(self, message, nonterminal=None, line=None):
        self.nonterminal = nonterminal
        self.line = line
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class Grammar:
    nonterminals: tuple
    binary: np.ndarray  # (N, N, N), binary[a, b, c] = Pr[a -> b c]
    lexical: dict  # word -> (N,) vector of Pr[a -> word]
    root: int

    def __post_init__(self):
        N = len(self.nonterminals)
        R = np.asarray(self.binary, dtype=float)
        if R.shape != (N, N, N):
            raise GrammarError(f"binary rule tensor must be {N}x{N}x{N}")
        lex = {w: np.asarray(v, dtype=float) for w, v in self.lexical.items()}
        probs = [R.reshape(-1)] + list(lex.values())
        allp = np.concatenate(probs) if probs else np.zeros(0)
        if np.any(allp < 0) or np.any(allp > 1):
            raise GrammarError("rule probabilities must lie in [0, 1]")
        totals = R.reshape(N, -1).sum(axis=1)
        for v in lex.values():
            totals = totals + v
        for a, tot in enumerate(totals):
            if abs(tot - 1.0) > NORMALIZATION_TOL:
                name = self.nonterminals[a]
                raise GrammarError(
                    f"rules for nonterminal {name!r} sum to {tot:.12g}, not 1", nonterminal=name
                )
        if not 0 <= self.root < N:
            raise GrammarError("root index out of range")
        object.__setattr__(self, "binary", R)
        object.__setattr__(self, "lexical", lex)
        object.__setattr__(self, "nonterminals", tuple(self.nonterminals))

    @property
    def size(self):
        return len(self.nonterminals)

    def index(self, a):
        if isinstance(a, (int, np.integer)):
            return int(a)
        return self.nonterminals.index(a)

    def lexical_vector(self, word):
        return self.lexical.get(word, np.zeros(self.size))

    @classmethod
    def from_text(cls, text):
        """Parse ``BIN a b c p`` / ``LEX a word p`` / ``ROOT a`` lines (``#`` starts a comment)."""
        names, seen = [], {}
        rules, lex, root = [], [], None

        def nt(name):
            if name not in seen:
                seen[name] = len(names)
                names.append(name)
            return seen[name]

        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].split()
            if not line:
                continue
            tag = line[0].upper()
            try:
                if tag == "BIN" and len(line) == 5:
                    rules.append((nt(line[1]), nt(line[2]), nt(line[3]), float(line[4])))
                elif tag == "LEX" and len(line) == 4:
                    lex.append((nt(line[1]), line[2], float(line[3])))
                elif tag == "ROOT" and len(line) == 2:
                    if root is not None:
                        raise GrammarError("ROOT given twice", line=no)
                    root = nt(line[1])
                else:
                    raise GrammarError(f"line {no}: cannot parse {raw.strip()!r}", line=no)
            except ValueError as exc:
                if isinstance(exc, GrammarError):
                    raise
                raise GrammarError(f"line {no}: bad probability", line=no) from None
        if root is None:
            raise GrammarError("missing ROOT line")
        N = len(names)
        R = np.zeros((N, N, N))
        for a, b, c, p in rules:
            R[a, b, c] += p
        words = {}
        for a, w, p in lex:
            words.setdefault(w, np.zeros(N))[a] += p
        return cls(tuple(names), R, words, root)

    def to_text(self):
        out = [f"ROOT {self.nonterminals[self.root]}"]
        for a, b, c in zip(*np.nonzero(self.binary)):
            nm = self.nonterminals
            out.append(f"BIN {nm[a]} {nm[b]} {nm[c]} {float(self.binary[a, b, c])!r}")
        for w in sorted(self.lexical):
            for a in np.nonzero(self.lexical[w])[0]:
                out.append(f"LEX {self.nonterminals[a]} {w} {float(self.lexical[w][a])!r}")
        return "\n".join(out) + "\n"


@dataclass(frozen=True, eq=False)
class ChartTable:
    """Triangular chart; ``chart[i, j, a]`` with 1-based ``i <= j``.

    With ``log=True`` the stored values are natural-log probabilities.
    """

    values: np.ndarray  # (L, L, N), 0-based storage
    nonterminals: tuple
    log: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def L(self):
        return self.values.shape[0]

    def _idx(self, a):
        if isinstance(a, (int, np.integer)):
            return int(a)
        return self.nonterminals.index(a)

    def __getitem__(self, key):
        i, j, a = key
        if not 1 <= i <= j <= self.L:
            raise IndexError(f"span ({i}, {j}) outside 1..{self.L}")
        return float(self.values[i - 1, j - 1, self._idx(a)])

    def span(self, i, j):
        return np.array(self.values[i - 1, j - 1])

    def prob(self, i, j, a):
        v = self[i, j, a]
        return float(np.exp(v)) if self.log else v

    def to_tsv(self, title=None):
        lines = [] if title is None else [f"# {title}"]
        lines.append("i\tj\tnonterminal\tvalue")
        for length in range(1, self.L + 1):
            for i in range(1, self.L - length + 2):
                j = i + length - 1
                for a, name in enumerate(self.nonterminals):
                    lines.append(f"{i}\t{j}\t{name}\t{float(self.values[i - 1, j - 1, a])!r}")
        return "\n".join(lines) + "\n"


def _check_sentence(words):
    words = list(words)
    if not words:
        raise ValueError("sentence must contain at least one word")
    return words


def _cycle_pair_sum(F: CycleFactors, x, y):
    # sum_{b,c} R[a,b,c] x_b y_c with R = cycle(F), without forming R
    k = F.k
    Ub, Vb, Wb = tensorize(F.U, k), tensorize(F.V, k), tensorize(F.W, k)
    Vx = np.einsum("b,bqr->qr", x, Vb)
    Wy = np.einsum("c,crp->rp", y, Wb)
    return np.einsum("apq,qr,rp->a", Ub, Vx, Wy)


def inside(G: Grammar, words, log_space=False, rule_factors: CycleFactors | None = None):
    """Inside chart; ``inside(...)[1, L, root]`` is the sentence probability."""
    words = _check_sentence(words)
    L, N = len(words), G.size
    if rule_factors is not None:
        if log_space:
            raise ValueError("rule_factors are only supported in linear space")
        if rule_factors.n != N:
            raise ValueError("rule factors do not match the nonterminal count")
    R = G.binary
    if log_space:
        with np.errstate(divide="ignore"):
            logR = np.log(R)
        chart = np.full((L, L, N), -np.inf)
        for i, w in enumerate(words):
            with np.errstate(divide="ignore"):
                chart[i, i] = np.log(G.lexical_vector(w))
        for length in range(2, L + 1):
            for i in range(L - length + 1):
                j = i + length - 1
                terms = [logR + chart[i, k][None, :, None] + chart[k + 1, j][None, None, :]
                         for k in range(i, j)]
                stacked = np.stack(terms, axis=1).reshape(N, -1)
                chart[i, j] = logsumexp(stacked, axis=1)
        return ChartTable(chart, G.nonterminals, log=True, meta={"words": words})

    chart = np.zeros((L, L, N))
    for i, w in enumerate(words):
        chart[i, i] = G.lexical_vector(w)
    for length in range(2, L + 1):
        for i in range(L - length + 1):
            j = i + length - 1
            acc = np.zeros(N)
            for k in range(i, j):
                if rule_factors is None:
                    acc += np.einsum("abc,b,c->a", R, chart[i, k], chart[k + 1, j])
                else:
                    acc += _cycle_pair_sum(rule_factors, chart[i, k], chart[k + 1, j])
            chart[i, j] = acc
    return ChartTable(chart, G.nonterminals, meta={"words": words})


def outside(G: Grammar, words, p_in: ChartTable):
    """Outside chart from the two-term recursion, seeded with ``p_out(1, L, root) = 1``."""
    words = _check_sentence(words)
    L, N = len(words), G.size
    if p_in.L != L or p_in.values.shape[2] != N:
        raise ValueError("inside chart does not match grammar and sentence")
    R = G.binary
    if p_in.log:
        with np.errstate(divide="ignore"):
            logR = np.log(R)
        ins = p_in.values
        out = np.full((L, L, N), -np.inf)
        out[0, L - 1, G.root] = 0.0
        for length in range(L - 1, 0, -1):
            for i in range(L - length + 1):
                j = i + length - 1
                terms = []
                for k in range(0, i):  # parent (k, j) = b -> c a, c over (k, i-1)
                    terms.append((logR.transpose(2, 0, 1) + out[k, j][None, :, None]
                                  + ins[k, i - 1][None, None, :]).reshape(N, -1))
                for k in range(j + 1, L):  # parent (i, k) = b -> a c, c over (j+1, k)
                    terms.append((logR.transpose(1, 0, 2) + out[i, k][None, :, None]
                                  + ins[j + 1, k][None, None, :]).reshape(N, -1))
                out[i, j] = logsumexp(np.concatenate(terms, axis=1), axis=1)
        return ChartTable(out, G.nonterminals, log=True, meta={"words": words})

    ins = p_in.values
    out = np.zeros((L, L, N))
    out[0, L - 1, G.root] = 1.0
    for length in range(L - 1, 0, -1):
        for i in range(L - length + 1):
            j = i + length - 1
            acc = np.zeros(N)
            for k in range(0, i):
                acc += np.einsum("bca,b,c->a", R, out[k, j], ins[k, i - 1])
            for k in range(j + 1, L):
                acc += np.einsum("bac,b,c->a", R, out[i, k], ins[j + 1, k])
            out[i, j] = acc
    return ChartTable(out, G.nonterminals, meta={"words": words})


def marginals(p_in: ChartTable, p_out: ChartTable):
    """``mu(i, j, a) = p_in(i, j, a) * p_out(i, j, a)``."""
    if p_in.values.shape != p_out.values.shape or p_in.log != p_out.log:
        raise ValueError("inside and outside charts do not match")
    if p_in.log:
        vals = p_in.values + p_out.values
    else:
        vals = p_in.values * p_out.values
    return ChartTable(vals, p_in.nonterminals, log=p_in.log, meta=dict(p_in.meta))
