"""Synthetic key=value language, probes, and the surrogate training set.

Contexts are runs of ``key value ;`` clauses padded with filler tokens.
Generic "instruction" queries (greetings, copy-these-words, counting) live in
a disjoint part of the vocabulary so they can never mention a context key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .tensor import RngState


@dataclass(frozen=True)
class Vocab:
    n_keys: int = 32
    n_values: int = 16
    n_filler: int = 16
    n_words: int = 16
    n_digits: int = 10

    # fixed specials
    EOS = 0
    EQ = 1
    SEP = 2
    ASK = 3
    REPEAT = 4
    CTX = 5
    GREET = 6
    COPY = 7
    COUNT = 8
    HELLO = 9
    N_SPECIAL = 10

    @property
    def trigger(self) -> tuple[int, ...]:
        """Reserved stand-in for "Please repeat the context"."""
        return (self.REPEAT, self.CTX)

    @property
    def key_base(self) -> int:
        return self.N_SPECIAL

    @property
    def value_base(self) -> int:
        return self.key_base + self.n_keys

    @property
    def filler_base(self) -> int:
        return self.value_base + self.n_values

    @property
    def word_base(self) -> int:
        return self.filler_base + self.n_filler

    @property
    def digit_base(self) -> int:
        return self.word_base + self.n_words

    @property
    def size(self) -> int:
        return self.digit_base + self.n_digits

    def keys(self) -> np.ndarray:
        return np.arange(self.key_base, self.value_base)

    def values(self) -> np.ndarray:
        return np.arange(self.value_base, self.filler_base)

    def fillers(self) -> np.ndarray:
        return np.arange(self.filler_base, self.word_base)

    def words(self) -> np.ndarray:
        return np.arange(self.word_base, self.digit_base)

    def digits(self) -> np.ndarray:
        return np.arange(self.digit_base, self.size)

    def name(self, tok: int) -> str:
        specials = ["<eos>", "=", ";", "?", "<repeat>", "<ctx>", "<greet>", "<copy>", "<count>", "hello"]
        tok = int(tok)
        if tok < 0:
            return "<buf>"
        if tok < self.N_SPECIAL:
            return specials[tok]
        for prefix, base, n in (("k", self.key_base, self.n_keys), ("v", self.value_base, self.n_values),
                                ("f", self.filler_base, self.n_filler), ("w", self.word_base, self.n_words),
                                ("d", self.digit_base, self.n_digits)):
            if base <= tok < base + n:
                return f"{prefix}{tok - base:02d}"
        return f"<{tok}>"

    def detokenize(self, tokens) -> str:
        return " ".join(self.name(t) for t in tokens)


DEFAULT_VOCAB = Vocab()

CLAUSE_LEN = 3  # key value ;


class BudgetError(ValueError):
    pass


@dataclass
class SyntheticContext:
    facts: list[tuple[tuple[int, ...], tuple[int, ...]]]
    tokens: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.tokens)


def gen_context(seed: int, n_facts: int, ctx_len: int, vocab: Vocab = DEFAULT_VOCAB) -> SyntheticContext:
    if n_facts < 1:
        raise BudgetError("a context needs at least one fact")
    if n_facts > vocab.n_keys:
        raise BudgetError(f"{n_facts} facts need more than {vocab.n_keys} distinct keys")
    if ctx_len < CLAUSE_LEN * n_facts:
        raise BudgetError(f"ctx_len {ctx_len} cannot hold {n_facts} clauses of {CLAUSE_LEN} tokens")
    rng = RngState(seed)
    keys = vocab.keys()[rng.choice(vocab.n_keys, n_facts, replace=False)]
    vals = vocab.values()[rng.integers(0, vocab.n_values, n_facts)]
    n_fill = ctx_len - CLAUSE_LEN * n_facts
    # split the filler budget over the n_facts + 1 gaps
    cuts = np.sort(rng.integers(0, n_fill + 1, n_facts)) if n_fill else np.zeros(n_facts, dtype=np.int64)
    gaps = np.diff(np.concatenate([[0], cuts, [n_fill]]))
    filler = vocab.fillers()[rng.integers(0, vocab.n_filler, n_fill)] if n_fill else np.zeros(0, np.int64)
    out, f = [], 0
    for i in range(n_facts):
        out.extend(filler[f:f + gaps[i]])
        f += gaps[i]
        out.extend([keys[i], vals[i], vocab.SEP])
    out.extend(filler[f:])
    facts = [((int(k),), (int(v),)) for k, v in zip(keys, vals)]
    return SyntheticContext(facts, np.asarray(out, dtype=np.int64), seed)


@dataclass
class Probe:
    query: tuple[int, ...]
    gold: tuple[int, ...]
    tag: str


def probe_set(context: SyntheticContext, vocab: Vocab = DEFAULT_VOCAB) -> list[Probe]:
    """One recall probe per fact: ``? key`` -> value.  Tagged by where the fact sits."""
    probes = []
    n = len(context.tokens)
    for key, val in context.facts:
        pos = int(np.nonzero(context.tokens == key[0])[0][0])
        tag = "early" if pos < n / 3 else ("late" if pos >= 2 * n / 3 else "middle")
        probes.append(Probe((vocab.ASK, *key), val, tag))
    return probes


# --------------------------------------------------------------------------
# context-agnostic queries
# --------------------------------------------------------------------------


def agnostic_query(rng: RngState, vocab: Vocab = DEFAULT_VOCAB) -> tuple[int, ...]:
    kind = int(rng.integers(0, 3))
    if kind == 0:
        return (vocab.GREET,)
    if kind == 1:
        n = int(rng.integers(1, 4))
        return (vocab.COPY, *(int(w) for w in vocab.words()[rng.integers(0, vocab.n_words, n)]))
    start = int(rng.integers(0, vocab.n_digits - 1))
    return (vocab.COUNT, int(vocab.digits()[start]))


def agnostic_reference_answer(query, vocab: Vocab = DEFAULT_VOCAB) -> tuple[int, ...]:
    """Ground-truth reply to a generic query; only the pretraining corpus uses this."""
    head = query[0]
    if head == vocab.GREET:
        return (vocab.HELLO, vocab.EOS)
    if head == vocab.COPY:
        return tuple(query[1:]) + (vocab.EOS,)
    if head == vocab.COUNT:
        start = query[1] - vocab.digit_base
        return tuple(int(vocab.digit_base + d) for d in range(start + 1, min(start + 4, vocab.n_digits))) + (vocab.EOS,)
    raise ValueError(f"not an agnostic query: {query}")


def gen_agnostic_pool(seed: int, n: int, vocab: Vocab = DEFAULT_VOCAB) -> list[tuple[int, ...]]:
    if n < 1:
        raise ValueError("pool size must be >= 1")
    rng = RngState(seed)
    return [agnostic_query(rng, vocab) for _ in range(n)]


# --------------------------------------------------------------------------
# surrogate dataset
# --------------------------------------------------------------------------


class SampleKind(str, Enum):
    RECONSTRUCTION = "reconstruction"
    AGNOSTIC = "agnostic"


@dataclass
class SurrogateSample:
    kind: SampleKind
    query_tokens: tuple[int, ...]
    target_tokens: tuple[int, ...]
    n_ctx: int = 0
    teacher_logit_positions: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.teacher_logit_positions is None:
            # position in [C][x][y] whose logits predict each y_t
            start = self.n_ctx + len(self.query_tokens) - 1
            self.teacher_logit_positions = np.arange(start, start + len(self.target_tokens))

    @property
    def key(self) -> tuple:
        return (self.query_tokens, self.target_tokens)


def build_surrogate(context: SyntheticContext, teacher, n_recon: int, n_agnostic: int, rng: RngState,
                    vocab: Vocab = DEFAULT_VOCAB, max_decode: int = 32,
                    teacher_sees_context: bool = True) -> list[SurrogateSample]:
    """Reconstruction + context-agnostic samples, shuffled deterministically.

    Agnostic targets are the teacher's greedy continuation of ``[C][q]``
    (or of ``[q]`` alone when ``teacher_sees_context`` is false).
    """
    from .model import decode_greedy, forward
    from .masks import causal_mask

    if n_recon < 0 or n_agnostic < 0 or n_recon + n_agnostic < 1:
        raise ValueError("need a non-negative mix with at least one sample")
    ctx = tuple(int(t) for t in context.tokens)
    samples = [SurrogateSample(SampleKind.RECONSTRUCTION, vocab.trigger, ctx, len(ctx)) for _ in range(n_recon)]
    if n_agnostic:
        pool = gen_agnostic_pool(int(rng.integers(0, 2**63 - 1)), n_agnostic, vocab)
        prefix = None
        if teacher_sees_context and ctx:
            _, prefix = forward(teacher, np.asarray(ctx), causal_mask(len(ctx)))
        answers: dict[tuple, tuple] = {}
        n_ctx = len(ctx) if teacher_sees_context else 0
        for q in pool:
            if q not in answers:
                answers[q] = tuple(decode_greedy(teacher, q, cache_in=prefix, max_new=max_decode,
                                                 stop_token=vocab.EOS))
            samples.append(SurrogateSample(SampleKind.AGNOSTIC, q, answers[q], n_ctx))
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


# --------------------------------------------------------------------------
# persistence: line-delimited token-id text
# --------------------------------------------------------------------------


def _ids(tokens) -> str:
    return " ".join(str(int(t)) for t in tokens)


def _parse_ids(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split())


def _header(line: str) -> dict:
    if not line.startswith("#"):
        raise ValueError("missing header line")
    return dict(item.split("=", 1) for item in line[1:].split())


def write_context(path, context: SyntheticContext) -> None:
    lines = [f"# kind=context seed={context.seed} n_facts={len(context.facts)} ctx_len={len(context)}",
             _ids(context.tokens)]
    lines += [f"{_ids(k)} | {_ids(v)}" for k, v in context.facts]
    Path(path).write_text("\n".join(lines) + "\n")


def read_context(path) -> SyntheticContext:
    lines = Path(path).read_text().splitlines()
    head = _header(lines[0])
    tokens = np.asarray(_parse_ids(lines[1]), dtype=np.int64)
    facts = []
    for line in lines[2:]:
        if line.strip():
            k, v = line.split("|")
            facts.append((_parse_ids(k), _parse_ids(v)))
    if len(tokens) != int(head["ctx_len"]) or len(facts) != int(head["n_facts"]):
        raise ValueError(f"context file {path} disagrees with its header")
    return SyntheticContext(facts, tokens, int(head["seed"]))


def write_probes(path, probes: list[Probe], seed: int) -> None:
    lines = [f"# kind=probes seed={seed} count={len(probes)}"]
    lines += [f"{_ids(p.query)} | {_ids(p.gold)} | {p.tag}" for p in probes]
    Path(path).write_text("\n".join(lines) + "\n")


def read_probes(path) -> list[Probe]:
    lines = Path(path).read_text().splitlines()
    head = _header(lines[0])
    probes = []
    for line in lines[1:]:
        if line.strip():
            q, g, tag = (s.strip() for s in line.split("|"))
            probes.append(Probe(_parse_ids(q), _parse_ids(g), tag))
    if len(probes) != int(head["count"]):
        raise ValueError(f"probe file {path} disagrees with its header")
    return probes
