"""Compile a context into buffer tokens.

The student runs ``[context][buffer][query][response]`` under the bottleneck
mask with the adapter live on the context/buffer stage; the teacher is the
same frozen model reading ``[context][query][response]``.  Training pushes
the student's next-token distributions toward the teacher's (KL, teacher
first) on reconstruction and context-agnostic samples.  Only the buffer
embeddings and the adapter matrices ever receive updates.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .artifact import BufferArtifact, artifact_from_cache
from .data import DEFAULT_VOCAB, SampleKind, SurrogateSample, SyntheticContext, Vocab, build_surrogate
from .lora import COMPRESSION_STAGE, LoraAdapter, discard, init_adapter
from .masks import ALL_SEGMENTS, Segment, SegmentLayout, append_mask, build_segment_mask, causal_mask
from .model import BUFFER_SLOT, KvCache, ModelWeights, PositionOverflowError, extract_buffer_cache, forward
from .tensor import RngState, Tensor


class DivergenceError(RuntimeError):
    pass


class AlignmentError(ValueError):
    pass


# --------------------------------------------------------------------------
# config / report
# --------------------------------------------------------------------------


@dataclass
class CompileConfig:
    ratio: int = 16
    k_tokens: int | None = None
    epochs: int = 45
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"
    loss_kind: str = "kl"
    coupled: bool = False
    n_recon: int = 2000
    n_agnostic: int = 2000
    batch_size: int = 8
    rank: int = 8
    alpha: float = 16.0
    projections: tuple[str, ...] = ("q", "k", "v", "o")
    train_adapter: bool = True
    teacher_sees_context: bool = True
    max_decode: int = 32
    seed: int = 0

    def __post_init__(self):
        self.projections = tuple(self.projections)
        self.loss_kind = self.loss_kind.lower()
        if self.loss_kind not in ("kl", "mse"):
            raise ValueError(f"loss_kind must be kl or mse, got {self.loss_kind!r}")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"schedule must be constant or linear, got {self.schedule!r}")
        if self.ratio < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("ratio, epochs and batch_size must be >= 1")
        if self.n_recon < 0 or self.n_agnostic < 0 or self.n_recon + self.n_agnostic < 1:
            raise ValueError("need at least one surrogate sample")

    @classmethod
    def large_model_preset(cls, **overrides) -> "CompileConfig":
        """Optimizer settings for 8B-scale backbones (linear decay from 2e-5); far too slow at toy scale."""
        return cls(**{"learning_rate": 2e-5, "schedule": "linear", **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projections"] = list(self.projections)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CompileConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown compile config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "CompileConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def buffer_size(self, n_ctx: int) -> int:
        if self.k_tokens is not None:
            return int(self.k_tokens)
        return max(1, n_ctx // self.ratio)


@dataclass
class EpochStats:
    epoch: int
    recon_loss: float
    reg_loss: float
    total_loss: float
    grad_norm: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    k_tokens: int = 0
    n_steps: int = 0
    config_hash: str = ""
    seed: int = 0

    @property
    def wall_time(self) -> float:
        return sum(e.seconds for e in self.epochs)

    def to_dict(self, timings: bool = True) -> dict:
        rows = [asdict(e) for e in self.epochs]
        if not timings:
            for r in rows:
                r.pop("seconds")
        return {"config_hash": self.config_hash, "seed": self.seed, "k_tokens": self.k_tokens,
                "n_steps": self.n_steps, "epochs": rows}

    def write(self, json_path, csv_path=None, timings: bool = False) -> None:
        """JSON plus per-epoch CSV.  Wall times are left out by default so reruns are byte-identical."""
        Path(json_path).write_text(json.dumps(self.to_dict(timings), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            cols = ["epoch", "recon_loss", "reg_loss", "total_loss", "grad_norm"] + (["seconds"] if timings else [])
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["config_hash", "seed"] + cols)
                for e in self.epochs:
                    d = asdict(e)
                    w.writerow([self.config_hash, self.seed] + [repr(d[c]) if isinstance(d[c], float) else d[c]
                                                                for c in cols])


# --------------------------------------------------------------------------
# buffer embeddings
# --------------------------------------------------------------------------


def init_buffer(weights: ModelWeights, k_tokens: int) -> Tensor:
    """K copies of the mean token-embedding row."""
    if k_tokens < 1:
        raise ValueError("need at least one buffer token")
    mean = weights["tok_emb"].data.mean(axis=0)
    return Tensor(np.tile(mean, (k_tokens, 1)), requires_grad=True, name="buffer")


# --------------------------------------------------------------------------
# teacher / student logits
# --------------------------------------------------------------------------


def _check_length(weights, n: int) -> None:
    if n > weights.config.max_position:
        raise PositionOverflowError(f"sequence of {n} tokens exceeds max_position {weights.config.max_position}")


def teacher_logits(weights: ModelWeights, context_tokens, query_tokens, target_tokens) -> Tensor:
    """Logits of the plain model over [C][x][y] at the positions that predict each y_t."""
    ctx, q, y = (np.asarray(t, dtype=np.int64) for t in (context_tokens, query_tokens, target_tokens))
    if len(y) == 0:
        return Tensor(np.zeros((0, weights.config.vocab_size)))
    seq = np.concatenate([ctx, q, y[:-1]])
    _check_length(weights, len(seq) + 1)
    logits, _ = forward(weights, seq, causal_mask(len(seq)))
    start = len(ctx) + len(q) - 1
    return T.take(logits, slice(start, start + len(y)), axis=0)


def student_logits(weights: ModelWeights, adapter: LoraAdapter | None, buffer: Tensor, context_tokens,
                   query_tokens, target_tokens, relaxed: bool = False) -> Tensor:
    """Logits of the bottlenecked student over [C][buf][x][y], aligned to the teacher's rows.

    ``relaxed=True`` is the diagnostic configuration: no buffer slots and a
    plain causal mask, so with a zero-init adapter it reproduces the teacher.
    """
    ctx, q, y = (np.asarray(t, dtype=np.int64) for t in (context_tokens, query_tokens, target_tokens))
    if len(y) == 0:
        return Tensor(np.zeros((0, weights.config.vocab_size)))
    if relaxed:
        layout = None
        seq = np.concatenate([ctx, q, y[:-1]])
        segments = np.repeat([Segment.CONTEXT, Segment.QUERY, Segment.RESPONSE], [len(ctx), len(q), len(y) - 1])
        mask = causal_mask(len(seq))
        k = 0
    else:
        k = buffer.shape[0]
        layout = SegmentLayout(len(ctx), k, len(q), len(y) - 1)
        seq = np.concatenate([ctx, np.full(k, BUFFER_SLOT), q, y[:-1]])
        segments = layout.segments()
        mask = build_segment_mask(layout)
    _check_length(weights, len(seq) + 1)
    logits, _ = forward(weights, seq, mask, np.arange(len(seq)), adapter=adapter, segments=segments,
                        buffer=None if relaxed else buffer)
    start = len(ctx) + k + len(q) - 1
    return T.take(logits, slice(start, start + len(y)), axis=0)


def generation_logits(weights: ModelWeights, buffer_cache: KvCache, query_tokens, target_tokens,
                      adapter: LoraAdapter | None = None) -> Tensor:
    """Student logits computed on top of an already-extracted buffer cache.

    Equivalent to :func:`student_logits` because query/response rows never
    see the context and context/buffer rows never see the query.
    """
    q, y = np.asarray(query_tokens, dtype=np.int64), np.asarray(target_tokens, dtype=np.int64)
    if len(y) == 0:
        return Tensor(np.zeros((0, weights.config.vocab_size)))
    seq = np.concatenate([q, y[:-1]])
    segments = np.repeat([Segment.QUERY, Segment.RESPONSE], [len(q), len(y) - 1])
    logits, _ = forward(weights, seq, append_mask(len(buffer_cache), len(seq)), cache_in=buffer_cache,
                        adapter=adapter, segments=segments if adapter is not None else None)
    return T.take(logits, slice(len(q) - 1, len(q) - 1 + len(y)), axis=0)


def loss(sample: SurrogateSample | None, teacher_block, student_block: Tensor, loss_kind: str = "kl") -> Tensor:
    """KL(P_teacher || P_student) averaged over response rows, or logit MSE.

    The sample's kind only decides whether the value is reported as the
    reconstruction or the regularization term.
    """
    t = teacher_block.data if isinstance(teacher_block, Tensor) else np.asarray(teacher_block, dtype=np.float64)
    if t.shape != student_block.shape:
        raise AlignmentError(f"teacher block {t.shape} and student block {student_block.shape} are misaligned")
    if sample is not None and len(sample.target_tokens) != t.shape[0]:
        raise AlignmentError("block rows do not match the sample's target length")
    if loss_kind == "kl":
        return T.kl_divergence(T.softmax_array(t), student_block)
    if loss_kind == "mse":
        return T.mse(student_block, Tensor(t))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class AdamW:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.base_lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def names(self) -> set[str]:
        return {name for name, _ in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None or self.lr == 0.0:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# --------------------------------------------------------------------------
# training state
# --------------------------------------------------------------------------


@dataclass
class _Target:
    """Teacher side of one distinct (query, target) pair, computed once."""

    kind: SampleKind
    query: tuple[int, ...]
    target: tuple[int, ...]
    probs: np.ndarray
    logits: np.ndarray


class CompileState:
    """Everything a compile run mutates: buffer embeddings, adapter, optimizer."""

    def __init__(self, weights: ModelWeights, context: SyntheticContext, config: CompileConfig,
                 vocab: Vocab = DEFAULT_VOCAB):
        self.weights = weights
        self.context = np.asarray(context.tokens, dtype=np.int64)
        self.config = config
        self.vocab = vocab
        self.rng = RngState(config.seed)
        k = config.buffer_size(len(self.context))
        self.layout = SegmentLayout(len(self.context), k)
        self.buffer = init_buffer(weights, k)
        active = ALL_SEGMENTS if config.coupled else COMPRESSION_STAGE
        self.adapter = init_adapter(weights.config, config.rank, config.alpha, self.rng.spawn(1),
                                    active_segments=active, projections=config.projections)
        params = [("buffer", self.buffer)]
        if config.train_adapter:
            params += self.adapter.parameters()
        else:
            for _, p in self.adapter.parameters():
                p.requires_grad = False
        self.optimizer = AdamW(params, config.learning_rate, (config.beta1, config.beta2), config.eps,
                               config.weight_decay)
        self._teacher_prefix: KvCache | None = None
        self._targets: dict[tuple, _Target] = {}

    def trainable(self) -> list[tuple[str, Tensor]]:
        return list(self.optimizer.params)

    def target(self, sample: SurrogateSample) -> _Target:
        key = sample.key
        if key not in self._targets:
            q, y = np.asarray(sample.query_tokens), np.asarray(sample.target_tokens)
            seq = np.concatenate([q, y[:-1]]) if len(y) else q[:0]
            if sample.n_ctx:
                if self._teacher_prefix is None:
                    _, self._teacher_prefix = forward(self.weights, self.context, causal_mask(len(self.context)))
                cache = self._teacher_prefix
            else:
                cache = None
            n_cached = len(cache) if cache is not None else 0
            if len(y):
                logits, _ = forward(self.weights, seq, append_mask(n_cached, len(seq)), cache_in=cache)
                block = logits.data[len(q) - 1:len(q) - 1 + len(y)]
            else:
                block = np.zeros((0, self.weights.config.vocab_size))
            self._targets[key] = _Target(sample.kind, sample.query_tokens, sample.target_tokens,
                                         T.softmax_array(block), block)
        return self._targets[key]

    def buffer_cache(self) -> KvCache:
        return extract_buffer_cache(self.weights, self.context, self.layout, self.adapter, self.buffer)


def _batched_generation_loss(state: CompileState, cache: KvCache, group: list[tuple[_Target, float]]) -> Tensor:
    """Weighted loss of several (query, target) pairs sharing one buffer cache.

    Sequences are right-padded to a common length; padded rows carry zero
    weight and causal masking keeps them invisible to real tokens.
    """
    cfg = state.config
    seqs = [np.concatenate([t.query, t.target[:-1]]).astype(np.int64) for t, _ in group]
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), state.vocab.EOS, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, :len(s)] = s
    adapter = state.adapter if state.adapter.coupled else None
    segments = None
    if adapter is not None:
        # one query length per batch keeps the gate uniform across rows
        segments = np.full(width, int(Segment.RESPONSE))
        segments[:len(group[0][0].query)] = int(Segment.QUERY)
    logits, _ = forward(state.weights, tokens, append_mask(len(cache), width), cache_in=cache,
                        adapter=adapter, segments=segments)
    vocab = logits.shape[-1]
    probs = np.zeros((len(seqs), width, vocab))
    ref = np.zeros((len(seqs), width, vocab))
    row_w = np.zeros((len(seqs), width))
    for i, (t, w) in enumerate(group):
        start = len(t.query) - 1
        n = len(t.target)
        probs[i, start:start + n] = t.probs
        ref[i, start:start + n] = t.logits
        row_w[i, start:start + n] = w / n
    # filler rows need a valid distribution; their weight is zero
    probs[row_w == 0] = 1.0 / vocab
    if cfg.loss_kind == "kl":
        return _weighted_kl(probs, logits, row_w)
    return _weighted_mse(ref, logits, row_w)


def _weighted_kl(p: np.ndarray, q_logits: Tensor, row_w: np.ndarray) -> Tensor:
    logq = T.log_softmax_array(q_logits.data)
    pos = p > 0
    logp = np.zeros_like(p)
    logp[pos] = np.log(p[pos])
    terms = np.where(pos, p * (logp - logq), 0.0).sum(axis=-1)
    out = np.asarray((terms * row_w).sum())
    q = np.exp(logq)

    def backward(g):
        q_logits._accumulate(g * row_w[..., None] * (q - p))

    return T._make(out, (q_logits,), backward)


def _weighted_mse(ref: np.ndarray, logits: Tensor, row_w: np.ndarray) -> Tensor:
    diff = logits.data - ref
    v = diff.shape[-1]
    out = np.asarray(((diff * diff).sum(axis=-1) / v * row_w).sum())

    def backward(g):
        logits._accumulate(g * row_w[..., None] * 2.0 * diff / v)

    return T._make(out, (logits,), backward)


def batch_loss(state: CompileState, batch: list[SurrogateSample]) -> tuple[Tensor, dict[str, float]]:
    """Mean per-sample loss over ``batch``; duplicate samples are evaluated once and weighted."""
    counts = Counter(s.key for s in batch)
    first = {}
    for s in batch:
        first.setdefault(s.key, s)
    cache = state.buffer_cache()
    groups: dict[int, list[tuple[_Target, float]]] = {}
    for key, n in counts.items():
        t = state.target(first[key])
        if len(t.target):
            groups.setdefault(len(t.query), []).append((t, n / len(batch)))
    total = None
    parts = {SampleKind.RECONSTRUCTION: 0.0, SampleKind.AGNOSTIC: 0.0}
    for qlen in sorted(groups):
        group = groups[qlen]
        # reconstruction targets are long; keep them out of the padded agnostic batch
        for sub in ([g for g in group if g[0].kind == SampleKind.RECONSTRUCTION],
                    [g for g in group if g[0].kind == SampleKind.AGNOSTIC]):
            if not sub:
                continue
            part = _batched_generation_loss(state, cache, sub)
            parts[sub[0][0].kind] += float(part.data)
            total = part if total is None else T.add(total, part)
    if total is None:
        total = T.sum_all(T.scale(state.buffer, 0.0))
    return total, {"recon": parts[SampleKind.RECONSTRUCTION], "reg": parts[SampleKind.AGNOSTIC]}


def train_step(state: CompileState, batch: list[SurrogateSample], lr: float | None = None) -> float:
    """One AdamW update over ``batch`` (gradients accumulated over every sample)."""
    value, _ = _train_step(state, batch, lr)
    return value


def _train_step(state: CompileState, batch, lr):
    state.optimizer.zero_grad()
    total, parts = batch_loss(state, batch)
    value = float(total.data)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at optimizer step {state.optimizer.t + 1}")
    total.backward()
    grad_sq = sum(float((p.grad ** 2).sum()) for _, p in state.trainable() if p.grad is not None)
    if not np.isfinite(grad_sq):
        raise DivergenceError(f"non-finite gradient at optimizer step {state.optimizer.t + 1}")
    if lr is not None:
        state.optimizer.lr = lr
    state.optimizer.step()
    return value, {**parts, "grad_norm": float(np.sqrt(grad_sq))}


# --------------------------------------------------------------------------
# compile pipeline
# --------------------------------------------------------------------------


@dataclass
class CompileResult:
    artifact: BufferArtifact
    report: TrainReport
    adapter: LoraAdapter | None = None  # kept only by the coupled ablation
    state: CompileState | None = field(default=None, repr=False)

    def __iter__(self):
        yield self.artifact
        yield self.report


def epoch_slices(n_samples: int, epochs: int) -> list[slice]:
    """Split the presentation sequence into ``epochs`` contiguous, near-equal chunks."""
    bounds = np.linspace(0, n_samples, epochs + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def compile_context(weights: ModelWeights, context: SyntheticContext, config: CompileConfig | None = None,
                    vocab: Vocab = DEFAULT_VOCAB, dtype: str = "f32", keep_state: bool = False) -> CompileResult:
    """Distil ``context`` into buffer tokens and return the portable artifact.

    The surrogate set holds ``n_recon + n_agnostic`` presentations; they are
    walked once, in ``epochs`` contiguous chunks, ``batch_size`` at a time.
    """
    config = config or CompileConfig()
    fingerprint = weights.frozen_fingerprint
    n_ctx = len(context.tokens)
    k = config.buffer_size(n_ctx)
    budget = weights.config.max_position - k - len(vocab.trigger)
    if 2 * n_ctx > budget:
        raise PositionOverflowError(
            f"context of {n_ctx} tokens plus its reconstruction does not fit max_position "
            f"{weights.config.max_position} with {k} buffer tokens")

    state = CompileState(weights, context, config, vocab)
    samples = build_surrogate(context, weights, config.n_recon, config.n_agnostic, state.rng.spawn(2), vocab,
                              max_decode=config.max_decode, teacher_sees_context=config.teacher_sees_context)
    n_steps_total = sum(-(-(sl.stop - sl.start) // config.batch_size) for sl in epoch_slices(len(samples), config.epochs))
    report = TrainReport(k_tokens=k, config_hash=config.config_hash().hex(), seed=config.seed)
    step = 0
    for epoch, sl in enumerate(epoch_slices(len(samples), config.epochs)):
        t0 = time.perf_counter()
        chunk = samples[sl]
        sums = {"recon": 0.0, "reg": 0.0, "total": 0.0, "grad_norm": 0.0}
        n_batches = 0
        for i in range(0, len(chunk), config.batch_size):
            lr = config.learning_rate
            if config.schedule == "linear":
                lr = config.learning_rate * (1.0 - step / max(n_steps_total, 1))
            value, info = _train_step(state, chunk[i:i + config.batch_size], lr)
            sums["total"] += value
            sums["recon"] += info["recon"]
            sums["reg"] += info["reg"]
            sums["grad_norm"] += info["grad_norm"]
            n_batches += 1
            step += 1
        n = max(n_batches, 1)
        report.epochs.append(EpochStats(epoch + 1, sums["recon"] / n, sums["reg"] / n, sums["total"] / n,
                                        sums["grad_norm"] / n, time.perf_counter() - t0))
    report.n_steps = step

    cache = extract_buffer_cache(weights, context.tokens, state.layout, state.adapter.detached(),
                                 Tensor(state.buffer.data.copy())).detached()
    artifact = artifact_from_cache(cache, weights, context_length=n_ctx, ratio=config.ratio,
                                   config_hash=config.config_hash(), dtype=dtype)
    adapter = None
    if config.coupled:
        adapter = state.adapter.detached()
    else:
        discard(state.adapter)
    weights.verify_frozen()
    return CompileResult(artifact, report, adapter, state if keep_state else None)
