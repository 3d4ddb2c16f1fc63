"""Train the tiny base model that plays the frozen backbone.

The corpus mixes three kinds of ``[context][query][answer]`` sequences:
key recall (``? k =`` -> value), verbatim repetition of the context, and the
generic context-agnostic templates.  Loss is next-token cross-entropy on the
answer tokens only.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .compiler import AdamW
from .data import CLAUSE_LEN, DEFAULT_VOCAB, Vocab, agnostic_query, agnostic_reference_answer, gen_context, probe_set
from .masks import causal_mask
from .model import ModelConfig, ModelWeights, decode_greedy, forward
from .tensor import RngState


class PretrainBudgetError(RuntimeError):
    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


@dataclass
class PretrainConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_position: int = 256
    rope_base: float = 10000.0
    n_facts: int = 6
    ctx_len: int = 64
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    max_steps: int = 6000
    eval_every: int = 250
    n_eval_contexts: int = 48
    recall_target: float = 0.95
    mix_recall: float = 0.5
    mix_repeat: float = 0.25
    seed: int = 0

    def model_config(self, vocab: Vocab = DEFAULT_VOCAB) -> ModelConfig:
        return ModelConfig(vocab_size=vocab.size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, head_dim=self.d_model // self.n_heads, d_ff=self.d_ff,
                           max_position=self.max_position, rope_base=self.rope_base)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PretrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


# training contexts draw seeds from one half of the seed space, held-out probes from the other
TRAIN_SEED_OFFSET = 1 << 40
HELDOUT_SEED_OFFSET = 1 << 41


def _example(rng: RngState, n_facts: int, ctx_len: int, vocab: Vocab, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """One training sequence and a 0/1 flag per token marking the supervised answer tokens."""
    ctx = gen_context(TRAIN_SEED_OFFSET + int(rng.integers(0, 1 << 40)), n_facts, ctx_len, vocab)
    seq = list(ctx.tokens)
    scored = [0] * len(seq)
    if kind == "recall":
        # probes drawn with replacement, so elimination of already-asked keys never pays off
        for i in rng.integers(0, len(ctx.facts), 2 * len(ctx.facts)):
            key, val = ctx.facts[int(i)]
            probe = [vocab.ASK, *key]
            seq += probe + [*val, vocab.EOS]
            scored += [0] * len(probe) + [1] * (len(val) + 1)
    else:
        if kind == "repeat":
            query, answer = vocab.trigger, (*ctx.tokens.tolist(), vocab.EOS)
        else:
            query = agnostic_query(rng, vocab)
            answer = agnostic_reference_answer(query, vocab)
        seq += [*query, *answer]
        scored += [0] * len(query) + [1] * len(answer)
    return np.asarray(seq, dtype=np.int64), np.asarray(scored, dtype=np.float64)


def _batch(rng: RngState, cfg: PretrainConfig, vocab: Vocab):
    # one task per batch keeps the padded width close to the real lengths
    u = float(rng.uniform(()))
    kind = "recall" if u < cfg.mix_recall else ("repeat" if u < cfg.mix_recall + cfg.mix_repeat else "agnostic")
    # context size varies per batch; the short ones are cheap and get the lookup circuit going early
    n_facts = int(rng.integers(1, cfg.n_facts + 1))
    ctx_len = max(CLAUSE_LEN * n_facts, round(cfg.ctx_len * n_facts / cfg.n_facts))
    examples = [_example(rng, n_facts, ctx_len, vocab, kind) for _ in range(cfg.batch_size)]
    width = max(len(s) for s, _ in examples) - 1
    inputs = np.full((len(examples), width), vocab.EOS, dtype=np.int64)
    targets = np.zeros((len(examples), width), dtype=np.int64)
    weight = np.zeros((len(examples), width))
    for i, (s, scored) in enumerate(examples):
        inputs[i, :len(s) - 1] = s[:-1]
        targets[i, :len(s) - 1] = s[1:]
        weight[i, :len(s) - 1] = scored[1:]
    return inputs, targets, weight


def _masked_ce(logits: T.Tensor, targets: np.ndarray, weight: np.ndarray) -> T.Tensor:
    logp = T.log_softmax_array(logits.data)
    n = weight.sum()
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * weight).sum() / n)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        logits._accumulate(g * grad * (weight / n)[..., None])

    return T._make(out, (logits,), backward)


def heldout_probes(cfg: PretrainConfig, vocab: Vocab = DEFAULT_VOCAB):
    rng = RngState(cfg.seed + HELDOUT_SEED_OFFSET)
    out = []
    for _ in range(cfg.n_eval_contexts):
        ctx = gen_context(HELDOUT_SEED_OFFSET + int(rng.integers(0, 1 << 40)), cfg.n_facts, cfg.ctx_len, vocab)
        out.append((ctx, probe_set(ctx, vocab)))
    return out


def answer_matches(decoded, gold) -> bool:
    """Exact match on the value tokens: the first len(gold) decoded tokens equal gold."""
    return tuple(decoded[:len(gold)]) == tuple(gold)


def recall_accuracy(weights: ModelWeights, probes_by_context, with_context: bool = True,
                    vocab: Vocab = DEFAULT_VOCAB) -> float:
    hits = total = 0
    for ctx, probes in probes_by_context:
        prefix = None
        if with_context:
            _, prefix = forward(weights, ctx.tokens, causal_mask(len(ctx.tokens)))
        for p in probes:
            out = decode_greedy(weights, p.query, cache_in=prefix, max_new=len(p.gold) + 1, stop_token=vocab.EOS)
            hits += answer_matches(out, p.gold)
            total += 1
    return hits / max(total, 1)


def pretrain(cfg: PretrainConfig, vocab: Vocab = DEFAULT_VOCAB, log=None) -> tuple[ModelWeights, dict]:
    """Train until held-out full-context recall reaches the target, then freeze.

    Raises :class:`PretrainBudgetError` when ``max_steps`` runs out first.
    """
    rng = RngState(cfg.seed)
    weights = ModelWeights.init(cfg.model_config(vocab), rng.spawn(0))
    data_rng = rng.spawn(1)
    params = weights.named()
    opt = AdamW(params, cfg.learning_rate, weight_decay=0.0)
    probes = heldout_probes(cfg, vocab)
    history = []
    t0 = time.perf_counter()
    recall = 0.0
    step = 0
    for step in range(1, cfg.max_steps + 1):
        inputs, targets, weight = _batch(data_rng, cfg, vocab)
        logits, _ = forward(weights, inputs, causal_mask(inputs.shape[1]))
        loss = _masked_ce(logits, targets, weight)
        opt.zero_grad()
        loss.backward()
        opt.lr = cfg.learning_rate * min(1.0, step / max(cfg.warmup_steps, 1))
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            recall = recall_accuracy(weights, probes, True, vocab)
            history.append({"step": step, "loss": float(loss.data), "recall": recall})
            if log is not None:
                log(f"step {step} loss {float(loss.data):.4f} heldout recall {recall:.3f} "
                    f"({time.perf_counter() - t0:.0f}s)")
            if recall >= cfg.recall_target:
                break
    no_ctx = recall_accuracy(weights, probes, False, vocab)
    report = {"config": cfg.to_dict(), "steps": step, "heldout_recall": recall, "no_context_recall": no_ctx,
              "chance": 1.0 / vocab.n_values, "n_probes": sum(len(p) for _, p in probes), "history": history}
    if recall < cfg.recall_target:
        raise PretrainBudgetError(f"held-out recall {recall:.3f} below target {cfg.recall_target} "
                                  f"after {step} steps", report)
    weights.freeze()
    report["fingerprint"] = weights.frozen_fingerprint.hex()
    return weights, report
