"""Pre-norm decoder-only transformer used as both teacher and student backbone.

RMSNorm, rotary positions, SwiGLU MLP, untied output head.  ``forward`` runs
a block of new tokens on top of an optional :class:`KvCache`, under an
explicit boolean visibility mask, with an optional stage-gated adapter.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .masks import SegmentLayout, append_mask, build_segment_mask, Segment
from .tensor import DimensionError, RngState, Tensor

BUFFER_SLOT = -1  # token id marking a learned buffer embedding slot

CHECKPOINT_MAGIC = b"LCCM"
CHECKPOINT_VERSION = 1


class PositionOverflowError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class FrozenWeightsError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    d_ff: int = 512
    max_position: int = 1024
    rope_base: float = 10000.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError("d_model must equal n_heads * head_dim")
        if self.head_dim % 2:
            raise ValueError("rotary positions need an even head_dim")

    def to_dict(self) -> dict:
        return asdict(self)


_CONFIG_STRUCT = struct.Struct("<7Id")


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("tok_emb", (cfg.vocab_size, d))]
    for i in range(cfg.n_layers):
        shapes += [
            (f"l{i}.attn_norm", (d,)),
            (f"l{i}.wq", (d, d)),
            (f"l{i}.wk", (d, d)),
            (f"l{i}.wv", (d, d)),
            (f"l{i}.wo", (d, d)),
            (f"l{i}.mlp_norm", (d,)),
            (f"l{i}.w_gate", (f, d)),
            (f"l{i}.w_up", (f, d)),
            (f"l{i}.w_down", (d, f)),
        ]
    shapes += [("final_norm", (d,)), ("head", (cfg.vocab_size, d))]
    return shapes


class ModelWeights:
    """Named parameter tensors in a fixed order, plus a freeze/fingerprint contract."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._fingerprint: bytes | None = None

    @classmethod
    def init(cls, config: ModelConfig, rng: RngState) -> "ModelWeights":
        params = {}
        for name, shape in _param_shapes(config):
            if name.endswith("norm"):
                arr = np.ones(shape)
            elif name == "tok_emb":
                arr = rng.normal(shape, std=1.0)
            else:
                arr = rng.normal(shape, std=1.0 / np.sqrt(shape[1]))
                if name.endswith(("wo", "w_down")):
                    arr /= np.sqrt(2 * config.n_layers)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named(self) -> list[tuple[str, Tensor]]:
        return [(name, self.params[name]) for name, _ in _param_shapes(self.config)]

    @property
    def frozen(self) -> bool:
        return self._fingerprint is not None

    def freeze(self) -> bytes:
        """Stop gradients, make every array read-only, and record the content hash."""
        for _, p in self.named():
            p.requires_grad = False
            p.grad = None
            p.data.setflags(write=False)
        self._fingerprint = content_hash(self)
        return self._fingerprint

    @property
    def frozen_fingerprint(self) -> bytes:
        if self._fingerprint is None:
            raise FrozenWeightsError("weights are not frozen yet")
        return self._fingerprint

    def verify_frozen(self) -> None:
        if content_hash(self) != self.frozen_fingerprint:
            raise FrozenWeightsError("frozen weights were mutated")

    def copy(self) -> "ModelWeights":
        params = {k: Tensor(v.data.copy(), requires_grad=not self.frozen, name=k)
                  for k, v in self.params.items()}
        return ModelWeights(self.config, params)


# --------------------------------------------------------------------------
# checkpoint format
# --------------------------------------------------------------------------
#
#   magic "LCCM" | u16 version
#   | u32 vocab_size, d_model, n_layers, n_heads, head_dim, d_ff, max_position | f64 rope_base
#   | every tensor of _param_shapes() in order, f64 little-endian, row-major
#   | 32-byte SHA-256 of all preceding bytes (the frozen fingerprint)


def _body_bytes(weights: ModelWeights) -> bytes:
    c = weights.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(_CONFIG_STRUCT.pack(c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.head_dim,
                                  c.d_ff, c.max_position, c.rope_base))
    for _, p in weights.named():
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def content_hash(weights: ModelWeights) -> bytes:
    return hashlib.sha256(_body_bytes(weights)).digest()


def checkpoint_bytes(weights: ModelWeights) -> bytes:
    body = _body_bytes(weights)
    return body + hashlib.sha256(body).digest()


def checkpoint_from_bytes(buf: bytes) -> ModelWeights:
    head = 4 + 2 + _CONFIG_STRUCT.size
    if len(buf) < head + 32:
        raise CheckpointError("truncated checkpoint")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    vals = _CONFIG_STRUCT.unpack_from(buf, 6)
    cfg = ModelConfig(*vals)
    if hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
        raise CheckpointError("checkpoint hash mismatch")
    off = head
    params = {}
    for name, shape in _param_shapes(cfg):
        n = int(np.prod(shape))
        if off + 8 * n > len(buf) - 32:
            raise CheckpointError("truncated checkpoint")
        params[name] = Tensor(np.frombuffer(buf, "<f8", n, off).reshape(shape).astype(np.float64), name=name)
        off += 8 * n
    if off != len(buf) - 32:
        raise CheckpointError("trailing bytes in checkpoint")
    weights = ModelWeights(cfg, params)
    weights.freeze()
    return weights


def save_checkpoint(path, weights: ModelWeights) -> bytes:
    data = checkpoint_bytes(weights)
    with open(path, "wb") as fh:
        fh.write(data)
    return data[-32:]


def load_checkpoint(path) -> ModelWeights:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# --------------------------------------------------------------------------
# KV cache
# --------------------------------------------------------------------------


@dataclass
class KvCache:
    """Per-layer keys/values ``[n_heads, T, head_dim]`` (rotary already applied)."""

    keys: list[Tensor]
    values: list[Tensor]
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        lengths = {k.shape[-2] for k in self.keys} | {v.shape[-2] for v in self.values}
        if len(lengths) > 1 or (lengths and lengths.pop() != len(self.positions)):
            raise DimensionError("cache layers disagree on length")
        if len(self.positions) > 1 and np.any(np.diff(self.positions) <= 0):
            raise ValueError("cache positions must be strictly increasing")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def next_position(self) -> int:
        return int(self.positions[-1]) + 1 if len(self.positions) else 0

    def slice(self, sl: slice) -> "KvCache":
        return KvCache([T.take(k, sl, axis=-2) for k in self.keys],
                       [T.take(v, sl, axis=-2) for v in self.values],
                       self.positions[sl])

    def detached(self) -> "KvCache":
        return KvCache([Tensor(k.data.copy()) for k in self.keys],
                       [Tensor(v.data.copy()) for v in self.values],
                       self.positions.copy())


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def _project(x: Tensor, w: Tensor, slot, scaling: float, gate) -> Tensor:
    out = T.linear(x, w)
    if slot is None or gate is False:
        return out
    a, b = slot
    delta = T.scale(T.linear(T.linear(x, a), b), scaling)
    if gate is not True:
        delta = T.mul(delta, gate)
    return T.add(out, delta)


def forward(weights: ModelWeights, tokens, mask: np.ndarray, positions=None, adapter=None,
            cache_in: KvCache | None = None, segments=None, buffer: Tensor | None = None
            ) -> tuple[Tensor, KvCache]:
    """Run ``tokens`` through the stack on top of ``cache_in``.

    tokens: int ids ``[L]`` or ``[B, L]``; ids equal to ``BUFFER_SLOT`` take
    their input embedding from consecutive rows of ``buffer``.
    mask: boolean ``[L, C+L]`` (or the full ``[C+L, C+L]``) visibility matrix,
    where ``C`` is the cache length.
    positions: absolute position ids of the new tokens; defaults to
    continuing after the cache.
    segments: segment label per new token; required when an adapter is given.

    Returns logits ``[..., L, vocab]`` and the extended cache.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    batched = tokens.ndim == 2
    tok2 = tokens if batched else tokens[None, :]
    n_batch, n_new = tok2.shape
    n_cached = len(cache_in) if cache_in is not None else 0
    total = n_cached + n_new

    if positions is None:
        start = cache_in.next_position if cache_in is not None else 0
        positions = np.arange(start, start + n_new)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (n_new,):
        raise DimensionError(f"positions shape {positions.shape} != ({n_new},)")
    if n_new and (positions.max() >= cfg.max_position or positions.min() < 0):
        raise PositionOverflowError(f"position {positions.max()} outside [0, {cfg.max_position})")
    if np.any(tok2 >= cfg.vocab_size) or np.any((tok2 < 0) & (tok2 != BUFFER_SLOT)):
        raise ValueError("token id out of range")

    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != total:
        raise DimensionError(f"mask width {mask.shape[-1]} != cached+new length {total}")
    if mask.shape[-2] == total and n_cached:
        mask = mask[..., n_cached:, :]
    if mask.shape[-2] != n_new:
        raise DimensionError(f"mask rows {mask.shape[-2]} != new length {n_new}")

    gate = False
    if adapter is not None:
        if segments is None:
            raise ValueError("segments are required when an adapter is supplied")
        g = adapter.gate(segments)
        gate = True if g.all() else (False if not g.any() else g)

    slot_pos = np.nonzero(tok2[0] == BUFFER_SLOT)[0]
    x = T.embedding(weights["tok_emb"], np.where(tok2 == BUFFER_SLOT, 0, tok2))
    if len(slot_pos):
        if buffer is None or buffer.shape[0] != len(slot_pos):
            raise DimensionError("buffer embeddings do not match the number of buffer slots")
        if np.any((tok2 == BUFFER_SLOT) != (tok2[0] == BUFFER_SLOT)):
            raise ValueError("buffer slots must sit at the same positions in every batch row")
        x = T.place_rows(x, buffer, slot_pos)

    H, D = cfg.n_heads, cfg.head_dim
    cos, sin = T.rope_tables(positions, D, cfg.rope_base)
    inv_sqrt = 1.0 / np.sqrt(D)
    allow = mask[:, None] if mask.ndim == 3 else mask  # broadcast over heads
    keys_out, values_out = [], []
    for i in range(cfg.n_layers):
        slots = adapter.layers[i] if adapter is not None else {}
        scaling = adapter.scaling if adapter is not None else 1.0
        h = T.rms_norm(x, weights[f"l{i}.attn_norm"])

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (n_batch, n_new, H, D)), (0, 2, 1, 3))

        q = heads(_project(h, weights[f"l{i}.wq"], slots.get("q"), scaling, gate))
        k = heads(_project(h, weights[f"l{i}.wk"], slots.get("k"), scaling, gate))
        v = heads(_project(h, weights[f"l{i}.wv"], slots.get("v"), scaling, gate))
        q = T.rope(q, cos, sin)
        k = T.rope(k, cos, sin)
        if cache_in is not None and n_cached:
            ck, cv = cache_in.keys[i], cache_in.values[i]
            if ck.ndim == 3:
                ck = T.broadcast_to(T.reshape(ck, (1,) + ck.shape), (n_batch,) + ck.shape)
                cv = T.broadcast_to(T.reshape(cv, (1,) + cv.shape), (n_batch,) + cv.shape)
            k = T.concat([ck, k], axis=2)
            v = T.concat([cv, v], axis=2)
        keys_out.append(k)
        values_out.append(v)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        att = T.matmul(T.softmax(scores, allow), v)
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (n_batch, n_new, H * D))
        x = T.add(x, _project(att, weights[f"l{i}.wo"], slots.get("o"), scaling, gate))

        h = T.rms_norm(x, weights[f"l{i}.mlp_norm"])
        mlp = T.mul(T.silu(T.linear(h, weights[f"l{i}.w_gate"])), T.linear(h, weights[f"l{i}.w_up"]))
        x = T.add(x, T.linear(mlp, weights[f"l{i}.w_down"]))

    x = T.rms_norm(x, weights["final_norm"])
    logits = T.linear(x, weights["head"])

    cache_pos = positions if cache_in is None else np.concatenate([cache_in.positions, positions])
    if not batched:
        logits = T.reshape(logits, logits.shape[1:])
        keys_out = [T.reshape(k, k.shape[1:]) for k in keys_out]
        values_out = [T.reshape(v, v.shape[1:]) for v in values_out]
    return logits, KvCache(keys_out, values_out, cache_pos)


def decode_greedy(weights: ModelWeights, prompt_tokens, mask_builder: Callable[[int, int], np.ndarray] = append_mask,
                  cache_in: KvCache | None = None, max_new: int = 32, stop_token: int | None = None,
                  adapter=None, segment=Segment.QUERY) -> list[int]:
    """Greedy continuation of ``prompt_tokens`` (ties go to the lowest id).

    ``mask_builder(n_cached, n_new)`` returns the visibility block for
    ``n_new`` tokens appended after ``n_cached`` cached ones.  The returned
    list includes the stop token when one is produced.  ``adapter`` is only
    used by the coupled ablation, which needs it at query time.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    prompt = np.asarray(prompt_tokens, dtype=np.int64)
    n_cached = len(cache_in) if cache_in is not None else 0
    seg = np.full(len(prompt), int(segment)) if adapter is not None else None
    logits, cache = forward(weights, prompt, mask_builder(n_cached, len(prompt)), cache_in=cache_in,
                            adapter=adapter, segments=seg)
    out: list[int] = []
    nxt = int(np.argmax(logits.data[-1]))
    while True:
        out.append(nxt)
        if nxt == stop_token or len(out) >= max_new:
            return out
        seg = np.full(1, int(Segment.RESPONSE)) if adapter is not None else None
        logits, cache = forward(weights, [nxt], mask_builder(len(cache), 1), cache_in=cache,
                                adapter=adapter, segments=seg)
        nxt = int(np.argmax(logits.data[-1]))


def extract_buffer_cache(weights: ModelWeights, context_tokens, layout: SegmentLayout, adapter=None,
                         buffer: Tensor | None = None) -> KvCache:
    """Run [context][buffer] under the bottleneck mask and keep only the buffer's K/V.

    The result stays attached to the autodiff graph when ``buffer`` or the
    adapter carries gradients, so training can backpropagate through it.
    """
    if layout.n_query or layout.n_resp:
        raise ValueError("buffer extraction takes a context+buffer layout only")
    ctx = np.asarray(context_tokens, dtype=np.int64)
    if len(ctx) != layout.n_ctx:
        raise DimensionError(f"context length {len(ctx)} != layout n_ctx {layout.n_ctx}")
    tokens = np.concatenate([ctx, np.full(layout.k_buf, BUFFER_SLOT)])
    _, cache = forward(weights, tokens, build_segment_mask(layout), np.arange(layout.total),
                       adapter=adapter, segments=layout.segments(), buffer=buffer)
    return cache.slice(layout.buffer_slice)


def full_causal_logits(weights: ModelWeights, tokens: Sequence[int]) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    logits, _ = forward(weights, tokens, np.tri(len(tokens), dtype=bool))
    return logits.data
