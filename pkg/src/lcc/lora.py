"""Stage-gated low-rank adapters on the attention projections.

The adapter is the disposable part of a compile run: it only touches tokens
whose segment is in ``active_segments`` (context and buffer by default), so
query and response positions always run through the frozen base weights.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .masks import ALL_SEGMENTS, COMPRESSION_STAGE, Segment
from .tensor import DimensionError, RngState, Tensor, add, linear, mul, scale

PROJECTIONS = ("q", "k", "v", "o")

SIDECAR_MAGIC = b"LCCA"
SIDECAR_VERSION = 1


class AdapterError(RuntimeError):
    pass


class SidecarError(ValueError):
    pass


@dataclass
class LoraAdapter:
    rank: int
    alpha: float
    layers: list[dict[str, tuple[Tensor, Tensor]]]
    active_segments: frozenset = COMPRESSION_STAGE
    discarded: bool = field(default=False, compare=False)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def coupled(self) -> bool:
        return bool(self.active_segments & {Segment.QUERY, Segment.RESPONSE})

    def slot(self, layer: int, proj: str):
        if self.discarded:
            raise AdapterError("adapter has been discarded")
        return self.layers[layer].get(proj)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for proj in PROJECTIONS:
                if proj in layer:
                    a, b = layer[proj]
                    out.append((f"lora.{i}.{proj}.A", a))
                    out.append((f"lora.{i}.{proj}.B", b))
        return out

    def gate(self, segments) -> np.ndarray:
        """0/1 column [L, 1] selecting the token rows that see the adapter."""
        seg = np.asarray(segments)
        active = np.array(sorted(int(s) for s in self.active_segments), dtype=np.int64)
        return np.isin(seg, active).astype(np.float64)[:, None]

    def detached(self) -> "LoraAdapter":
        layers = [{p: (Tensor(a.data.copy()), Tensor(b.data.copy())) for p, (a, b) in layer.items()}
                  for layer in self.layers]
        return LoraAdapter(self.rank, self.alpha, layers, self.active_segments)


def apply_projection(base_w: Tensor, adapter_slot, x: Tensor, token_segment, active_segments,
                     scaling: float | None = None) -> Tensor:
    """``base_w @ x`` plus the low-rank delta on rows whose segment is active.

    ``x`` is ``[..., L, d_in]`` (or a single ``[d_in]`` vector) and
    ``token_segment`` is one label or an array of ``L`` labels.  ``adapter_slot``
    is ``(A, B, rank, alpha)`` or ``None``.
    """
    if x.shape[-1] != base_w.shape[1]:
        raise DimensionError(f"projection shape mismatch: W {base_w.shape} vs x {x.shape}")
    out = linear(x, base_w)
    if adapter_slot is None:
        return out
    a, b, *rest = adapter_slot
    if scaling is None:
        rank, alpha = rest
        scaling = alpha / rank
    if a.shape[1] != base_w.shape[1] or b.shape[0] != base_w.shape[0] or a.shape[0] != b.shape[1]:
        raise DimensionError(f"adapter shapes A {a.shape}, B {b.shape} do not fit W {base_w.shape}")
    active = np.array(sorted(int(Segment.parse(s)) for s in active_segments), dtype=np.int64)
    seg = np.atleast_1d(np.asarray([int(Segment.parse(s)) for s in np.atleast_1d(token_segment)]))
    on = np.isin(seg, active)
    if not on.any():
        return out
    delta = scale(linear(linear(x, a), b), scaling)
    if x.ndim == 1:
        return add(out, delta)
    if not on.all():
        delta = mul(delta, on.astype(np.float64)[:, None])
    return add(out, delta)


def init_adapter(config, r: int = 8, alpha: float = 16.0, rng: RngState | None = None,
                 active_segments=COMPRESSION_STAGE, projections=PROJECTIONS) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, 1/sqrt(r)), B = 0, so the delta starts at exactly zero."""
    d = config.d_model
    if r < 1 or r > d:
        raise AdapterError(f"rank {r} exceeds projection dimension {d}")
    rng = rng if rng is not None else RngState(0)
    layers = []
    for _ in range(config.n_layers):
        slots = {}
        for proj in PROJECTIONS:
            if proj not in projections:
                continue
            a = Tensor(rng.normal((r, d), std=1.0 / np.sqrt(r)), requires_grad=True)
            b = Tensor(np.zeros((d, r)), requires_grad=True)
            slots[proj] = (a, b)
        layers.append(slots)
    active = frozenset(Segment.parse(s) for s in active_segments)
    return LoraAdapter(r, float(alpha), layers, active)


def discard(adapter: LoraAdapter) -> None:
    """Release the adapter after the buffer cache has been extracted.

    A coupled adapter is part of the artifact it produced, so it cannot be
    thrown away; ship it with :func:`write_sidecar` instead.
    """
    if adapter.coupled:
        raise AdapterError("coupled adapter is needed at query time; persist it as a sidecar")
    adapter.layers = []
    adapter.discarded = True


# --------------------------------------------------------------------------
# LCCA sidecar (coupled ablation only)
# --------------------------------------------------------------------------
#
#   magic "LCCA" | u16 version | u32 rank | f64 alpha | u32 n_layers
#   | u32 d_model | u8 projection bitmask (q,k,v,o) | u8 active-segment bitmask
#   | per layer, per present projection in q,k,v,o order: A [r x d] f64, B [d x r] f64
#   | u32 CRC-32 of everything before it
#
_SIDECAR_HEADER = struct.Struct("<4sHIdIIBB")


def sidecar_bytes(adapter: LoraAdapter) -> bytes:
    if adapter.discarded:
        raise AdapterError("adapter has been discarded")
    d = adapter.layers[0][next(iter(adapter.layers[0]))][0].shape[1]
    proj_bits = sum(1 << i for i, p in enumerate(PROJECTIONS) if p in adapter.layers[0])
    seg_bits = sum(1 << int(s) for s in adapter.active_segments)
    parts = [_SIDECAR_HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, adapter.rank, adapter.alpha,
                                  len(adapter.layers), d, proj_bits, seg_bits)]
    for layer in adapter.layers:
        for proj in PROJECTIONS:
            if proj in layer:
                a, b = layer[proj]
                parts.append(np.ascontiguousarray(a.data, dtype="<f8").tobytes())
                parts.append(np.ascontiguousarray(b.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def sidecar_from_bytes(buf: bytes) -> LoraAdapter:
    if len(buf) < _SIDECAR_HEADER.size + 4:
        raise SidecarError("truncated sidecar")
    magic, version, rank, alpha, n_layers, d, proj_bits, seg_bits = _SIDECAR_HEADER.unpack_from(buf)
    if magic != SIDECAR_MAGIC:
        raise SidecarError(f"bad sidecar magic {magic!r}")
    if version != SIDECAR_VERSION:
        raise SidecarError(f"unsupported sidecar version {version}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise SidecarError("sidecar CRC mismatch")
    projs = [p for i, p in enumerate(PROJECTIONS) if proj_bits & (1 << i)]
    n = rank * d
    expected = _SIDECAR_HEADER.size + n_layers * len(projs) * 2 * n * 8 + 4
    if len(buf) != expected:
        raise SidecarError(f"sidecar length {len(buf)} != expected {expected}")
    off = _SIDECAR_HEADER.size
    layers = []
    for _ in range(n_layers):
        slots = {}
        for proj in projs:
            a = np.frombuffer(buf, "<f8", n, off).reshape(rank, d).astype(np.float64)
            off += n * 8
            b = np.frombuffer(buf, "<f8", n, off).reshape(d, rank).astype(np.float64)
            off += n * 8
            slots[proj] = (Tensor(a), Tensor(b))
        layers.append(slots)
    active = frozenset(s for s in Segment if seg_bits & (1 << int(s)))
    return LoraAdapter(rank, alpha, layers, active)


def write_sidecar(path, adapter: LoraAdapter) -> None:
    with open(path, "wb") as fh:
        fh.write(sidecar_bytes(adapter))


def read_sidecar(path) -> LoraAdapter:
    with open(path, "rb") as fh:
        return sidecar_from_bytes(fh.read())


__all__ = [
    "ALL_SEGMENTS", "COMPRESSION_STAGE", "LoraAdapter", "AdapterError", "SidecarError",
    "apply_projection", "init_adapter", "discard", "sidecar_bytes", "sidecar_from_bytes",
    "write_sidecar", "read_sidecar",
]
