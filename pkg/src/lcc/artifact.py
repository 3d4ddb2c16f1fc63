"""The ``.lcc`` buffer artifact: compiled buffer K/V plus model identity.

Layout (little-endian)::

    offset  size  field
    0       4     magic "LCC1"
    4       2     u16 format version (1)
    6       32    SHA-256 fingerprint of the producing model
    38      4     u32 n_layers
    42      4     u32 n_heads
    46      4     u32 head_dim
    50      4     u32 k_tokens
    54      4     u32 first_free_position
    58      1     u8 dtype tag (0 = f32, 1 = f64)
    59      4     u32 context_length
    63      4     u32 ratio
    67      32    SHA-256 of the compile config
    99      ...   K tensors, layer 0..n_layers-1, each [n_heads, k_tokens, head_dim] row-major
            ...   V tensors, same order and shape
    end-4   4     u32 CRC-32 of every preceding byte

No raw context and no adapter weights are stored.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import KvCache, ModelWeights
from .tensor import Tensor

MAGIC = b"LCC1"
VERSION = 1
HEADER = struct.Struct("<4sH32s5IB2I32s")
HEADER_SIZE = HEADER.size
CRC_SIZE = 4
DTYPES = {"f32": (0, "<f4", 4), "f64": (1, "<f8", 8)}
DTYPE_TAGS = {0: "f32", 1: "f64"}


class ArtifactError(ValueError):
    pass


class BadMagicError(ArtifactError):
    pass


class UnsupportedVersionError(ArtifactError):
    def __init__(self, version: int):
        super().__init__(f"unsupported artifact format version {version}")
        self.version = version


class ChecksumError(ArtifactError):
    pass


class TruncatedArtifactError(ChecksumError):
    """Stream shorter than its header claims.  A short stream also fails the CRC, hence the base class."""


class IncompatibleModelError(ArtifactError):
    pass


@dataclass
class BufferArtifact:
    model_fingerprint: bytes
    n_layers: int
    n_heads: int
    head_dim: int
    k_tokens: int
    first_free_position: int
    dtype: str
    keys: list[np.ndarray]
    values: list[np.ndarray]
    context_length: int = 0
    ratio: int = 0
    config_hash: bytes = field(default=b"\x00" * 32)

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ArtifactError(f"dtype must be f32 or f64, got {self.dtype!r}")
        np_dtype = np.float32 if self.dtype == "f32" else np.float64
        shape = (self.n_heads, self.k_tokens, self.head_dim)
        self.keys = [np.asarray(k, dtype=np_dtype) for k in self.keys]
        self.values = [np.asarray(v, dtype=np_dtype) for v in self.values]
        if len(self.keys) != self.n_layers or len(self.values) != self.n_layers:
            raise ArtifactError("one K and one V tensor per layer required")
        if any(t.shape != shape for t in self.keys + self.values):
            raise ArtifactError(f"every K/V tensor must have shape {shape}")
        if len(self.model_fingerprint) != 32 or len(self.config_hash) != 32:
            raise ArtifactError("fingerprint and config hash are 32 bytes")
        if self.first_free_position < self.k_tokens:
            raise ArtifactError("first_free_position must leave room for the buffer positions")

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.first_free_position - self.k_tokens, self.first_free_position)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BufferArtifact):
            return NotImplemented
        scalars = ("model_fingerprint", "n_layers", "n_heads", "head_dim", "k_tokens",
                   "first_free_position", "dtype", "context_length", "ratio", "config_hash")
        return (all(getattr(self, s) == getattr(other, s) for s in scalars)
                and all(np.array_equal(a, b) for a, b in zip(self.keys + self.values, other.keys + other.values)))


def expected_size(n_layers: int, n_heads: int, k_tokens: int, head_dim: int, dtype: str = "f32") -> int:
    return HEADER_SIZE + DTYPES[dtype][2] * 2 * n_layers * n_heads * k_tokens * head_dim + CRC_SIZE


def serialize(artifact: BufferArtifact) -> bytes:
    tag, le, _ = DTYPES[artifact.dtype]
    header = HEADER.pack(MAGIC, VERSION, artifact.model_fingerprint, artifact.n_layers, artifact.n_heads,
                         artifact.head_dim, artifact.k_tokens, artifact.first_free_position, tag,
                         artifact.context_length, artifact.ratio, artifact.config_hash)
    payload = b"".join(np.ascontiguousarray(t, dtype=le).tobytes() for t in artifact.keys + artifact.values)
    body = header + payload
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(buf: bytes) -> BufferArtifact:
    buf = bytes(buf)
    if len(buf) < HEADER_SIZE + CRC_SIZE:
        raise TruncatedArtifactError(f"stream of {len(buf)} bytes is shorter than the {HEADER_SIZE + CRC_SIZE}-byte minimum")
    # integrity first: any damaged byte, header included, is a CRC failure; magic and version
    # errors are reserved for well-formed streams (another format, a future version)
    (crc,) = struct.unpack_from("<I", buf, len(buf) - CRC_SIZE)
    if zlib.crc32(buf[:-CRC_SIZE]) != crc:
        if buf[:4] != MAGIC:
            raise ChecksumError(f"CRC-32 mismatch and magic {buf[:4]!r} is not {MAGIC!r}; not an intact artifact")
        # a short stream also fails here; tell the two apart by the header's own size claim
        _, _, _, n_layers, n_heads, head_dim, k, _, tag, _, _, _ = HEADER.unpack_from(buf)
        if tag in DTYPE_TAGS and len(buf) < expected_size(n_layers, n_heads, k, head_dim, DTYPE_TAGS[tag]):
            raise TruncatedArtifactError("stream ends before the payload declared by its header")
        raise ChecksumError("CRC-32 mismatch; artifact is corrupted")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(version)
    (_, _, fingerprint, n_layers, n_heads, head_dim, k, first_free, tag, ctx_len, ratio,
     config_hash) = HEADER.unpack_from(buf)
    if tag not in DTYPE_TAGS:
        raise ArtifactError(f"unknown dtype tag {tag}")
    dtype = DTYPE_TAGS[tag]
    want = expected_size(n_layers, n_heads, k, head_dim, dtype)
    if len(buf) < want:
        raise TruncatedArtifactError(f"stream has {len(buf)} bytes, header declares {want}")
    if len(buf) > want:
        raise ArtifactError(f"stream has {len(buf) - want} trailing bytes")
    _, le, width = DTYPES[dtype]
    n = n_heads * k * head_dim
    tensors = []
    off = HEADER_SIZE
    for _ in range(2 * n_layers):
        tensors.append(np.frombuffer(buf, le, n, off).reshape(n_heads, k, head_dim).copy())
        off += n * width
    return BufferArtifact(fingerprint, n_layers, n_heads, head_dim, k, first_free, dtype,
                          tensors[:n_layers], tensors[n_layers:], ctx_len, ratio, config_hash)


def save(path, artifact: BufferArtifact) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(artifact))


def load(path) -> BufferArtifact:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def artifact_from_cache(cache: KvCache, weights: ModelWeights, context_length: int = 0, ratio: int = 0,
                        config_hash: bytes = b"\x00" * 32, dtype: str = "f32") -> BufferArtifact:
    cfg = weights.config
    k = len(cache)
    return BufferArtifact(weights.frozen_fingerprint, cfg.n_layers, cfg.n_heads, cfg.head_dim, k,
                          int(cache.positions[-1]) + 1, dtype,
                          [t.data for t in cache.keys], [t.data for t in cache.values],
                          context_length, ratio, config_hash)


def attach(weights: ModelWeights, artifact: BufferArtifact) -> KvCache:
    """Fresh float64 KvCache for ``weights`` built from the artifact (the artifact is not shared)."""
    if artifact.model_fingerprint != weights.frozen_fingerprint:
        raise IncompatibleModelError("artifact was compiled for a different model (fingerprint mismatch)")
    cfg = weights.config
    if (artifact.n_layers, artifact.n_heads, artifact.head_dim) != (cfg.n_layers, cfg.n_heads, cfg.head_dim):
        raise IncompatibleModelError("artifact geometry does not match the model")
    return KvCache([Tensor(np.array(k, dtype=np.float64)) for k in artifact.keys],
                   [Tensor(np.array(v, dtype=np.float64)) for v in artifact.values],
                   artifact.positions)
