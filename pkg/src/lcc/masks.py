"""Segment layout of a compile sequence and the attention-visibility matrix.

A sequence is laid out as ``[context][buffer][query][response]``.  The
bottleneck mask lets the buffer read the context, while query and response
positions can only see the buffer and earlier query/response tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class Segment(IntEnum):
    CONTEXT = 0
    BUFFER = 1
    QUERY = 2
    RESPONSE = 3

    @classmethod
    def parse(cls, value) -> "Segment":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(value)


COMPRESSION_STAGE = frozenset({Segment.CONTEXT, Segment.BUFFER})
ALL_SEGMENTS = frozenset(Segment)


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentLayout:
    n_ctx: int
    k_buf: int
    n_query: int = 0
    n_resp: int = 0

    def __post_init__(self):
        if min(self.n_ctx, self.n_query, self.n_resp) < 0:
            raise LayoutError(f"segment lengths must be non-negative: {self}")
        if self.k_buf < 1:
            raise LayoutError("a layout needs at least one buffer token")

    @property
    def total(self) -> int:
        return self.n_ctx + self.k_buf + self.n_query + self.n_resp

    @property
    def buffer_slice(self) -> slice:
        return slice(self.n_ctx, self.n_ctx + self.k_buf)

    def segments(self) -> np.ndarray:
        """Segment label of every position, as an int array of length ``total``."""
        return np.repeat(
            np.array([Segment.CONTEXT, Segment.BUFFER, Segment.QUERY, Segment.RESPONSE], dtype=np.int64),
            [self.n_ctx, self.k_buf, self.n_query, self.n_resp],
        )


def build_segment_mask(layout: SegmentLayout) -> np.ndarray:
    """Boolean [L, L] matrix; ``allow[i, j]`` means position i may attend to j."""
    seg = layout.segments()
    n = layout.total
    causal = np.tri(n, dtype=bool)
    row, col = seg[:, None], seg[None, :]
    ctx_rows = (row == Segment.CONTEXT) & (col == Segment.CONTEXT) & causal
    buf_rows = (row == Segment.BUFFER) & ((col == Segment.CONTEXT) | ((col == Segment.BUFFER) & causal))
    gen_row = row >= Segment.QUERY
    gen_rows = gen_row & ((col == Segment.BUFFER) | ((col >= Segment.QUERY) & causal))
    return ctx_rows | buf_rows | gen_rows


def causal_mask(n: int) -> np.ndarray:
    return np.tri(n, dtype=bool)


def append_mask(n_cached: int, n_new: int) -> np.ndarray:
    """[n_new, n_cached + n_new] block: every cached slot visible, causal among new tokens."""
    return np.concatenate([np.ones((n_new, n_cached), dtype=bool), np.tri(n_new, dtype=bool)], axis=1)
