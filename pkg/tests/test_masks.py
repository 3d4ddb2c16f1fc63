import itertools

import numpy as np
import pytest

from lcc.masks import LayoutError, Segment, SegmentLayout, build_segment_mask


def rule_oracle(layout: SegmentLayout) -> np.ndarray:
    """Evaluate the three visibility rules pair by pair."""
    seg = []
    for label, n in ((Segment.CONTEXT, layout.n_ctx), (Segment.BUFFER, layout.k_buf),
                     (Segment.QUERY, layout.n_query), (Segment.RESPONSE, layout.n_resp)):
        seg += [label] * n
    n = len(seg)
    out = np.zeros((n, n), dtype=bool)
    gen = (Segment.QUERY, Segment.RESPONSE)
    for i in range(n):
        for j in range(n):
            if seg[i] == Segment.CONTEXT:
                ok = seg[j] == Segment.CONTEXT and j <= i
            elif seg[i] == Segment.BUFFER:
                ok = seg[j] == Segment.CONTEXT or (seg[j] == Segment.BUFFER and j <= i)
            else:
                ok = seg[j] == Segment.BUFFER or (seg[j] in gen and j <= i)
            out[i, j] = ok
    return out


def rows(mask):
    return ["".join("1" if v else "0" for v in r) for r in mask]


def test_small_layout_rows():
    assert rows(build_segment_mask(SegmentLayout(2, 1, 1, 1))) == ["10000", "11000", "11100", "00110", "00111"]


def test_empty_context_layout():
    assert rows(build_segment_mask(SegmentLayout(0, 1, 1, 0))) == ["10", "11"]


def test_3_2_2_2_matches_oracle_on_all_cells():
    layout = SegmentLayout(3, 2, 2, 2)
    m = build_segment_mask(layout)
    assert m.shape == (9, 9)
    assert np.array_equal(m, rule_oracle(layout))


@pytest.mark.parametrize("n_ctx,k_buf,n_query,n_resp",
                         list(itertools.product(range(4), range(1, 4), range(3), range(3))))
def test_grid_matches_oracle(n_ctx, k_buf, n_query, n_resp):
    layout = SegmentLayout(n_ctx, k_buf, n_query, n_resp)
    m = build_segment_mask(layout)
    assert np.array_equal(m, rule_oracle(layout))
    assert not np.any(np.triu(m, 1))
    gen_rows = slice(n_ctx + k_buf, layout.total)
    assert not m[gen_rows, :n_ctx].any()


def test_buffer_only_layout_is_causal():
    assert np.array_equal(build_segment_mask(SegmentLayout(0, 4)), np.tri(4, dtype=bool))


def test_layout_validation():
    with pytest.raises(LayoutError):
        SegmentLayout(2, 0)
    with pytest.raises(LayoutError):
        SegmentLayout(-1, 1)
    assert SegmentLayout(2, 3, 1, 4).total == 10
    assert SegmentLayout(2, 1, 1, 1).segments().tolist() == [0, 0, 1, 2, 3]
