import numpy as np
import pytest

from conftest import TOY, toy_weights
from lcc import tensor as T
from lcc.lora import (AdapterError, SidecarError, apply_projection, discard, init_adapter, read_sidecar,
                      sidecar_bytes, sidecar_from_bytes, write_sidecar)
from lcc.masks import ALL_SEGMENTS, COMPRESSION_STAGE, Segment, SegmentLayout, build_segment_mask
from lcc.model import BUFFER_SLOT, forward
from lcc.tensor import RngState, Tensor


def _slot(rng, d_out=5, d_in=4, r=2, zero_b=False):
    a = Tensor(rng.normal(size=(r, d_in)))
    b = Tensor(np.zeros((d_out, r)) if zero_b else rng.normal(size=(d_out, r)))
    return a, b, r, 16.0


def test_zero_b_is_identity_for_every_segment(rng):
    w, x = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=4))
    slot = _slot(rng, zero_b=True)
    for seg in Segment:
        assert np.array_equal(apply_projection(w, slot, x, seg, ALL_SEGMENTS).data, w.data @ x.data)


def test_inactive_segment_ignores_adapter(rng):
    w, x = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=4))
    out = apply_projection(w, _slot(rng), x, Segment.QUERY, COMPRESSION_STAGE)
    assert np.array_equal(out.data, w.data @ x.data)


def test_active_segment_matches_dense_merge(rng):
    w, x = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=4))
    a, b, r, alpha = _slot(rng)
    merged = w.data + (alpha / r) * b.data @ a.data
    out = apply_projection(w, (a, b, r, alpha), x, "buffer", COMPRESSION_STAGE)
    np.testing.assert_allclose(out.data, merged @ x.data, rtol=0, atol=1e-10)


def test_rows_are_gated_per_token(rng):
    w, x = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(3, 4)))
    a, b, r, alpha = _slot(rng)
    out = apply_projection(w, (a, b, r, alpha), x, [Segment.CONTEXT, Segment.QUERY, Segment.BUFFER],
                           COMPRESSION_STAGE).data
    merged = w.data + (alpha / r) * b.data @ a.data
    np.testing.assert_allclose(out[[0, 2]], x.data[[0, 2]] @ merged.T, atol=1e-12)
    assert np.array_equal(out[1], (x.data @ w.data.T)[1])


def test_gradient_reaches_a_and_b_only(rng):
    w, x = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(2, 4)))
    a, b, r, alpha = _slot(rng)
    a.requires_grad = b.requires_grad = True
    T.sum_all(apply_projection(w, (a, b, r, alpha), x, [0, 1], COMPRESSION_STAGE)).backward()
    assert a.grad is not None and b.grad is not None and w.grad is None
    wt = rng.normal(size=(2, 5))
    assert T.grad_check(lambda t: T.sum_all(T.mul(apply_projection(w, (a, t, r, alpha), x, [0, 1],
                                                                   COMPRESSION_STAGE), wt)), b) <= 1e-4


def test_projection_shape_error(rng):
    with pytest.raises(T.DimensionError):
        apply_projection(Tensor(np.ones((5, 4))), None, Tensor(np.ones(3)), 0, COMPRESSION_STAGE)


def test_init_adapter_defaults_and_determinism():
    ad = init_adapter(TOY, rng=RngState(9))
    assert ad.rank == 8 and ad.alpha == 16.0 and ad.scaling == 2.0
    assert ad.active_segments == COMPRESSION_STAGE and not ad.coupled
    again = init_adapter(TOY, rng=RngState(9))
    for (_, p), (_, q) in zip(ad.parameters(), again.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    for name, p in ad.parameters():
        if name.endswith(".B"):
            assert not p.data.any()
    a0 = ad.layers[0]["q"][0].data
    assert a0.shape == (8, TOY.d_model)
    assert 0.2 < a0.std() < 0.5  # drawn with std 1/sqrt(8)


def test_init_adapter_rank_check():
    with pytest.raises(AdapterError):
        init_adapter(TOY, r=TOY.d_model + 1)


def test_fresh_adapter_changes_no_logit(toy):
    ad = init_adapter(TOY, rng=RngState(1), active_segments=ALL_SEGMENTS)
    layout = SegmentLayout(4, 2, 2, 2)
    seq = np.array([1, 2, 3, 4, BUFFER_SLOT, BUFFER_SLOT, 5, 6, 7, 8])
    buf = Tensor(np.random.default_rng(2).normal(size=(2, TOY.d_model)))
    plain, _ = forward(toy, seq, build_segment_mask(layout), buffer=buf)
    adapted, _ = forward(toy, seq, build_segment_mask(layout), adapter=ad, segments=layout.segments(), buffer=buf)
    assert np.array_equal(plain.data, adapted.data)


def test_gate_soundness_with_buffer_attention_cut(toy):
    """Standard gating: cut query->buffer attention and the adapter has no effect on query rows."""
    ad = init_adapter(TOY, rng=RngState(3))
    for _, p in ad.parameters():
        p.data[:] = np.random.default_rng(4).normal(size=p.shape)
    layout = SegmentLayout(4, 2, 2, 2)
    seq = np.array([1, 2, 3, 4, BUFFER_SLOT, BUFFER_SLOT, 5, 6, 7, 8])
    buf = Tensor(np.random.default_rng(5).normal(size=(2, TOY.d_model)))
    mask = build_segment_mask(layout)
    with_ad, _ = forward(toy, seq, mask, adapter=ad, segments=layout.segments(), buffer=buf)
    without, _ = forward(toy, seq, mask, buffer=buf)
    assert not np.allclose(with_ad.data[6:], without.data[6:])  # flows in through the buffer K/V
    mask[6:, 4:6] = False
    with_ad, _ = forward(toy, seq, mask, adapter=ad, segments=layout.segments(), buffer=buf)
    without, _ = forward(toy, seq, mask, buffer=buf)
    assert np.array_equal(with_ad.data[6:], without.data[6:])


def test_discard_and_coupled_refusal(tmp_path):
    ad = init_adapter(TOY, rng=RngState(1))
    discard(ad)
    assert ad.discarded and ad.layers == []
    with pytest.raises(AdapterError):
        ad.slot(0, "q")
    coupled = init_adapter(TOY, rng=RngState(1), active_segments=ALL_SEGMENTS)
    with pytest.raises(AdapterError):
        discard(coupled)
    path = tmp_path / "side.lcca"
    write_sidecar(path, coupled)
    assert path.read_bytes()[:4] == b"LCCA"
    back = read_sidecar(path)
    assert back.rank == coupled.rank and back.alpha == coupled.alpha and back.active_segments == ALL_SEGMENTS
    for (_, p), (_, q) in zip(coupled.parameters(), back.parameters()):
        assert np.array_equal(p.data, q.data)


def test_sidecar_integrity():
    blob = bytearray(sidecar_bytes(init_adapter(TOY, rng=RngState(2), projections=("q", "v"))))
    assert sidecar_from_bytes(bytes(blob)).layers[0].keys() == {"q", "v"}
    blob[40] ^= 0xFF
    with pytest.raises(SidecarError):
        sidecar_from_bytes(bytes(blob))
    with pytest.raises(SidecarError):
        sidecar_from_bytes(b"LCCA")
