import numpy as np
import pytest

from conftest import TOY, toy_weights
from lcc.masks import SegmentLayout, append_mask, build_segment_mask, causal_mask
from lcc.model import (BUFFER_SLOT, CheckpointError, FrozenWeightsError, ModelConfig, PositionOverflowError,
                       checkpoint_bytes, checkpoint_from_bytes, decode_greedy, extract_buffer_cache, forward)
from lcc.tensor import DimensionError, Tensor


def unrolled_single_token(w, token, position):
    """Straight-line numpy pipeline for a length-1 sequence (attention over one slot is the identity on V)."""
    cfg = w.config
    p = {k: v.data for k, v in w.params.items()}

    def rms(x, g):
        return x / np.sqrt(np.mean(x * x) + 1e-6) * g

    x = p["tok_emb"][token].copy()
    for i in range(cfg.n_layers):
        h = rms(x, p[f"l{i}.attn_norm"])
        v = p[f"l{i}.wv"] @ h
        x = x + p[f"l{i}.wo"] @ v
        h = rms(x, p[f"l{i}.mlp_norm"])
        gate = p[f"l{i}.w_gate"] @ h
        x = x + p[f"l{i}.w_down"] @ (gate / (1 + np.exp(-gate)) * (p[f"l{i}.w_up"] @ h))
    return p["head"] @ rms(x, p["final_norm"])


def test_single_token_matches_unrolled_oracle(toy):
    for tok, pos in [(3, 0), (7, 11)]:
        logits, _ = forward(toy, [tok], causal_mask(1), [pos])
        np.testing.assert_allclose(logits.data[0], unrolled_single_token(toy, tok, pos), rtol=0, atol=1e-10)


def test_buffer_only_segment_mask_equals_causal(toy):
    tokens = np.array([1, 5, 9, 2, 4])
    a, _ = forward(toy, tokens, causal_mask(5))
    b, _ = forward(toy, tokens, build_segment_mask(SegmentLayout(0, 5)))
    assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("t", [1, 4, 9])
def test_incremental_matches_batch(toy, t):
    tokens = np.random.default_rng(t).integers(0, TOY.vocab_size, t + 1)
    full, _ = forward(toy, tokens, causal_mask(t + 1))
    _, cache = forward(toy, tokens[:t], causal_mask(t))
    step, cache2 = forward(toy, tokens[t:], append_mask(t, 1), cache_in=cache)
    np.testing.assert_allclose(step.data[0], full.data[-1], rtol=0, atol=1e-8)
    assert len(cache2) == t + 1 and cache2.positions.tolist() == list(range(t + 1))


def test_batched_forward_matches_rows(toy):
    tokens = np.random.default_rng(3).integers(0, TOY.vocab_size, (3, 6))
    batch, _ = forward(toy, tokens, causal_mask(6))
    for i in range(3):
        single, _ = forward(toy, tokens[i], causal_mask(6))
        np.testing.assert_allclose(batch.data[i], single.data, atol=1e-12)


def test_forward_errors(toy):
    with pytest.raises(PositionOverflowError):
        forward(toy, [1], causal_mask(1), [TOY.max_position])
    with pytest.raises(DimensionError):
        forward(toy, [1, 2], causal_mask(3))
    with pytest.raises(ValueError):
        forward(toy, [TOY.vocab_size], causal_mask(1))


def test_decode_stops_immediately_when_head_favors_stop():
    w = toy_weights(freeze=False)
    w["head"].data[:] = 0.0  # all logits tie; lowest id (0) wins
    w.freeze()
    assert decode_greedy(w, [3, 4], max_new=10, stop_token=0) == [0]


def test_decode_is_deterministic(toy):
    a = decode_greedy(toy, [1, 2, 3], max_new=12, stop_token=None)
    b = decode_greedy(toy_weights(), [1, 2, 3], max_new=12, stop_token=None)
    assert a == b and len(a) == 12


def test_greedy_equals_teacher_forced_argmax(toy):
    prompt = [5, 6, 7]
    out = decode_greedy(toy, prompt, max_new=8, stop_token=None)
    seq = np.array(prompt + out[:-1])
    logits, _ = forward(toy, seq, causal_mask(len(seq)))
    assert out == np.argmax(logits.data[len(prompt) - 1:], axis=-1).tolist()


def test_decode_rejects_zero_budget(toy):
    with pytest.raises(ValueError):
        decode_greedy(toy, [1], max_new=0)


def test_single_buffer_cache_is_projection_of_embedding(toy):
    emb = np.random.default_rng(5).normal(size=(1, TOY.d_model))
    cache = extract_buffer_cache(toy, [], SegmentLayout(0, 1), buffer=Tensor(emb))
    x = emb[0]
    h = x / np.sqrt(np.mean(x * x) + 1e-6) * toy["l0.attn_norm"].data
    k = (toy["l0.wk"].data @ h).reshape(TOY.n_heads, 1, TOY.head_dim)  # position 0: rotation is identity
    v = (toy["l0.wv"].data @ h).reshape(TOY.n_heads, 1, TOY.head_dim)
    np.testing.assert_allclose(cache.keys[0].data, k, atol=1e-12)
    np.testing.assert_allclose(cache.values[0].data, v, atol=1e-12)
    assert cache.positions.tolist() == [0]


def test_extracted_cache_generation_matches_combined_forward(toy):
    rng = np.random.default_rng(6)
    ctx, query, resp = rng.integers(0, 20, 7), rng.integers(0, 20, 2), rng.integers(0, 20, 3)
    buf = Tensor(rng.normal(size=(3, TOY.d_model)))
    layout = SegmentLayout(7, 3, 2, 3)
    seq = np.concatenate([ctx, [BUFFER_SLOT] * 3, query, resp])
    full, _ = forward(toy, seq, build_segment_mask(layout), buffer=buf)
    cache = extract_buffer_cache(toy, ctx, SegmentLayout(7, 3), buffer=buf)
    assert cache.positions.tolist() == [7, 8, 9]
    gen, _ = forward(toy, np.concatenate([query, resp]), append_mask(3, 5), cache_in=cache)
    np.testing.assert_allclose(gen.data, full.data[10:], rtol=0, atol=1e-8)


def test_extraction_is_bit_identical(toy):
    buf = Tensor(np.random.default_rng(7).normal(size=(2, TOY.d_model)))
    a = extract_buffer_cache(toy, [1, 2, 3, 4], SegmentLayout(4, 2), buffer=buf)
    b = extract_buffer_cache(toy, [1, 2, 3, 4], SegmentLayout(4, 2), buffer=buf)
    for x, y in zip(a.keys + a.values, b.keys + b.values):
        assert x.data.tobytes() == y.data.tobytes()


def test_generation_path_never_reads_context(toy):
    """Combined masked forward: query logits move with the context only via the buffer."""
    rng = np.random.default_rng(8)
    buf = Tensor(rng.normal(size=(2, TOY.d_model)))
    layout = SegmentLayout(5, 2, 2, 1)
    tail = [3, 4, 5]

    def query_logits(ctx, mask):
        seq = np.concatenate([ctx, [BUFFER_SLOT] * 2, tail])
        out, _ = forward(toy, seq, mask, buffer=buf)
        return out.data[7:]

    ctx_a, ctx_b = rng.integers(0, 20, 5), rng.integers(0, 20, 5)
    mask = build_segment_mask(layout)
    assert not np.allclose(query_logits(ctx_a, mask), query_logits(ctx_b, mask))
    cut = mask.copy()
    cut[7:, 5:7] = False  # query/response may no longer attend to the buffer
    assert np.array_equal(query_logits(ctx_a, cut), query_logits(ctx_b, cut))


def test_checkpoint_roundtrip_and_fingerprint(toy):
    blob = checkpoint_bytes(toy)
    assert blob[:4] == b"LCCM" and blob[-32:] == toy.frozen_fingerprint
    back = checkpoint_from_bytes(blob)
    assert back.frozen_fingerprint == toy.frozen_fingerprint
    assert back.config == toy.config
    for name, p in toy.named():
        assert np.array_equal(back[name].data, p.data)


def test_checkpoint_rejects_corruption(toy):
    blob = bytearray(checkpoint_bytes(toy))
    blob[100] ^= 0x01
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(b"XXXX" + bytes(blob[4:]))


def test_perturbed_weight_changes_fingerprint():
    a = toy_weights()
    b = toy_weights(freeze=False)
    b["l1.wv"].data[0, 0] += 1e-9
    b.freeze()
    assert a.frozen_fingerprint != b.frozen_fingerprint


def test_frozen_weights_are_read_only(toy):
    with pytest.raises(ValueError):
        toy["head"].data[0, 0] = 1.0
    toy.verify_frozen()
    with pytest.raises(FrozenWeightsError):
        toy_weights(freeze=False).frozen_fingerprint


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3, head_dim=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0)
