import numpy as np
import pytest

from storerec import numeric as nm
from storerec.backbone import Backbone, BackboneConfig, FreezePolicy, causal_mask
from storerec.errors import ValidationError
from storerec.numeric import Tensor
from storerec.textcodec import BlockTag, SpecialKind, TokenSequence, placeholder_token


def naive_forward(model, ids):
    """Straight-line float64 re-implementation for a single sequence under a causal mask."""
    P = {n: p.data.astype(np.float64) for n, p in model.params.items()}
    c = model.config
    S = len(ids)
    x = P["tok_emb"][ids] + P["pos_emb"][np.arange(S)]

    def ln(h, g, b):
        mu = h.mean(-1, keepdims=True)
        var = ((h - mu) ** 2).mean(-1, keepdims=True)
        return (h - mu) / np.sqrt(var + 1e-5) * g + b

    def lin(h, base):
        y = h @ P[base + ".w"] + P[base + ".b"]
        if base + ".lora_down" in P:
            y = y + h @ P[base + ".lora_down"] @ P[base + ".lora_up"] / c.lora_rank
        return y

    dh = c.model_dim // c.heads
    for l in range(c.layers):
        h = ln(x, P[f"h{l}.ln1.g"], P[f"h{l}.ln1.b"])
        q, k, v = (lin(h, f"h{l}.attn.{t}") for t in "qkv")
        out = np.zeros_like(h)
        for head in range(c.heads):
            sl = slice(head * dh, (head + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            s = np.where(np.tril(np.ones((S, S), bool)), s, -np.inf)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            out[:, sl] = a @ v[:, sl]
        x = x + lin(out, f"h{l}.attn.o")
        h = ln(x, P[f"h{l}.ln2.g"], P[f"h{l}.ln2.b"])
        u = h @ P[f"h{l}.ffn.w1"] + P[f"h{l}.ffn.b1"]
        u = 0.5 * u * (1 + np.tanh(np.sqrt(2 / np.pi) * (u + 0.044715 * u ** 3)))
        x = x + u @ P[f"h{l}.ffn.w2"] + P[f"h{l}.ffn.b2"]
    hid = ln(x, P["ln_f.g"], P["ln_f.b"])
    return hid, hid @ P["tok_emb"].T


def small(vocab_size=30, **kw):
    return Backbone(BackboneConfig(vocab_size=vocab_size, layers=2, model_dim=16, heads=4, ffn_dim=32,
                                   max_seq_len=32, init_std=0.2, **kw), seed=3)


def test_config_validation():
    with pytest.raises(ValidationError):
        BackboneConfig(vocab_size=10, model_dim=10, heads=4)
    with pytest.raises(ValidationError):
        BackboneConfig(vocab_size=10, model_dim=16, heads=4, lora_rank=16)


def test_forward_matches_naive_oracle():
    m = small()
    m.attach_lora(4, seed=5)
    for n, p in m.params.items():
        if "lora_up" in n:
            p.data[:] = np.random.default_rng(1).normal(0, 0.1, p.shape)
    ids = [3, 7, 1, 9, 4, 4, 2]
    hid, logits = m.forward(m.embed_ids([ids])[0], causal_mask(len(ids)))
    h2, l2 = naive_forward(m, np.array(ids))
    np.testing.assert_allclose(hid.data, h2, atol=1e-5)
    np.testing.assert_allclose(logits.data, l2, atol=1e-5)


def test_zero_lora_is_exact_noop():
    m = small()
    ids = [[1, 2, 3, 4]]
    _, base = m.forward(m.embed_ids(ids), causal_mask(4))
    m.attach_lora(8, targets=("q", "k", "v", "o"), seed=1)
    _, adapted = m.forward(m.embed_ids(ids), causal_mask(4))
    assert np.array_equal(base.data, adapted.data)


def test_merge_lora_preserves_outputs():
    m = small()
    m.attach_lora(4, seed=1)
    for n, p in m.params.items():
        if "lora_up" in n:
            p.data[:] = 0.05
    ids = [[5, 6, 7]]
    _, before = m.forward(m.embed_ids(ids), causal_mask(3))
    m.merge_lora()
    assert not any("lora" in n for n in m.params)
    _, after = m.forward(m.embed_ids(ids), causal_mask(3))
    np.testing.assert_allclose(before.data, after.data, atol=1e-5)


def test_causality():
    m = small()
    a = m.forward(m.embed_ids([[1, 2, 3, 4, 5]]), causal_mask(5))[0].data
    b = m.forward(m.embed_ids([[1, 2, 3, 9, 9]]), causal_mask(5))[0].data
    assert np.array_equal(a[0, :3], b[0, :3])
    assert not np.array_equal(a[0, 3], b[0, 3])


def test_forward_is_pure():
    m = small()
    x = m.embed_ids([[1, 2, 3]])
    assert np.array_equal(m.forward(x, causal_mask(3))[1].data, m.forward(x, causal_mask(3))[1].data)


def test_degenerate_mask_row():
    m = small()
    mask = causal_mask(3)
    mask[1] = False
    with pytest.raises(nm.DegenerateRowError):
        m.forward(m.embed_ids([[1, 2, 3]]), mask)


def test_too_long():
    m = small()
    with pytest.raises(ValidationError):
        m.forward(m.embed_ids([[1] * 33]), causal_mask(33))


def test_embed_placeholder_fill(vocab, tiny_model):
    ph = [vocab.special_id(placeholder_token(i)) for i in (1, 2)]
    seq = TokenSequence([7, 8] + ph + [9], [BlockTag.CONTENT] * 2 + [BlockTag.PLACEHOLDER] * 2 + [BlockTag.TASK])
    table = tiny_model.params["tok_emb"].data
    same = tiny_model.embed(seq, table[ph])
    plain = tiny_model.embed_ids([seq.ids])[0]
    np.testing.assert_array_equal(same.data, plain.data)
    fill = np.random.default_rng(0).normal(size=(2, 16))
    out = tiny_model.embed(seq, fill).data - tiny_model.params["pos_emb"].data[:5]
    np.testing.assert_allclose(out[2:4], fill, atol=1e-6)
    with pytest.raises(ValidationError):
        tiny_model.embed(seq, fill[:1])
    with pytest.raises(ValidationError):
        tiny_model.embed(seq)
    no_ph = TokenSequence([7, 8])
    np.testing.assert_array_equal(tiny_model.embed(no_ph).data, tiny_model.embed_ids([[7, 8]])[0].data)


def _step(model, vocab, policy):
    part = model.partition_parameters(policy, vocab)
    nm.reset_tape()
    ids = [[1, 2] + vocab.ids_of_kind(SpecialKind.DENSE) + vocab.ids_of_kind(SpecialKind.CODE)[:2]]
    _, logits = model.forward(model.embed_ids(ids), causal_mask(len(ids[0])))
    loss = nm.cross_entropy(logits, np.ones((1, len(ids[0])), int), np.ones((1, len(ids[0])), bool))
    nm.backward(loss)
    params = part.trainable_params(model)
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    nm.adam_step(params, nm.AdamState(lr=0.01), part.masks)
    return part


def test_tokenizer_freeze_keeps_word_rows(vocab, tiny_model):
    tiny_model.attach_lora(4, seed=0)
    before = {n: p.data.copy() for n, p in tiny_model.params.items()}
    part = _step(tiny_model, vocab, FreezePolicy.TOKENIZER_FREEZE)
    emb = tiny_model.params["tok_emb"].data
    assert np.array_equal(emb[vocab.word_ids], before["tok_emb"][vocab.word_ids])
    assert np.array_equal(emb[vocab.ids_of_kind(SpecialKind.CODE)], before["tok_emb"][vocab.ids_of_kind(SpecialKind.CODE)])
    assert not np.array_equal(emb[vocab.ids_of_kind(SpecialKind.DENSE)], before["tok_emb"][vocab.ids_of_kind(SpecialKind.DENSE)])
    for n in part.frozen:
        assert np.array_equal(tiny_model.params[n].data, before[n])
    assert "h0.attn.q.w" in part.frozen and "h0.attn.q.lora_down" in part.trainable


def test_recommender_freeze_trains_code_rows(vocab, tiny_model):
    before = tiny_model.params["tok_emb"].data.copy()
    _step(tiny_model, vocab, FreezePolicy.RECOMMENDER_FREEZE)
    codes = vocab.ids_of_kind(SpecialKind.CODE)[:2]
    assert not np.array_equal(tiny_model.params["tok_emb"].data[codes], before[codes])
    assert np.array_equal(tiny_model.params["tok_emb"].data[vocab.word_ids], before[vocab.word_ids])


def test_none_policy_all_grads(vocab, tiny_model):
    part = tiny_model.partition_parameters(FreezePolicy.NONE, vocab)
    nm.reset_tape()
    _, logits = tiny_model.forward(tiny_model.embed_ids([[1, 2, 3]]), causal_mask(3))
    nm.backward(nm.cross_entropy(logits, [[2, 3, 4]], [[True] * 3]))
    assert all(tiny_model.params[n].grad is not None for n in part.trainable)
    nm.reset_tape()


def test_partition_counts(vocab, tiny_model):
    tiny_model.attach_lora(2)
    for policy in FreezePolicy:
        part = tiny_model.partition_parameters(policy, vocab)
        assert part.trainable.isdisjoint(part.frozen)
        assert part.trainable | part.frozen == set(tiny_model.params)
        trainable, frozen = part.counts(tiny_model)
        assert trainable + frozen == sum(p.size for p in tiny_model.params.values())
    with pytest.raises(ValidationError):
        tiny_model.partition_parameters("bogus", vocab)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    tiny_model.attach_lora(2, seed=4)
    tiny_model.save(tmp_path / "m", {"note": "x"})
    loaded, meta = Backbone.load(tmp_path / "m")
    assert meta["note"] == "x" and meta["version"] == 1
    for n, p in tiny_model.params.items():
        assert np.array_equal(p.data, loaded.params[n].data)
    ids = [[1, 2, 3]]
    a = tiny_model.forward(tiny_model.embed_ids(ids), causal_mask(3))[1].data
    b = loaded.forward(loaded.embed_ids(ids), causal_mask(3))[1].data
    assert np.array_equal(a, b)
