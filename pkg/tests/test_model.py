import numpy as np
import pytest

from countlab import checkpoint
from countlab.model import (OverrideSet, build_sequence, collate, forward, head_slice, iter_batches, unembed)
from countlab.vocab import (IMAGE, LAST_PROMPT, QARecord, count_record, verify_record)

from conftest import random_params


def test_sequence_layout(micro_items, micro_cfg, vocab):
    scene, rec = micro_items[0]
    seq = build_sequence(rec, scene, micro_cfg, vocab)
    assert seq.tags[:2] == ("SystemPrompt", "SystemPrompt")
    assert list(seq.image_positions) == list(range(2, 2 + micro_cfg.n_image_tokens))
    assert seq.tags[seq.answer_position] == LAST_PROMPT == seq.tags[-1]
    full = build_sequence(rec, scene, micro_cfg, vocab, with_answer=True)
    assert full.tags[-1] == "GeneratedToken" and len(full.ids) == len(seq.ids) + 1


def test_mixed_layouts_are_not_collated(micro_items, micro_cfg, vocab):
    s, _ = micro_items[0]
    a = build_sequence(count_record(s, "a"), s, micro_cfg, vocab)
    b = build_sequence(verify_record(s, "b", 2), s, micro_cfg, vocab)
    with pytest.raises(ValueError):
        collate([a, b])
    assert sum(len(i) for i, _ in iter_batches([a, b, a])) == 3


def test_record_validation():
    with pytest.raises(ValueError):
        QARecord("x", "bogus", ["a"], ["1"])
    with pytest.raises(ValueError):
        QARecord("x", "verify", ["a"], ["yes"])


def test_forward_shapes(micro_params, micro_cfg, micro_batch):
    logits, tr, _ = forward(micro_params, micro_cfg, micro_batch)
    B, T = micro_batch.ids.shape
    assert logits.shape == (B, T, micro_cfg.vocab_size)
    assert len(tr.resid) == micro_cfg.n_layers + 1
    assert tr.attn[0].shape == (B, micro_cfg.n_heads, T, T)
    assert np.allclose(tr.attn[1].sum(-1), 1.0)
    assert np.all(np.triu(tr.attn[0][0, 0], 1) == 0)


def test_causal(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 1)
    l0, _, _ = forward(p, micro_cfg, micro_batch)
    b2 = collate(micro_batch.seqs)
    b2.ids = b2.ids.copy()
    b2.ids[:, -1] = (b2.ids[:, -1] + 1) % micro_cfg.vocab_size
    l1, _, _ = forward(p, micro_cfg, b2)
    assert np.array_equal(l0[:, :-1], l1[:, :-1])
    assert not np.allclose(l0[:, -1], l1[:, -1])


def test_head_decomposition(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 2)
    _, tr, _ = forward(p, micro_cfg, micro_batch)
    for l in range(micro_cfg.n_layers):
        wo = p[f"blocks.{l}.wo"]
        parts = sum(tr.heads[l][:, :, h] @ wo[head_slice(micro_cfg, h)] for h in range(micro_cfg.n_heads))
        assert np.allclose(parts, tr.attn_out[l], rtol=1e-10, atol=1e-12)


def test_unit_overrides_are_noops(micro_params, micro_cfg, micro_batch):
    base, _, _ = forward(micro_params, micro_cfg, micro_batch)
    ov = OverrideSet(beta={(0, 0): 1.0, (1, 1): 1.0}, head_scale={(0, 1): 1.0})
    same, _, _ = forward(micro_params, micro_cfg, micro_batch, ov)
    assert np.array_equal(base, same)


def test_resid_override_with_own_values_is_noop(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 4)
    base, tr, _ = forward(p, micro_cfg, micro_batch)
    pos = micro_batch.img_pos
    same, _, _ = forward(p, micro_cfg, micro_batch, OverrideSet(resid={1: (pos, tr.resid[1][:, pos])}))
    assert np.array_equal(base, same)
    diff, _, _ = forward(p, micro_cfg, micro_batch, OverrideSet(resid={1: (pos, 0 * tr.resid[1][:, pos])}))
    assert not np.allclose(base, diff)


def test_head_scale_linear(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 5)
    _, tr, _ = forward(p, micro_cfg, micro_batch, capture=frozenset({"attn_out"}))
    ov = OverrideSet(head_scale={(0, h): 2.5 for h in range(micro_cfg.n_heads)})
    _, tr2, _ = forward(p, micro_cfg, micro_batch, ov, capture=frozenset({"attn_out"}))
    assert np.allclose(tr2.attn_out[0], 2.5 * tr.attn_out[0], rtol=1e-12, atol=1e-14)


def test_override_validation(micro_params, micro_cfg, micro_batch):
    with pytest.raises(IndexError):
        forward(micro_params, micro_cfg, micro_batch, OverrideSet(beta={(5, 0): 1.0}))
    with pytest.raises(ValueError):
        forward(micro_params, micro_cfg, micro_batch, OverrideSet(beta={(0, 0): -1.0}))
    with pytest.raises(ValueError):
        OverrideSet(beta={(0, 0): 1.0}).merge(OverrideSet(beta={(0, 0): 2.0}))


def test_image_embedding_depends_on_pixels(micro_params, micro_cfg, micro_items, vocab):
    (s1, r1), (s2, r2) = micro_items[0], micro_items[-1]
    a = build_sequence(r1, s1, micro_cfg, vocab)
    b = build_sequence(r1, s2, micro_cfg, vocab)
    la = forward(micro_params, micro_cfg, collate([a]))[0]
    lb = forward(micro_params, micro_cfg, collate([b]))[0]
    assert np.array_equal(la[:, :2], lb[:, :2])   # tokens before the image are unaffected
    assert not np.allclose(la[:, -1], lb[:, -1])


def test_zero_state_unembeds_to_bias(micro_params):
    out = unembed(micro_params, np.zeros((1, micro_params["ln_f"].shape[0])))
    assert np.allclose(out[0], micro_params["unembed_b"])


def test_checkpoint_round_trip(tmp_path, micro_cfg):
    p = random_params(micro_cfg, 7)
    path = checkpoint.save(tmp_path / "m.ckpt", p, micro_cfg, {"seed": 7})
    q, cfg = checkpoint.load(path)
    assert cfg == micro_cfg
    for k in p:
        assert np.array_equal(q[k], p[k].astype(np.float32).astype(np.float64))
    assert checkpoint.load_sidecar(path)["seed"] == 7
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(path.read_bytes() + b"\0")


def test_adam_state_round_trip():
    m = {"a": np.arange(6.0).reshape(2, 3)}
    v = {"a": np.ones((2, 3))}
    step, m2, v2 = checkpoint.decode_state(checkpoint.encode_state(5, m, v))
    assert step == 5 and np.array_equal(m2["a"], m["a"]) and np.array_equal(v2["a"], v["a"])


def test_image_tag_count(micro_cfg, micro_batch):
    assert sum(t == IMAGE for t in micro_batch.tags) == micro_cfg.n_image_tokens
