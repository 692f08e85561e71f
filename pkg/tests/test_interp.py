import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from countlab.dataset import counting_split
from countlab.interp import (ALL_TOKENS, CATEGORIES, HeadProbes, HeadReport, Thresholds, TranslatorSet,
                             attentionlens_probes, band_stats, binding_probe, categorize_heads, discriminability,
                             headlens_all, headlens_decode, jaccard, logit_lens, mean_ablation_importance,
                             numerosity_probe, patch_instance_labels, score_heads, top_k, train_translators,
                             vap_headwise, vap_layerwise)
from countlab.interp.patching import head_means, pair_batches
from countlab.interp.probes import _pairs, quadratic_score
from countlab.model import (Trace, answer_logits, build_sequence, collate, forward, head_slice, rms_fwd,
                            softmax, unembed)
from countlab.synth import CanvasSpec, CounterfactualPair, gen_syndot, pair_corpus

from conftest import random_params
from oracles import mhsa_loop


@pytest.fixture()
def seqs(micro_items, micro_cfg, vocab):
    return [build_sequence(r, s, micro_cfg, vocab) for s, r in micro_items]


@pytest.fixture()
def pairs(small_spec):
    return pair_corpus(small_spec, 6, range(1, 4), seed=2, radius_px=2.0)


# ---------------------------------------------------------------- lens

def test_logit_lens_final_layer_is_model_ranking(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 4)
    logits, tr, _ = forward(p, micro_cfg, micro_batch)
    pos = micro_batch.answer_pos
    res = logit_lens(p, micro_cfg, tr, pos, target=micro_batch.targets, k=5)
    assert res.top_ids.shape == (micro_batch.size, micro_cfg.n_layers, 5)
    np.testing.assert_array_equal(res.top_ids[:, -1, 0], np.argmax(logits[:, pos], -1))
    np.testing.assert_allclose(res.top_probs[:, -1, 0], softmax(logits[:, pos]).max(-1), rtol=1e-12)
    r = np.argsort(-logits[:, pos], -1, kind="stable")
    expect = [1 + int(np.where(r[i] == t)[0][0]) for i, t in enumerate(micro_batch.targets)]
    np.testing.assert_array_equal(res.target_rank[:, -1], expect)
    with pytest.raises(IndexError):
        logit_lens(p, micro_cfg, tr, 10_000)


def test_logit_lens_zero_state_decodes_bias(micro_cfg, micro_params):
    T, D = 5, micro_cfg.d_model
    tr = Trace(resid=[np.zeros((1, T, D))] * (micro_cfg.n_layers + 1))
    res = logit_lens(micro_params, micro_cfg, tr, 2, k=micro_cfg.vocab_size)
    ref = softmax(micro_params["unembed_b"])
    for l in range(micro_cfg.n_layers):
        np.testing.assert_allclose(res.top_probs[0, l], np.sort(ref)[::-1], rtol=1e-12)


def test_translators_identity_and_zero_steps(micro_cfg, micro_params, seqs):
    ident = TranslatorSet.identity(micro_cfg)
    z = np.random.default_rng(0).standard_normal((3, micro_cfg.d_model))
    np.testing.assert_array_equal(ident.apply(1, z), z)
    with pytest.raises(KeyError):
        ident.apply(micro_cfg.n_layers, z)
    ts = train_translators(micro_params, micro_cfg, seqs, steps=0)
    np.testing.assert_array_equal(ts.A, ident.A)
    np.testing.assert_array_equal(ts.b, ident.b)
    assert ts.meta["train_kl"] == pytest.approx(ts.meta["train_kl_init"])


def test_translators_lower_training_kl(micro_cfg, seqs):
    p = random_params(micro_cfg, 6)
    ts = train_translators(p, micro_cfg, seqs, steps=60, lr=1e-2)
    for a, b in zip(ts.meta["train_kl_init"], ts.meta["train_kl"]):
        assert b < a


def test_headlens_zero_head_decodes_translator_bias(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 7)
    ts = TranslatorSet.identity(micro_cfg)
    ts.b[1] = np.random.default_rng(1).standard_normal(micro_cfg.d_model)
    _, tr, _ = forward(p, micro_cfg, micro_batch)
    tr.heads[1] = np.zeros_like(tr.heads[1])
    got = headlens_decode(p, micro_cfg, ts, tr, 1, 0, micro_batch.answer_pos)
    ref = softmax(unembed(p, ts.b[1]))
    np.testing.assert_allclose(got, np.broadcast_to(ref, got.shape), rtol=1e-12)


def test_headlens_all_matches_single_head(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 8)
    ts = TranslatorSet.identity(micro_cfg)
    _, tr, _ = forward(p, micro_cfg, micro_batch)
    allp = headlens_all(p, micro_cfg, ts, tr, micro_batch.answer_pos)
    for l in range(micro_cfg.n_layers):
        for h in range(micro_cfg.n_heads):
            np.testing.assert_allclose(allp[:, l, h], headlens_decode(p, micro_cfg, ts, tr, l, h,
                                                                      micro_batch.answer_pos), rtol=1e-10)
    np.testing.assert_allclose(allp.sum(-1), 1.0, rtol=1e-12)


def test_head_decomposition_matches_loop_attention(micro_cfg, micro_batch):
    p = random_params(micro_cfg, 9)
    _, tr, _ = forward(p, micro_cfg, micro_batch)
    for l in range(micro_cfg.n_layers):
        wo = p[f"blocks.{l}.wo"]
        parts = sum(tr.heads[l][:, :, h] @ wo[head_slice(micro_cfg, h)] for h in range(micro_cfg.n_heads))
        np.testing.assert_allclose(parts, tr.attn_out[l], atol=1e-12)
        n1, _ = rms_fwd(tr.resid[l][0], p[f"blocks.{l}.ln1"])
        ref = mhsa_loop(n1, p[f"blocks.{l}.wq"], p[f"blocks.{l}.wk"], p[f"blocks.{l}.wv"], wo, micro_cfg.n_heads)
        np.testing.assert_allclose(tr.attn_out[l][0], ref, atol=1e-10)


def test_head_probes(micro_cfg, micro_params, seqs, micro_batch):
    assert HeadProbes.n_params(micro_cfg) == micro_cfg.d_head * micro_cfg.d_model + micro_cfg.d_model
    probes = attentionlens_probes(micro_params, micro_cfg, seqs, heads=[(1, 0)], steps=0)
    # untrained probes start from the head's own output projection, i.e. HeadLens with identity translators
    _, tr, _ = forward(micro_params, micro_cfg, micro_batch)
    z = tr.heads[1][:, micro_batch.answer_pos, 0]
    got = softmax(probes.logits(micro_params, (1, 0), z))
    ref = headlens_decode(micro_params, micro_cfg, TranslatorSet.identity(micro_cfg), tr, 1, 0,
                          micro_batch.answer_pos)
    np.testing.assert_allclose(got, ref, rtol=1e-10)


def test_discriminability():
    assert discriminability([1.0, 1.0, 1.0]) == 1.0
    assert discriminability({(0, 0): 3.0, (0, 1): 1.0}) == pytest.approx(1.5)


# ---------------------------------------------------------------- head scores and categories

def test_score_heads_ranges_and_all_counting_decode(micro_cfg, micro_params, seqs, vocab):
    p = {k: v.copy() for k, v in micro_params.items()}
    p["unembed"][:] = 0.0
    p["unembed_b"][:] = 0.0
    p["unembed_b"][vocab.lexicon_ids("counting")[:12]] = 5.0
    reps = score_heads(p, micro_cfg, vocab, TranslatorSet.identity(micro_cfg), seqs)
    assert len(reps) == micro_cfg.n_layers * micro_cfg.n_heads
    for r in reps:
        assert r.cter == 1.0 and r.vgs == 0.0 and r.yesno == 0.0
        assert len(r.top10_tokens) == 10
    reps = score_heads(random_params(micro_cfg, 10), micro_cfg, vocab, TranslatorSet.identity(micro_cfg), seqs)
    for r in reps:
        for v in (r.cter, r.vgs, r.yesno, r.img_attn_ratio, r.obj_in_img_ratio, r.gt_at10, r.top1_acc):
            assert 0.0 <= v <= 1.0
        assert r.cter + r.vgs + r.yesno <= 1.0 + 1e-12
        assert r.top1_acc <= r.gt_at10
    with pytest.raises(ValueError):
        score_heads(p, micro_cfg, vocab, TranslatorSet.identity(micro_cfg), [])


def _report(layer, **kw):
    return HeadReport(layer, 0, **kw)


@pytest.mark.parametrize("layer,kw,cat", [
    (3, dict(importance=0.2, top1_acc=0.3), "CountingAggregation"),
    (3, dict(importance=0.2, top1_acc=0.05, img_attn_ratio=0.7), "CrossModalRouting"),
    (3, dict(importance=0.2, top1_acc=0.05, img_attn_ratio=0.3), "Unclassified"),
    (0, dict(vgs=0.5), "VisualGrounding"),
    (3, dict(vgs=0.5), "Unclassified"),
    (5, dict(yesno=0.4), "Awareness"),
    (0, dict(yesno=0.4), "Unclassified"),
    (5, dict(importance=0.2, top1_acc=0.5, yesno=0.9), "CountingAggregation"),
])
def test_category_rules(layer, kw, cat):
    assert categorize_heads([_report(layer, **kw)], n_layers=6)[0].category == cat


@given(st.lists(st.tuples(st.integers(0, 5), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
                          st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
def test_categories_exclusive_and_total(rows):
    reps = [HeadReport(l, i, importance=a, top1_acc=b, img_attn_ratio=c, vgs=d, yesno=e)
            for i, (l, a, b, c, d, e) in enumerate(rows)]
    out = categorize_heads(reps, 6, Thresholds())
    assert all(r.category in CATEGORIES for r in out)
    for r in out:
        if r.category == "VisualGrounding":
            assert r.layer < 2
        if r.category == "Awareness":
            assert r.layer >= 4


# ---------------------------------------------------------------- patching and ablation

def test_jaccard_cases():
    a = {(0, 0), (1, 1)}
    assert jaccard(a, a) == 1.0
    assert jaccard(a, {(2, 2)}) == 0.0
    assert jaccard({(0, 0), (1, 1)}, {(1, 1), (2, 2), (0, 0), (3, 3)}) == 0.5
    assert jaccard(set(), set()) == 1.0


heads = st.frozensets(st.tuples(st.integers(0, 5), st.integers(0, 3)), max_size=12)


@given(heads, heads)
def test_jaccard_symmetric_bounded(a, b):
    j = jaccard(a, b)
    assert j == jaccard(b, a) and 0.0 <= j <= 1.0
    assert (j == 1.0) == (a == b)


def test_top_k_tie_break():
    s = np.array([[1.0, 2.0], [2.0, 0.5]])
    assert top_k(s, 2).heads == {(0, 1), (1, 0)}
    assert top_k(s, 1).heads == {(0, 1)}
    assert top_k(np.zeros((2, 2)), 3).heads == {(0, 0), (0, 1), (1, 0)}


def test_vap_identical_pairs_never_overwrite(micro_cfg, micro_params, vocab, small_spec):
    s = gen_syndot(small_spec, 2, 2.0, 0)
    curve = vap_layerwise(micro_params, micro_cfg, vocab, [CounterfactualPair(s, s, 0)] * 3,
                          groups=("ImageToken", ALL_TOKENS), require_correct=False)
    assert all(v == 0.0 for r in curve.rates.values() for v in r)


def test_vap_all_tokens_at_embedding_copies_corrupted_run(micro_cfg, vocab, pairs):
    p = random_params(micro_cfg, 13)
    curve = vap_layerwise(p, micro_cfg, vocab, pairs, groups=(ALL_TOKENS,), require_correct=False)
    # replacing every block-0 input reproduces the corrupted run exactly
    hit = 0
    for _, pb in pair_batches(pairs, micro_cfg, vocab):
        lx = forward(p, micro_cfg, pb.corrupted)[0]
        pred = np.argmax(answer_logits(lx, pb.corrupted), -1)
        hit += np.sum((pred == pb.corrupted_label) & (pb.corrupted_label != pb.clean_label))
    assert curve.rates[ALL_TOKENS][0] == pytest.approx(hit / len(pairs))
    assert curve.n_used == len(pairs)


def test_vap_headwise_shape_and_identity(micro_cfg, micro_params, vocab, small_spec):
    s1, s2 = gen_syndot(small_spec, 1, 2.0, 3), gen_syndot(small_spec, 3, 2.0, 3)
    g = vap_headwise(micro_params, micro_cfg, vocab, [CounterfactualPair(s1, s1, 3), CounterfactualPair(s2, s2, 3)],
                     require_correct=False)
    assert g.shape == (micro_cfg.n_layers, micro_cfg.n_heads)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_mean_ablation_constant_head_is_zero(micro_cfg, seqs, tmp_path):
    p = random_params(micro_cfg, 14)
    p["blocks.1.wv"][:, head_slice(micro_cfg, 1)] = 0.0
    imp = mean_ablation_importance(p, micro_cfg, seqs, cache_dir=tmp_path)
    assert imp[1, 1] == pytest.approx(0.0, abs=1e-12)
    assert np.any(np.abs(imp) > 1e-6)
    assert len(list(tmp_path.glob("head_means_*.npz"))) == 1
    # cached means are reused and give the same answer
    np.testing.assert_array_equal(mean_ablation_importance(p, micro_cfg, seqs, cache_dir=tmp_path), imp)
    m = head_means(p, micro_cfg, seqs, tmp_path)
    assert all(v.shape[0] == micro_cfg.n_layers for v in m.values())


# ---------------------------------------------------------------- probes

@pytest.fixture(scope="module")
def multi_scenes():
    # objects spanning several patches so same-object token pairs exist
    return [s for s, _ in counting_split("syndot", range(2, 5), 12, CanvasSpec(64, 8), seed=9, radius_px=7.0)]


def test_patch_labels(multi_scenes):
    for s in multi_scenes:
        lab = patch_instance_labels(s)
        assert lab.shape == (s.spec.n_patches,)
        assert set(np.unique(lab)) <= {-2, -1, *range(s.count)}


def test_zero_map_gives_chance_auc():
    rng = np.random.default_rng(0)
    xi, xj = rng.standard_normal((40, 6)), rng.standard_normal((40, 6))
    y = np.repeat([1, 0], 20)
    assert roc_auc_score(y, quadratic_score(np.zeros((3, 6)), xi, xj)) == 0.5


def test_pairs_invariant_to_instance_relabelling():
    lab = np.array([0, 0, 1, 1, 2, -1, 2, 0, -2])
    perm = {0: 2, 1: 0, 2: 1, -1: -1, -2: -2}
    relab = np.array([perm[v] for v in lab])
    p1, y1 = _pairs(lab, np.random.default_rng(5), 40)
    p2, y2 = _pairs(relab, np.random.default_rng(5), 40)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(y1, y2)
    assert y1.sum() == len(y1) / 2


def _instance_features(scenes, noise, seed=0):
    """Features whose first coordinates encode the instance id of each patch."""
    rng = np.random.default_rng(seed)
    out = []
    for s in scenes:
        lab = patch_instance_labels(s)
        F = noise * rng.standard_normal((lab.size, 8))
        basis = rng.standard_normal((max(s.count, 1), 8))
        F[lab >= 0] += basis[lab[lab >= 0]]
        out.append(F)
    return {0: np.stack(out)}


def test_binding_probe_separates_instances_and_control_is_chance(multi_scenes):
    feats = _instance_features(multi_scenes, 0.05)
    res = binding_probe(feats, multi_scenes, rank=8)
    assert res.best > 0.9
    ctrl = binding_probe(feats, multi_scenes, rank=8, shuffle_labels=True)
    assert abs(ctrl.best - 0.5) < 0.2
    with pytest.raises(ValueError):
        binding_probe(feats, multi_scenes, shuffle_labels="sometimes")


def test_numerosity_probe(multi_scenes, small_spec):
    feats = {0: np.stack([np.tile([s.count, -s.count], (s.spec.n_patches, 1)).astype(float)
                          for s in multi_scenes])}
    res = numerosity_probe(feats, multi_scenes, hidden=8)
    assert res.scores[0] == 1.0
    single = [gen_syndot(small_spec, 2, 2.0, i) for i in range(6)]
    with pytest.raises(ValueError):
        numerosity_probe({0: np.zeros((6, small_spec.n_patches, 2))}, single)


# ---------------------------------------------------------------- yes band

def test_band_stats():
    ks = [1, 2, 3, 4, 5]
    assert band_stats(ks, [0, 0, 1, 0, 0], 3) == ([3], 1, 2)
    assert band_stats(ks, [0, 1, 1, 1, 0], 3) == ([2, 3, 4], 3, 2)
    assert band_stats(ks, [1, 0, 1, 0, 1], 3) == ([3], 1, 4)
    assert band_stats(ks, [1, 1, 0, 1, 1], 3) == (None, 0, 2)
    assert band_stats(ks, [1] * 5, 3) == (ks, 5, 0)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=12), st.data())
@settings(max_examples=100)
def test_band_is_contiguous_yes_run(resp, data):
    ks = list(range(len(resp)))
    c = data.draw(st.sampled_from(ks))
    band, width, osc = band_stats(ks, resp, c)
    assert 0 <= osc <= len(resp) - 1
    if band is None:
        assert resp[c] == 0 and width == 0
    else:
        assert c in band and width == len(band) and all(resp[k] for k in band)
        assert band == list(range(band[0], band[-1] + 1))
