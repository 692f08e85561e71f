"""
Where the count appears: lenses, patching and head roles
=========================================================

Loads ``demo_out/toy.ckpt`` from the first script and walks through the
analyses: logit-lens rank of the correct count, token-group overwrite curves,
per-head patching effects, HeadLens decoding with trained translators, the
per-head probe baseline, head categories, probes on image tokens and the
yes/no band.
"""

# %%
from pathlib import Path

import numpy as np

from countlab import checkpoint
from countlab.dataset import counting_split
from countlab.interp import (attentionlens_probes, band_curve, binding_probe, categorize_heads,
                             discriminability, image_features, logit_lens, mean_ablation_importance,
                             numerosity_probe, score_heads, top_k, train_translators, vap_headwise,
                             vap_layerwise, yes_band)
from countlab.model import build_sequence, forward, iter_batches
from countlab.reports import write_heatmap
from countlab.synth import CanvasSpec, gen_syndot, pair_corpus
from countlab.vocab import Vocab

out = Path("demo_out")
params, cfg = checkpoint.load(out / "toy.ckpt")
vocab = Vocab()
spec = CanvasSpec()
items = counting_split("syndot", range(1, 6), 40, spec, seed=3)
seqs = [build_sequence(r, s, cfg, vocab) for s, r in items]

# %%
# Logit lens
# ----------
# Rank of the correct count token when each block's output is decoded
# directly. The rank falls with depth and reaches 1 at the top.
ranks = []
for _, batch in iter_batches(seqs):
    _, tr, _ = forward(params, cfg, batch, capture=frozenset({"resid"}))
    ranks.append(logit_lens(params, cfg, tr, batch.answer_pos, batch.targets).target_rank)
ranks = np.concatenate(ranks)
print("mean rank per layer", np.round(ranks.mean(0), 2))
print("monotone on", np.mean(np.all(np.diff(ranks, axis=1) <= 0, axis=1)))

# %%
# Overwrite curves
# ----------------
# Clean and corrupted scenes share a placement stream, so they differ only in
# the extra objects. Patching image tokens flips the answer early; the last
# prompt token takes over deeper in the stack.
pairs = pair_corpus(spec, 100, range(1, 6), seed=5)
curve = vap_layerwise(params, cfg, vocab, pairs, groups=("ImageToken", "LastPromptToken", "UserInstruction"))
for g, r in curve.rates.items():
    print(f"{g:>16}", np.round(r, 2))
print("crossover layer", curve.crossover)

# %%
# Per-head effects on the clean-minus-corrupted logit difference.
gamma = vap_headwise(params, cfg, vocab, pairs[:40])
print(np.round(gamma, 2))
write_heatmap(out / "gamma.pgm", gamma, label="head importance")

# %%
# HeadLens
# --------
# One affine translator per layer maps attention outputs onto the final
# residual space; a head is decoded by pushing its own W_O contribution through
# the translator of its layer.
translators = train_translators(params, cfg, seqs, steps=300)
print("held-out KL before", np.round(translators.meta["heldout_kl_init"], 2))
print("held-out KL after ", np.round(translators.meta["heldout_kl"], 2))
reports = categorize_heads(score_heads(params, cfg, vocab, translators, seqs, gamma), cfg.n_layers)
for r in reports:
    print(r.layer + 1, r.head, f"imp {r.importance:5.2f} img {r.img_attn_ratio:.2f} cter {r.cter:.2f} "
          f"vgs {r.vgs:.2f} top1 {r.top1_acc:.2f} model-top1 {r.top1_model:.2f} {r.category}",
          [t for t, _ in r.top10_tokens[:3]])
late = [r for r in reports if r.layer >= cfg.n_layers - 2]
print("best late-head agreement with the model answer:", max(r.top1_model for r in late))

# %%
# Per-head probes (one affine map per head instead of one per layer) and the
# best-to-mean VGS ratio of both decoders.
probes = attentionlens_probes(params, cfg, seqs, steps=300)
probe_reports = score_heads(params, cfg, vocab, None, seqs, gamma, probes=probes)
print("lens count: translators", cfg.n_layers, "per-head probes", len(probes.W))
print("VGS discriminability  HeadLens", round(discriminability([r.vgs for r in reports]), 2),
      " per-head probes", round(discriminability([r.vgs for r in probe_reports]), 2))

# %%
# Mean-ablation head sets for counting; repeated runs give the same set.
imp = mean_ablation_importance(params, cfg, seqs[:100])
print("top-10 counting heads", sorted(top_k(imp, 10, "count").heads))

# %%
# Probes on image tokens
# ----------------------
# Same-object vs different-object token pairs (objects large enough to span
# several patches) and a count classifier on mean-pooled object tokens.
scenes = [gen_syndot(spec, int(n), 6.0, 9_000_000 + i) for i, n in enumerate(np.tile(range(2, 6), 50))]
feats = image_features(params, cfg, vocab, scenes)
b = binding_probe(feats, scenes, seed=9)
c = binding_probe(feats, scenes, seed=9, shuffle_labels=True)
print("binding AUC", {l: round(v, 3) for l, v in b.scores.items()})
print("shuffled   ", {l: round(v, 3) for l, v in c.scores.items()})
count_scenes = [s for s, _ in counting_split("syndot", range(1, 6), 40, spec, seed=11)]
n = numerosity_probe(image_features(params, cfg, vocab, count_scenes), count_scenes)
print("numerosity accuracy", {l: round(v, 3) for l, v in n.scores.items()})

# %%
# Yes/No band
# -----------
# Ask "there are K black dots" for K = 0..10. The model was only trained to
# count, so this shows how the verification head of the vocabulary behaves
# off-task.
bands = [yes_band(params, cfg, vocab, s, range(0, 11)) for s, _ in items[::8]]
print(band_curve(bands))
