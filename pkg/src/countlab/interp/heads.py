"""Per-head reports from HeadLens decoding and attention statistics, and rule-based categories."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..model import ModelConfig, TokenSequence, forward, iter_batches, softmax
from ..synth import object_patch_masks
from ..vocab import Vocab
from .lens import HeadProbes, TranslatorSet, headlens_all

CATEGORIES = ("CountingAggregation", "CrossModalRouting", "VisualGrounding", "Awareness", "Unclassified")


@dataclass
class HeadReport:
    layer: int
    head: int
    importance: float = 0.0
    img_attn_ratio: float = 0.0
    obj_in_img_ratio: float = 0.0
    top10_tokens: list = field(default_factory=list)   # [(token, mean prob)], most probable first
    cter: float = 0.0
    vgs: float = 0.0
    yesno: float = 0.0
    gt_at10: float = 0.0
    top1_acc: float = 0.0
    top1_model: float = 0.0
    category: str = "Unclassified"

    @property
    def key(self) -> tuple[int, int]:
        return (self.layer, self.head)

    def to_dict(self) -> dict:
        return asdict(self)


def _decoded_head_probs(params, cfg, trace, pos, translators=None, probes: HeadProbes | None = None):
    """(B, L, H, V) per-head distributions from HeadLens or from per-head probes."""
    if probes is None:
        return headlens_all(params, cfg, translators, trace, pos)
    B = trace.heads[0].shape[0]
    out = np.zeros((B, cfg.n_layers, cfg.n_heads, cfg.vocab_size))
    for (l, h) in probes.W:
        out[:, l, h] = softmax(probes.logits(params, (l, h), trace.heads[l][:, pos, h]))
    return out


def score_heads(params, cfg: ModelConfig, vocab: Vocab, translators: TranslatorSet | None,
                seqs: list[TokenSequence], importance: np.ndarray | None = None, position: str = "answer",
                probes: HeadProbes | None = None, batch_size: int = 64) -> list[HeadReport]:
    """Score every head over a corpus of count-question sequences.

    Lexicon rates (CTER, VGS, yes/no) are the fraction of a head's top-10 decoded
    tokens in each lexicon, averaged over scenes. ``probes`` swaps HeadLens for
    the per-head probe decoder (only the probed heads get lexicon scores).
    """
    if not seqs:
        raise ValueError("empty corpus")
    if translators is None and probes is None:
        raise ValueError("need translators or per-head probes to decode heads")
    L, H, V = cfg.n_layers, cfg.n_heads, cfg.vocab_size
    lex = {name: np.zeros(V, dtype=bool) for name in ("counting", "visual", "yesno")}
    for name in lex:
        lex[name][vocab.lexicon_ids(name)] = True
    sums = {k: np.zeros((L, H)) for k in ("cter", "vgs", "yesno", "gt10", "top1", "top1m", "img", "obj")}
    n_obj = np.zeros((L, H))
    prob_sum = np.zeros((L, H, V))
    n = 0
    for _, batch in iter_batches(seqs, batch_size):
        pos = batch.answer_pos if position == "answer" else int(position)
        logits, tr, _ = forward(params, cfg, batch, capture=frozenset({"heads", "attn"}))
        P = _decoded_head_probs(params, cfg, tr, pos, translators, probes)      # (B, L, H, V)
        top = np.argsort(-P, axis=-1, kind="stable")[..., :10]
        gt = np.array([vocab.count_id(s.scene.count) for s in batch.seqs])
        model_pred = np.argmax(logits[:, pos], axis=-1)
        for name, key in (("counting", "cter"), ("visual", "vgs"), ("yesno", "yesno")):
            sums[key] += lex[name][top].mean(axis=-1).sum(axis=0)
        sums["gt10"] += (top == gt[:, None, None, None]).any(axis=-1).sum(axis=0)
        sums["top1"] += (top[..., 0] == gt[:, None, None]).sum(axis=0)
        sums["top1m"] += (top[..., 0] == model_pred[:, None, None]).sum(axis=0)
        prob_sum += P.sum(axis=0)
        img = batch.img_pos
        for i, s in enumerate(batch.seqs):
            a = np.stack([tr.attn[l][i, :, pos][:, img] for l in range(L)])     # (L, H, N)
            mass = a.sum(axis=-1)
            sums["img"] += mass
            if s.scene.count > 0:
                om = object_patch_masks(s.scene).any(axis=0)
                with np.errstate(invalid="ignore", divide="ignore"):
                    share = np.where(mass > 0, a[..., om].sum(axis=-1) / mass, 0.0)
                sums["obj"] += share
                n_obj += 1
        n += batch.size
    imp = importance if importance is not None else np.zeros((L, H))
    reports = []
    for l in range(L):
        for h in range(H):
            mean_p = prob_sum[l, h] / n
            order = np.argsort(-mean_p, kind="stable")[:10]
            reports.append(HeadReport(
                l, h, float(imp[l, h]),
                float(np.clip(sums["img"][l, h] / n, 0.0, 1.0)),
                float(np.clip(sums["obj"][l, h] / n_obj[l, h], 0.0, 1.0)) if n_obj[l, h] else 0.0,
                [(vocab.tokens[int(t)], float(mean_p[t])) for t in order],
                float(sums["cter"][l, h] / n), float(sums["vgs"][l, h] / n), float(sums["yesno"][l, h] / n),
                float(sums["gt10"][l, h] / n), float(sums["top1"][l, h] / n), float(sums["top1m"][l, h] / n)))
    return reports


@dataclass
class Thresholds:
    importance: float = 0.05
    top1_acc: float = 0.1
    routing_img_attn: float = 0.5
    vgs: float = 0.2
    awareness_yesno: float = 0.3
    early_frac: float = 1 / 3
    late_frac: float = 1 / 3


def categorize_heads(reports: list[HeadReport], n_layers: int, th: Thresholds | None = None) -> list[HeadReport]:
    """Assign one category per head; rules are tried in order so labels never overlap.

    Awareness is only a candidate label for late heads whose decoded mass sits on
    yes/no tokens.
    """
    th = th or Thresholds()
    early = math.ceil(th.early_frac * n_layers)
    late = n_layers - math.ceil(th.late_frac * n_layers)
    for r in reports:
        if r.importance > th.importance and r.top1_acc > th.top1_acc:
            r.category = "CountingAggregation"
        elif r.importance > th.importance and r.img_attn_ratio > th.routing_img_attn and r.top1_acc <= th.top1_acc:
            r.category = "CrossModalRouting"
        elif r.layer < early and r.vgs >= th.vgs:
            r.category = "VisualGrounding"
        elif r.layer >= late and r.yesno >= th.awareness_yesno:
            r.category = "Awareness"
        else:
            r.category = "Unclassified"
    return reports
