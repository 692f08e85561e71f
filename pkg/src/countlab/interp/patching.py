"""Activation patching: token-group overwrite curves, per-head logit-difference effects,
mean-ablation head importance and head-set overlap."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import (ModelConfig, OverrideSet, TokenSequence, answer_logits, build_sequence, collate,
                     forward, group_by_layout)
from ..synth import CounterfactualPair
from ..vocab import GROUPS, Vocab, count_record

ALL_TOKENS = "AllTokens"


@dataclass
class PairBatch:
    clean: object
    corrupted: object
    clean_label: np.ndarray
    corrupted_label: np.ndarray


def pair_batches(pairs: list[CounterfactualPair], cfg: ModelConfig, vocab: Vocab, batch_size: int = 64):
    """Collate counterfactual pairs as count questions; clean and corrupted share one layout."""
    seqs_c, seqs_x = [], []
    for i, p in enumerate(pairs):
        seqs_c.append(build_sequence(count_record(p.clean, f"clean-{i}"), p.clean, cfg, vocab))
        seqs_x.append(build_sequence(count_record(p.corrupted, f"corrupt-{i}"), p.corrupted, cfg, vocab))
        if seqs_c[-1].tags != seqs_x[-1].tags:
            raise ValueError(f"pair {i}: clean and corrupted prompts differ in layout")
    for idxs in group_by_layout(seqs_c).values():
        for j in range(0, len(idxs), batch_size):
            chunk = idxs[j:j + batch_size]
            yield chunk, PairBatch(collate([seqs_c[k] for k in chunk]), collate([seqs_x[k] for k in chunk]),
                                   np.array([vocab.count_id(pairs[k].clean.count) for k in chunk]),
                                   np.array([vocab.count_id(pairs[k].corrupted.count) for k in chunk]))


def _group_positions(batch, group: str) -> np.ndarray:
    if group == ALL_TOKENS:
        return np.arange(batch.ids.shape[1])
    return batch.positions(group)


@dataclass
class OverwriteCurve:
    """Overwrite rate per token group for patching the input of each block (index 0 = embeddings)."""

    rates: dict[str, list[float]]
    n_pairs: int
    n_used: int
    crossover: int | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rates": self.rates, "n_pairs": self.n_pairs, "n_used": self.n_used,
                "crossover": self.crossover, "layers": list(range(1, len(next(iter(self.rates.values()))) + 1)),
                **self.meta}


def crossover_layer(image_rates, prompt_rates) -> int | None:
    """First layer (1-based) where the last-prompt rate exceeds the image-token rate."""
    for l, (a, b) in enumerate(zip(image_rates, prompt_rates)):
        if b > a:
            return l + 1
    return None


def vap_layerwise(params, cfg: ModelConfig, vocab: Vocab, pairs: list[CounterfactualPair], groups=GROUPS,
                  require_correct: bool = True, batch_size: int = 64) -> OverwriteCurve:
    """Patch one token group's residual stream from the corrupted run into the clean run.

    A pair counts as overwritten when the patched prediction equals the corrupted
    label and that label differs from the clean one. With ``require_correct`` only
    pairs the model answers correctly in both unpatched runs are used.
    """
    if not pairs:
        raise ValueError("no counterfactual pairs")
    L = cfg.n_layers
    hits = {g: np.zeros(L) for g in groups}
    used = 0
    for _, pb in pair_batches(pairs, cfg, vocab, batch_size):
        lc, _, _ = forward(params, cfg, pb.clean, capture=frozenset())
        lx, tx, _ = forward(params, cfg, pb.corrupted, capture=frozenset({"resid"}))
        keep = np.ones(pb.clean.size, dtype=bool)
        if require_correct:
            keep &= np.argmax(answer_logits(lc, pb.clean), -1) == pb.clean_label
            keep &= np.argmax(answer_logits(lx, pb.corrupted), -1) == pb.corrupted_label
        if not keep.any():
            continue
        used += int(keep.sum())
        differ = pb.corrupted_label != pb.clean_label
        for g in groups:
            pos = _group_positions(pb.clean, g)
            if pos.size == 0:
                continue
            for l in range(L):
                ov = OverrideSet(resid={l: (pos, tx.resid[l][:, pos])})
                lp, _, _ = forward(params, cfg, pb.clean, ov, capture=frozenset())
                pred = np.argmax(answer_logits(lp, pb.clean), -1)
                hits[g][l] += np.sum(keep & differ & (pred == pb.corrupted_label))
    if used == 0:
        raise ValueError("no pair is answered correctly in both runs; nothing to patch")
    rates = {g: (hits[g] / used).tolist() for g in groups}
    cross = None
    if "ImageToken" in rates and "LastPromptToken" in rates:
        cross = crossover_layer(rates["ImageToken"], rates["LastPromptToken"])
    return OverwriteCurve(rates, len(pairs), used, cross)


def vap_headwise(params, cfg: ModelConfig, vocab: Vocab, pairs: list[CounterfactualPair],
                 require_correct: bool = True, batch_size: int = 64) -> np.ndarray:
    """Per-head effect gamma (L, H): drop in clean-minus-corrupted logit difference
    when one head's output is replaced by its corrupted-run value at all positions."""
    L, H = cfg.n_layers, cfg.n_heads
    total = np.zeros((L, H))
    used = 0
    for _, pb in pair_batches(pairs, cfg, vocab, batch_size):
        lc, _, _ = forward(params, cfg, pb.clean, capture=frozenset())
        lx, tx, _ = forward(params, cfg, pb.corrupted, capture=frozenset({"heads"}))
        ac = answer_logits(lc, pb.clean)
        keep = np.ones(pb.clean.size, dtype=bool)
        if require_correct:
            keep &= np.argmax(ac, -1) == pb.clean_label
            keep &= np.argmax(answer_logits(lx, pb.corrupted), -1) == pb.corrupted_label
        if not keep.any():
            continue
        r = np.arange(pb.clean.size)
        ld0 = ac[r, pb.clean_label] - ac[r, pb.corrupted_label]
        for l in range(L):
            for h in range(H):
                ov = OverrideSet(heads={(l, h): (None, tx.heads[l][:, :, h])})
                ap = answer_logits(forward(params, cfg, pb.clean, ov, capture=frozenset())[0], pb.clean)
                ld = ap[r, pb.clean_label] - ap[r, pb.corrupted_label]
                total[l, h] += np.sum((ld0 - ld)[keep])
        used += int(keep.sum())
    if used == 0:
        raise ValueError("no usable pairs for head patching")
    return total / used


# --------------------------------------------------------------------------- mean ablation

def _corpus_key(params, seqs: list[TokenSequence]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    for s in seqs:
        h.update(np.asarray(s.ids, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(s.patches, dtype="<f8").tobytes())
    return h.hexdigest()[:24]


def head_means(params, cfg: ModelConfig, seqs: list[TokenSequence], cache_dir=None) -> dict[tuple, np.ndarray]:
    """Dataset-mean head outputs per layout, each (L, T, H, E); cached by corpus hash."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"head_means_{_corpus_key(params, seqs)}.npz"
        if path.exists():
            with np.load(path, allow_pickle=False) as z:
                return {tuple(str(t) for t in z[f"tags{i}"]): z[f"mean{i}"] for i in range(int(z["n"]))}
    out = {}
    for tags, idxs in group_by_layout(seqs).items():
        acc = None
        for j in range(0, len(idxs), 64):
            batch = collate([seqs[k] for k in idxs[j:j + 64]])
            _, tr, _ = forward(params, cfg, batch, capture=frozenset({"heads"}))
            s = np.stack([z.sum(axis=0) for z in tr.heads])
            acc = s if acc is None else acc + s
        out[tags] = acc / len(idxs)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"n": np.array(len(out))}
        for i, (tags, m) in enumerate(out.items()):
            arrays[f"tags{i}"] = np.array(tags)
            arrays[f"mean{i}"] = m
        np.savez(path, **arrays)
    return out


def mean_ablation_importance(params, cfg: ModelConfig, seqs: list[TokenSequence], cache_dir=None) -> np.ndarray:
    """Mean drop in the correct-answer logit when a head's output is replaced by its dataset mean."""
    means = head_means(params, cfg, seqs, cache_dir)
    L, H = cfg.n_layers, cfg.n_heads
    total = np.zeros((L, H))
    for tags, idxs in group_by_layout(seqs).items():
        for j in range(0, len(idxs), 64):
            batch = collate([seqs[k] for k in idxs[j:j + 64]])
            r = np.arange(batch.size)
            base = answer_logits(forward(params, cfg, batch, capture=frozenset())[0], batch)[r, batch.targets]
            for l in range(L):
                for h in range(H):
                    ov = OverrideSet(heads={(l, h): (None, means[tags][l, :, h])})
                    al = answer_logits(forward(params, cfg, batch, ov, capture=frozenset())[0], batch)
                    total[l, h] += np.sum(base - al[r, batch.targets])
    return total / len(seqs)


@dataclass(frozen=True)
class HeadSet:
    heads: frozenset
    task: str = ""

    def __len__(self):
        return len(self.heads)


def top_k(scores: np.ndarray, k: int, task: str = "") -> HeadSet:
    """Top-k heads by score; ties broken by (layer, head) ascending."""
    L, H = scores.shape
    order = sorted(((l, h) for l in range(L) for h in range(H)), key=lambda lh: (-scores[lh], lh))
    return HeadSet(frozenset(order[:k]), task)


def jaccard(a, b) -> float:
    a = a.heads if isinstance(a, HeadSet) else set(a)
    b = b.heads if isinstance(b, HeadSet) else set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)
