"""Yes/No verification sweeps over the queried quantity."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..metrics import predict
from ..model import ModelConfig
from ..synth import RenderedScene
from ..vocab import Vocab, verify_record


@dataclass
class YesBand:
    ks: list[int]
    responses: list[int]          # 1 yes, 0 no
    invalid: list[int]            # ks whose answer was neither yes nor no (scored 0)
    true_count: int
    band: list[int] | None        # contiguous yes-run containing the true count
    width: int
    oscillations: int

    def to_dict(self) -> dict:
        return asdict(self)


def band_stats(ks, responses, true_count: int):
    """(band, width, oscillations) for a 0/1 response vector over ascending ks."""
    ks, r = list(ks), list(responses)
    osc = int(sum(a != b for a, b in zip(r, r[1:])))
    if true_count not in ks or not r[ks.index(true_count)]:
        return None, 0, osc
    i = j = ks.index(true_count)
    while i > 0 and r[i - 1]:
        i -= 1
    while j < len(r) - 1 and r[j + 1]:
        j += 1
    band = ks[i:j + 1]
    return band, len(band), osc


def yes_band(params, cfg: ModelConfig, vocab: Vocab, scene: RenderedScene, k_range, as_word: bool = False,
             overrides=None) -> YesBand:
    """Ask "there are K ..." for every K and summarise where the model says yes."""
    ks = sorted(int(k) for k in k_range)
    items = [(scene, verify_record(scene, f"yesband-{k}", k, as_word)) for k in ks]
    raws = predict(params, cfg, vocab, items, overrides)
    resp = [1 if r == "yes" else 0 for r in raws]
    invalid = [k for k, r in zip(ks, raws) if r not in ("yes", "no")]
    band, width, osc = band_stats(ks, resp, scene.count)
    return YesBand(ks, resp, invalid, int(scene.count), band, width, osc)


def band_curve(bands: list[YesBand]) -> dict[int, dict]:
    """Mean band width, oscillations and yes-at-truth rate grouped by true count."""
    out = {}
    for c in sorted({b.true_count for b in bands}):
        sel = [b for b in bands if b.true_count == c]
        out[c] = {"n": len(sel), "width": float(np.mean([b.width for b in sel])),
                  "oscillations": float(np.mean([b.oscillations for b in sel])),
                  "yes_at_truth": float(np.mean([b.band is not None for b in sel]))}
    return out
