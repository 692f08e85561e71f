"""Attention interventions: focus-regularized training, per-head temperature and head reweighting."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .losses import FocusConfig, entropy, focus_loss
from .metrics import eval_model
from .model import ModelConfig, OverrideSet, TokenSequence, forward, iter_batches
from .train import OptimConfig, train

log = logging.getLogger(__name__)

__all__ = ["FocusConfig", "focus_loss", "TemperatureConfig", "ReweightConfig", "apply_temperature",
           "apply_reweight", "joint_train", "select_heads", "focus_layers", "attention_entropy", "alpha_sweep"]


def select_heads(gamma: np.ndarray, threshold: float = 0.05, top: int | None = None) -> dict:
    """Heads whose importance exceeds ``threshold`` (optionally only the ``top`` largest)."""
    keys = sorted(((l, h) for l in range(gamma.shape[0]) for h in range(gamma.shape[1])
                   if gamma[l, h] > threshold), key=lambda k: (-gamma[k], k))
    if top is not None:
        keys = keys[:top]
    return {k: float(gamma[k]) for k in keys}


def _normalized(weights: dict, normalize: bool, what: str) -> dict:
    out = {}
    for k, g in weights.items():
        if g < 0:
            log.warning("negative %s %.4g for head %s clamped to 0", what, g, k)
            g = 0.0
        out[tuple(k)] = float(g)
    if normalize and out:
        m = float(np.mean(list(out.values())))
        if m <= 0:
            raise ValueError(f"cannot normalise {what}: all targeted values are zero")
        out = {k: g / m for k, g in out.items()}
    return out


@dataclass
class TemperatureConfig:
    """Per-head inverse-temperature beta_h = alpha * gamma_h on the targeted heads."""

    alpha: float = 1.2
    head_gammas: dict = field(default_factory=dict)
    normalize_gamma: bool = True

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")

    def betas(self) -> dict:
        g = _normalized(self.head_gammas, self.normalize_gamma, "importance")
        return {k: self.alpha * v for k, v in g.items()}


def apply_temperature(cfg: TemperatureConfig) -> OverrideSet:
    return OverrideSet(beta=cfg.betas())


@dataclass
class ReweightConfig:
    """Scale each targeted head's output by 1 + eta * normalised importance."""

    head_importance: dict = field(default_factory=dict)
    eta: float = 0.1
    normalize: bool = True

    def factors(self) -> dict:
        g = _normalized(self.head_importance, self.normalize, "importance")
        return {k: max(0.0, 1.0 + self.eta * v) for k, v in g.items()}


def apply_reweight(cfg: ReweightConfig) -> OverrideSet:
    if cfg.eta == 0:
        return OverrideSet()
    return OverrideSet(head_scale=cfg.factors())


def joint_train(params, cfg: ModelConfig, seqs: list[TokenSequence], focus: FocusConfig | None,
                opt: OptimConfig | None = None, out_dir=None):
    """SFT plus lambda times the focus loss; ``focus=None`` or lambda 0 is plain SFT."""
    if focus is not None:
        bad = [l for l in focus.target_layers if not 0 <= l < cfg.n_layers]
        if bad:
            raise ValueError(f"focus layers {bad} out of range")
    return train(params, cfg, seqs, opt, focus, out_dir)


def focus_layers(reports, n: int = 1, categories=("VisualGrounding", "CrossModalRouting")) -> list[int]:
    """Layers holding the most heads of the given categories (ties to the earlier layer)."""
    c = Counter(r.layer for r in reports if r.category in categories)
    if not c:
        return [0]
    return sorted(sorted(c, key=lambda l: (-c[l], l))[:n])


def attention_entropy(params, cfg: ModelConfig, seqs: list[TokenSequence], heads, overrides=None,
                      batch_size: int = 64) -> dict:
    """Per-head attention entropy for every query row, {(layer, head): (n_rows,)}."""
    out = {tuple(k): [] for k in heads}
    for _, batch in iter_batches(seqs, batch_size):
        _, tr, _ = forward(params, cfg, batch, overrides, capture=frozenset({"attn"}))
        for (l, h) in out:
            out[(l, h)].append(entropy(tr.attn[l][:, h]).ravel())
    return {k: np.concatenate(v) for k, v in out.items()}


def alpha_sweep(params, cfg: ModelConfig, vocab, items, gammas: dict, alphas=(1.1, 1.2, 1.3),
                base: OverrideSet | None = None) -> list[dict]:
    """Count metrics for each alpha with the same head targets."""
    rows = []
    for a in alphas:
        ov = apply_temperature(TemperatureConfig(a, gammas))
        if base is not None:
            ov = ov.merge(base)
        rep = eval_model(params, cfg, vocab, items, ov)[0]
        rows.append({"alpha": a, **rep.to_dict()})
    return rows
