"""Training objectives: answer-only cross-entropy and the object-focus attention loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Batch, log_softmax, softmax
from .vocab import IMAGE

FOCUS_EPS = 1e-8


def loss_sft(logits: np.ndarray, batch: Batch, answer_ids: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over answer tokens only; returns (loss, dL/dlogits).

    The logits at the last prompt position predict the first answer token. Every
    other position is masked out of the loss.
    """
    targets = batch.targets if answer_ids is None else np.asarray(answer_ids)
    if targets.size == 0:
        raise ValueError("no answer tokens to supervise")
    B = logits.shape[0]
    z = logits[:, batch.answer_pos]
    lp = log_softmax(z)
    loss = -float(np.mean(lp[np.arange(B), targets]))
    d = softmax(z)
    d[np.arange(B), targets] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[:, batch.answer_pos] = d / B
    return loss, dlogits


@dataclass
class FocusConfig:
    target_layers: list[int] = field(default_factory=lambda: [0])
    sigma: float = 1.0
    lam: float = 1.0
    epsilon: float = FOCUS_EPS
    queries: str = "text"   # "text": non-image positions after the image block; "image": image tokens

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.queries not in ("text", "image"):
            raise ValueError("queries must be 'text' or 'image'")


def query_positions(batch: Batch, queries: str = "text") -> np.ndarray:
    img = batch.img_pos
    if queries == "image":
        return img
    last_img = int(img.max())
    return np.array([i for i in range(last_img + 1, len(batch.tags)) if batch.tags[i] != IMAGE], dtype=int)


def focus_loss(attn: list[np.ndarray], prior: np.ndarray, cfg: FocusConfig, batch: Batch,
               query_pos: np.ndarray | None = None) -> tuple[float, dict[int, np.ndarray], dict]:
    """Cross-entropy between the instance prior and head-averaged image attention.

    ``attn[l]`` is (B, H, T, T); ``prior`` is (B, N) over image tokens. For each
    target layer and query token the summed attention over heads is renormalised
    over the image columns. Returns (loss, {layer: dL/dattn}, diagnostics).
    """
    qpos = query_positions(batch, cfg.queries) if query_pos is None else np.asarray(query_pos)
    img = batch.img_pos
    layers = list(cfg.target_layers)
    B = prior.shape[0]
    n_terms = len(layers) * len(qpos) * B
    total = 0.0
    grads = {}
    min_mass = np.inf
    for l in layers:
        a = attn[l]
        S = a[:, :, qpos][:, :, :, img].sum(axis=1)           # (B, Q, N)
        Z = S.sum(axis=-1, keepdims=True)
        min_mass = min(min_mass, float(Z.min()))
        Zs = np.where(Z > 0, Z, 1.0)
        q = S / Zs
        g = prior[:, None, :]
        total += float(-(g * np.log(q + cfg.epsilon)).sum())
        dq = -g / (q + cfg.epsilon) / n_terms
        dS = (dq - np.sum(dq * q, axis=-1, keepdims=True)) / Zs
        dS = np.where(Z > 0, dS, 0.0)
        da = np.zeros_like(a)
        # the same gradient reaches every head
        da[:, :, qpos[:, None], img[None, :]] = dS[:, None]
        grads[l] = da
    return total / n_terms, grads, {"min_image_mass": min_mass, "zero_mass": bool(min_mass <= 0.0)}


def entropy(p: np.ndarray, axis=-1) -> np.ndarray:
    p = np.asarray(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p), 0.0)
    return -t.sum(axis=axis)
