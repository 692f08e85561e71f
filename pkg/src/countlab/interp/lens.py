"""Logit lens, per-layer translators, HeadLens decoding and the per-head probe baseline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import (ModelConfig, TokenSequence, forward, head_slice, iter_batches, log_softmax,
                     rms_bwd, rms_fwd, softmax, unembed)
from ..train import AdamW, OptimConfig


def _ranks(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """1-based rank of ``target`` in each row (ties broken in the target's favour)."""
    t = np.take_along_axis(logits, target[..., None], axis=-1)
    return 1 + np.sum(logits > t, axis=-1)


@dataclass
class LensResult:
    top_ids: np.ndarray        # (B, L, k), layers 1..L
    top_probs: np.ndarray      # (B, L, k)
    target_rank: np.ndarray | None  # (B, L)


def logit_lens(params, cfg: ModelConfig, trace, position: int, target=None, k: int = 10) -> LensResult:
    """Decode the residual stream after each block at ``position`` through final norm and unembedding."""
    T = trace.resid[0].shape[1]
    if not -T <= position < T:
        raise IndexError(f"position {position} out of range for length {T}")
    states = np.stack([r[:, position] for r in trace.resid[1:]], axis=1)   # (B, L, D)
    logits = unembed(params, states)
    probs = softmax(logits)
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    ranks = None
    if target is not None:
        tgt = np.broadcast_to(np.asarray(target)[:, None], states.shape[:2])
        ranks = _ranks(logits, tgt)
    return LensResult(order, np.take_along_axis(probs, order, -1), ranks)


# --------------------------------------------------------------------------- translators

@dataclass
class TranslatorSet:
    """Per-layer affine maps T_l(z) = A_l z + b_l into the final residual space."""

    A: np.ndarray            # (L, D, D)
    b: np.ndarray            # (L, D)
    meta: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, cfg: ModelConfig) -> "TranslatorSet":
        D = cfg.d_model
        return cls(np.repeat(np.eye(D)[None], cfg.n_layers, axis=0), np.zeros((cfg.n_layers, D)),
                   {"steps": 0})

    def apply(self, layer: int, z: np.ndarray) -> np.ndarray:
        if not 0 <= layer < len(self.A):
            raise KeyError(f"no translator for layer {layer}")
        return z @ self.A[layer].T + self.b[layer]


def answer_region(seq: TokenSequence) -> np.ndarray:
    """Positions after the image block up to the answer position."""
    return np.arange(int(seq.image_positions.max()) + 1, seq.answer_position + 1)


def lens_data(params, cfg: ModelConfig, seqs: list[TokenSequence], batch_size: int = 64):
    """Full attention outputs per layer and final logits at the answer-region positions.

    Returns ``(acts (L, N, D), final_logits (N, V), heads (L, N, H, E))``.
    """
    acts = [[] for _ in range(cfg.n_layers)]
    heads = [[] for _ in range(cfg.n_layers)]
    finals = []
    for idxs, batch in iter_batches(seqs, batch_size):
        logits, tr, _ = forward(params, cfg, batch, capture=frozenset({"attn_out", "heads"}))
        pos = answer_region(batch.seqs[0])
        finals.append(logits[:, pos].reshape(-1, logits.shape[-1]))
        for l in range(cfg.n_layers):
            acts[l].append(tr.attn_out[l][:, pos].reshape(-1, cfg.d_model))
            heads[l].append(tr.heads[l][:, pos].reshape(-1, cfg.n_heads, cfg.d_head))
    return (np.stack([np.concatenate(a) for a in acts]), np.concatenate(finals),
            np.stack([np.concatenate(h) for h in heads]))


def _kl_and_grad(params, y: np.ndarray, logq: np.ndarray):
    """KL(softmax(lens(y)) || q) averaged over rows, and dKL/dy. ``y`` is pre-norm."""
    n, cache = rms_fwd(y, params["ln_f"])
    lg = n @ params["unembed"].T + params["unembed_b"]
    logp = log_softmax(lg)
    p = np.exp(logp)
    kl_rows = np.sum(p * (logp - logq), axis=-1)
    N = y.shape[0]
    dlg = p * (logp - logq - kl_rows[:, None]) / N
    dn = dlg @ params["unembed"]
    dy, _ = rms_bwd(dn, params["ln_f"], cache)
    return float(kl_rows.mean()), dy


def lens_kl(params, translators: TranslatorSet, layer: int, acts: np.ndarray, final_logits: np.ndarray) -> float:
    y = translators.apply(layer, acts)
    return _kl_and_grad(params, y, log_softmax(final_logits))[0]


def train_translators(params, cfg: ModelConfig, seqs: list[TokenSequence], steps: int = 300,
                      lr: float = 1e-2, holdout: float = 0.2, seed: int = 0) -> TranslatorSet:
    """Fit each layer's translator so the decoded attention output matches the final distribution.

    Only (A_l, b_l) move; the model is frozen. Sequences are split into train and
    held-out parts; both KLs are stored in ``meta`` before and after training.
    """
    if not seqs:
        raise ValueError("empty corpus")
    rng = np.random.Generator(np.random.PCG64([int(seed), 31]))
    order = rng.permutation(len(seqs))
    n_hold = int(round(holdout * len(seqs))) if len(seqs) > 1 else 0
    hold = [seqs[i] for i in order[:n_hold]]
    fit = [seqs[i] for i in order[n_hold:]]
    acts, final, _ = lens_data(params, cfg, fit)
    logq = log_softmax(final)
    ts = TranslatorSet.identity(cfg)
    meta = {"steps": steps, "lr": lr, "train_kl_init": [], "train_kl": [], "heldout_kl_init": [], "heldout_kl": []}
    h_acts = h_final = None
    if hold:
        h_acts, h_final, _ = lens_data(params, cfg, hold)
    for l in range(cfg.n_layers):
        tp = {"A": ts.A[l].copy(), "b": ts.b[l].copy()}
        adam = AdamW(OptimConfig(lr=lr, weight_decay=0.0, beta2=0.999))
        x = acts[l]
        init = None
        for step in range(steps):
            y = x @ tp["A"].T + tp["b"]
            kl, dy = _kl_and_grad(params, y, logq)
            if not np.isfinite(kl):
                raise FloatingPointError(f"non-finite translator loss at layer {l}, step {step}")
            if init is None:
                init = kl
            adam.update(tp, {"A": dy.T @ x, "b": dy.sum(axis=0)}, lr)
        ts.A[l], ts.b[l] = tp["A"], tp["b"]
        meta["train_kl_init"].append(init if init is not None else lens_kl(params, ts, l, x, final))
        meta["train_kl"].append(lens_kl(params, ts, l, x, final))
        if hold:
            meta["heldout_kl_init"].append(lens_kl(params, TranslatorSet.identity(cfg), l, h_acts[l], h_final))
            meta["heldout_kl"].append(lens_kl(params, ts, l, h_acts[l], h_final))
    ts.meta = meta
    return ts


# --------------------------------------------------------------------------- HeadLens

def head_projection(params, cfg: ModelConfig, layer: int, head: int, z: np.ndarray) -> np.ndarray:
    """A head's output through its block of W_O, i.e. the zero-padded head times W_O."""
    return z @ params[f"blocks.{layer}.wo"][head_slice(cfg, head)]


def headlens_logits(params, cfg: ModelConfig, translators: TranslatorSet, layer: int, head: int,
                    z: np.ndarray) -> np.ndarray:
    return unembed(params, translators.apply(layer, head_projection(params, cfg, layer, head, z)))


def headlens_decode(params, cfg: ModelConfig, translators: TranslatorSet, trace, layer: int, head: int,
                    position: int) -> np.ndarray:
    """Token distribution (B, V) decoded from one head's contribution at ``position``."""
    z = trace.heads[layer][:, position, head]
    return softmax(headlens_logits(params, cfg, translators, layer, head, z))


def headlens_all(params, cfg: ModelConfig, translators: TranslatorSet, trace, position: int) -> np.ndarray:
    """HeadLens distributions for every head at once, shape (B, L, H, V)."""
    out = []
    for l in range(cfg.n_layers):
        z = trace.heads[l][:, position]                                   # (B, H, E)
        wo = params[f"blocks.{l}.wo"].reshape(cfg.n_heads, cfg.d_head, cfg.d_model)
        proj = np.einsum("bhe,hed->bhd", z, wo)
        out.append(softmax(unembed(params, translators.apply(l, proj))))
    return np.stack(out, axis=1)


# --------------------------------------------------------------------------- per-head probes

@dataclass
class HeadProbes:
    """Independent affine maps f(z) = W z + b from each head's raw output to the residual space."""

    W: dict            # (layer, head) -> (D, E)
    b: dict            # (layer, head) -> (D,)
    final_kl: dict     # (layer, head) -> float

    @staticmethod
    def n_params(cfg: ModelConfig) -> int:
        return cfg.d_head * cfg.d_model + cfg.d_model

    def logits(self, params, key, z: np.ndarray) -> np.ndarray:
        return unembed(params, z @ self.W[key].T + self.b[key])


def attentionlens_probes(params, cfg: ModelConfig, seqs: list[TokenSequence], heads=None,
                         steps: int = 300, lr: float = 1e-2) -> HeadProbes:
    """Train one probe per head against the final output distribution.

    Probes start from the head's own W_O block and are then free to move.
    """
    _, final, hz = lens_data(params, cfg, seqs)
    logq = log_softmax(final)
    heads = heads if heads is not None else [(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]
    W, b, kls = {}, {}, {}
    for l, h in heads:
        z = hz[l][:, h]
        tp = {"W": params[f"blocks.{l}.wo"][head_slice(cfg, h)].T.copy(), "b": np.zeros(cfg.d_model)}
        adam = AdamW(OptimConfig(lr=lr, weight_decay=0.0, beta2=0.999))
        for _ in range(steps):
            kl, dy = _kl_and_grad(params, z @ tp["W"].T + tp["b"], logq)
            adam.update(tp, {"W": dy.T @ z, "b": dy.sum(axis=0)}, lr)
        W[(l, h)], b[(l, h)] = tp["W"], tp["b"]
        kls[(l, h)] = _kl_and_grad(params, z @ tp["W"].T + tp["b"], logq)[0]
    return HeadProbes(W, b, kls)


def discriminability(scores) -> float:
    """Best-to-mean ratio of a per-head score."""
    s = np.asarray(list(scores.values()) if isinstance(scores, dict) else scores, dtype=float).ravel()
    m = s.mean()
    return float(s.max() / m) if m > 0 else float("inf")
