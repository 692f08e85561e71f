"""Mini-batch AdamW training with warmup + linear decay, answer-only supervision."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .losses import FocusConfig, focus_loss, loss_sft
from .model import ModelConfig, TokenSequence, backward, collate, forward, group_by_layout
from .synth import focus_prior

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Loss or gradients became non-finite."""


@dataclass
class OptimConfig:
    lr: float = 3e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 2
    warmup_frac: float = 0.03
    grad_clip: float = 1.0
    seed: int = 0


def lr_at(step: int, total: int, cfg: OptimConfig) -> float:
    """Linear warmup over ``warmup_frac`` of the steps, then linear decay to zero."""
    warm = max(1, int(math.ceil(cfg.warmup_frac * total)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr * max(0.0, (total - step) / max(1, total - warm))


def _decays(name: str) -> bool:
    return name.endswith(("wq", "wk", "wv", "wo", "w1", "w2")) or name in ("patch_w", "unembed")


@dataclass
class AdamW:
    cfg: OptimConfig
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict, lr: float):
        c = self.cfg
        self.step += 1
        b1t = 1 - c.beta1**self.step
        b2t = 1 - c.beta2**self.step
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p = params[k]
            if c.weight_decay and _decays(k):
                p -= lr * c.weight_decay * p
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    sft: list[float] = field(default_factory=list)
    focus: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)


def make_batches(seqs: list[TokenSequence], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle within each layout group, chunk, then shuffle chunk order."""
    chunks = []
    for idxs in group_by_layout(seqs).values():
        idxs = [idxs[i] for i in rng.permutation(len(idxs))]
        chunks += [idxs[i:i + batch_size] for i in range(0, len(idxs), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def loss_and_grads(params, cfg: ModelConfig, batch, focus: FocusConfig | None = None,
                   prior: np.ndarray | None = None, overrides=None):
    """Composite loss L_SFT + lambda * L_focus and its gradient."""
    logits, trace, cache = forward(params, cfg, batch, overrides, capture=frozenset({"attn"}), keep_cache=True)
    l_sft, dlogits = loss_sft(logits, batch)
    l_focus, dattn = 0.0, None
    if focus is not None and focus.lam > 0:
        if prior is None:
            prior = np.stack([focus_prior(s.scene, sigma=focus.sigma) for s in batch.seqs])
        l_focus, dattn, _ = focus_loss(trace.attn, prior, focus, batch)
        dattn = {l: focus.lam * d for l, d in dattn.items()}
    grads = backward(params, cfg, cache, dlogits, dattn)
    lam = focus.lam if focus is not None else 0.0
    return l_sft + lam * l_focus, l_sft, l_focus, grads


def train(params: dict, cfg: ModelConfig, seqs: list[TokenSequence], opt: OptimConfig | None = None,
          focus: FocusConfig | None = None, out_dir=None, focus_filter=None) -> tuple[dict, TrainLog]:
    """Train in place on a copy of ``params``; deterministic under ``opt.seed``.

    ``focus_filter(seq) -> bool`` selects which sequences receive the focus loss
    (default: scenes that have objects); others train on SFT only.
    """
    opt = opt or OptimConfig()
    if not seqs:
        raise ValueError("empty training set")
    params = {k: v.copy() for k, v in params.items()}
    rng = np.random.Generator(np.random.PCG64([int(opt.seed), 23]))
    adam = AdamW(opt)
    history = TrainLog()
    epochs = [make_batches(seqs, opt.batch_size, rng) for _ in range(opt.epochs)]
    total = sum(len(e) for e in epochs)
    sigma = focus.sigma if focus else 1.0
    priors = {}
    if focus is not None and focus.lam > 0:
        keep = focus_filter or (lambda s: s.scene is not None and s.scene.count > 0 and s.record.task == "count")
        priors = {i: focus_prior(s.scene, sigma=sigma) for i, s in enumerate(seqs) if keep(s)}
    step = 0
    for ep, batches in enumerate(epochs):
        ep_losses = []
        for idxs in batches:
            batch = collate([seqs[i] for i in idxs])
            use_focus = focus is not None and focus.lam > 0 and all(i in priors for i in idxs)
            prior = np.stack([priors[i] for i in idxs]) if use_focus else None
            lr = lr_at(step, total, opt)
            loss, l_sft, l_focus, grads = loss_and_grads(params, cfg, batch, focus if use_focus else None, prior)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step} (epoch {ep}, lr {lr:.3g})")
            if opt.grad_clip:
                norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
                if not np.isfinite(norm):
                    raise NumericError(f"non-finite gradient norm at step {step}")
                if norm > opt.grad_clip:
                    for g in grads.values():
                        g *= opt.grad_clip / norm
            if lr > 0:
                adam.update(params, grads, lr)
            else:
                adam.step += 1
            history.losses.append(loss)
            history.sft.append(l_sft)
            history.focus.append(l_focus)
            history.lrs.append(lr)
            ep_losses.append(loss)
            step += 1
        history.epoch_loss.append(float(np.mean(ep_losses)))
        log.info("epoch %d loss %.4f", ep, history.epoch_loss[-1])
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            checkpoint.save(out / f"epoch{ep + 1}.ckpt", params, cfg,
                            sidecar={"seed": opt.seed, "epoch": ep + 1, "optim": asdict(opt),
                                     "focus": asdict(focus) if focus else None,
                                     "adam": checkpoint.encode_state(adam.step, adam.m, adam.v)})
            (out / "loss_curve.json").write_text(json.dumps(asdict(history)))
    return params, history
