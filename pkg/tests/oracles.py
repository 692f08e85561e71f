"""Independent reference implementations used only by the tests."""
import math

import numpy as np

from countlab.losses import FocusConfig, focus_loss, loss_sft
from countlab.model import forward
from countlab.synth import focus_prior


def metrics_bruteforce(preds, gts):
    """Plain-Python loops over the four counting metrics."""
    n = len(gts)
    hit = close = 0
    abs_sum = sq_sum = 0
    for p, y in zip(preds, gts):
        d = p - y
        hit += 1 if p == y else 0
        close += 1 if -1 <= d <= 1 else 0
        abs_sum += d if d >= 0 else -d
        sq_sum += d * d
    return {"acc": hit / n, "mae": abs_sum / n, "rmse": math.sqrt(sq_sum / n), "obo": close / n}


def composite_loss(params, cfg, batch, lam, focus_layers, overrides=None, sigma=1.0, queries="text"):
    logits, tr, _ = forward(params, cfg, batch, overrides, capture=frozenset({"attn"}))
    loss, _ = loss_sft(logits, batch)
    if lam:
        prior = np.stack([focus_prior(s.scene, sigma=sigma) for s in batch.seqs])
        f, _, _ = focus_loss(tr.attn, prior, FocusConfig(list(focus_layers), sigma, lam, queries=queries), batch)
        loss += lam * f
    return loss


def fd_gradients(params, cfg, batch, lam, focus_layers, overrides=None, step=1e-3, max_entries=None, seed=0,
                 queries="text"):
    """Central finite differences of the composite loss.

    Every entry by default; with ``max_entries`` a random subset per tensor, in
    which case the returned dict maps name -> (indices, values).
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, w in params.items():
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        gf = np.zeros(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            up = composite_loss(params, cfg, batch, lam, focus_layers, overrides, queries=queries)
            flat[i] = old - step
            down = composite_loss(params, cfg, batch, lam, focus_layers, overrides, queries=queries)
            flat[i] = old
            gf[n] = (up - down) / (2 * step)
        out[name] = gf.reshape(w.shape) if max_entries is None else (idx, gf)
    return out


def rel_err(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def mhsa_loop(x, wq, wk, wv, wo, n_heads):
    """Causal multi-head attention for one sequence with explicit loops; returns (T, D) output."""
    T, D = x.shape
    E = D // n_heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros((T, n_heads * E))
    for h in range(n_heads):
        sl = slice(h * E, (h + 1) * E)
        for t in range(T):
            s = np.array([q[t, sl] @ k[j, sl] / math.sqrt(E) for j in range(t + 1)])
            a = np.exp(s - s.max())
            a /= a.sum()
            out[t, sl] = sum(a[j] * v[j, sl] for j in range(t + 1))
    return out @ wo
