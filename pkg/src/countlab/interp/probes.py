"""Probes on image-token representations using ground-truth object masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from ..model import ModelConfig, build_sequence, forward, iter_batches
from ..synth import RenderedScene, object_patch_masks
from ..vocab import Vocab, count_record

BACKGROUND = -1
AMBIGUOUS = -2


def patch_instance_labels(scene: RenderedScene) -> np.ndarray:
    """Instance index per patch; -1 for background, -2 where two objects overlap one patch."""
    m = object_patch_masks(scene)
    lab = np.full(scene.spec.n_patches, BACKGROUND)
    if scene.count == 0:
        return lab
    hits = m.sum(axis=0)
    lab[hits == 1] = np.argmax(m[:, hits == 1], axis=0)
    lab[hits > 1] = AMBIGUOUS
    return lab


def image_features(params, cfg: ModelConfig, vocab: Vocab, scenes: list[RenderedScene], layers=None,
                   batch_size: int = 64) -> dict[int, np.ndarray]:
    """Residual states at the image tokens, {layer: (n_scenes, N, D)}; layer 0 is the embedding."""
    layers = list(range(cfg.n_layers + 1)) if layers is None else list(layers)
    seqs = [build_sequence(count_record(s, f"probe-{i}"), s, cfg, vocab) for i, s in enumerate(scenes)]
    out = {l: np.zeros((len(seqs), cfg.n_image_tokens, cfg.d_model)) for l in layers}
    for idxs, batch in iter_batches(seqs, batch_size):
        _, tr, _ = forward(params, cfg, batch, capture=frozenset({"resid"}))
        for l in layers:
            out[l][idxs] = tr.resid[l][:, batch.img_pos]
    return out


@dataclass
class ProbeResult:
    scores: dict[int, float]              # layer -> AUC or accuracy
    models: dict[int, object] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def best_layer(self) -> int:
        return max(self.scores, key=lambda l: (self.scores[l], -l))

    @property
    def best(self) -> float:
        return self.scores[self.best_layer]


def _pairs(labels: np.ndarray, rng: np.random.Generator, max_pos: int):
    """Balanced same/different-object token pairs within one scene."""
    obj = np.flatnonzero(labels >= 0)
    if obj.size < 2:
        return np.zeros((0, 2), int), np.zeros(0)
    i, j = np.triu_indices(obj.size, 1)
    a, b = obj[i], obj[j]
    same = labels[a] == labels[b]
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    n = min(pos.size, neg.size, max_pos)
    if n == 0:
        return np.zeros((0, 2), int), np.zeros(0)
    pos = rng.choice(pos, n, replace=False)
    neg = rng.choice(neg, n, replace=False)
    sel = np.concatenate([pos, neg])
    return np.stack([a[sel], b[sel]], axis=1), np.concatenate([np.ones(n), np.zeros(n)])


def _fit_quadratic(xi, xj, y, rank: int, seed: int, l2: float = 1e-3):
    D = xi.shape[1]
    rng = np.random.Generator(np.random.PCG64([seed, 41]))
    w0 = np.concatenate([rng.normal(0, 0.1 / np.sqrt(D), rank * D), [0.0]])
    N = len(y)

    def f(w):
        W, c = w[:-1].reshape(rank, D), w[-1]
        ui, uj = xi @ W.T, xj @ W.T
        z = np.sum(ui * uj, axis=1) + c
        loss = np.sum(np.logaddexp(0, z) - y * z) / N + l2 * np.sum(W * W)
        g = (1 / (1 + np.exp(-z)) - y) / N
        dW = (g[:, None] * uj).T @ xi + (g[:, None] * ui).T @ xj + 2 * l2 * W
        return loss, np.concatenate([dW.ravel(), [g.sum()]])

    res = minimize(f, w0, jac=True, method="L-BFGS-B", options={"maxiter": 300})
    return res.x[:-1].reshape(rank, D), float(res.x[-1])


def quadratic_score(W: np.ndarray, xi: np.ndarray, xj: np.ndarray) -> np.ndarray:
    return np.sum((xi @ W.T) * (xj @ W.T), axis=1)


def binding_probe(features: dict[int, np.ndarray], scenes: list[RenderedScene], rank: int = 16,
                  seed: int = 0, shuffle_labels: bool | str = False, test_frac: float = 0.2,
                  max_pairs: int = 40) -> ProbeResult:
    """Same-object vs different-object token pairs scored by (W x_i)^T (W x_j); AUC per layer.

    Scenes are split into train and test parts. ``shuffle_labels`` is the control:
    True (or "all") permutes the pair labels within each scene before the split,
    "train" permutes only the training labels.
    """
    mode = {False: "none", True: "all"}.get(shuffle_labels, shuffle_labels)
    if mode not in ("none", "all", "train"):
        raise ValueError(f"unknown shuffle mode {shuffle_labels!r}")
    labels = [patch_instance_labels(s) for s in scenes]
    rng = np.random.Generator(np.random.PCG64([seed, 43]))
    pairs = [_pairs(lab, rng, max_pairs) for lab in labels]
    if mode == "all":
        shuf = np.random.Generator(np.random.PCG64([seed, 53]))
        pairs = [(p, shuf.permutation(y)) for p, y in pairs]
    if not any(len(y) for _, y in pairs):
        raise ValueError("no scene has two objects with unambiguous tokens; no positive pairs")
    order = rng.permutation(len(scenes))
    n_test = max(1, int(round(test_frac * len(scenes))))
    test, train = set(order[:n_test].tolist()), order[n_test:]
    any_l = next(iter(features))
    D = features[any_l].shape[-1]
    if rank > D:
        raise ValueError("rank must not exceed the model width")
    perm_rng = np.random.Generator(np.random.PCG64([seed, 47]))
    scores, models = {}, {}
    for l, F in features.items():
        mu = F[train].reshape(-1, D).mean(axis=0)
        sd = F[train].reshape(-1, D).std(axis=0) + 1e-6
        Fz = (F - mu) / sd

        def gather(ids):
            xi, xj, yy = [], [], []
            for s in ids:
                p, y = pairs[s]
                if len(y):
                    xi.append(Fz[s, p[:, 0]])
                    xj.append(Fz[s, p[:, 1]])
                    yy.append(y)
            return np.concatenate(xi), np.concatenate(xj), np.concatenate(yy)

        xi, xj, y = gather(train)
        if mode == "train":
            y = perm_rng.permutation(y)
        W, c = _fit_quadratic(xi, xj, y, rank, seed)
        ti, tj, ty = gather(sorted(test))
        scores[l] = float(roc_auc_score(ty, quadratic_score(W, ti, tj)))
        models[l] = {"W": W, "bias": c, "mean": mu, "std": sd}
    return ProbeResult(scores, models, {"rank": rank, "shuffled": mode, "n_test_scenes": n_test})


def pooled_object_features(features: dict[int, np.ndarray], scenes: list[RenderedScene]) -> dict[int, np.ndarray]:
    masks = [object_patch_masks(s).any(axis=0) for s in scenes]
    return {l: np.stack([F[i, m].mean(axis=0) if m.any() else np.zeros(F.shape[-1])
                         for i, m in enumerate(masks)]) for l, F in features.items()}


def numerosity_probe(features: dict[int, np.ndarray], scenes: list[RenderedScene], hidden: int = 64,
                     seed: int = 0, test_frac: float = 0.2) -> ProbeResult:
    """Held-out count accuracy of a one-hidden-layer classifier on mean-pooled object tokens."""
    y = np.array([s.count for s in scenes])
    if np.unique(y).size < 2:
        raise ValueError("numerosity probe needs at least two distinct counts")
    idx = np.arange(len(scenes))
    tr, te = train_test_split(idx, test_size=test_frac, stratify=y, random_state=seed)
    pooled = pooled_object_features(features, scenes)
    scores, models = {}, {}
    for l, X in pooled.items():
        clf = make_pipeline(StandardScaler(),
                            MLPClassifier(hidden_layer_sizes=(hidden,), max_iter=2000, random_state=seed))
        clf.fit(X[tr], y[tr])
        scores[l] = float(np.mean(clf.predict(X[te]) == y[te]))
        models[l] = clf
    return ProbeResult(scores, models, {"n_train": int(len(tr)), "n_test": int(len(te))})
