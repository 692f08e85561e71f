"""A small decoder-only vision-language transformer in numpy.

Pre-norm blocks with RMS normalisation, learned absolute positions, GELU MLPs
and an untied unembedding with bias. The forward pass records every residual
state, attention pattern and per-head output, accepts activation overrides,
and keeps the caches needed by :func:`backward`, which computes exact
reverse-mode gradients by hand.

Shapes: B batch, T tokens, D model width, H heads, E = D / H head width.
Parameter matrices act on row vectors (``x @ W``); the head-``h`` block of the
output projection is ``wo[h*E:(h+1)*E]``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .synth import CanvasSpec, RenderedScene
from .vocab import (GENERATED, IMAGE, INSTRUCTION, LAST_IMAGE, LAST_PROMPT, SYSTEM, QARecord,
                    Vocab)

RMS_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    mlp_mult: int = 4
    vocab_size: int = 76
    max_seq: int = 96
    patch_px: int = 8
    canvas_px: int = 64

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.canvas_px % self.patch_px:
            raise ValueError("patch_px must divide canvas_px")
        if self.max_seq < self.n_image_tokens + 4:
            raise ValueError("max_seq too small for the image block")

    @property
    def n_image_tokens(self) -> int:
        return (self.canvas_px // self.patch_px) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_px * self.patch_px

    @property
    def canvas(self) -> CanvasSpec:
        return CanvasSpec(self.canvas_px, self.patch_px)

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64([int(seed), 11]))
    D, V, F = cfg.d_model, cfg.vocab_size, cfg.mlp_mult * cfg.d_model
    std = 0.02
    resid_std = std / np.sqrt(2 * cfg.n_layers)

    def n(*shape, s=std):
        return (rng.standard_normal(shape) * s).astype(dtype)

    p = {
        "tok_emb": n(V, D),
        "pos_emb": n(cfg.max_seq, D),
        "patch_w": n(cfg.patch_dim, D, s=1.0 / np.sqrt(cfg.patch_dim)),
        "patch_b": np.zeros(D, dtype),
    }
    for l in range(cfg.n_layers):
        p[f"blocks.{l}.ln1"] = np.ones(D, dtype)
        p[f"blocks.{l}.wq"] = n(D, D)
        p[f"blocks.{l}.wk"] = n(D, D)
        p[f"blocks.{l}.wv"] = n(D, D)
        p[f"blocks.{l}.wo"] = n(D, D, s=resid_std)
        p[f"blocks.{l}.ln2"] = np.ones(D, dtype)
        p[f"blocks.{l}.w1"] = n(D, F)
        p[f"blocks.{l}.b1"] = np.zeros(F, dtype)
        p[f"blocks.{l}.w2"] = n(F, D, s=resid_std)
        p[f"blocks.{l}.b2"] = np.zeros(D, dtype)
    p["ln_f"] = np.ones(D, dtype)
    p["unembed"] = n(V, D)
    p["unembed_b"] = np.zeros(V, dtype)
    return p


def head_slice(cfg: ModelConfig, h: int) -> slice:
    return slice(h * cfg.d_head, (h + 1) * cfg.d_head)


# --------------------------------------------------------------------------- sequences

@dataclass
class TokenSequence:
    ids: np.ndarray
    tags: tuple[str, ...]
    patches: np.ndarray
    answer_ids: list[int]
    record: QARecord | None = None
    scene: RenderedScene | None = None

    @property
    def image_positions(self) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t == IMAGE])

    @property
    def answer_position(self) -> int:
        return self.tags.index(LAST_PROMPT)

    def positions(self, group: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t == group], dtype=int)


def scene_patches(scene: RenderedScene, patch_px: int) -> np.ndarray:
    """(n_patches, 3*p*p) ink values (1 - intensity), patches in row-major order."""
    rgb = 1.0 - scene.rgb()
    n = rgb.shape[0]
    g = n // patch_px
    return rgb.reshape(g, patch_px, g, patch_px, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)


def build_sequence(record: QARecord, scene: RenderedScene, cfg: ModelConfig, vocab: Vocab,
                   with_answer: bool = False) -> TokenSequence:
    """[<sys>][<img_start>][<img> x N][<img_end>][instruction][<assistant>] (+ answer)."""
    if scene.spec.canvas_px != cfg.canvas_px or scene.spec.patch_px != cfg.patch_px:
        raise ValueError("scene geometry does not match the model config")
    n_img = cfg.n_image_tokens
    words = ["<sys>", "<img_start>", *["<img>"] * n_img, "<img_end>", *record.prompt, "<assistant>"]
    tags = [SYSTEM, SYSTEM, *[IMAGE] * n_img, LAST_IMAGE, *[INSTRUCTION] * len(record.prompt), LAST_PROMPT]
    answer = vocab.encode(record.answer)
    if with_answer:
        words += record.answer
        tags += [GENERATED] * len(record.answer)
    if len(words) > cfg.max_seq:
        raise ValueError(f"sequence length {len(words)} exceeds max_seq {cfg.max_seq}")
    return TokenSequence(np.array(vocab.encode(words)), tuple(tags), scene_patches(scene, cfg.patch_px),
                         answer, record, scene)


@dataclass
class Batch:
    """Sequences sharing one layout (identical tag vectors)."""

    ids: np.ndarray            # (B, T)
    tags: tuple[str, ...]
    patches: np.ndarray        # (B, N, patch_dim)
    img_pos: np.ndarray        # (N,)
    answer_pos: int
    targets: np.ndarray        # (B,) first answer token
    seqs: list[TokenSequence] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    def positions(self, group: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tags) if t == group], dtype=int)


def collate(seqs: list[TokenSequence]) -> Batch:
    if not seqs:
        raise ValueError("empty batch")
    tags = seqs[0].tags
    for s in seqs[1:]:
        if s.tags != tags:
            raise ValueError("sequences in a batch must share their segment layout")
    return Batch(np.stack([s.ids for s in seqs]), tags, np.stack([s.patches for s in seqs]),
                 seqs[0].image_positions, seqs[0].answer_position,
                 np.array([s.answer_ids[0] for s in seqs]), list(seqs))


def group_by_layout(seqs: Iterable[TokenSequence]) -> dict[tuple, list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(s.tags, []).append(i)
    return groups


# --------------------------------------------------------------------------- overrides

@dataclass
class OverrideSet:
    """Activation edits applied during a forward pass.

    ``resid[l] = (positions, values)`` replaces the input of block ``l`` (0-based;
    block 0's input is the embedding) at those token positions, values shaped
    (B, P, D) or (P, D). ``heads[(l, h)] = (positions | None, values)`` replaces
    the head output before the output projection, values broadcastable to
    (B, P, E). ``beta`` multiplies a head's pre-softmax logits; ``head_scale``
    multiplies its post-projection contribution.
    """

    resid: dict[int, tuple] = field(default_factory=dict)
    heads: dict[tuple[int, int], tuple] = field(default_factory=dict)
    beta: dict[tuple[int, int], float] = field(default_factory=dict)
    head_scale: dict[tuple[int, int], float] = field(default_factory=dict)

    def merge(self, other: "OverrideSet") -> "OverrideSet":
        out = OverrideSet(dict(self.resid), dict(self.heads), dict(self.beta), dict(self.head_scale))
        for name in ("resid", "heads", "beta", "head_scale"):
            mine, theirs = getattr(out, name), getattr(other, name)
            clash = set(mine) & set(theirs)
            if clash:
                raise ValueError(f"conflicting {name} overrides for {sorted(clash)}")
            mine.update(theirs)
        return out

    def validate(self, cfg: ModelConfig, T: int):
        for l, (pos, _) in self.resid.items():
            if not 0 <= l < cfg.n_layers:
                raise IndexError(f"residual override layer {l} out of range")
            if np.any(np.asarray(pos) >= T) or np.any(np.asarray(pos) < 0):
                raise IndexError("residual override position out of range")
        for table in (self.heads, self.beta, self.head_scale):
            for l, h in table:
                if not (0 <= l < cfg.n_layers and 0 <= h < cfg.n_heads):
                    raise IndexError(f"head ({l}, {h}) out of range")
        for (l, h), b in self.beta.items():
            if b < 0:
                raise ValueError("attention logit multipliers must be non-negative")


@dataclass
class Trace:
    """Captured activations. ``resid[0]`` is the embedding, ``resid[l]`` the output of block l."""

    resid: list[np.ndarray] = field(default_factory=list)      # L+1 x (B, T, D)
    attn: list[np.ndarray] = field(default_factory=list)       # L x (B, H, T, T)
    heads: list[np.ndarray] = field(default_factory=list)      # L x (B, T, H, E), before W_O
    attn_out: list[np.ndarray] = field(default_factory=list)   # L x (B, T, D), post W_O
    mlp_out: list[np.ndarray] = field(default_factory=list)    # L x (B, T, D)
    scores: list[np.ndarray] = field(default_factory=list)     # L x (B, H, T, T), pre-softmax


ALL_CAPTURE = frozenset({"resid", "attn", "heads", "attn_out", "mlp_out"})


# --------------------------------------------------------------------------- primitives

def rms_fwd(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    y = x * r
    return y * g, (y, r)


def rms_bwd(dout, g, cache):
    y, r = cache
    dg = (dout * y).reshape(-1, y.shape[-1]).sum(axis=0)
    dy = dout * g
    dx = r * (dy - y * np.mean(dy * y, axis=-1, keepdims=True))
    return dx, dg


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def _gelu_tanh(x):
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    return np.tanh(t, out=t)


def gelu_grad(x, t=None):
    """Derivative of the tanh-approximated GELU; ``t`` is the cached tanh term."""
    if t is None:
        t = _gelu_tanh(x)
    x2 = x * x
    x2 *= 3 * 0.044715
    x2 += 1.0
    x2 *= _GELU_C * 0.5
    x2 *= x
    x2 *= 1.0 - t * t
    x2 += 0.5
    x2 += 0.5 * t
    return x2


def _outer(a, b):
    """Sum over leading axes of a^T b: (..., m), (..., n) -> (m, n)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def embed(params, batch: Batch) -> np.ndarray:
    T = batch.ids.shape[1]
    x = params["tok_emb"][batch.ids] + params["pos_emb"][:T]
    x[:, batch.img_pos] += batch.patches @ params["patch_w"] + params["patch_b"]
    return x


def unembed(params, x):
    """Final norm + unembedding + bias, for any (..., D) residual vectors."""
    n, _ = rms_fwd(x, params["ln_f"])
    return n @ params["unembed"].T + params["unembed_b"]


# --------------------------------------------------------------------------- forward / backward

def forward(params, cfg: ModelConfig, batch: Batch, overrides: OverrideSet | None = None,
            capture=ALL_CAPTURE, keep_cache: bool = False):
    """Run the model; returns ``(logits, trace, cache)``. ``cache`` is None unless requested."""
    ov = overrides or OverrideSet()
    B, T = batch.ids.shape
    H, E = cfg.n_heads, cfg.d_head
    ov.validate(cfg, T)
    mask = np.triu(np.ones((T, T), dtype=bool), 1)
    scale = 1.0 / np.sqrt(E)
    trace = Trace()
    layers = []

    x = embed(params, batch)
    for l in range(cfg.n_layers):
        if l in ov.resid:
            pos, vals = ov.resid[l]
            x = x.copy()
            x[:, pos] = vals
        if "resid" in capture:
            trace.resid.append(x)
        pre = f"blocks.{l}."
        n1, c1 = rms_fwd(x, params[pre + "ln1"])
        q = (n1 @ params[pre + "wq"]).reshape(B, T, H, E).transpose(0, 2, 1, 3)
        k = (n1 @ params[pre + "wk"]).reshape(B, T, H, E).transpose(0, 2, 1, 3)
        v = (n1 @ params[pre + "wv"]).reshape(B, T, H, E).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) * scale
        betas = np.ones(H)
        for (ll, h), b in ov.beta.items():
            if ll == l:
                betas[h] = b
        if np.any(betas != 1.0):
            s = s * betas[None, :, None, None]
        s = np.where(mask, -np.inf, s)
        a = softmax(s)
        z = a @ v                                    # (B, H, T, E)
        zmask = None
        for (ll, h), (pos, vals) in ov.heads.items():
            if ll != l:
                continue
            if zmask is None:
                z = z.copy()
                zmask = np.ones((1, H, T, 1))
            sel = slice(None) if pos is None else np.asarray(pos)
            z[:, h, sel] = vals
            zmask[:, h, sel] = 0.0
        hscale = np.ones(H)
        for (ll, h), f in ov.head_scale.items():
            if ll == l:
                hscale[h] = f
        if np.any(hscale != 1.0):
            z_eff = z * hscale[None, :, None, None]
        else:
            z_eff = z
        zc = z_eff.transpose(0, 2, 1, 3).reshape(B, T, H * E)
        ao = zc @ params[pre + "wo"]
        xm = x + ao
        n2, c2 = rms_fwd(xm, params[pre + "ln2"])
        h1 = n2 @ params[pre + "w1"] + params[pre + "b1"]
        gt = _gelu_tanh(h1)
        act = 0.5 * h1 * (1.0 + gt)
        mo = act @ params[pre + "w2"] + params[pre + "b2"]
        x_out = xm + mo
        if "attn" in capture:
            trace.attn.append(a)
        if "scores" in capture:
            trace.scores.append(s)
        if "heads" in capture:
            trace.heads.append(z_eff.transpose(0, 2, 1, 3))
        if "attn_out" in capture:
            trace.attn_out.append(ao)
        if "mlp_out" in capture:
            trace.mlp_out.append(mo)
        if keep_cache:
            layers.append(dict(x=x, c1=c1, q=q, k=k, v=v, a=a, betas=betas, zmask=zmask, hscale=hscale,
                               zc=zc, c2=c2, n1=n1, n2=n2, h1=h1, gt=gt, act=act))
        x = x_out
    if "resid" in capture:
        trace.resid.append(x)
    nf, cf = rms_fwd(x, params["ln_f"])
    logits = nf @ params["unembed"].T + params["unembed_b"]
    cache = None
    if keep_cache:
        cache = dict(layers=layers, nf=nf, cf=cf, batch=batch, overrides=ov, scale=scale)
    return logits, trace, cache


def backward(params, cfg: ModelConfig, cache, dlogits: np.ndarray,
             dattn: dict[int, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given dL/dlogits and optional dL/d(attention) per layer."""
    B, T, _ = dlogits.shape
    H, E = cfg.n_heads, cfg.d_head
    ov: OverrideSet = cache["overrides"]
    batch: Batch = cache["batch"]
    g = {}
    g["unembed"] = _outer(dlogits, cache["nf"])
    g["unembed_b"] = dlogits.sum(axis=(0, 1))
    dnf = dlogits @ params["unembed"]
    dx, g["ln_f"] = rms_bwd(dnf, params["ln_f"], cache["cf"])
    for l in reversed(range(cfg.n_layers)):
        c = cache["layers"][l]
        pre = f"blocks.{l}."
        # MLP
        dmo = dx
        g[pre + "b2"] = dmo.sum(axis=(0, 1))
        g[pre + "w2"] = _outer(c["act"], dmo)
        dh1 = (dmo @ params[pre + "w2"].T) * gelu_grad(c["h1"], c["gt"])
        g[pre + "b1"] = dh1.sum(axis=(0, 1))
        g[pre + "w1"] = _outer(c["n2"], dh1)
        dn2 = dh1 @ params[pre + "w1"].T
        dxm, g[pre + "ln2"] = rms_bwd(dn2, params[pre + "ln2"], c["c2"])
        dxm = dxm + dx
        # attention
        dao = dxm
        g[pre + "wo"] = _outer(c["zc"], dao)
        dzc = dao @ params[pre + "wo"].T
        dz = dzc.reshape(B, T, H, E).transpose(0, 2, 1, 3) * c["hscale"][None, :, None, None]
        if c["zmask"] is not None:
            dz = dz * c["zmask"]
        a, v, q, k = c["a"], c["v"], c["q"], c["k"]
        da = dz @ v.transpose(0, 1, 3, 2)
        if dattn is not None and l in dattn:
            da = da + dattn[l]
        dv = a.transpose(0, 1, 3, 2) @ dz
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True))
        ds = ds * (c["betas"] * cache["scale"])[None, :, None, None]
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, -1)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, -1)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, -1)
        n1 = c["n1"]
        g[pre + "wq"] = _outer(n1, dq)
        g[pre + "wk"] = _outer(n1, dk)
        g[pre + "wv"] = _outer(n1, dv)
        dn1 = dq @ params[pre + "wq"].T + dk @ params[pre + "wk"].T + dv @ params[pre + "wv"].T
        dx1, g[pre + "ln1"] = rms_bwd(dn1, params[pre + "ln1"], c["c1"])
        dx = dx1 + dxm
        if l in ov.resid:
            pos, _ = ov.resid[l]
            dx = dx.copy()
            dx[:, pos] = 0.0
    # embeddings
    g["pos_emb"] = np.zeros_like(params["pos_emb"])
    g["pos_emb"][:T] = dx.sum(axis=0)
    g["tok_emb"] = np.zeros_like(params["tok_emb"])
    np.add.at(g["tok_emb"], batch.ids.ravel(), dx.reshape(B * T, -1))
    dimg = dx[:, batch.img_pos]
    g["patch_w"] = _outer(batch.patches, dimg)
    g["patch_b"] = dimg.sum(axis=(0, 1))
    return g


# --------------------------------------------------------------------------- decoding

def answer_logits(logits: np.ndarray, batch: Batch) -> np.ndarray:
    return logits[:, batch.answer_pos]


def generate_answer(params, cfg: ModelConfig, batch: Batch, overrides: OverrideSet | None = None) -> np.ndarray:
    """Greedy single-token answers, shape (B,)."""
    logits, _, _ = forward(params, cfg, batch, overrides, capture=frozenset())
    return np.argmax(answer_logits(logits, batch), axis=-1)


def iter_batches(seqs: list[TokenSequence], batch_size: int = 64):
    """Deterministic layout-grouped batches in original order within each layout."""
    for idxs in group_by_layout(seqs).values():
        for i in range(0, len(idxs), batch_size):
            chunk = idxs[i:i + batch_size]
            yield chunk, collate([seqs[j] for j in chunk])


def config_for(vocab: Vocab, canvas: CanvasSpec = CanvasSpec(), **kw) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), patch_px=canvas.patch_px, canvas_px=canvas.canvas_px, **kw)
