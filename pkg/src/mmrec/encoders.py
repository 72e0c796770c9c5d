"""Item-level encoders: tiny text / vision transformers and merge-attention fusion.

Both encoders prepend a learned cls vector and add learned positional
embeddings; the fusion block runs one transformer layer over
[mm_cls; text hiddens; patch hiddens] and reads the item representation
off the mm_cls position.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


@dataclass
class ModelConfig:
    d: int = 32
    n_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = 1000
    p_max: int = 16
    q: int = 16
    patch_dim: int = 12
    text_blocks: int = 2
    vision_blocks: int = 2
    fusion_blocks: int = 1
    user_blocks: int = 2
    L_max: int = 20
    modality: str = "both"  # both | text | vision
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.modality not in ("both", "text", "vision"):
            raise ValueError(f"unknown modality {self.modality!r}")

    def to_dict(self):
        return asdict(self)


def _gauss(rng, shape):
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_block(rng, d, ffn_mult, prefix):
    h = d * ffn_mult
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}{name}"] = _gauss(rng, (d, d))
        p[f"{prefix}b{name[1]}"] = _zeros((d,))
    p[f"{prefix}ln1_g"] = _ones((d,))
    p[f"{prefix}ln1_b"] = _zeros((d,))
    p[f"{prefix}w1"] = _gauss(rng, (d, h))
    p[f"{prefix}b1"] = _zeros((h,))
    p[f"{prefix}w2"] = _gauss(rng, (h, d))
    p[f"{prefix}b2"] = _zeros((d,))
    p[f"{prefix}ln2_g"] = _ones((d,))
    p[f"{prefix}ln2_b"] = _zeros((d,))
    return p


def init_text_encoder(rng, cfg):
    p = {"tok_emb": _gauss(rng, (cfg.vocab_size, cfg.d)),
         "pos": _gauss(rng, (cfg.p_max + 1, cfg.d)),
         "cls": _gauss(rng, (cfg.d,))}
    for i in range(cfg.text_blocks):
        p.update(init_block(rng, cfg.d, cfg.ffn_mult, f"b{i}."))
    return p


def init_vision_encoder(rng, cfg):
    p = {"proj_w": _gauss(rng, (cfg.patch_dim, cfg.d)),
         "proj_b": _zeros((cfg.d,)),
         "pos": _gauss(rng, (cfg.q + 1, cfg.d)),
         "cls": _gauss(rng, (cfg.d,))}
    for i in range(cfg.vision_blocks):
        p.update(init_block(rng, cfg.d, cfg.ffn_mult, f"b{i}."))
    return p


def init_fusion(rng, cfg):
    p = {"mm_cls": _gauss(rng, (cfg.d,))}
    for i in range(cfg.fusion_blocks):
        p.update(init_block(rng, cfg.d, cfg.ffn_mult, f"b{i}."))
    return p


def attention_bias(key_mask, causal=False):
    """Additive attention bias from a (B, S) 0/1 key mask.

    Returns (B, 1, 1, S), or (B, 1, S, S) with the causal triangle applied.
    """
    key_mask = np.asarray(key_mask, dtype=np.float64)
    bias = (key_mask[:, None, None, :] - 1.0) * 1e9
    if causal:
        s = key_mask.shape[1]
        tri = np.triu(np.ones((s, s)), k=1) * -1e9
        bias = bias + tri[None, None, :, :]
    return bias


def transformer_block(params, prefix, x, bias, n_heads, dropout=0.0, rng=None):
    """Post-LN transformer layer: x = LN(x + MHA(x)); x = LN(x + FFN(x))."""
    b, s, d = x.shape
    dh = d // n_heads

    def proj(w, bb):
        return ad.add(ad.matmul(x, params[f"{prefix}{w}"]), params[f"{prefix}{bb}"])

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, s, n_heads, dh)), (0, 2, 1, 3))

    q = heads(proj("wq", "bq"))
    k = heads(proj("wk", "bk"))
    v = heads(proj("wv", "bv"))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(ad.add(scores, bias), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, s, d))
    ctx = ad.add(ad.matmul(ctx, params[f"{prefix}wo"]), params[f"{prefix}bo"])
    ctx = _dropout(ctx, dropout, rng)
    x = ad.layer_norm(ad.add(x, ctx), params[f"{prefix}ln1_g"], params[f"{prefix}ln1_b"])
    ff = ad.gelu(ad.add(ad.matmul(x, params[f"{prefix}w1"]), params[f"{prefix}b1"]))
    ff = ad.add(ad.matmul(ff, params[f"{prefix}w2"]), params[f"{prefix}b2"])
    ff = _dropout(ff, dropout, rng)
    return ad.layer_norm(ad.add(x, ff), params[f"{prefix}ln2_g"], params[f"{prefix}ln2_b"])


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return ad.mul(x, keep)


def run_blocks(params, n_blocks, x, bias, n_heads, dropout=0.0, rng=None):
    for i in range(n_blocks):
        x = transformer_block(params, f"b{i}.", x, bias, n_heads, dropout, rng)
    return x


def encode_text(params, cfg, token_ids, pad_mask, dropout=0.0, rng=None):
    """Encode token id batch (B, p) with 0/1 pad mask into (cls, hiddens).

    Returns cls of shape (B, d) and per-token hiddens of shape (B, p, d).
    """
    token_ids = np.asarray(token_ids)
    pad_mask = np.asarray(pad_mask, dtype=np.float64)
    if token_ids.ndim != 2 or token_ids.shape != pad_mask.shape:
        raise ValueError("token_ids and pad_mask must both be (B, p)")
    if token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size:
        raise ValueError(
            f"token id out of vocabulary [0, {cfg.vocab_size}): "
            f"{int(token_ids.min())}..{int(token_ids.max())}"
        )
    b, p = token_ids.shape
    if p > cfg.p_max:
        raise ValueError(f"token length {p} exceeds p_max={cfg.p_max}")
    emb = ad.add(ad.embedding(params["tok_emb"], token_ids),
                 ad.getitem(params["pos"], slice(1, p + 1)))
    cls = ad.reshape(ad.add(params["cls"], ad.getitem(params["pos"], 0)), (1, 1, cfg.d))
    cls = ad.add(cls, np.zeros((b, 1, cfg.d)))
    x = ad.concat([cls, emb], axis=1)
    key_mask = np.concatenate([np.ones((b, 1)), pad_mask], axis=1)
    x = run_blocks(params, cfg.text_blocks, x, attention_bias(key_mask),
                   cfg.n_heads, dropout, rng)
    return ad.getitem(x, (slice(None), 0)), ad.getitem(x, (slice(None), slice(1, None)))


def encode_vision(params, cfg, patches, dropout=0.0, rng=None):
    """Encode patch batch (B, q, patch_dim) into (cls, hiddens)."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[1:] != (cfg.q, cfg.patch_dim):
        raise ValueError(
            f"patches must be (B, {cfg.q}, {cfg.patch_dim}), got {patches.shape}"
        )
    b = patches.shape[0]
    emb = ad.add(ad.add(ad.matmul(Tensor(patches), params["proj_w"]), params["proj_b"]),
                 ad.getitem(params["pos"], slice(1, cfg.q + 1)))
    cls = ad.reshape(ad.add(params["cls"], ad.getitem(params["pos"], 0)), (1, 1, cfg.d))
    cls = ad.add(cls, np.zeros((b, 1, cfg.d)))
    x = ad.concat([cls, emb], axis=1)
    key_mask = np.ones((b, cfg.q + 1))
    x = run_blocks(params, cfg.vision_blocks, x, attention_bias(key_mask),
                   cfg.n_heads, dropout, rng)
    return ad.getitem(x, (slice(None), 0)), ad.getitem(x, (slice(None), slice(1, None)))


def fuse(params, cfg, text_hiddens, vision_hiddens, text_mask, dropout=0.0, rng=None):
    """Merge-attention fusion; returns the mm_cls output (B, d)."""
    if text_hiddens.shape[-1] != cfg.d or vision_hiddens.shape[-1] != cfg.d:
        raise ValueError("fusion inputs must have hidden dimension d")
    b, p, _ = text_hiddens.shape
    q = vision_hiddens.shape[1]
    mm = ad.reshape(params["mm_cls"], (1, 1, cfg.d))
    mm = ad.add(mm, np.zeros((b, 1, cfg.d)))
    x = ad.concat([mm, text_hiddens, vision_hiddens], axis=1)
    key_mask = np.concatenate(
        [np.ones((b, 1)), np.asarray(text_mask, dtype=np.float64), np.ones((b, q))],
        axis=1)
    x = run_blocks(params, cfg.fusion_blocks, x, attention_bias(key_mask),
                   cfg.n_heads, dropout, rng)
    return ad.getitem(x, (slice(None), 0))
