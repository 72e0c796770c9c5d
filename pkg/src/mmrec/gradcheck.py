"""Finite-difference verification of every objective's parameter gradients."""

import numpy as np

from . import autodiff as ad
from . import objectives
from .data import Batch, ItemRecord
from .encoders import ModelConfig
from .model import RecModel
from .objectives import ObjectiveConfig

CHECK_LOSSES = ("dap", "vcl", "icl", "nicl", "nid", "rcl", "total")


def small_config(d=8, p=4, q=4):
    return ModelConfig(d=d, n_heads=2, ffn_mult=1, vocab_size=12, p_max=p,
                       q=q, patch_dim=4, text_blocks=1, vision_blocks=1,
                       fusion_blocks=1, user_blocks=1, L_max=4)


def random_batch(cfg, rng, B=2, L=4, n_items=6):
    items = {}
    for i in range(n_items):
        n_tok = int(rng.integers(2, cfg.p_max + 1))
        tokens = rng.integers(1, cfg.vocab_size, size=n_tok).tolist()
        patches = rng.normal(size=(cfg.q, cfg.patch_dim))
        items[i] = ItemRecord(i, tokens, patches)
    # distinct items per user so negative sets are non-empty
    idx = np.zeros((B, L), dtype=np.int64)
    for u in range(B):
        idx[u] = rng.choice(n_items, size=L, replace=False) if n_items >= L else \
            rng.integers(0, n_items, size=L)
    mask = np.ones((B, L))
    return Batch(idx=idx, mask=mask, items=items, rng_seed=int(rng.integers(2**31)))


def _loss_fn(model, batch, name):
    ocfg = ObjectiveConfig()

    def fn():
        ctx = objectives.BatchContext(model, batch)
        if name == "total":
            total, _ = objectives.total_loss(model, batch, ocfg)
            return total
        if name in objectives.CONTRASTIVE_VARIANTS:
            return objectives.contrastive_loss(ctx, name, ocfg)
        reps = ad.embedding(ctx.emb["e_cls"], ctx.pos_to_row)
        hiddens = model.encode_sequence(reps, batch.mask)
        if name == "dap":
            return objectives.dap_loss(ctx, hiddens, ocfg)
        corr_rows, labels = objectives.corrupt_batch(ctx, ocfg)
        corr_reps = ad.embedding(ctx.emb["e_cls"], corr_rows)
        corr_hiddens = model.encode_sequence(corr_reps, batch.mask)
        if name == "nid":
            return objectives.nid_loss(corr_hiddens, labels, model.groups["nid_head"])
        if name == "rcl":
            return objectives.rcl_loss(hiddens, corr_hiddens, batch.mask, ocfg)
        raise ValueError(f"unknown loss {name!r}")

    return fn


def check_parameters(model, loss_fn, step=1e-5):
    """Max relative error between analytic and central-difference gradients
    over every trainable parameter element. Denominators are floored at
    1e-3 so near-zero gradients compare on an absolute scale."""
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, p in model.trainable_parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        with ad.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = loss_fn().item()
                flat[i] = orig - step
                lo = loss_fn().item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * step)
                denom = max(abs(aflat[i]), abs(numeric), 1e-3)
                worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst


def run_gradient_checks(seed=0, losses=CHECK_LOSSES, step=1e-5):
    """Returns {loss name: max relative error} on the small configuration."""
    results = {}
    for name in losses:
        rng = np.random.default_rng(seed)
        model = RecModel.init(small_config(), seed)
        batch = random_batch(model.cfg, rng)
        results[name] = check_parameters(model, _loss_fn(model, batch, name), step)
    return results
