"""Training objectives: next-item prediction with in-batch negatives,
the cross-modal contrastive family, sequence corruption with noised-item
detection, and the corrupted-vs-original sequence contrast."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD_ITEM

LABEL_UNCHANGED = 0
LABEL_SHUFFLED = 1
LABEL_REPLACED = 2
LABEL_PAD = -1

CONTRASTIVE_VARIANTS = ("vcl", "icl", "nicl")


@dataclass
class ObjectiveConfig:
    dap: bool = True
    contrastive: str = "nicl"  # vcl | icl | nicl | None
    nid: bool = True
    rcl: bool = True
    shuffle_rate: float = 0.15
    replace_rate: float = 0.05
    temperature: float = 1.0
    rcl_pooling: str = "mean"  # mean | last
    weights: dict = field(default_factory=dict)  # per-objective, default 1.0

    def __post_init__(self):
        if self.contrastive is not None and self.contrastive not in CONTRASTIVE_VARIANTS:
            raise ValueError(f"unknown contrastive variant {self.contrastive!r}")
        if self.rcl_pooling not in ("mean", "last"):
            raise ValueError(f"unknown pooling {self.rcl_pooling!r}")

    def weight(self, name):
        return float(self.weights.get(name, 1.0))


def dap_only():
    return ObjectiveConfig(dap=True, contrastive=None, nid=False, rcl=False)


# ---------------------------------------------------------------------------
# batch feature assembly
# ---------------------------------------------------------------------------

def pack_item_features(items, catalog_indices):
    """Pad token/patch features of the given items into dense arrays.

    Returns (token_ids (n, p), pad_mask (n, p), patches (n, q, patch_dim)).
    """
    recs = [items[i] for i in catalog_indices]
    width = max(len(r.tokens) for r in recs)
    ids = np.zeros((len(recs), width), dtype=np.int64)
    mask = np.zeros((len(recs), width))
    for r, rec in enumerate(recs):
        ids[r, : len(rec.tokens)] = rec.tokens
        mask[r, : len(rec.tokens)] = 1.0
    patches = np.stack([r.patches for r in recs])
    return ids, mask, patches


class BatchContext:
    """Everything the losses share for one batch: unique-item embeddings,
    occurrence bookkeeping, and per-anchor negative masks."""

    def __init__(self, model, batch, rng=None):
        self.batch = batch
        idx, mask = batch.idx, batch.mask
        self.B, self.L = idx.shape
        real = mask > 0
        self.unique = sorted({int(i) for i in idx[real]})
        self.row_of = {c: r for r, c in enumerate(self.unique)}
        # (B, L) map into the unique-item table; padded slots point at row 0
        self.pos_to_row = np.zeros_like(idx)
        self.pos_to_row[real] = [self.row_of[int(i)] for i in idx[real]]
        ids, tmask, patches = pack_item_features(batch.items, self.unique)
        self.emb = model.item_embeddings(ids, tmask, patches, rng)
        # occurrences: every real (u, l) slot, in row-major order
        self.occ_u, self.occ_l = np.nonzero(real)
        self.occ_row = self.pos_to_row[self.occ_u, self.occ_l]
        occ_item = idx[self.occ_u, self.occ_l]
        user_items = [set(int(i) for i in idx[u][real[u]]) for u in range(self.B)]
        # allowed[u, n]: occurrence n is a legal negative for anchors of user u
        self.allowed = np.zeros((self.B, len(self.occ_u)))
        for u in range(self.B):
            ok = (self.occ_u != u) & np.array(
                [int(it) not in user_items[u] for it in occ_item]
            )
            self.allowed[u, ok] = 1.0
        # transitions: positions (u, l) whose successor (u, l+1) is real
        trans = real[:, :-1] & real[:, 1:]
        self.tr_u, self.tr_l = np.nonzero(trans)

    def rows_at(self, users, positions):
        return self.pos_to_row[users, positions]


def _scaled(scores, temperature):
    return scores if temperature == 1.0 else ad.mul(scores, 1.0 / temperature)


# ---------------------------------------------------------------------------
# DAP
# ---------------------------------------------------------------------------

def dap_loss(ctx, hiddens, cfg):
    """Next-item cross-entropy over in-batch negatives, averaged over all
    real transitions."""
    if len(ctx.tr_u) == 0:
        raise ValueError("batch has no valid transitions")
    e = ctx.emb["e_cls"]
    h = ad.getitem(hiddens, (ctx.tr_u, ctx.tr_l))  # (T, d)
    pos = ad.embedding(e, ctx.rows_at(ctx.tr_u, ctx.tr_l + 1))
    e_occ = ad.embedding(e, ctx.occ_row)  # (N, d)
    pos_score = _scaled(ad.tsum(ad.mul(h, pos), axis=-1), cfg.temperature)
    neg_scores = _scaled(ad.matmul(h, ad.transpose(e_occ, (1, 0))), cfg.temperature)
    z = ad.concat([ad.reshape(pos_score, (-1, 1)), neg_scores], axis=1)
    m = np.concatenate(
        [np.ones((len(ctx.tr_u), 1)), ctx.allowed[ctx.tr_u]], axis=1)
    lse = ad.masked_logsumexp(z, m, axis=1)
    return ad.tmean(ad.sub(lse, pos_score))


# ---------------------------------------------------------------------------
# contrastive family
# ---------------------------------------------------------------------------

def contrastive_loss(ctx, variant, cfg):
    """Cross-modal contrast between normalized text/vision embeddings.

    "vcl" uses inter-modality negatives only, "icl" adds intra-modality
    negatives, "nicl" further adds the next item's embeddings (both
    modalities) as positives and is averaged over transitions; vcl/icl
    average over all real positions.
    """
    if variant not in CONTRASTIVE_VARIANTS:
        raise ValueError(f"unknown contrastive variant {variant!r}")
    if "t_cls" not in ctx.emb or "v_cls" not in ctx.emb:
        raise ValueError("contrastive objectives need both modalities")
    if variant == "nicl" and len(ctx.tr_u) == 0:
        raise ValueError("nicl needs sequences of length >= 2")
    tn = ad.l2_normalize(ctx.emb["t_cls"])
    vn = ad.l2_normalize(ctx.emb["v_cls"])
    t_occ = ad.embedding(tn, ctx.occ_row)
    v_occ = ad.embedding(vn, ctx.occ_row)

    if variant == "nicl":
        a_u, a_l = ctx.tr_u, ctx.tr_l
    else:
        a_u, a_l = ctx.occ_u, ctx.occ_l
    rows = ctx.rows_at(a_u, a_l)
    n_anchor = len(a_u)
    allowed = ctx.allowed[a_u]

    def one_side(anchor_tab, other_tab, same_occ, other_occ):
        a = ad.embedding(anchor_tab, rows)  # (A, d)
        pos = ad.tsum(ad.mul(a, ad.embedding(other_tab, rows)), axis=-1)
        pos = _scaled(ad.reshape(pos, (-1, 1)), cfg.temperature)
        inter = _scaled(ad.matmul(a, ad.transpose(other_occ, (1, 0))), cfg.temperature)
        cols = [pos, inter]
        masks = [np.ones((n_anchor, 1)), allowed]
        if variant in ("icl", "nicl"):
            intra = _scaled(ad.matmul(a, ad.transpose(same_occ, (1, 0))), cfg.temperature)
            cols.append(intra)
            masks.append(allowed)
        den = ad.masked_logsumexp(ad.concat(cols, axis=1),
                                  np.concatenate(masks, axis=1), axis=1)
        if variant == "nicl":
            nrows = ctx.rows_at(a_u, a_l + 1)
            nxt_other = ad.tsum(ad.mul(a, ad.embedding(other_tab, nrows)), axis=-1)
            nxt_same = ad.tsum(ad.mul(a, ad.embedding(anchor_tab, nrows)), axis=-1)
            numz = ad.concat(
                [pos,
                 _scaled(ad.reshape(nxt_other, (-1, 1)), cfg.temperature),
                 _scaled(ad.reshape(nxt_same, (-1, 1)), cfg.temperature)],
                axis=1)
            num = ad.masked_logsumexp(numz, np.ones((n_anchor, 3)), axis=1)
        else:
            num = ad.reshape(pos, (-1,))
        return ad.sub(den, num)

    tv = one_side(tn, vn, t_occ, v_occ)
    vt = one_side(vn, tn, v_occ, t_occ)
    return ad.tmean(ad.mul(ad.add(tv, vt), 0.5))


# ---------------------------------------------------------------------------
# corruption + NID + RCL
# ---------------------------------------------------------------------------

def corruption_counts(length, shuffle_rate, replace_rate):
    """Number of shuffled / replaced positions for a sequence of `length`.

    A derangement needs at least two positions, so a shuffle count of one
    is bumped to two; replacement count is reduced before shuffle count when
    the sequence is too short to keep the two sets disjoint.
    """
    if not 0.0 <= shuffle_rate <= 1.0 or not 0.0 <= replace_rate <= 1.0:
        raise ValueError("corruption rates must lie in [0, 1]")
    n_sh = math.ceil(shuffle_rate * length)
    n_rep = math.ceil(replace_rate * length)
    if n_sh == 1:
        n_sh = 2 if length >= 2 else 0
    n_rep = min(n_rep, max(0, length - n_sh))
    if n_sh > length:
        n_sh = length if length >= 2 else 0
    return n_sh, n_rep


def _derangement(rng, n):
    while True:
        perm = rng.permutation(n)
        if n < 2 or not np.any(perm == np.arange(n)):
            return perm


def corrupt_sequence(seq, shuffle_rate, replace_rate, rng, replacement_pool):
    """Corrupt one sequence: derange a shuffled subset, replace a disjoint
    subset from `replacement_pool` (other users' items, anchor-excluded).

    Returns (corrupted sequence, labels) with labels 0/1/2 per position.
    """
    length = len(seq)
    if length < 2:
        raise ValueError("corruption needs sequences of length >= 2")
    n_sh, n_rep = corruption_counts(length, shuffle_rate, replace_rate)
    if not replacement_pool:
        n_rep = 0
    out = list(seq)
    labels = [LABEL_UNCHANGED] * length
    chosen = rng.choice(length, size=n_sh + n_rep, replace=False) if n_sh + n_rep else []
    sh_pos = np.sort(np.asarray(chosen[:n_sh], dtype=np.int64))
    rep_pos = np.asarray(chosen[n_sh:], dtype=np.int64)
    if n_sh:
        perm = _derangement(rng, n_sh)
        originals = [seq[p] for p in sh_pos]
        for slot, src in enumerate(perm):
            out[sh_pos[slot]] = originals[src]
            labels[sh_pos[slot]] = LABEL_SHUFFLED
    for p in rep_pos:
        out[p] = int(replacement_pool[rng.integers(len(replacement_pool))])
        labels[p] = LABEL_REPLACED
    return out, labels


def corrupt_batch(ctx, cfg):
    """Corrupt every sequence in the batch with the batch's seeded rng.

    Returns (corrupted row map (B, L) into the unique-item table,
    labels (B, L) with LABEL_PAD at padded slots).
    """
    batch = ctx.batch
    corr_rows = ctx.pos_to_row.copy()
    labels = np.full(batch.idx.shape, LABEL_PAD, dtype=np.int64)
    for u in range(ctx.B):
        length = int(batch.mask[u].sum())
        seq = [int(i) for i in batch.idx[u, :length]]
        own = set(seq)
        # pool sorted and rng keyed by the user's own sequence, so the
        # corruption is invariant to the ordering of users in the batch
        pool = sorted(int(it) for n, it in
                      enumerate(batch.idx[ctx.occ_u, ctx.occ_l])
                      if ctx.occ_u[n] != u and int(it) not in own)
        rng = np.random.default_rng(np.random.SeedSequence([batch.rng_seed] + seq))
        corrupted, labs = corrupt_sequence(
            seq, cfg.shuffle_rate, cfg.replace_rate, rng, pool)
        corr_rows[u, :length] = [ctx.row_of[c] for c in corrupted]
        labels[u, :length] = labs
    return corr_rows, labels


def nid_loss(corrupted_hiddens, labels, head, cfg=None):
    """3-way corruption classification; scores are ReLU(hW + b) passed
    through softmax, averaged over real positions."""
    b, length, d = corrupted_hiddens.shape
    real = labels != LABEL_PAD
    logits = ad.relu(ad.add(ad.matmul(corrupted_hiddens, head["W"]), head["b"]))
    flat = ad.reshape(logits, (b * length, -1))
    lse = ad.logsumexp(flat, axis=1)
    safe = np.where(real, labels, 0).reshape(-1)
    picked = ad.getitem(flat, (np.arange(b * length), safe))
    per_pos = ad.sub(lse, picked)
    w = real.reshape(-1).astype(np.float64)
    return ad.mul(ad.tsum(ad.mul(per_pos, w)), 1.0 / w.sum())


def _pool(hiddens, mask, how):
    mask3 = mask[:, :, None]
    if how == "mean":
        summed = ad.tsum(ad.mul(hiddens, mask3), axis=1)
        return ad.mul(summed, (1.0 / mask.sum(axis=1))[:, None])
    last = mask.sum(axis=1).astype(np.int64) - 1
    return ad.getitem(hiddens, (np.arange(mask.shape[0]), last))


def rcl_loss(original_hiddens, corrupted_hiddens, seq_mask, cfg):
    """Contrast each user's pooled sequence against its corrupted twin,
    with other users' corrupted sequences as negatives."""
    b = seq_mask.shape[0]
    if b < 1:
        raise ValueError("rcl needs at least one sequence")
    hu = _pool(original_hiddens, seq_mask, cfg.rcl_pooling)
    hc = _pool(corrupted_hiddens, seq_mask, cfg.rcl_pooling)
    scores = _scaled(ad.matmul(hu, ad.transpose(hc, (1, 0))), cfg.temperature)
    diag = ad.getitem(scores, (np.arange(b), np.arange(b)))
    lse = ad.logsumexp(scores, axis=1)
    return ad.tmean(ad.sub(lse, diag))


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

def total_loss(model, batch, cfg, rng=None):
    """Run the full pipeline on a batch and sum the enabled objectives.

    Returns (total Tensor, {objective name: float value}).
    """
    ctx = BatchContext(model, batch, rng)
    reps = ad.embedding(ctx.emb["e_cls"], ctx.pos_to_row)
    hiddens = model.encode_sequence(reps, batch.mask, rng)
    parts = {}
    terms = []
    if cfg.dap:
        parts["dap"] = dap_loss(ctx, hiddens, cfg)
    if cfg.contrastive is not None:
        parts[cfg.contrastive] = contrastive_loss(ctx, cfg.contrastive, cfg)
    if cfg.nid or cfg.rcl:
        corr_rows, labels = corrupt_batch(ctx, cfg)
        corr_reps = ad.embedding(ctx.emb["e_cls"], corr_rows)
        corr_hiddens = model.encode_sequence(corr_reps, batch.mask, rng)
        if cfg.nid:
            parts["nid"] = nid_loss(corr_hiddens, labels, model.groups["nid_head"], cfg)
        if cfg.rcl:
            parts["rcl"] = rcl_loss(hiddens, corr_hiddens, batch.mask, cfg)
    if not parts:
        raise ValueError("no objectives enabled")
    for name, tensor in parts.items():
        terms.append(ad.mul(tensor, cfg.weight(name)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, {name: t.item() for name, t in parts.items()}
