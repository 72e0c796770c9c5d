"""Dataset ingestion, filtering, leave-one-out splitting, batching, and the
synthetic multi-modal generator with a planted style-transition chain."""

import os
from dataclasses import dataclass, field

import numpy as np

PAD_TOKEN = 0  # reserved text token id
PAD_ITEM = -1  # padding value in batched index arrays


@dataclass
class ItemRecord:
    catalog_index: int
    tokens: list  # token ids, 1 <= len <= p_max, no PAD_TOKEN entries
    patches: np.ndarray  # (q, patch_dim)


@dataclass
class Dataset:
    items: dict  # catalog_index -> ItemRecord
    users: list  # list of interaction sequences (catalog indices, in order)
    styles: dict = None  # synthetic only: catalog_index -> latent style
    types: dict = None  # synthetic only: catalog_index -> (style, slot)

    @property
    def q(self):
        return next(iter(self.items.values())).patches.shape[0]

    @property
    def patch_dim(self):
        return next(iter(self.items.values())).patches.shape[1]

    def n_actions(self):
        return sum(len(s) for s in self.users)


@dataclass
class SplitDataset:
    items: dict
    train: list  # per-user training prefix
    valid: list  # per-user validation target (second-to-last item)
    test: list  # per-user test target (last item)


@dataclass
class Batch:
    idx: np.ndarray  # (B, L) catalog indices, PAD_ITEM at padded slots
    mask: np.ndarray  # (B, L) float 0/1
    items: dict  # catalog_index -> ItemRecord (shared reference)
    rng_seed: int  # drives corruption for this batch

    @property
    def size(self):
        return self.idx.shape[0]


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def save_dataset(dataset, items_path, interactions_path):
    q, pd = dataset.q, dataset.patch_dim
    with open(items_path, "w") as f:
        f.write(f"#meta q={q} patch_dim={pd}\n")
        for idx in sorted(dataset.items):
            rec = dataset.items[idx]
            toks = " ".join(str(t) for t in rec.tokens)
            vals = " ".join(repr(float(v)) for v in rec.patches.reshape(-1))
            f.write(f"{idx}\t{toks}\t{vals}\n")
    with open(interactions_path, "w") as f:
        for uid, seq in enumerate(dataset.users):
            f.write(f"{uid}\t{' '.join(str(i) for i in seq)}\n")


def load_dataset(items_path, interactions_path):
    items = {}
    q = pd = None
    with open(items_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#meta"):
                meta = dict(kv.split("=") for kv in line.split()[1:])
                q, pd = int(meta["q"]), int(meta["patch_dim"])
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{items_path}:{lineno}: expected 3 tab-separated fields")
            try:
                idx = int(parts[0])
                tokens = [int(t) for t in parts[1].split()]
                vals = np.array([float(v) for v in parts[2].split()])
            except ValueError as e:
                raise DataError(f"{items_path}:{lineno}: {e}") from None
            if q is None:
                raise DataError(f"{items_path}: missing #meta header")
            if vals.size != q * pd:
                raise DataError(
                    f"{items_path}:{lineno}: expected {q * pd} patch values, got {vals.size}"
                )
            if idx in items:
                raise DataError(f"{items_path}:{lineno}: duplicate catalog index {idx}")
            if not tokens:
                raise DataError(f"{items_path}:{lineno}: item has no tokens")
            items[idx] = ItemRecord(idx, tokens, vals.reshape(q, pd))
    users = []
    with open(interactions_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(
                    f"{interactions_path}:{lineno}: expected 2 tab-separated fields"
                )
            try:
                seq = [int(i) for i in parts[1].split()]
            except ValueError as e:
                raise DataError(f"{interactions_path}:{lineno}: {e}") from None
            for i in seq:
                if i not in items:
                    raise DataError(
                        f"{interactions_path}:{lineno}: unknown catalog index {i}"
                    )
            users.append(seq)
    return Dataset(items=items, users=users)


# ---------------------------------------------------------------------------
# filtering and splitting
# ---------------------------------------------------------------------------

def filter_and_split(dataset, min_interactions=5):
    """Iteratively drop users/items below the interaction threshold, then
    assign last item -> test, second-to-last -> validation per user."""
    users = [list(s) for s in dataset.users]
    while True:
        counts = {}
        for seq in users:
            for i in seq:
                counts[i] = counts.get(i, 0) + 1
        bad_items = {i for i, c in counts.items() if c < min_interactions}
        new_users = []
        for seq in users:
            seq = [i for i in seq if i not in bad_items]
            if len(seq) >= min_interactions:
                new_users.append(seq)
        stable = not bad_items and len(new_users) == len(users)
        users = new_users
        if stable:
            break
    kept = {i for seq in users for i in seq}
    items = {i: dataset.items[i] for i in kept}
    train, valid, test = [], [], []
    for seq in users:
        if len(seq) < 3:
            continue  # cannot produce train + valid + test
        train.append(seq[:-2])
        valid.append(seq[-2])
        test.append(seq[-1])
    return SplitDataset(items=items, train=train, valid=valid, test=test)


def make_batches(split, B, L_max, seed, allow_single=False):
    """Shuffle users by seed, truncate to the last L_max items, right-pad,
    and group into batches of at most B users."""
    if B < 2 and not allow_single:
        raise DataError("batch size < 2 leaves contrastive negative sets empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(split.train))
    batches = []
    for bi, start in enumerate(range(0, len(order), B)):
        chunk = [split.train[u] for u in order[start:start + B]]
        chunk = [seq[-L_max:] for seq in chunk]
        width = max(len(s) for s in chunk)
        idx = np.full((len(chunk), width), PAD_ITEM, dtype=np.int64)
        mask = np.zeros((len(chunk), width))
        for r, seq in enumerate(chunk):
            idx[r, : len(seq)] = seq
            mask[r, : len(seq)] = 1.0
        rng_seed = int(np.random.SeedSequence([seed, bi]).generate_state(1)[0])
        batches.append(Batch(idx=idx, mask=mask, items=split.items, rng_seed=rng_seed))
    return batches


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_users: int = 200
    n_items: int = 50
    n_users_target: int = None  # defaults to n_users
    L_min: int = 8
    L_max: int = 16
    vocab_size: int = 100
    p_min: int = 4
    p_max: int = 8
    q: int = 4
    patch_dim: int = 6
    n_latent_styles: int = 4
    n_slots: int = 4  # content sub-clusters per style, shared across datasets
    transition_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_latent_styles < 2:
            raise DataError("n_latent_styles must be >= 2")
        if self.n_slots < 1:
            raise DataError("n_slots must be >= 1")
        if not 0.0 <= self.transition_noise <= 1.0:
            raise DataError("transition_noise must lie in [0, 1]")
        if self.n_users_target is None:
            self.n_users_target = self.n_users


def planted_transition_matrix(n_styles):
    """The planted style chain: deterministic cycle s -> (s+1) mod S."""
    m = np.zeros((n_styles, n_styles))
    for s in range(n_styles):
        m[s, (s + 1) % n_styles] = 1.0
    return m


def _effective_slots(cfg):
    """Slots per style, bounded so every (style, slot) type is populated and
    owns at least one vocabulary id."""
    style_width = (cfg.vocab_size - 1) // cfg.n_latent_styles  # id 0 is pad
    return max(1, min(cfg.n_slots, style_width,
                      cfg.n_items // cfg.n_latent_styles))


def _type_vocab_band(cfg, style, slot, n_slots):
    usable = cfg.vocab_size - 1  # id 0 reserved for padding
    style_width = usable // cfg.n_latent_styles
    slot_width = style_width // n_slots
    lo = 1 + style * style_width + slot * slot_width
    return lo, lo + slot_width


def _generate_one(cfg, rng, offset, n_users, patch_means, slot_perm):
    n_slots = len(slot_perm)
    s_of = {}
    items = {}
    by_type = {(s, j): [] for s in range(cfg.n_latent_styles)
               for j in range(n_slots)}
    type_of = {}
    for local in range(cfg.n_items):
        idx = offset + local
        style = local % cfg.n_latent_styles
        slot = (local // cfg.n_latent_styles) % n_slots
        s_of[idx] = style
        type_of[idx] = (style, slot)
        by_type[style, slot].append(idx)
        lo, hi = _type_vocab_band(cfg, style, slot, n_slots)
        n_tok = int(rng.integers(cfg.p_min, cfg.p_max + 1))
        tokens = rng.integers(lo, hi, size=n_tok).tolist()
        patches = patch_means[style, slot] + 0.25 * rng.normal(size=(cfg.q, cfg.patch_dim))
        items[idx] = ItemRecord(idx, tokens, patches)
    all_idx = sorted(items)

    # the successor type (style+1, slot_perm[slot]) is a shared function of
    # the current item's content type, so the content-level transition
    # structure is identical across datasets; the item within the successor
    # type is drawn uniformly at every step
    def successor_type(idx):
        style, slot = type_of[idx]
        return ((style + 1) % cfg.n_latent_styles, int(slot_perm[slot]))

    users = []
    for _ in range(n_users):
        length = int(rng.integers(cfg.L_min, cfg.L_max + 1))
        seq = [int(rng.choice(all_idx))]
        for _ in range(length - 1):
            if rng.random() < cfg.transition_noise:
                seq.append(int(rng.choice(all_idx)))
            else:
                seq.append(int(rng.choice(by_type[successor_type(seq[-1])])))
        users.append(seq)
    return Dataset(items=items, users=users, styles=s_of, types=type_of)


def generate_synthetic(cfg):
    """Build (source, target) datasets with disjoint item sets.

    Content structure (per-type vocabulary bands and patch-cluster means),
    the style chain, and the slot-level successor permutation are shared
    between the two, so knowledge transfers only through item content.
    """
    n_slots = _effective_slots(cfg)
    style_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    patch_means = style_rng.normal(
        0.0, 1.0, size=(cfg.n_latent_styles, n_slots, cfg.q, cfg.patch_dim))
    slot_perm = style_rng.permutation(n_slots)
    src_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    tgt_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    source = _generate_one(cfg, src_rng, 0, cfg.n_users, patch_means, slot_perm)
    target = _generate_one(cfg, tgt_rng, cfg.n_items, cfg.n_users_target,
                           patch_means, slot_perm)
    return source, target


# ---------------------------------------------------------------------------
# cold-start extraction and stats
# ---------------------------------------------------------------------------

def train_item_counts(split):
    counts = {i: 0 for i in split.items}
    for seq in split.train:
        for i in seq:
            counts[i] += 1
    return counts


def cold_item_subsequences(split, threshold=10):
    """All (prefix, cold target) pairs over the full user sequences.

    An item is cold when it occurs strictly fewer than `threshold` times in
    the training sequences. Every occurrence at position >= 2 of a user's
    full (train + valid + test) sequence yields one pair.
    """
    counts = train_item_counts(split)
    pairs = []
    for u, seq in enumerate(split.train):
        full = list(seq) + [split.valid[u], split.test[u]]
        for pos in range(1, len(full)):
            if counts.get(full[pos], 0) < threshold:
                pairs.append((full[:pos], full[pos]))
    return pairs


def stats_report(dataset, name="dataset"):
    n_users = len(dataset.users)
    n_items = len(dataset.items)
    n_actions = dataset.n_actions()
    avg_len = n_actions / n_users if n_users else 0.0
    sparsity = 1.0 - n_actions / (n_users * n_items) if n_users and n_items else 0.0
    lines = [
        f"{'dataset':<12}{'#users':>10}{'#items':>10}{'#actions':>10}"
        f"{'avg.length':>12}{'sparsity':>10}",
        f"{name:<12}{n_users:>10}{n_items:>10}{n_actions:>10}"
        f"{avg_len:>12.2f}{sparsity * 100:>9.2f}%",
    ]
    return "\n".join(lines)
