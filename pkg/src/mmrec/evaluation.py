"""Full-catalog leave-one-out ranking evaluation: HR@k / NDCG@k, plus the
cold-start variant over rare-item sub-sequences."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import transfer

DEFAULT_KS = (10, 20, 50)


@dataclass
class MetricsReport:
    ks: tuple
    hr: dict  # k -> percentage
    ndcg: dict  # k -> percentage
    count: int
    dataset: str = ""
    phase: str = ""

    def to_text(self):
        header = f"{'metric':<10}" + "".join(f"{'@' + str(k):>10}" for k in self.ks)
        hr_row = f"{'HR':<10}" + "".join(f"{self.hr[k]:>10.4f}" for k in self.ks)
        nd_row = f"{'NDCG':<10}" + "".join(f"{self.ndcg[k]:>10.4f}" for k in self.ks)
        tail = f"evaluated users: {self.count}  dataset: {self.dataset}  phase: {self.phase}"
        return "\n".join([header, hr_row, nd_row, tail])

    def to_json(self):
        return json.dumps({
            "ks": list(self.ks), "hr": {str(k): self.hr[k] for k in self.ks},
            "ndcg": {str(k): self.ndcg[k] for k in self.ks},
            "count": self.count, "dataset": self.dataset, "phase": self.phase,
        }, sort_keys=True)


def rank_of_target(scores, target_row):
    """1-based full-catalog rank; ties rank the target below its equals."""
    scores = np.asarray(scores)
    if not 0 <= target_row < len(scores):
        raise ValueError(f"target row {target_row} outside catalog of {len(scores)}")
    t = scores[target_row]
    greater = int((scores > t).sum())
    equal = int((scores == t).sum()) - 1  # excluding the target itself
    return 1 + greater + equal


def ranking_metrics(ranks, k):
    """(HR@k, NDCG@k) as fractions over the given 1-based ranks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        return 0.0, 0.0
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    hit = ranks <= k
    hr = float(hit.mean())
    ndcg = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return hr, ndcg


def _aggregate(ranks, ks, dataset, phase):
    hr, ndcg = {}, {}
    for k in ks:
        h, n = ranking_metrics(ranks, k)
        hr[k] = 100.0 * h
        ndcg[k] = 100.0 * n
    return MetricsReport(ks=tuple(ks), hr=hr, ndcg=ndcg, count=len(ranks),
                         dataset=dataset, phase=phase)


def _rank_pairs(model, pairs, items, L_max, ks, dataset, phase):
    if not pairs:
        return _aggregate([], ks, dataset, phase)
    index = transfer.build_item_index(model, items)
    prefixes = [p for p, _ in pairs]
    states = transfer.encode_prefixes(model, prefixes, items, index, L_max)
    scores = states @ index.reps.T  # (n_pairs, n_items)
    ranks = [rank_of_target(scores[i], index.row_of[t])
             for i, (_, t) in enumerate(pairs)]
    return _aggregate(ranks, ks, dataset, phase)


def evaluate(model, split, phase="test", ks=DEFAULT_KS, L_max=None, dataset=""):
    """Leave-one-out evaluation against the full catalog.

    phase "valid" scores the validation target given the training prefix;
    phase "test" appends the validation item to the prefix and scores the
    test target.
    """
    if phase not in ("valid", "test"):
        raise ValueError(f"unknown phase {phase!r}")
    L_max = L_max or model.cfg.L_max
    pairs = []
    for u, seq in enumerate(split.train):
        if phase == "valid":
            pairs.append((list(seq), split.valid[u]))
        else:
            pairs.append((list(seq) + [split.valid[u]], split.test[u]))
    return _rank_pairs(model, pairs, split.items, L_max, ks, dataset, phase)


def evaluate_train(model, split, ks=(10,), L_max=None):
    """HR/NDCG over all training-set transitions (overfit diagnostics)."""
    L_max = L_max or model.cfg.L_max
    pairs = []
    for seq in split.train:
        for pos in range(1, len(seq)):
            pairs.append((seq[:pos], seq[pos]))
    return _rank_pairs(model, pairs, split.items, L_max, ks, "", "train")


def evaluate_cold_start(model, split, threshold=10, ks=DEFAULT_KS, L_max=None,
                        dataset=""):
    """Evaluation restricted to sub-sequences ending at a cold item.

    An empty cold set yields an all-zero report with count 0.
    """
    L_max = L_max or model.cfg.L_max
    pairs = data_mod.cold_item_subsequences(split, threshold)
    return _rank_pairs(model, pairs, split.items, L_max, ks, dataset, "cold")
