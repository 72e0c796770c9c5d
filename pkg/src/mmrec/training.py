"""Optimizer and the pre-training / fine-tuning loops with early stopping."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import evaluation
from . import objectives
from .objectives import ObjectiveConfig


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 500
    patience: int = 10
    B: int = 16
    L_max: int = 20
    seed: int = 0
    grad_clip: float = 0.0  # global-norm clip, 0 disables
    trainable_top_blocks: object = "all"


class NonFiniteGradient(RuntimeError):
    pass


class AdamW:
    """Decoupled weight decay: p <- p - lr*(m_hat/(sqrt(v_hat)+eps)) - lr*wd*p."""

    def __init__(self, params, cfg):
        self.params = list(params)  # [(name, Tensor)]
        self.cfg = cfg
        self.t = 0
        self.state = {n: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for n, p in self.params}

    def step(self):
        c = self.cfg
        grads = []
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {name}")
            grads.append(g)
        if c.grad_clip > 0.0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > c.grad_clip:
                grads = [g * (c.grad_clip / total) for g in grads]
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for (name, p), g in zip(self.params, grads):
            m, v = self.state[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            p.data -= c.learning_rate * update
            p.data -= c.learning_rate * c.weight_decay * p.data


def should_stop(history, patience):
    """True iff the best validation value is more than `patience` epochs old."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not history:
        raise ValueError("history must be non-empty")
    best = int(np.argmax(history))
    return (len(history) - 1 - best) >= patience


def _epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _validation_hr(model, split, tcfg):
    report = evaluation.evaluate(model, split, phase="valid",
                                 ks=(10,), L_max=tcfg.L_max)
    return report.hr[10] / 100.0, report.ndcg[10] / 100.0


def _run_training(model, split, tcfg, ocfg, log_label):
    opt = AdamW(model.trainable_parameters(), tcfg)
    log = []
    t0 = time.perf_counter()
    hr0, ndcg0 = _validation_hr(model, split, tcfg)
    history = [hr0]
    best = model.snapshot()
    log.append({"label": log_label, "epoch": 0, "losses": {},
                "val_hr10": hr0, "val_ndcg10": ndcg0,
                "seconds": time.perf_counter() - t0})
    for epoch in range(1, tcfg.max_epochs + 1):
        batches = data_mod.make_batches(split, tcfg.B, tcfg.L_max,
                                        _epoch_seed(tcfg.seed, epoch))
        sums, n = {}, 0
        for batch in batches:
            model.zero_grad()
            loss, parts = objectives.total_loss(model, batch, ocfg)
            loss.backward()
            opt.step()
            model.version += 1
            for k, val in parts.items():
                sums[k] = sums.get(k, 0.0) + val
            n += 1
        hr, ndcg = _validation_hr(model, split, tcfg)
        history.append(hr)
        # argmax keeps the first best epoch; only a strict improvement re-snapshots
        if int(np.argmax(history)) == len(history) - 1:
            best = model.snapshot()
        log.append({"label": log_label, "epoch": epoch,
                    "losses": {k: v / n for k, v in sums.items()},
                    "val_hr10": hr, "val_ndcg10": ndcg,
                    "seconds": time.perf_counter() - t0})
        if should_stop(history, tcfg.patience):
            break
    model.load_snapshot(best)
    return log


def pretrain(model, source_split, tcfg, ocfg=None):
    """Multi-task pre-training; returns the per-epoch log. The model ends
    at its best-validation snapshot."""
    ocfg = ocfg or ObjectiveConfig()
    return _run_training(model, source_split, tcfg, ocfg, "pretrain")


def finetune(model, target_split, tcfg):
    """Fine-tune with the next-item objective only (single-task)."""
    if tcfg.trainable_top_blocks != "all":
        model.set_trainable_top_blocks(tcfg.trainable_top_blocks)
    return _run_training(model, target_split, tcfg, objectives.dap_only(), "finetune")
