"""Post-hoc attribute inference on frozen latent vectors."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import balance_classes
from .metrics import ConfusionCounts, accuracy, balanced_accuracy
from .model import UNKNOWN, ModelConfig
from .rng import stream
from .trainer import AdamState, adam_step, latent_means


class AttackError(ValueError):
    pass


@dataclass
class AttackerConfig:
    heads: int = 5
    hidden: Optional[tuple[int, ...]] = None   # defaults to one layer of latent width
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 256
    val_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("need at least one attacker head")
        if self.hidden is not None:
            self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttackerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class HeadResult:
    train_acc: float
    train_bacc: float
    test_acc: float
    test_bacc: float
    val_bacc: float
    epoch: int


@dataclass
class AttackReport:
    heads: list[HeadResult]
    reported: int
    test_pred: np.ndarray = field(repr=False)
    test_labels: np.ndarray = field(repr=False)
    head_params: dict = field(default=None, repr=False)
    n_layers: int = 2

    def predict(self, latents) -> np.ndarray:
        """Labels predicted by the reported head."""
        return _predict(self.head_params, np.asarray(latents, dtype=np.float64), self.n_layers)

    @property
    def bacc(self) -> float:
        return self.heads[self.reported].test_bacc

    @property
    def acc(self) -> float:
        return self.heads[self.reported].test_acc

    @property
    def correct(self) -> np.ndarray:
        return self.test_pred == self.test_labels

    def to_dict(self) -> dict:
        return {"reported_head": self.reported, "acc": self.acc, "bacc": self.bacc,
                "heads": [dataclasses.asdict(h) for h in self.heads]}


def extract_latents(params, cfg: ModelConfig, inputs) -> np.ndarray:
    """Deterministic ``mu`` for each input row. ``params`` is not modified."""
    return latent_means(params, inputs, cfg)


def _init_head(dims: Sequence[int], rng: np.random.Generator) -> dict:
    p = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        lim = np.sqrt(6.0 / (a + b))
        p[f"{i}.W"] = rng.uniform(-lim, lim, size=(a, b))
        p[f"{i}.b"] = np.zeros((1, b))
    return p


def _head_forward(p, x, n_layers: int):
    h = x
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, p[f"{i}.W"]), p[f"{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def _predict(p, x, n_layers) -> np.ndarray:
    return np.argmax(_head_forward(p, ad.constant(x), n_layers).value, axis=1)


def _bacc(y, pred, n_classes) -> float:
    counts = ConfusionCounts.from_labels(y, pred, n_classes)
    if np.any(counts.total == 0):
        return float("nan")
    return balanced_accuracy(counts)


def _stratified_holdout(y: np.ndarray, frac: float, rng, n_classes: int):
    val = []
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        n_val = int(round(frac * len(idx)))
        if frac > 0 and len(idx) >= 2:
            n_val = min(max(n_val, 1), len(idx) - 1)
        val.append(rng.permutation(idx)[:n_val])
    val = np.sort(np.concatenate(val))
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val


def _train_head(i: int, x_tr, y_tr, pool_idx, x_val, y_val, cfg: AttackerConfig, n_classes: int):
    d = x_tr.shape[1]
    hidden = cfg.hidden if cfg.hidden is not None else (d,)
    dims = [d, *hidden, n_classes]
    n_layers = len(dims) - 1
    params = _init_head(dims, stream(cfg.seed, "attack-init", i))
    state = AdamState()
    best, best_val, best_epoch = copy.deepcopy(params), -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        order = stream(cfg.seed, "attack-shuffle", i, epoch).permutation(pool_idx)
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            leaves = {k: ad.leaf(v) for k, v in params.items()}
            logits = _head_forward(leaves, ad.constant(x_tr[idx]), n_layers)
            oh = np.zeros((len(idx), n_classes))
            oh[np.arange(len(idx)), y_tr[idx]] = 1.0
            loss = ad.scale(ad.sum_all(ad.mul(ad.log_softmax_rows(logits), oh)), -1.0 / len(idx))
            ad.backward(loss)
            adam_step(params, {k: n.grad for k, n in leaves.items()}, state, cfg.lr)
        if len(y_val):
            v = _bacc(y_val, _predict(params, x_val, n_layers), n_classes)
        else:
            v = float("nan")
        if np.isnan(v) or v > best_val:
            best, best_val, best_epoch = copy.deepcopy(params), (v if not np.isnan(v) else best_val), epoch
    return best, best_val, best_epoch, n_layers


def attack(train_latents, train_labels, test_latents, test_labels, cfg: AttackerConfig,
           n_classes: int = 2) -> AttackReport:
    """Train ``cfg.heads`` fresh classifiers and report the strongest on test.

    Each head keeps the epoch with the best balanced accuracy on a held-out
    tenth of the training pool; the pool itself is class-balanced by
    upsampling. Unknown labels are dropped on both sides.
    """
    x_tr = np.asarray(train_latents, dtype=np.float64)
    y_tr = np.asarray(train_labels, dtype=np.int64)
    x_te = np.asarray(test_latents, dtype=np.float64)
    y_te = np.asarray(test_labels, dtype=np.int64)
    keep = y_tr != UNKNOWN
    x_tr, y_tr = x_tr[keep], y_tr[keep]
    keep = y_te != UNKNOWN
    x_te, y_te = x_te[keep], y_te[keep]
    if len(np.unique(y_tr)) < 2:
        raise AttackError("attacker training labels contain fewer than two classes")
    present = np.unique(y_tr)
    if len(present) < n_classes:
        raise AttackError(f"attacker training labels miss classes: {sorted(set(range(n_classes)) - set(present))}")

    tr_idx, val_idx = _stratified_holdout(y_tr, cfg.val_frac, stream(cfg.seed, "attack-val"), n_classes)
    pool = balance_classes(tr_idx, y_tr, stream(cfg.seed, "attack-upsample"), n_classes)

    heads, preds, models = [], [], []
    for i in range(cfg.heads):
        p, val_bacc, epoch, n_layers = _train_head(i, x_tr, y_tr, pool, x_tr[val_idx], y_tr[val_idx],
                                                   cfg, n_classes)
        tr_pred = _predict(p, x_tr[tr_idx], n_layers)
        te_pred = _predict(p, x_te, n_layers) if len(y_te) else np.zeros(0, dtype=np.int64)
        heads.append(HeadResult(
            accuracy(y_tr[tr_idx], tr_pred), _bacc(y_tr[tr_idx], tr_pred, n_classes),
            accuracy(y_te, te_pred) if len(y_te) else float("nan"), _bacc(y_te, te_pred, n_classes),
            float(val_bacc), epoch))
        preds.append(te_pred)
        models.append((p, n_layers))
    test_baccs = np.array([h.test_bacc for h in heads])
    reported = int(np.nanargmax(test_baccs)) if np.any(~np.isnan(test_baccs)) else 0
    return AttackReport(heads, reported, preds[reported], y_te, *models[reported])


def write_attack_report(path, report: AttackReport, meta: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = dict(meta or {})
    d.update(report.to_dict())
    path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def write_latent_export(path, user_ids: Sequence[str], latents: np.ndarray, labels, preds,
                        classes: Sequence[str]) -> None:
    """One row per user: id, true label, predicted label, then the latent vector."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = latents.shape[1]
    lines = ["\t".join(["user", "label", "predicted", *(f"mu{j}" for j in range(d))])]
    for u, z, y, p in zip(user_ids, latents, labels, preds):
        name = classes[y] if y != UNKNOWN else "unknown"
        lines.append("\t".join([u, name, classes[p], *(repr(float(v)) for v in z)]))
    path.write_text("\n".join(lines) + "\n")
