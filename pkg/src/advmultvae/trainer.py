"""Mini-batch Adam training with model selection and a grid runner."""

from __future__ import annotations

import copy
import dataclasses
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import FoldSplit, InteractionMatrix
from .metrics import ConfusionCounts, balanced_accuracy, ndcg_at_k, recall_at_k
from .model import UNKNOWN, ModelConfig, as_leaves, forward, init_params, top_k, total_loss
from .rng import stream

log = logging.getLogger(__name__)

SELECTION_RULES = ("best-ndcg", "last-epoch", "min-adv-bacc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    beta_warmup_steps: int = 0
    validate_every: int = 1
    selection: str = "best-ndcg"
    k: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr >= 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and lr >= 0")
        if self.selection not in SELECTION_RULES:
            raise ValueError(f"unknown selection rule {self.selection!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# evaluation


def latent_means(params, x, cfg: ModelConfig, batch: int = 1000) -> np.ndarray:
    out = []
    for s in range(0, x.shape[0], batch):
        xb = x[s:s + batch]
        xb = xb.toarray() if hasattr(xb, "toarray") else np.asarray(xb, dtype=np.float64)
        out.append(forward(params, xb, cfg, training=False).mu.value)
    return np.concatenate(out) if out else np.zeros((0, cfg.latent))


def evaluate_ranking(params, cfg: ModelConfig, inputs, targets, k: int = 10,
                     batch: int = 1000) -> dict[str, np.ndarray]:
    """Per-user NDCG@k and recall@k; users without targets get NaN."""
    n = inputs.shape[0]
    ndcg = np.full(n, np.nan)
    recall = np.full(n, np.nan)
    for s in range(0, n, batch):
        xb = inputs[s:s + batch].toarray()
        scores = forward(params, xb, cfg, training=False).logits.value
        ranked = top_k(scores, k, xb)
        for j, r in enumerate(ranked):
            u = s + j
            tg = targets.indices[targets.indptr[u]:targets.indptr[u + 1]]
            if len(tg):
                ndcg[u] = ndcg_at_k(r, tg, k)
                recall[u] = recall_at_k(r, tg, k)
    return {"ndcg": ndcg, "recall": recall}


def adversary_predictions(params, cfg: ModelConfig, inputs) -> np.ndarray:
    preds = []
    for s in range(0, inputs.shape[0], 1000):
        xb = inputs[s:s + 1000].toarray()
        preds.append(np.argmax(forward(params, xb, cfg, training=False).adv_logits.value, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def adversary_bacc(params, cfg: ModelConfig, inputs, labels: np.ndarray) -> float:
    """Balanced accuracy of the jointly trained head on deterministic latents."""
    known = labels != UNKNOWN
    if not cfg.adversary or not known.any():
        return math.nan
    preds = adversary_predictions(params, cfg, inputs[np.flatnonzero(known)])
    counts = ConfusionCounts.from_labels(labels[known], preds, cfg.n_classes)
    if np.any(counts.total == 0):
        return math.nan
    return balanced_accuracy(counts)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    loss: float
    mult: float
    kl: float
    adv: float
    val_ndcg: float = math.nan
    val_recall: float = math.nan
    val_adv_bacc: float = math.nan


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    selected: dict[str, int] = field(default_factory=dict)
    wall_time: float = 0.0

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.epochs])


def select_epoch(rule: str, log_: TrainLog) -> int:
    """Epoch chosen by ``rule``; ties go earliest for NDCG, latest for BAcc."""
    epochs = log_.series("epoch").astype(int)
    if rule == "last-epoch":
        return int(epochs[-1])
    if rule == "best-ndcg":
        vals = log_.series("val_ndcg")
        if np.all(np.isnan(vals)):
            return int(epochs[-1])
        return int(epochs[int(np.nanargmax(vals))])
    if rule == "min-adv-bacc":
        vals = log_.series("val_adv_bacc")
        ok = ~np.isnan(vals)
        if not ok.any():
            return int(epochs[-1])
        best = np.min(vals[ok])
        return int(epochs[np.flatnonzero(ok & (vals == best))[-1]])
    raise ValueError(f"unknown selection rule {rule!r}")


@dataclass
class TrainResult:
    checkpoints: dict[str, dict]   # selection rule -> parameters
    log: TrainLog
    rule: str

    @property
    def params(self) -> dict:
        return self.checkpoints[self.rule]

    @property
    def selected_epoch(self) -> int:
        return self.log.selected[self.rule]


def _better(rule: str, value: float, best: float) -> bool:
    if math.isnan(value):
        return False
    if math.isnan(best):
        return True
    if rule == "best-ndcg":
        return value > best
    return value <= best  # min-adv-bacc: latest epoch wins ties


def train(model_cfg: ModelConfig, matrix: InteractionMatrix, fold: FoldSplit,
          train_cfg: TrainConfig, extra_rules: Sequence[str] = (),
          init: Optional[dict] = None) -> TrainResult:
    """Train on ``fold.train_users`` and keep a checkpoint per selection rule."""
    rules = list(dict.fromkeys([train_cfg.selection, *extra_rules]))
    if "min-adv-bacc" in rules and not model_cfg.adversary:
        raise ValueError("min-adv-bacc selection needs a model with an adversarial head")
    t0 = time.perf_counter()
    seed = train_cfg.seed
    params = copy.deepcopy(init) if init is not None else init_params(model_cfg, seed)
    state = AdamState()
    tlog = TrainLog()
    best = {r: math.nan for r in rules}
    keep: dict[str, dict] = {}
    X = matrix.X
    labels = matrix.labels
    val_users, val_in, _ = fold.eval_split("val")
    val_labels = labels[val_users]
    step = 0

    for epoch in range(1, train_cfg.epochs + 1):
        order = stream(seed, "shuffle", epoch).permutation(len(fold.train_users))
        users = fold.train_users[order]
        sums = np.zeros(4)
        n_batches = 0
        for b, s in enumerate(range(0, len(users), train_cfg.batch_size)):
            ub = users[s:s + train_cfg.batch_size]
            xb = X[ub].toarray()
            beta = model_cfg.beta
            if train_cfg.beta_warmup_steps:
                beta *= min(1.0, (step + 1) / train_cfg.beta_warmup_steps)
            leaves = as_leaves(params)
            terms = total_loss(leaves, xb, labels[ub], model_cfg, training=True,
                               rng=stream(seed, "batch", epoch, b), beta=beta)
            total = float(terms.total.value)
            if not math.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b}: "
                    f"mult={terms.mult} kl={terms.kl} adv={terms.adv}")
            ad.backward(terms.total)
            grads = {k: n.grad for k, n in leaves.items()}
            adam_step(params, grads, state, train_cfg.lr, train_cfg.adam_beta1,
                      train_cfg.adam_beta2, train_cfg.adam_eps, train_cfg.weight_decay)
            sums += (total, terms.mult, terms.kl, terms.adv)
            n_batches += 1
            step += 1
        means = sums / max(n_batches, 1)
        entry = EpochLog(epoch, *map(float, means))
        if epoch % train_cfg.validate_every == 0 or epoch == train_cfg.epochs:
            if len(val_users):
                ev = evaluate_ranking(params, model_cfg, *fold.eval_split("val")[1:], k=train_cfg.k)
                entry.val_ndcg = float(np.nanmean(ev["ndcg"])) if np.any(~np.isnan(ev["ndcg"])) else math.nan
                entry.val_recall = float(np.nanmean(ev["recall"])) if np.any(~np.isnan(ev["recall"])) else math.nan
                if model_cfg.adversary:
                    entry.val_adv_bacc = adversary_bacc(params, model_cfg, val_in, val_labels)
        tlog.epochs.append(entry)
        log.debug("epoch %d loss %.4f ndcg %.4f adv-bacc %.4f", epoch, entry.loss,
                  entry.val_ndcg, entry.val_adv_bacc)
        for r in rules:
            if r == "last-epoch":
                continue
            value = entry.val_ndcg if r == "best-ndcg" else entry.val_adv_bacc
            if _better(r, value, best[r]):
                best[r] = value
                keep[r] = copy.deepcopy(params)

    for r in rules:
        tlog.selected[r] = select_epoch(r, tlog)
        if r == "last-epoch" or r not in keep:
            keep[r] = params
    tlog.wall_time = time.perf_counter() - t0
    return TrainResult(keep, tlog, train_cfg.selection)


# ---------------------------------------------------------------------------
# log persistence

LOG_FIELDS = [f.name for f in dataclasses.fields(EpochLog)]


def write_train_log(path, tlog: TrainLog) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# selected {r}={e}" for r, e in sorted(tlog.selected.items())]
    lines.append("\t".join(LOG_FIELDS))
    for e in tlog.epochs:
        lines.append("\t".join(str(getattr(e, f)) if f == "epoch" else repr(float(getattr(e, f)))
                               for f in LOG_FIELDS))
    path.write_text("\n".join(lines) + "\n")


def read_train_log(path) -> TrainLog:
    tlog = TrainLog()
    header = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("# selected "):
            r, _, e = line[len("# selected "):].partition("=")
            tlog.selected[r] = int(e)
        elif header is None:
            header = line.split("\t")
        elif line:
            vals = dict(zip(header, line.split("\t")))
            tlog.epochs.append(EpochLog(int(vals["epoch"]), *(float(vals[f]) for f in LOG_FIELDS[1:])))
    return tlog


# ---------------------------------------------------------------------------
# grid search


def apply_overrides(model_cfg: ModelConfig, train_cfg: TrainConfig, point: Mapping):
    m_names = {f.name for f in dataclasses.fields(ModelConfig)}
    t_names = {f.name for f in dataclasses.fields(TrainConfig)}
    m_over = {k: v for k, v in point.items() if k in m_names}
    t_over = {k: v for k, v in point.items() if k in t_names}
    unknown = set(point) - m_names - t_names
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    return dataclasses.replace(model_cfg, **m_over), dataclasses.replace(train_cfg, **t_over)


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def _grid_task(args):
    model_cfg, train_cfg, matrix, fold, extra_rules = args
    return train(model_cfg, matrix, fold, train_cfg, extra_rules)


def pool_map(fn, tasks: list, workers: int = 1) -> list:
    """``map`` over a bounded process pool, or inline when ``workers <= 1``."""
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


@dataclass
class FamilyResult:
    point: dict
    score: float
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    runs: list[TrainResult]               # winner, one per fold
    test: list[dict]                      # winner test means per fold
    logs: dict = field(default_factory=dict)   # (point index, fold) -> TrainLog
    scores: list[float] = field(default_factory=list)


def grid_run(families: Mapping[str, tuple[ModelConfig, TrainConfig]], grid: Mapping[str, Sequence],
             matrix: InteractionMatrix, folds: Sequence[FoldSplit], workers: int = 1,
             extra_rules: Sequence[str] = ()) -> dict[str, FamilyResult]:
    """Train every grid point on every fold; pick each family's winner by
    mean validation NDCG at its selected epoch and score it on test."""
    points = expand_grid(grid) if grid else [{}]
    if not points:
        raise ValueError("empty grid")
    out = {}
    for name, (mcfg, tcfg) in families.items():
        tasks, index = [], []
        for pi, point in enumerate(points):
            m, t = apply_overrides(mcfg, tcfg, point)
            for fold in folds:
                tasks.append((m, t, matrix, fold, tuple(extra_rules)))
                index.append((pi, fold.fold))
        by_key = dict(zip(index, pool_map(_grid_task, tasks, workers)))
        scores = []
        for pi in range(len(points)):
            vals = []
            for fold in folds:
                r = by_key[(pi, fold.fold)]
                vals.append(r.log.epochs[r.selected_epoch - 1].val_ndcg)
            scores.append(float(np.mean(vals)))
        win = int(np.argmax(scores))
        m, t = apply_overrides(mcfg, tcfg, points[win])
        runs, test = [], []
        for fold in folds:
            r = by_key[(win, fold.fold)]
            ev = evaluate_ranking(r.params, m, fold.test_input, fold.test_target, t.k)
            test.append({"ndcg": float(np.nanmean(ev["ndcg"])), "recall": float(np.nanmean(ev["recall"]))})
            runs.append(r)
        out[name] = FamilyResult(points[win], scores[win], m, t, runs, test,
                                 {k: r.log for k, r in by_key.items()}, scores)
    return out
