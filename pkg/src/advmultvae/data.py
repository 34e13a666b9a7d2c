"""Ingestion, filtering and user-split cross-validation folds."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .model import UNKNOWN
from .rng import stream


class ParseError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class DegenerateDatasetError(ValueError):
    pass


class SplitError(ValueError):
    pass


class RawInteraction(NamedTuple):
    user: str
    item: str
    weight: float
    timestamp: Optional[int] = None


@dataclass(frozen=True)
class FormatSpec:
    """Column layout of the interaction file and the user attribute file."""

    delimiter: str = "::"
    user_col: int = 0
    item_col: int = 1
    weight_col: Optional[int] = 2
    time_col: Optional[int] = 3
    header: bool = False
    user_delimiter: str = "::"
    user_id_col: int = 0
    label_col: int = 1
    user_header: bool = False


FORMATS = {
    "ml-1m": FormatSpec(),
    "lfm": FormatSpec(delimiter="\t", weight_col=2, time_col=None, header=True,
                      user_delimiter="\t", user_id_col=0, label_col=1, user_header=True),
}


def _split(line: str, delim: str) -> list[str]:
    return line.rstrip("\r\n").split(delim)


def read_interactions(path, fmt: FormatSpec) -> list[RawInteraction]:
    out = []
    need = max(c for c in (fmt.user_col, fmt.item_col, fmt.weight_col, fmt.time_col) if c is not None)
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            if lineno == 1 and fmt.header:
                continue
            if not line.strip():
                continue
            cols = _split(line, fmt.delimiter)
            if len(cols) <= need:
                raise ParseError(f"{path}:{lineno}: expected at least {need + 1} columns, got {len(cols)}")
            try:
                weight = float(cols[fmt.weight_col]) if fmt.weight_col is not None else 1.0
                ts = int(cols[fmt.time_col]) if fmt.time_col is not None else None
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not weight >= 0:
                raise ParseError(f"{path}:{lineno}: negative weight {weight}")
            out.append(RawInteraction(cols[fmt.user_col].strip(), cols[fmt.item_col].strip(), weight, ts))
    return out


def read_user_labels(path, fmt: FormatSpec) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"user attribute file not found: {path}")
    labels = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            if lineno == 1 and fmt.user_header:
                continue
            if not line.strip():
                continue
            cols = _split(line, fmt.user_delimiter)
            if len(cols) <= max(fmt.user_id_col, fmt.label_col):
                raise ParseError(f"{path}:{lineno}: too few columns")
            labels[cols[fmt.user_id_col].strip()] = cols[fmt.label_col].strip()
    return labels


def ingest(path, fmt: FormatSpec, users_path=None) -> tuple[list[RawInteraction], dict[str, str]]:
    """Read interactions plus the per-user protected attribute."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"interaction file not found: {path}")
    if users_path is None:
        raise ConfigurationError("a user attribute file is required")
    return read_interactions(path, fmt), read_user_labels(users_path, fmt)


# ---------------------------------------------------------------------------


def _id_key(s: str):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass
class InteractionMatrix:
    user_ids: list[str]
    item_ids: list[str]
    X: sp.csr_matrix              # binary users x items
    labels: np.ndarray            # class index per user, UNKNOWN if missing
    classes: tuple[str, ...] = ("M", "F")

    @property
    def n_users(self) -> int:
        return self.X.shape[0]

    @property
    def n_items(self) -> int:
        return self.X.shape[1]

    @property
    def n_interactions(self) -> int:
        return int(self.X.nnz)

    def degrees(self) -> tuple[np.ndarray, np.ndarray]:
        return np.diff(self.X.indptr), np.bincount(self.X.indices, minlength=self.n_items)

    def to_interactions(self) -> list[RawInteraction]:
        coo = self.X.tocoo()
        return [RawInteraction(self.user_ids[u], self.item_ids[i], 1.0)
                for u, i in zip(coo.row, coo.col)]

    def label_names(self) -> dict[str, str]:
        return {u: self.classes[c] for u, c in zip(self.user_ids, self.labels) if c != UNKNOWN}

    def stats(self) -> dict:
        deg, _ = self.degrees()
        rows = {"All": (self.n_users, self.n_interactions)}
        for c, name in enumerate(self.classes):
            m = self.labels == c
            rows[name] = (int(m.sum()), int(deg[m].sum()))
        unknown = self.labels == UNKNOWN
        if unknown.any():
            rows["unknown"] = (int(unknown.sum()), int(deg[unknown].sum()))
        return {"items": self.n_items, "rows": rows}

    def __eq__(self, other):
        if not isinstance(other, InteractionMatrix):
            return NotImplemented
        return (self.user_ids == other.user_ids and self.item_ids == other.item_ids
                and self.classes == other.classes and np.array_equal(self.labels, other.labels)
                and self.X.shape == other.X.shape and (self.X != other.X).nnz == 0)


def format_stats(m: InteractionMatrix, name: str = "dataset") -> str:
    s = m.stats()
    lines = [f"{'Dataset':<12}{'Users':<10}{'':>9}{'Items':>9}{'Interactions':>14}"]
    for i, (label, (users, inter)) in enumerate(s["rows"].items()):
        items = f"{s['items']:,}" if i == 0 else ""
        lines.append(f"{name if i == 0 else '':<12}{label:<10}{users:>9,}{items:>9}{inter:>14,}")
    return "\n".join(lines)


def preprocess(interactions: Iterable[RawInteraction], labels: dict[str, str],
               classes: Sequence[str] = ("M", "F"), min_weight: float = 0.0,
               min_user_deg: int = 5, min_item_deg: int = 5,
               item_sample: Optional[int] = None, seed: int = 0) -> InteractionMatrix:
    """Threshold, binarize and degree-filter to a fixpoint.

    Weights of repeated (user, item) pairs are summed before thresholding.
    ``item_sample`` keeps a seeded random subset of items before filtering.
    """
    if min_weight < 0 or min_user_deg < 0 or min_item_deg < 0:
        raise ValueError("thresholds must be non-negative")
    weights: dict[tuple[str, str], float] = {}
    for r in interactions:
        key = (r.user, r.item)
        weights[key] = weights.get(key, 0.0) + r.weight
    pairs = [k for k, w in weights.items() if w >= min_weight and w > 0]

    if item_sample is not None:
        items = sorted({i for _, i in pairs}, key=_id_key)
        if item_sample < len(items):
            rng = stream(seed, "item-sample")
            keep = set(items[j] for j in rng.choice(len(items), size=item_sample, replace=False))
            pairs = [p for p in pairs if p[1] in keep]

    user_ids = sorted({u for u, _ in pairs}, key=_id_key)
    item_ids = sorted({i for _, i in pairs}, key=_id_key)
    if not pairs:
        raise DegenerateDatasetError("no interactions left after weight filtering")
    uidx = {u: j for j, u in enumerate(user_ids)}
    iidx = {i: j for j, i in enumerate(item_ids)}
    rows = np.fromiter((uidx[u] for u, _ in pairs), dtype=np.int64, count=len(pairs))
    cols = np.fromiter((iidx[i] for _, i in pairs), dtype=np.int64, count=len(pairs))
    X = sp.csr_matrix((np.ones(len(pairs)), (rows, cols)), shape=(len(user_ids), len(item_ids)))
    X.sum_duplicates()
    X.data[:] = 1.0

    users = np.arange(X.shape[0])
    items = np.arange(X.shape[1])
    while True:
        udeg = np.diff(X.indptr)
        ikeep = np.bincount(X.indices, minlength=X.shape[1]) >= min_item_deg
        ukeep = udeg >= min_user_deg
        if ukeep.all() and ikeep.all():
            break
        X = X[ukeep][:, ikeep].tocsr()
        users, items = users[ukeep], items[ikeep]
        # items can lose support after the user cut; loop again
    if X.nnz == 0 or X.shape[0] == 0:
        raise DegenerateDatasetError("degree filtering removed every interaction")
    X.sort_indices()

    class_index = {c.lower(): k for k, c in enumerate(classes)}
    kept_users = [user_ids[u] for u in users]
    lab = np.array([class_index.get(labels.get(u, "").lower(), UNKNOWN) for u in kept_users],
                   dtype=np.int64)
    return InteractionMatrix(kept_users, [item_ids[i] for i in items], X, lab, tuple(classes))


# ---------------------------------------------------------------------------
# cached dataset container

DATA_MAGIC = b"AMVAEDAT"
DATA_VERSION = 1


def _pack_strings(strings: Sequence[str]) -> bytes:
    blob = "\n".join(strings).encode("utf-8")
    return struct.pack("<QQ", len(strings), len(blob)) + blob


def _unpack_strings(buf: bytes, off: int) -> tuple[list[str], int]:
    n, size = struct.unpack_from("<QQ", buf, off)
    off += 16
    blob = buf[off:off + size].decode("utf-8")
    return (blob.split("\n") if n else []), off + size


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<i8")
    return struct.pack("<Q", a.size) + a.tobytes()


def _unpack_array(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from("<Q", buf, off)
    off += 8
    return np.frombuffer(buf, dtype="<i8", count=n, offset=off).astype(np.int64), off + 8 * n


def matrix_bytes(m: InteractionMatrix) -> bytes:
    X = m.X.tocsr()
    X.sort_indices()
    return b"".join([
        DATA_MAGIC, struct.pack("<I", DATA_VERSION),
        _pack_strings(m.classes), _pack_strings(m.user_ids), _pack_strings(m.item_ids),
        _pack_array(m.labels), _pack_array(X.indptr), _pack_array(X.indices),
    ])


def save_matrix(path, m: InteractionMatrix) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(matrix_bytes(m))
    tmp.replace(path)


def load_matrix(path) -> InteractionMatrix:
    buf = Path(path).read_bytes()
    if buf[:8] != DATA_MAGIC:
        raise ParseError(f"{path}: not a cached dataset")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != DATA_VERSION:
        raise ParseError(f"{path}: unsupported dataset version {version}")
    off = 12
    classes, off = _unpack_strings(buf, off)
    users, off = _unpack_strings(buf, off)
    items, off = _unpack_strings(buf, off)
    labels, off = _unpack_array(buf, off)
    indptr, off = _unpack_array(buf, off)
    indices, off = _unpack_array(buf, off)
    X = sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(len(users), len(items)))
    return InteractionMatrix(users, items, X, labels, tuple(classes))


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    fold: int
    train_users: np.ndarray       # with multiplicity after upsampling
    val_users: np.ndarray
    test_users: np.ndarray
    val_input: sp.csr_matrix      # rows aligned with val_users
    val_target: sp.csr_matrix
    test_input: sp.csr_matrix
    test_target: sp.csr_matrix
    base_train_users: np.ndarray = field(default=None)

    def eval_split(self, which: str):
        if which == "val":
            return self.val_users, self.val_input, self.val_target
        if which == "test":
            return self.test_users, self.test_input, self.test_target
        raise ValueError(which)


def balance_classes(users: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                    n_classes: int) -> np.ndarray:
    """Resample minority classes with replacement up to the majority count.

    Users with an unknown label are passed through once.
    """
    users = np.asarray(users)
    lab = labels[users]
    groups = [users[lab == c] for c in range(n_classes)]
    if any(len(g) == 0 for g in groups):
        raise SplitError(f"a protected class has no members; class counts {[len(g) for g in groups]}")
    target = max(len(g) for g in groups)
    extra = [rng.choice(g, size=target - len(g), replace=True) for g in groups if len(g) < target]
    return np.concatenate([users, *extra]).astype(np.int64)


def holdout_split(items: np.ndarray, rng: np.random.Generator, input_frac: float = 0.8):
    """Random input/target partition with ``ceil(input_frac * n)`` inputs."""
    n = len(items)
    n_in = min(n, int(np.ceil(round(input_frac * n, 9))))
    perm = rng.permutation(n)
    return np.sort(items[perm[:n_in]]), np.sort(items[perm[n_in:]])


def _masks(m: InteractionMatrix, users: np.ndarray, seed: int, fold: int):
    in_rows, tg_rows = [], []
    for u in users:
        items = m.X.indices[m.X.indptr[u]:m.X.indptr[u + 1]]
        a, b = holdout_split(items, stream(seed, "holdout", fold, int(u)))
        in_rows.append(a)
        tg_rows.append(b)

    def build(rows):
        indptr = np.concatenate([[0], np.cumsum([len(r) for r in rows])]).astype(np.int64)
        indices = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64)
        return sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(len(rows), m.n_items))

    return build(in_rows), build(tg_rows)


def make_folds(m: InteractionMatrix, n_folds: int = 5, seed: int = 0, balance: bool = True) -> list[FoldSplit]:
    """User-split cross-validation.

    Fold ``i`` tests on chunk ``i``, validates on chunk ``i+1`` and trains on
    the rest, with the minority class of the training users upsampled.
    """
    if n_folds < 3:
        raise SplitError("need at least 3 folds")
    perm = stream(seed, "folds").permutation(m.n_users)
    chunks = [np.sort(c) for c in np.array_split(perm, n_folds)]
    n_classes = len(m.classes)
    for c in range(n_classes):
        if not np.any(m.labels == c):
            raise SplitError(f"class {m.classes[c]!r} has no users")
    folds = []
    for i in range(n_folds):
        val_i = (i + 1) % n_folds
        train = np.sort(np.concatenate([chunks[j] for j in range(n_folds) if j not in (i, val_i)]))
        if balance:
            train_ms = balance_classes(train, m.labels, stream(seed, "upsample", i), n_classes)
        else:
            train_ms = train
        vi, vt = _masks(m, chunks[val_i], seed, i)
        ti, tt = _masks(m, chunks[i], seed, i)
        folds.append(FoldSplit(i, train_ms, chunks[val_i], chunks[i], vi, vt, ti, tt, train))
    return folds
