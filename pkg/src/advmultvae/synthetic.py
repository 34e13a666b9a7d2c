"""Seeded two-class interaction data with a controllable attribute signal."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream


@dataclass(frozen=True)
class SyntheticSpec:
    users: int = 400
    items: int = 60
    p_own: float = 0.35
    p_other: float = 0.1
    p_shared: float = 0.35
    seed: int = 0
    classes: tuple[str, str] = ("M", "F")


def item_blocks(n_items: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class-0 block, class-1 block and the shared remainder."""
    k = n_items // 3
    ids = np.arange(n_items)
    return ids[:k], ids[k:2 * k], ids[2 * k:]


def generate(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Dense 0/1 interactions (users x items) and the class of each user.

    Users alternate between the two classes, so each gets exactly half when
    ``spec.users`` is even.
    """
    if spec.users < 2 or spec.users % 2 or spec.items < 3:
        raise ValueError("need an even user count >= 2 and at least 3 items")
    labels = np.arange(spec.users) % 2
    blocks = item_blocks(spec.items)
    prob = np.empty((spec.users, spec.items))
    for c in (0, 1):
        rows = labels == c
        prob[np.ix_(rows, blocks[c])] = spec.p_own
        prob[np.ix_(rows, blocks[1 - c])] = spec.p_other
        prob[np.ix_(rows, blocks[2])] = spec.p_shared
    draws = stream(spec.seed, "genseed").random(prob.shape)
    return (draws < prob).astype(np.int8), labels


def write_dataset(out_dir, spec: SyntheticSpec) -> tuple[Path, Path]:
    """Write ``ratings.dat`` and ``users.dat`` in the MovieLens-1M layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    X, labels = generate(spec)
    ratings = out_dir / "ratings.dat"
    users = out_dir / "users.dat"
    lines = []
    ts = 978300000
    for u, row in enumerate(X):
        for i in np.flatnonzero(row):
            lines.append(f"{u + 1}::{i + 1}::1::{ts + u * spec.items + i}")
    ratings.write_text("\n".join(lines) + "\n")
    users.write_text("".join(f"{u + 1}::{spec.classes[c]}::25::0::00000\n"
                             for u, c in enumerate(labels)))
    return ratings, users
