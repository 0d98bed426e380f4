"""Majority-vote inference over the bypass and canonicalized latents."""

from __future__ import annotations

from itertools import permutations

import numpy as np

from ..autodiff import functional as F
from ..network import ModelBundle, classify, encode
from .losses import apply_path

VOTE_SETS = ("simple7", "plus_idempotent", "plus_pairs")


def vote_paths(vote_set: str, n_canon: int = 6) -> list[tuple[int, ...]]:
    if vote_set not in VOTE_SETS:
        raise ValueError(f"unknown vote set {vote_set!r}; expected one of {VOTE_SETS}")
    paths = [()] + [(j,) for j in range(n_canon)]
    if vote_set == "plus_idempotent":
        paths += [(j, j) for j in range(n_canon)]
    elif vote_set == "plus_pairs":
        paths += [(j, j) for j in range(n_canon)]
        paths += list(permutations(range(n_canon), 2))
    return paths


def tally(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plurality over the vote axis of ``probs`` (V, N, C).

    Each voter contributes its argmax; ties go to the tied class with the
    larger summed probability.
    """
    n_votes, n, n_classes = probs.shape
    ballots = probs.argmax(axis=2)
    votes = np.zeros((n, n_classes), dtype=np.int64)
    for b in ballots:
        np.add.at(votes, (np.arange(n), b), 1)
    mass = probs.sum(axis=0)
    top = votes == votes.max(axis=1, keepdims=True)
    classes = np.where(top, mass, -np.inf).argmax(axis=1)
    return classes, votes


def majority_vote_predict(m: ModelBundle, x, vote_set: str = "simple7",
                          batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Per-image class and vote counts (N, n_classes) using eval-mode encodings."""
    paths = vote_paths(vote_set, m.cfg.n_canon)
    x = np.asarray(x)
    classes, votes = [], []
    for lo in range(0, len(x), batch_size):
        z = encode(m, x[lo:lo + batch_size], "eval")
        probs = np.stack([F.softmax(classify(m, apply_path(m, z, p)).data) for p in paths])
        c, v = tally(probs)
        classes.append(c)
        votes.append(v)
    if not classes:
        return np.zeros(0, np.int64), np.zeros((0, m.cfg.n_classes), np.int64)
    return np.concatenate(classes), np.concatenate(votes)


def vote_accuracy(m: ModelBundle, ds, vote_set: str = "simple7", which: str = "noised") -> float:
    classes, _ = majority_vote_predict(m, ds.images(np.arange(len(ds)), which), vote_set)
    return float((classes == ds.labels).mean())


def single_path_accuracy(m: ModelBundle, ds, path=(), which: str = "noised") -> float:
    z = encode(m, ds.images(np.arange(len(ds)), which), "eval")
    pred = classify(m, apply_path(m, z, path)).data.argmax(axis=1)
    return float((pred == ds.labels).mean())
