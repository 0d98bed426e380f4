"""Pretraining, few-shot refinement and evaluation loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Adam, Tensor, functional as F
from ..autodiff.init import generator
from ..network import ModelBundle, classify, encode, save_checkpoint
from .losses import LossBreakdown, LossWeights, TrainMode, make_batch, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "ce", "bypass", "canon", "latent_reg", "total", "train_err", "idempotency",
               "post_canon_ce", "wall_ms")
REFINE_FROZEN = frozenset({"canon", "decoder", "rot_head"})


class NumericError(RuntimeError):
    """Raised when a loss turns NaN/Inf; the last good state has been checkpointed."""


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def append(self, epoch: int, parts: list[LossBreakdown], wall_ms: float) -> dict:
        def avg(name):
            vals = [getattr(p, name) for p in parts]
            vals = [v for v in vals if not math.isnan(v)]
            return float(np.mean(vals)) if vals else float("nan")

        row = {"epoch": epoch, "ce": avg("ce"), "bypass": avg("bypass"), "canon": avg("canon"),
               "latent_reg": avg("latent_reg"), "total": avg("total"),
               "train_err": avg("train_err"), "idempotency": avg("idempotency"),
               "post_canon_ce": avg("post_canon_ce"), "wall_ms": round(wall_ms, 1)}
        self.rows.append(row)
        return row

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        chunk = order[lo:lo + batch_size]
        if len(chunk) >= 2:  # batch norm needs two samples
            yield chunk


def pretrain(m: ModelBundle, ds, mode: TrainMode, epochs: int, lr: float = 1e-3, seed: int = 0,
             batch_size: int = 64, weights: LossWeights | None = None, ckpt_dir=None,
             ckpt_every: int = 0, log_csv=None, optimizer: Adam | None = None) -> TrainLog:
    """Adam on ``total_loss`` for ``epochs`` passes over ``ds``.

    With ``ckpt_dir`` set, a checkpoint is written every ``ckpt_every`` epochs
    (and always at the end) as ``epoch{k:04d}.lcck``, each storing the epoch's
    train error so zero-shot curves can be drawn later.
    """
    cfg = m.cfg
    if (ds.channels, ds.size) != (cfg.image_channels, cfg.image_size):
        raise ValueError(f"dataset geometry {ds.channels}x{ds.size} does not match model "
                         f"{cfg.image_channels}x{cfg.image_size}")
    weights = weights or LossWeights()
    params = m.trainable(mode.groups)
    opt = optimizer or Adam(params, lr=lr, is_frozen=m.is_frozen)
    trainlog = TrainLog()
    step = opt.t
    last_good = m.clone()
    ckpt_dir = Path(ckpt_dir) if ckpt_dir else None

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        parts = []
        for idx in _batches(len(ds), batch_size, generator(seed, epoch, 0x5F)):
            batch = make_batch(ds, idx)
            opt.zero_grad()
            loss, part = total_loss(m, batch, mode, weights, seed=seed, step=step)
            if not np.isfinite(part.total):
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "last_good.lcck", last_good)
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            opt.step(skip=[k for k, p in params.items() if p.grad is None and m.group_of(k) == "canon"])
            step += 1
            parts.append(part)
        row = trainlog.append(epoch, parts, (time.perf_counter() - t0) * 1000)
        log.info("epoch %d %s", epoch, row)
        last_good = m.clone()
        if ckpt_dir is not None and ((ckpt_every and epoch % ckpt_every == 0) or epoch == epochs):
            path = ckpt_dir / f"epoch{epoch:04d}.lcck"
            save_checkpoint(path, m, opt.state_dict(), {"epoch": epoch, "train_err": row["train_err"],
                                                         "mode": mode.kind})
            trainlog.checkpoints.append(str(path))
    if log_csv:
        trainlog.to_csv(log_csv)
    return trainlog


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def latents(m: ModelBundle, ds, which: str = "noised", batch_size: int = 256) -> np.ndarray:
    """Eval-mode encodings of the whole dataset, (N, latent_dim)."""
    out = []
    for lo in range(0, len(ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ds)))
        out.append(encode(m, ds.images(idx, which), "eval").data)
    return np.concatenate(out) if out else np.zeros((0, m.cfg.latent_dim), np.float32)


def predict(m: ModelBundle, ds, which: str = "noised") -> np.ndarray:
    z = latents(m, ds, which)
    return classify(m, Tensor(z)).data.argmax(axis=1)


def accuracy(m: ModelBundle, ds, which: str = "noised") -> float:
    if len(ds) == 0:
        raise ValueError("cannot measure accuracy on an empty dataset")
    return float((predict(m, ds, which) == ds.labels).mean())


# ---------------------------------------------------------------------------
# few-shot refinement
# ---------------------------------------------------------------------------

def select_shots(labels: np.ndarray, shots_per_class: int, seed: int, n_classes: int = 10) -> np.ndarray:
    """First ``shots_per_class`` indices of every class under a seeded permutation."""
    order = generator(seed, 0x5407).permutation(len(labels))
    picked = []
    for c in range(n_classes):
        members = order[labels[order] == c]
        if len(members) < shots_per_class:
            raise ValueError(f"class {c} has {len(members)} examples, fewer than {shots_per_class} shots")
        picked.append(members[:shots_per_class])
    return np.sort(np.concatenate(picked))


def refine_fewshot(m: ModelBundle, target_train, target_test, shots_per_class: int, lr: float = 1e-4,
                   epochs: int = 50, seed: int = 0, batch_size: int = 64, shot_seed: int | None = None,
                   which: str = "noised", on_step=None, head_lr: float | None = 1e-2) -> tuple[ModelBundle, float]:
    """Fresh linear classifier + encoder refinement on a few labelled target images.

    Canonicalizers, decoder and rotation head are frozen; the returned model is
    a copy and ``m`` is left untouched. ``shot_seed`` picks the labelled subset
    (defaults to ``seed``); the accuracy is measured on ``target_test``.
    ``on_step(model, step)`` runs after every optimizer step. The fresh
    classifier trains at ``head_lr`` (``None``: same as ``lr``); at the encoder's
    rate a freshly initialised head barely moves in the few steps k shots allow.
    """
    idx = select_shots(target_train.labels, shots_per_class, seed if shot_seed is None else shot_seed,
                       m.cfg.n_classes)
    refined = m.clone()
    refined.frozen |= REFINE_FROZEN
    refined.reinit_group("classifier", seed=_refine_seed(seed))
    opts = [Adam(refined.trainable(("encoder",)), lr=lr, is_frozen=refined.is_frozen),
            Adam(refined.trainable(("classifier",)), lr=lr if head_lr is None else head_lr,
                 is_frozen=refined.is_frozen)]
    images = target_train.images(idx, which)
    labels = target_train.labels[idx]
    step = 0
    for epoch in range(epochs):
        for chunk in _batches(len(idx), batch_size, generator(seed, epoch, 0xF5)):
            for opt in opts:
                opt.zero_grad()
            z = encode(refined, images[chunk], "train", seed=_refine_seed(seed), step=step)
            loss = F.softmax_cross_entropy(classify(refined, z), labels[chunk])
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite refinement loss at epoch {epoch}")
            loss.backward()
            for opt in opts:
                opt.step()
            step += 1
            if on_step is not None:
                on_step(refined, step)
    return refined, accuracy(refined, target_test, which)


def _refine_seed(seed: int) -> int:
    return 0xF1E0000 + int(seed)
