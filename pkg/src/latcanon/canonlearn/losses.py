"""Canonicalization paths and the per-batch training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor, functional as F
from ..autodiff.init import generator
from ..network import ModelBundle, classify, decode, encode, rotation_logits

KINDS = ("latent_canon", "cls_only", "cls_pretrain", "rotation_ssl", "vanilla_ae", "ae_cls")
MAX_PATH_LEN = 3


@dataclass(frozen=True)
class TrainMode:
    kind: str = "latent_canon"
    idempotency_recon: bool = False
    classifier_post_canon: bool = False
    latent_consistency: bool = False
    latent_scale: float = 1e-7

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown training kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "latent_canon" and self.any_ablation:
            raise ValueError("ablation switches are only valid with latent_canon")

    @property
    def any_ablation(self) -> bool:
        return self.idempotency_recon or self.classifier_post_canon or self.latent_consistency

    @property
    def groups(self) -> tuple[str, ...]:
        """Parameter groups that receive gradient in this mode."""
        return {
            "latent_canon": ("encoder", "decoder", "classifier", "canon"),
            "cls_only": ("encoder", "classifier"),
            "cls_pretrain": ("encoder", "classifier"),
            "rotation_ssl": ("encoder", "rot_head"),
            "vanilla_ae": ("encoder", "decoder"),
            "ae_cls": ("encoder", "decoder", "classifier"),
        }[self.kind]


@dataclass
class LossWeights:
    ce_weight: float = 50.0
    alpha: float = 1.0
    beta: float = 1.0
    # "sum": squared L2 over each image, averaged over the batch; "mean": per-pixel MSE
    recon_reduction: str = "sum"


@dataclass
class LossBreakdown:
    ce: float
    bypass: float
    canon: float
    latent_reg: float
    total: float
    alpha: float
    beta: float
    # ``ce`` already carries the classification weight; ``ce_raw`` is the bare cross-entropy
    ce_raw: float = float("nan")
    ce_weight: float = 1.0
    n_paths: int = 0
    train_err: float = float("nan")
    # ablation diagnostics, NaN when the switch is off: the C_j C_j share of ``canon``
    # and the bare cross-entropy over canonicalized latents
    idempotency: float = float("nan")
    post_canon_ce: float = float("nan")

    def recomposed(self) -> float:
        return self.ce + self.alpha * self.bypass + self.beta * self.canon + self.latent_reg


@dataclass
class Batch:
    x_noised: np.ndarray
    x_clean: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    dataset: object = field(default=None, repr=False)

    def targets(self, path) -> np.ndarray:
        if self.dataset is None:
            raise ValueError("canonical targets need the batch's scene metadata (dataset)")
        return self.dataset.targets(self.indices, path)


def make_batch(ds, indices) -> Batch:
    idx = np.asarray(indices, dtype=np.int64)
    return Batch(ds.images(idx, "noised"), ds.images(idx, "clean"), ds.labels[idx], idx, ds)


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------

def sample_paths(seed: int, batch_index: int, n_canon: int = 6):
    """Two distinct canonicalizers for this batch and their four paths."""
    if n_canon < 2:
        raise ValueError("path sampling needs at least two canonicalizers")
    h, j = (int(v) for v in generator(seed, batch_index, 0x9A7).choice(n_canon, size=2, replace=False))
    return h, j, [(h,), (j,), (h, j), (j, h)]


def check_path(path, n_canon: int, allow_repeats: bool = True) -> tuple[int, ...]:
    path = tuple(int(i) for i in path)
    if len(path) > MAX_PATH_LEN:
        raise ValueError(f"paths hold at most {MAX_PATH_LEN} canonicalizers, got {path}")
    bad = [i for i in path if not 0 <= i < n_canon]
    if bad:
        raise ValueError(f"canonicalizer id(s) {bad} out of range [0, {n_canon})")
    if not allow_repeats and len(set(path)) != len(path):
        raise ValueError(f"repeated canonicalizer in {path}")
    return path


def apply_path(m: ModelBundle, z: Tensor, path) -> Tensor:
    """z . C_p0 . C_p1 ... ; the empty path is the bypass."""
    for j in check_path(path, m.cfg.n_canon):
        z = F.matmul(z, m.canon(j))
    return z


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def recon_loss(x_hat: Tensor, target: np.ndarray, reduction: str = "sum") -> Tensor:
    mse = F.mse_loss(x_hat, Tensor(np.asarray(target, dtype=x_hat.dtype)))
    if reduction == "mean":
        return mse
    if reduction == "sum":
        return mse * float(np.prod(x_hat.shape[1:]))
    raise ValueError(f"unknown reconstruction reduction {reduction!r}")


def bypass_loss(m: ModelBundle, x_noised, x_clean, mode: str = "train", reduction: str = "sum",
                z: Tensor | None = None, seed: int = 0, step: int = 0) -> Tensor:
    if np.shape(x_noised) != np.shape(x_clean):
        raise ValueError("noised and clean batches differ in shape")
    z = encode(m, x_noised, mode, seed, step) if z is None else z
    return recon_loss(decode(m, z, mode), x_clean, reduction)


def canon_loss(m: ModelBundle, z: Tensor, batch: Batch, paths, mode: str = "train",
               reduction: str = "sum", target_paths=None) -> Tensor:
    """Mean over paths of the reconstruction error against each canonical target.

    ``target_paths`` overrides which factor set each path's target uses (the
    idempotency ablation reuses single-factor targets for C_j C_j).
    """
    target_paths = target_paths or paths
    zs = [apply_path(m, z, p) for p in paths]
    recon = decode(m, F.concat(zs, axis=0), mode)
    targets = np.concatenate([batch.targets(tp) for tp in target_paths], axis=0)
    return recon_loss(recon, targets, reduction)


def latent_reg_loss(m: ModelBundle, z: Tensor, h: int, j: int, scale: float = 1e-7) -> Tensor:
    """scale * mean_batch(||z C_h C_j - z C_j C_h|| + ||z C_h C_h - z C_h||)."""
    zh = apply_path(m, z, (h,))
    consistency = F.row_l2_norm(apply_path(m, zh, (j,)) - apply_path(m, z, (j, h)))
    idempotency = F.row_l2_norm(apply_path(m, zh, (h,)) - zh)
    return (F.mean(consistency) + F.mean(idempotency)) * scale


def _rotated_inputs(x: np.ndarray, seed: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    ks = generator(seed, step, 0x407).integers(0, 4, size=len(x))
    out = np.stack([np.rot90(img, k, axes=(1, 2)) for img, k in zip(x, ks)])
    return np.ascontiguousarray(out), ks.astype(np.int64)


def total_loss(m: ModelBundle, batch: Batch, mode: TrainMode, weights: LossWeights | None = None,
               seed: int = 0, step: int = 0, paths_override=None) -> tuple[Tensor, LossBreakdown]:
    """Weighted per-batch objective for ``mode``; returns (scalar tensor, breakdown)."""
    w = weights or LossWeights()
    red = w.recon_reduction
    zero = Tensor(np.zeros((), dtype=np.float32))
    ce_t = bypass_t = canon_t = reg_t = zero
    n_paths = 0
    train_err = float("nan")
    idem = post_ce = float("nan")

    if mode.kind == "rotation_ssl":
        x_rot, rot_labels = _rotated_inputs(batch.x_noised, seed, step)
        z = encode(m, x_rot, "train", seed, step)
        logits = rotation_logits(m, z)
        ce_t = F.softmax_cross_entropy(logits, rot_labels)
        train_err = float((logits.data.argmax(1) != rot_labels).mean())
    else:
        z = encode(m, batch.x_noised, "train", seed, step)

    if mode.kind in ("cls_only", "cls_pretrain", "ae_cls"):
        logits = classify(m, z)
        ce_t = F.softmax_cross_entropy(logits, batch.labels)
        train_err = float((logits.data.argmax(1) != batch.labels).mean())

    if mode.kind in ("vanilla_ae", "ae_cls"):
        bypass_t = bypass_loss(m, batch.x_noised, batch.x_clean, "train", red, z=z)

    if mode.kind == "latent_canon":
        if paths_override is not None:
            h, j, paths = paths_override
        else:
            h, j, paths = sample_paths(seed, step, m.cfg.n_canon)
        target_paths = list(paths)
        if mode.idempotency_recon:
            paths = paths + [(h, h), (j, j)]
            target_paths = target_paths + [(h,), (j,)]
        n_paths = len(paths)

        zs = [z] + [apply_path(m, z, p) for p in paths]
        n = z.shape[0]
        recon = decode(m, F.concat(zs, axis=0), "train")
        bypass_t = recon_loss(recon[:n], batch.x_clean, red)
        targets = np.concatenate([batch.targets(tp) for tp in target_paths], axis=0)
        canon_t = recon_loss(recon[n:], targets, red)
        if mode.idempotency_recon:
            n_idem = 2 * n
            idem = float(recon_loss(recon[-n_idem:], targets[-n_idem:], red).data)

        if mode.classifier_post_canon:
            logits = classify(m, F.concat(zs[1:], axis=0))
            labels = np.tile(batch.labels, len(paths))
        else:
            logits = classify(m, z)
            labels = batch.labels
        ce_t = F.softmax_cross_entropy(logits, labels)
        train_err = float((logits.data.argmax(1) != labels).mean())
        if mode.classifier_post_canon:
            post_ce = float(ce_t.data)

        if mode.latent_consistency:
            reg_t = latent_reg_loss(m, z, h, j, mode.latent_scale)

    ce_w = w.ce_weight
    ce_term = ce_t * ce_w
    total = ce_term + bypass_t * w.alpha + canon_t * w.beta + reg_t
    breakdown = LossBreakdown(
        ce=float(ce_term.data), ce_raw=float(ce_t.data), bypass=float(bypass_t.data), canon=float(canon_t.data),
        latent_reg=float(reg_t.data), total=float(total.data), alpha=w.alpha, beta=w.beta,
        ce_weight=ce_w, n_paths=n_paths, train_err=train_err, idempotency=idem, post_canon_ce=post_ce,
    )
    return total, breakdown
