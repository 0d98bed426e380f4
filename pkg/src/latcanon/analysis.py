"""Representation diagnostics: linear probes, PCA of canonicalization deltas, zero-shot curves."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .autodiff import Adam, Tensor, functional as F
from .autodiff.init import generator, seeded_init
from .canonlearn.train import accuracy, latents
from .network import ModelBundle, encode, load_checkpoint
from .simgen import SUPERVISED, FactorRanges
from .simgen.imageio import image_strip, write_pnm

DEFAULT_BINS = {"bg_color": 64, "font_color": 64, "rotation": 3, "shear": 10, "font_type": 6, "font_size": 6}
PROBE_ORDER = ("bg_color", "font_color", "rotation", "shear", "font_type", "font_size")


@dataclass(frozen=True)
class ProbeSpec:
    factor: str
    n_bins: int

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError(f"a probe needs at least 2 bins, got {self.n_bins}")
        if self.factor not in (*SUPERVISED, "digit"):
            raise ValueError(f"unknown probe factor {self.factor!r}")

    @property
    def chance(self) -> float:
        return 1.0 / self.n_bins

    @classmethod
    def default(cls, factor: str) -> "ProbeSpec":
        return cls(factor, 10 if factor == "digit" else DEFAULT_BINS[factor])


@dataclass
class ProbeResult:
    spec: ProbeSpec
    accuracy: float
    control_mean: float
    control_std: float

    @property
    def margin(self) -> float:
        """Accuracy above chance in units of the shuffled-label control's std."""
        if self.control_std == 0:
            return math.inf if self.accuracy > self.spec.chance else 0.0
        return (self.accuracy - self.spec.chance) / self.control_std


@dataclass
class PcaResult:
    components: np.ndarray  # (k, latent_dim), rows orthonormal
    explained_variance: np.ndarray
    scores: np.ndarray  # (n, k)
    mean: np.ndarray

    @property
    def projections(self) -> np.ndarray:
        return self.scores[:, 0]


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------

def uniform_bins(values, lo: float, hi: float, n_bins: int) -> np.ndarray:
    """Equal-width bins over [lo, hi], inclusive on the left; ``hi`` falls in the last bin."""
    values = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * n_bins).astype(np.int64)
    return np.clip(idx, 0, n_bins - 1)


def color_bins(rgb, rgb_range, per_channel: int = 4) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    out = np.zeros(len(rgb), dtype=np.int64)
    for c, (lo, hi) in enumerate(rgb_range):
        out = out * per_channel + uniform_bins(rgb[:, c], lo, hi, per_channel)
    return out


def factor_labels(ds, spec: ProbeSpec, ranges: FactorRanges | None = None) -> np.ndarray:
    """Bin index of ``spec.factor`` for every record of a scene dataset."""
    if spec.factor == "digit":
        return np.asarray(ds.labels, dtype=np.int64)
    ranges = ranges or ds.ranges
    values = ds.factor_values(spec.factor)
    if spec.factor in ("bg_color", "font_color"):
        per = round(spec.n_bins ** (1 / 3))
        if per ** 3 != spec.n_bins:
            raise ValueError(f"colour probes need a cubic bin count, got {spec.n_bins}")
        return color_bins(values, getattr(ranges, spec.factor), per)
    if spec.factor == "font_type":
        lookup = {t: i for i, t in enumerate(sorted(ranges.font_types))}
        labels = np.array([lookup.get(int(v), -1) for v in values], dtype=np.int64)
        if (labels < 0).any() or len(lookup) > spec.n_bins:
            raise ValueError("font types outside the probe's class set")
        return labels
    lo, hi = getattr(ranges, spec.factor)
    return uniform_bins(values, lo, hi, spec.n_bins)


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------

def _fit_softmax(x: np.ndarray, y: np.ndarray, n_classes: int, seed: int, epochs: int, lr: float):
    w = seeded_init((x.shape[1], n_classes), "uniform_fan_in", seed)
    b = seeded_init((n_classes,), "zeros", seed)
    opt = Adam({"w": w, "b": b}, lr=lr)
    xt = Tensor(x)
    for _ in range(epochs):
        opt.zero_grad()
        F.softmax_cross_entropy(F.linear(xt, w, b), y).backward()
        opt.step()
    return w.data, b.data


def _probe_accuracy(z: np.ndarray, y: np.ndarray, n_classes: int, seed: int, epochs: int, lr: float,
                    test_frac: float) -> float:
    order = generator(seed, 0x9B0E).permutation(len(z))
    n_test = max(1, int(round(len(z) * test_frac)))
    test, train = order[:n_test], order[n_test:]
    mu, sd = z[train].mean(0), z[train].std(0) + 1e-6
    zs = ((z - mu) / sd).astype(np.float32)
    w, b = _fit_softmax(zs[train], y[train], n_classes, seed, epochs, lr)
    pred = (zs[test] @ w + b).argmax(1)
    return float((pred == y[test]).mean())


def linear_probe(m: ModelBundle, ds, spec: ProbeSpec, seed: int = 0, epochs: int = 300, lr: float = 1e-2,
                 test_frac: float = 0.25, n_controls: int = 5, z: np.ndarray | None = None) -> ProbeResult:
    """Held-out accuracy of a softmax-regression probe on frozen eval-mode latents.

    The encoder is only read. ``n_controls`` probes fitted on shuffled labels
    give the null distribution.
    """
    labels = factor_labels(ds, spec)
    z = latents(m, ds, "noised") if z is None else z
    acc = _probe_accuracy(z, labels, spec.n_bins, seed, epochs, lr, test_frac)
    controls = []
    for k in range(n_controls):
        shuffled = generator(seed, 0x5A1F, k).permutation(labels)
        controls.append(_probe_accuracy(z, shuffled, spec.n_bins, seed, epochs, lr, test_frac))
    controls = np.asarray(controls)
    return ProbeResult(spec, acc, float(controls.mean()), float(controls.std()))


def probe_all(m: ModelBundle, ds, seed: int = 0, factors=(*PROBE_ORDER, "digit"), **kw) -> list[ProbeResult]:
    z = latents(m, ds, "noised")
    return [linear_probe(m, ds, ProbeSpec.default(f), seed, z=z, **kw) for f in factors]


def write_probe_csv(results: list[ProbeResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["factor", "n_bins", "chance", "accuracy", "control_mean", "control_std"])
        for r in results:
            w.writerow([r.spec.factor, r.spec.n_bins, f"{r.spec.chance:.6f}", f"{r.accuracy:.6f}",
                        f"{r.control_mean:.6f}", f"{r.control_std:.6f}"])


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def pca(x: np.ndarray, k: int | None = None) -> PcaResult:
    """Covariance eigendecomposition at float64, components in descending variance.

    Each component's sign is fixed so that its largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    var, vecs = np.linalg.eigh(cov)
    order = np.argsort(var)[::-1]
    var, comps = np.clip(var[order], 0.0, None), vecs[:, order].T
    pivot = np.abs(comps).argmax(axis=1)
    comps *= np.sign(comps[np.arange(d), pivot])[:, None]
    k = d if k is None else k
    comps, var = comps[:k], var[:k]
    return PcaResult(comps, var, xc @ comps.T, mean)


def _sample_latents(m: ModelBundle, ds, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    if n_samples < m.cfg.latent_dim:
        raise ValueError(f"n_samples={n_samples} is below the latent size {m.cfg.latent_dim}; "
                         "the covariance would be rank deficient")
    if n_samples > len(ds):
        raise ValueError(f"dataset holds {len(ds)} records, fewer than n_samples={n_samples}")
    idx = np.arange(n_samples)
    return idx, encode(m, ds.images(idx, "noised"), "eval").data.astype(np.float64)


def pca_delta(m: ModelBundle, ds, canon_id: int, n_samples: int = 1000) -> PcaResult:
    """PCA of z C_j - z over the first ``n_samples`` records."""
    _, z = _sample_latents(m, ds, n_samples)
    delta = z @ m.canon(canon_id).data.astype(np.float64) - z
    return pca(delta)


def bypass_pc_control(m: ModelBundle, ds, n_samples: int = 1000) -> PcaResult:
    """PCA of the raw latents, the negative control for ``pca_delta``."""
    _, z = _sample_latents(m, ds, n_samples)
    return pca(z)


def spearman(a, b) -> float:
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


def strip_indices(scores: np.ndarray, n_show: int = 20, spacing: str = "normal") -> np.ndarray:
    """Indices of ``n_show`` distinct samples spread over the score distribution, sorted by score.

    ``normal`` picks the samples closest to the normal quantiles implied by the
    scores' mean and std; ``uniform`` picks evenly spaced ranks.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_show = min(n_show, len(scores))
    ranked = np.argsort(scores, kind="stable")
    if spacing == "uniform":
        picks = ranked[np.round(np.linspace(0, len(scores) - 1, n_show)).astype(int)]
    elif spacing == "normal":
        q = stats.norm.ppf((np.arange(n_show) + 0.5) / n_show)
        targets = scores.mean() + scores.std() * q
        free = np.ones(len(scores), dtype=bool)
        picks = []
        for t in targets:
            cand = np.where(free, np.abs(scores - t), np.inf)
            i = int(cand.argmin())
            free[i] = False
            picks.append(i)
        picks = np.asarray(picks)
    else:
        raise ValueError(f"unknown strip spacing {spacing!r}")
    return picks[np.argsort(scores[picks], kind="stable")]


def sort_strip(ds, result: PcaResult, out_dir, name: str, pc_index: int = 0, n_show: int = 20,
               spacing: str = "normal") -> tuple[Path, Path]:
    """Write ``{name}.ppm`` (inputs left to right by PC score) and ``{name}_scores.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = result.scores[:, pc_index]
    picks = strip_indices(scores, n_show, spacing)
    images = ds.images(picks, "noised")
    ppm, table = out_dir / f"{name}.ppm", out_dir / f"{name}_scores.csv"
    write_pnm(ppm, image_strip(list(images)))
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "index", "score"])
        for pos, i in enumerate(picks):
            w.writerow([pos, int(i), f"{scores[i]:.8g}"])
    return ppm, table


# ---------------------------------------------------------------------------
# zero-shot curve
# ---------------------------------------------------------------------------

def pearson(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        warnings.warn("Pearson r is undefined for constant or single-point series", RuntimeWarning,
                      stacklevel=2)
        return float("nan")
    return float(stats.pearsonr(a, b).statistic)


def zero_shot_curve(checkpoints, target_test, out_csv=None) -> tuple[list[dict], float]:
    """Target accuracy of each checkpoint without fine-tuning, against its train error.

    Returns the rows and Pearson r between (1 - train_err) and target accuracy.
    """
    if len(checkpoints) < 2:
        raise ValueError("a zero-shot curve needs at least two checkpoints")
    rows = []
    for path in checkpoints:
        m, _, extra = load_checkpoint(path)
        if (m.cfg.image_channels, m.cfg.image_size) != (target_test.channels, target_test.size):
            raise ValueError(f"{path}: model geometry does not match the target set")
        rows.append({"checkpoint": str(path), "epoch": extra.get("epoch", ""),
                     "train_err": float(extra.get("train_err", float("nan"))),
                     "target_acc": accuracy(m, target_test)})
    r = pearson([1 - row["train_err"] for row in rows], [row["target_acc"] for row in rows])
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["checkpoint", "epoch", "train_err", "target_acc"])
            w.writeheader()
            w.writerows(rows)
    return rows, r

