"""Central finite-difference oracle for backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import functional as F
from .tensor import Tensor


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_err: float
    per_param_errors: list[tuple[str, float]] = field(default_factory=list)
    n_checked: int = 0
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-3


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise |a - n| / (max(|a|, |n|) + 1e-8)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.maximum(np.abs(a), np.abs(n)) + 1e-8)))


class KinkMonitor:
    """Records which branch every piecewise-linear op took during a forward pass.

    Used as a context manager around :func:`grad_check`: a central difference
    whose two evaluations took a different branch from the analytic pass
    straddles a kink, so it is no oracle for the derivative there.
    """

    _OPS = ("leaky_relu", "relu", "maxpool2d", "global_maxpool")

    def __init__(self):
        self._saved: dict = {}
        self._trace: list[bytes] = []
        self._reference: list[bytes] | None = None

    @staticmethod
    def _pattern(name: str, x: np.ndarray) -> bytes:
        if name in ("leaky_relu", "relu"):
            return np.packbits(x > 0).tobytes()
        n, c, h, w = x.shape
        if name == "global_maxpool":
            return x.reshape(n, c, h * w).argmax(-1).tobytes()
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        return blocks.argmax(-1).tobytes()

    def __enter__(self) -> "KinkMonitor":
        for name in self._OPS:
            op = getattr(F, name)
            self._saved[name] = op

            def wrapped(x, *a, _op=op, _name=name, **kw):
                self._trace.append(self._pattern(_name, x.data))
                return _op(x, *a, **kw)

            setattr(F, name, wrapped)
        return self

    def __exit__(self, *exc) -> None:
        for name, op in self._saved.items():
            setattr(F, name, op)
        self._saved.clear()

    def mark_reference(self) -> None:
        self._reference, self._trace = self._trace, []

    def unchanged(self) -> bool:
        """True when every pass since the last call matched the reference branches."""
        ok = self._reference is not None
        trace, self._trace = self._trace, []
        n = len(self._reference or ())
        if ok and n:
            ok = len(trace) % n == 0 and all(trace[i] == self._reference[i % n] for i in range(len(trace)))
        return ok


def grad_check(fn: Callable[..., Tensor], inputs: Mapping[str, np.ndarray], h: float = 1e-4,
               op_name: str = "closure", wrt: tuple[str, ...] | None = None,
               monitor: KinkMonitor | None = None, max_coords: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``fn(**tensors)`` with central differences.

    All inputs are promoted to float64; ``fn`` must return a single-element
    tensor. ``wrt`` restricts which inputs are checked (default: all). With an
    active ``monitor``, coordinates whose difference crosses a kink are left
    out and counted in ``n_skipped``. ``max_coords`` caps the coordinates
    probed per input to a seeded random subset.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    names = tuple(wrt) if wrt is not None else tuple(base)

    tensors = {k: Tensor(v.copy(), requires_grad=k in names) for k, v in base.items()}
    out = fn(**tensors)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar closure, got output of shape {out.shape}")
    out.backward()
    if monitor is not None:
        monitor.mark_reference()

    def evaluate(k: str, flat_i: int, delta: float) -> float:
        arrs = {name: arr for name, arr in base.items()}
        bumped = base[k].copy()
        bumped.reshape(-1)[flat_i] += delta
        arrs[k] = bumped
        return float(fn(**{name: Tensor(a) for name, a in arrs.items()}).data)

    errors = []
    checked = skipped = 0
    for k in names:
        analytic = tensors[k].grad
        if analytic is None:
            analytic = np.zeros_like(base[k])
        analytic = analytic.ravel()
        coords = np.arange(base[k].size)
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(np.random.default_rng([seed, len(errors)]).choice(coords, max_coords, replace=False))
        numeric = np.zeros(coords.size)
        keep = np.ones(coords.size, dtype=bool)
        for n, i in enumerate(coords):
            numeric[n] = (evaluate(k, i, h) - evaluate(k, i, -h)) / (2 * h)
            if monitor is not None and not monitor.unchanged():
                keep[n] = False
        checked += int(keep.sum())
        skipped += int((~keep).sum())
        errors.append((k, rel_err(analytic[coords][keep], numeric[keep])))
    return GradCheckReport(op_name, max((e for _, e in errors), default=0.0), errors, checked, skipped)
