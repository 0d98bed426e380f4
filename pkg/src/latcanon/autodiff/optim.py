from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import Tensor


class Adam:
    """Bias-corrected Adam over a named parameter mapping.

    Parameters for which ``is_frozen(name)`` holds are never touched, not even
    their moments. Any other parameter must carry a gradient at ``step()``
    unless it is listed in ``skip`` (parameters that took no part in this
    step's graph, such as canonicalizers not drawn for the batch).
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 is_frozen: Callable[[str], bool] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.is_frozen = is_frozen or (lambda name: False)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, skip: Iterable[str] = ()) -> None:
        skip = set(skip)
        active = [k for k in self.params if not self.is_frozen(k) and k not in skip]
        missing = [k for k in active if self.params[k].grad is None]
        if missing:
            raise ValueError(f"no gradient for unfrozen parameter(s): {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k in active:
            p = self.params[k]
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            if k in state["m"]:
                self.m[k] = state["m"][k].copy()
                self.v[k] = state["v"][k].copy()


def adam_step(params: Mapping[str, Tensor], lr: float, t: int, state: dict | None = None,
              betas=(0.9, 0.999), eps: float = 1e-8, frozen: frozenset[str] = frozenset()) -> dict:
    """Functional single Adam update; returns the (mutated) moment state."""
    opt = Adam(params, lr=lr, betas=betas, eps=eps, is_frozen=lambda k: k in frozen)
    if state is not None:
        opt.load_state_dict(state)
    opt.t = t - 1
    opt.step()
    return opt.state_dict()
