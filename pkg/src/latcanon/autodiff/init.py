"""Seeded parameter initialisation."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor

SCHEMES = ("uniform_fan_in", "zeros", "ones")


def generator(*key: int) -> np.random.Generator:
    """Counter-style generator keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def fan_in(shape: tuple[int, ...]) -> int:
    """Inputs feeding one output unit.

    2-D weights are stored (in, out) because activations multiply on the left
    (``z @ W``); conv kernels are (out, in, kh, kw) and transposed-conv kernels
    are (in, out, kh, kw), for which the caller passes ``fan`` explicitly.
    """
    if len(shape) <= 2:
        return int(shape[0])
    return int(np.prod(shape[1:]))


def seeded_init(shape, scheme: str = "uniform_fan_in", seed: int = 0, fan: int | None = None,
                dtype=np.float32, requires_grad: bool = True) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if not shape or math.prod(shape) <= 0:
        raise ValueError(f"cannot initialise a zero-sized tensor of shape {shape}")
    if scheme == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif scheme == "ones":
        data = np.ones(shape, dtype=dtype)
    elif scheme == "uniform_fan_in":
        bound = 1.0 / math.sqrt(fan if fan is not None else fan_in(shape))
        data = generator(seed).uniform(-bound, bound, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {SCHEMES}")
    return Tensor(data, requires_grad=requires_grad)
