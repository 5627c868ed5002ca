"""Deterministic DDIM sampling over a small fixed-weight conditional generator.

Latents live in pixel space (``[3, H, W]``); ``frame_decode`` maps them to
RGB in [0, 1].  The schedule is linear in alpha-bar, from 1 at level 0 down
to ``alpha_min`` at level ``L``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Union

import numpy as np

from .errors import ContractError
from .tensor import Tensor, add, clamp_st, concat_channels, conv2d, mul, sub, tanh_act


@dataclass(frozen=True)
class DiffusionSchedule:
    L: int
    alpha_bar: tuple[float, ...]
    eta: float = 0.0

    def __post_init__(self):
        if self.eta != 0.0:
            raise ContractError("only deterministic sampling (eta = 0) is supported")
        ab = self.alpha_bar
        if len(ab) != self.L + 1 or ab[0] != 1.0:
            raise ContractError("alpha_bar must have L+1 entries starting at 1")
        if any(b >= a for a, b in zip(ab, ab[1:])) or ab[-1] <= 0:
            raise ContractError("alpha_bar must be strictly decreasing and positive")

    def a(self, level: int) -> float:
        return math.sqrt(self.alpha_bar[level])

    def b(self, level: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[level])


def make_schedule(L: int = 10, alpha_min: float = 1e-3) -> DiffusionSchedule:
    if int(L) != L or L < 1:
        raise ContractError(f"L must be a positive integer, got {L}")
    if not 0.0 < alpha_min < 1.0:
        raise ContractError(f"alpha_min must lie in (0, 1), got {alpha_min}")
    L = int(L)
    ab = tuple(1.0 - (1.0 - alpha_min) * l / L for l in range(L + 1))
    return DiffusionSchedule(L=L, alpha_bar=ab)


def _check_level(level: int, sched: DiffusionSchedule, lo: int = 0) -> None:
    if int(level) != level or not lo <= level <= sched.L:
        raise ContractError(f"level {level} outside [{lo}, {sched.L}]")


def diffuse(z0: Tensor, zL: Tensor, level: int, sched: DiffusionSchedule) -> Tensor:
    """sqrt(ab) * z0 + sqrt(1 - ab) * zL."""
    _check_level(level, sched)
    return add(mul(z0, sched.a(level)), mul(zL, sched.b(level)))


@dataclass(frozen=True)
class GeneratorSpec:
    """Seeded weights for the toy generator.

    ``prediction="sample"`` makes the network predict the clean latent and
    converts it to a noise estimate; ``"epsilon"`` uses the raw network
    output as the noise estimate.
    """

    seed: int = 0
    hidden_channels: int = 8
    gain: float = 3.0
    prediction: str = "sample"

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise ContractError("hidden_channels must be positive")
        if self.prediction not in ("sample", "epsilon"):
            raise ContractError(f"unknown prediction mode {self.prediction!r}")


@lru_cache(maxsize=64)
def generator_weights(spec: GeneratorSpec, cond_channels: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    c_in = 3 + cond_channels + 1
    w1 = rng.standard_normal((spec.hidden_channels, c_in, 3, 3)) / math.sqrt(c_in * 9)
    w2 = rng.standard_normal((3, spec.hidden_channels, 3, 3)) / math.sqrt(spec.hidden_channels * 9)
    w2 *= spec.gain
    w1.setflags(write=False)
    w2.setflags(write=False)
    return w1, w2


def toy_generator(
    z: Tensor, cond: Tensor, level: int, spec: GeneratorSpec, sched: DiffusionSchedule
) -> Tensor:
    """Noise estimate for latent ``z`` at ``level`` given condition ``cond``."""
    if z.data.ndim != 3 or z.shape[0] != 3:
        raise ContractError(f"latent must be [3, H, W], got {z.shape}")
    if cond.data.ndim != 3 or cond.shape[1:] != z.shape[1:]:
        raise ContractError(f"condition {cond.shape} does not match latent {z.shape}")
    _check_level(level, sched, lo=1)
    w1, w2 = generator_weights(spec, cond.shape[0])
    plane = Tensor(np.full((1,) + z.shape[1:], level / sched.L))
    h = tanh_act(conv2d(concat_channels([z, cond, plane]), w1))
    out = conv2d(h, w2)
    if spec.prediction == "epsilon":
        return out
    sample = tanh_act(out)
    return mul(sub(z, mul(sample, sched.a(level))), 1.0 / sched.b(level))


GeneratorFn = Callable[[Tensor, Tensor, int], Tensor]


class CountingGenerator:
    """Wraps a generator callable and counts forward passes."""

    def __init__(self, fn: GeneratorFn):
        self.fn = fn
        self.calls = 0

    def __call__(self, z: Tensor, cond: Tensor, level: int) -> Tensor:
        self.calls += 1
        return self.fn(z, cond, level)


def as_generator(spec_or_fn: Union[GeneratorSpec, GeneratorFn], sched: DiffusionSchedule) -> GeneratorFn:
    if isinstance(spec_or_fn, GeneratorSpec):
        spec = spec_or_fn
        return lambda z, c, level: toy_generator(z, c, level, spec, sched)
    return spec_or_fn


def ddim_denoise(
    z_start: Tensor,
    start_level: int,
    cond: Tensor,
    spec: Union[GeneratorSpec, GeneratorFn],
    sched: DiffusionSchedule,
) -> Tensor:
    """Run deterministic DDIM from ``start_level`` down to level 0."""
    _check_level(start_level, sched, lo=1)
    gen = as_generator(spec, sched)
    z = z_start
    for level in range(start_level, 0, -1):
        eps = gen(z, cond, level)
        z0_hat = mul(sub(z, mul(eps, sched.b(level))), 1.0 / sched.a(level))
        if level == 1:
            z = z0_hat
        else:
            z = add(mul(z0_hat, sched.a(level - 1)), mul(eps, sched.b(level - 1)))
    return z


def frame_decode(z0: Tensor) -> Tensor:
    """z * 0.5 + 0.5 clamped to [0, 1]."""
    return clamp_st(add(mul(z0, 0.5), 0.5), 0.0, 1.0)


def renoise_to_level(z0: Tensor, zL: Tensor, gamma: int, sched: DiffusionSchedule) -> Tensor:
    _check_level(gamma, sched, lo=1)
    return diffuse(z0, zL, gamma, sched)
