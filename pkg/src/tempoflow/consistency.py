"""Temporal-consistency objective and noise-latent optimization.

Frame t is chain-warped back through flows t-1, t-2, ... and compared with
each earlier frame inside a window of size S.  The objective sums those
per-frame discrepancies, each divided by ``min(S, t) + 1``.  Optimization
runs Adam on the latents at noise level ``gamma`` while the generator stays
fixed; gradients are accumulated one frame graph at a time.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .diffusion import (
    CountingGenerator,
    DiffusionSchedule,
    GeneratorSpec,
    as_generator,
    ddim_denoise,
    frame_decode,
    renoise_to_level,
)
from .errors import ContractError, NumericalError
from .flow import FlowField, OcclusionMask, warp_step
from .tensor import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    arccos,
    backward,
    div,
    dot,
    masked_nmse,
    mul,
    sin,
    sqrt,
)

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    T: int
    S: int | None = None
    L: int = 10
    gamma: int | None = None
    k: int = 1
    epochs: int = 300
    lr: float = 1e-3
    seed: int = 0
    shared_init: bool = True
    # stop when the best objective improved by less than min_rel_improvement
    # over the last `patience` epochs; patience 0 disables early stopping
    patience: int = 25
    min_rel_improvement: float = 1e-3

    def __post_init__(self):
        if self.S is None:
            self.S = self.T
        if self.gamma is None:
            self.gamma = self.L
        if self.T < 1 or self.L < 1:
            raise ContractError("T and L must be positive")
        if not 1 <= self.gamma <= self.L:
            raise ContractError(f"gamma must lie in [1, {self.L}], got {self.gamma}")
        if self.k < 1 or self.S < 1:
            raise ContractError("k and S must be at least 1")
        if self.epochs < 0 or self.lr <= 0:
            raise ContractError("epochs must be >= 0 and lr > 0")


@dataclass
class LatentSequence:
    latents: list[np.ndarray]
    level: int

    @property
    def T(self) -> int:
        return len(self.latents)


@dataclass
class ConsistencyReport:
    objective: list[float] = field(default_factory=list)
    final_objective: float = float("nan")
    best_epoch: int = 0
    per_frame_discrepancy: list[float] = field(default_factory=list)
    generator_forwards: int = 0
    forwards_per_epoch: int = 0
    setup_forwards: int = 0
    optimized_latents: list[int] = field(default_factory=list)
    peak_live_graphs: int = 0
    epochs_run: int = 0
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def init_noise(cfg: OptimConfig, shape: Sequence[int] = (3, 32, 32)) -> LatentSequence:
    rng = np.random.default_rng(cfg.seed)
    if cfg.shared_init:
        z = rng.standard_normal(tuple(shape))
        latents = [z.copy() for _ in range(cfg.T)]
    else:
        latents = [rng.standard_normal(tuple(shape)) for _ in range(cfg.T)]
    return LatentSequence(latents, level=cfg.L)


def _as_frame(f) -> Tensor:
    return f if isinstance(f, Tensor) else Tensor(f)


def _check_inputs(n_frames, flows, occs):
    if len(flows) != n_frames - 1 or len(occs) != n_frames - 1:
        raise ContractError(
            f"{n_frames} frames need {n_frames - 1} flows and occlusions, "
            f"got {len(flows)} and {len(occs)}"
        )


def window_discrepancy(current: Tensor, refs: Sequence, flows, occs, t: int, S: int) -> Tensor:
    """Sum over s = 1..min(S, t) of masked_nmse(warp of ``current`` to t-s, refs[t-s])."""
    total = Tensor(0.0)
    warped, carried = current, None
    for s in range(1, min(S, t) + 1):
        warped, vm = warp_step(warped, flows[t - s], occs[t - s], carried)
        carried = vm.valid
        total = add(total, masked_nmse(warped, _as_frame(refs[t - s]), carried))
    return total


def discrepancy(frames: Sequence, flows, occs, t: int, S: int) -> Tensor:
    T = len(frames)
    _check_inputs(T, flows, occs)
    if not 0 <= t < T:
        raise ContractError(f"frame index {t} outside [0, {T})")
    if S < 1:
        raise ContractError("window size must be at least 1")
    return window_discrepancy(_as_frame(frames[t]), frames, flows, occs, t, S)


def objective(frames: Sequence, flows, occs, S: int | None = None) -> Tensor:
    T = len(frames)
    S = T if S is None else S
    _check_inputs(T, flows, occs)
    total = Tensor(0.0)
    for t in range(1, T):
        d = discrepancy(frames, flows, occs, t, S)
        total = add(total, mul(d, 1.0 / (min(S, t) + 1)))
    return total


def frame0_references(prev_frames: Sequence, flows, occs, S: int) -> list[tuple[Tensor, np.ndarray]]:
    """Previous-epoch frames 1..min(S, T-1) warped back onto frame 0's grid."""
    out = []
    for s in range(1, min(S, len(prev_frames) - 1) + 1):
        warped, carried = _as_frame(prev_frames[s]), None
        for j in range(s - 1, -1, -1):
            warped, vm = warp_step(warped, flows[j], occs[j], carried)
            carried = vm.valid
        out.append((warped, carried))
    return out


def frame0_loss(frame0: Tensor, refs0: Sequence[tuple[Tensor, np.ndarray]]) -> Tensor | None:
    if not refs0:
        return None
    total = Tensor(0.0)
    for warped, valid in refs0:
        total = add(total, masked_nmse(frame0, warped, valid))
    return mul(total, 1.0 / (len(refs0) + 1))


def accumulate_gradients_framewise(
    latent_of: Callable[[int], Tensor],
    conds: Sequence[Tensor],
    flows: Sequence[FlowField],
    occs: Sequence[OcclusionMask],
    S: int,
    generator,
    sched: DiffusionSchedule,
    level: int,
    prev_frames: Sequence[Tensor] | None = None,
) -> list[Tensor]:
    """Build, backpropagate and free one frame graph at a time.

    Frame t >= 1 is compared against detached frames of this pass; frame 0
    against ``prev_frames`` from the previous pass, if any.  Gradients land
    in the ``grad`` of whatever leaves ``latent_of`` builds on.  Returns the
    detached frames.
    """
    T = len(conds)
    gen = as_generator(generator, sched)
    refs0 = frame0_references(prev_frames, flows, occs, S) if prev_frames else []
    cache: list[Tensor] = []
    for t in range(T):
        tape = Tape()
        try:
            with tape:
                frame = frame_decode(ddim_denoise(latent_of(t), level, conds[t], gen, sched))
                if t == 0:
                    loss = frame0_loss(frame, refs0)
                else:
                    loss = mul(
                        window_discrepancy(frame, cache, flows, occs, t, S),
                        1.0 / (min(S, t) + 1),
                    )
                if loss is not None and loss.requires_grad:
                    backward(loss)
        finally:
            tape.release()
        cache.append(frame.detach())
    return cache


def slerp(u: Tensor, v: Tensor, alpha: float) -> Tensor:
    """Spherical interpolation; linear below an angle of 1e-6 rad."""
    if u.shape != v.shape:
        raise ContractError(f"slerp shapes differ: {u.shape} vs {v.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise ContractError("slerp needs nonzero inputs")
    cos = float(np.dot(u.data.ravel(), v.data.ravel())) / (nu * nv)
    theta = math.acos(min(1.0, max(-1.0, cos)))
    if theta < 1e-6:
        return add(mul(u, 1.0 - alpha), mul(v, alpha))
    if math.pi - theta < 1e-6:
        raise ContractError("slerp between antiparallel vectors is undefined")
    th = arccos(div(dot(u, v), mul(sqrt(dot(u, u)), sqrt(dot(v, v)))))
    s = sin(th)
    cu = div(sin(mul(th, 1.0 - alpha)), s)
    cv = div(sin(mul(th, alpha)), s)
    return add(mul(u, cu), mul(v, cv))


def keyframe_indices(T: int, k: int) -> list[int]:
    """Latent indices optimized directly: multiples of k plus the residual tail."""
    if k < 1 or T < 1:
        raise ContractError("T and k must be positive")
    residual = (T - 1) % k
    direct = {t for t in range(0, T, k)} | set(range(T - residual, T))
    return sorted(direct)


def _interp_source(t: int, k: int, T: int):
    residual = (T - 1) % k
    if t % k == 0 or t >= T - residual:
        return None
    lo = k * (t // k)
    hi = k * math.ceil(t / k)
    return lo, hi, (t - lo) / k


def expand_keyframes(latents: Mapping[int, Tensor] | Sequence, k: int, T: int) -> list[Tensor]:
    """Full-length latent list; in-between frames are Slerp-interpolated."""
    if isinstance(latents, LatentSequence):
        latents = latents.latents
    if not isinstance(latents, Mapping):
        latents = {t: z for t, z in enumerate(latents) if z is not None}
    need = keyframe_indices(T, k)
    missing = [t for t in need if t not in latents]
    if missing:
        raise ContractError(f"missing keyframe latents for frames {missing}")
    out = []
    for t in range(T):
        src = _interp_source(t, k, T)
        if src is None:
            out.append(_as_frame(latents[t]))
        else:
            lo, hi, a = src
            out.append(slerp(_as_frame(latents[lo]), _as_frame(latents[hi]), a))
    return out


def _latent_builder(variables: Mapping[int, Tensor], k: int, T: int) -> Callable[[int], Tensor]:
    def latent_of(t: int) -> Tensor:
        src = _interp_source(t, k, T)
        if src is None:
            return variables[t]
        lo, hi, a = src
        return slerp(variables[lo], variables[hi], a)

    return latent_of


def render(
    latents: Sequence,
    conds: Sequence[Tensor],
    generator,
    sched: DiffusionSchedule,
    level: int,
    workers: int = 1,
) -> list[Tensor]:
    """Denoise every latent from ``level`` and decode; no gradients.

    Frames are independent, so ``workers > 1`` renders them on a thread pool;
    the output does not depend on the worker count.
    """
    gen = as_generator(generator, sched)

    def one(pair):
        z, c = pair
        return frame_decode(ddim_denoise(Tensor(np.asarray(_as_frame(z).data)), level, c, gen, sched))

    pairs = list(zip(latents, conds))
    if workers <= 1 or len(pairs) < 2:
        return [one(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, pairs))


def prepare_latents(
    cfg: OptimConfig, zL: LatentSequence, conds: Sequence[Tensor], generator, sched: DiffusionSchedule
) -> LatentSequence:
    """Move the initial noise to level gamma: full denoise, then re-noise with the same zL."""
    if cfg.gamma == sched.L:
        return LatentSequence([z.copy() for z in zL.latents], sched.L)
    gen = as_generator(generator, sched)
    out = []
    for z, c in zip(zL.latents, conds):
        zt = Tensor(z)
        z0 = ddim_denoise(zt, sched.L, c, gen, sched)
        out.append(renoise_to_level(z0, zt, cfg.gamma, sched).data.copy())
    return LatentSequence(out, cfg.gamma)


def optimize(
    cfg: OptimConfig,
    conds: Sequence,
    flows: Sequence[FlowField],
    occs: Sequence[OcclusionMask],
    spec: GeneratorSpec,
    sched: DiffusionSchedule,
    init: LatentSequence | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[LatentSequence, ConsistencyReport]:
    """Adam on the level-gamma latents so the decoded clip agrees along the flows."""
    T = cfg.T
    conds = [_as_frame(c) for c in conds]
    if len(conds) != T:
        raise ContractError(f"expected {T} conditions, got {len(conds)}")
    _check_inputs(T, flows, occs)
    if sched.L != cfg.L:
        raise ContractError(f"schedule has L={sched.L} but config says {cfg.L}")
    shape = (3,) + conds[0].shape[1:]
    for f in flows:
        if (f.height, f.width) != shape[1:]:
            raise ContractError("flow dimensions do not match the conditions")

    started = time.perf_counter()
    gen = CountingGenerator(as_generator(spec, sched))
    zL = init if init is not None else init_noise(cfg, shape)
    start = prepare_latents(cfg, zL, conds, gen, sched)
    report = ConsistencyReport(setup_forwards=gen.calls)

    idx = keyframe_indices(T, cfg.k)
    variables = {t: Tensor(start.latents[t].copy(), requires_grad=True) for t in idx}
    states = {t: AdamState.for_param(v, lr=cfg.lr) for t, v in variables.items()}
    latent_of = _latent_builder(variables, cfg.k, T)
    report.optimized_latents = idx

    def snapshot():
        return {t: v.data.copy() for t, v in variables.items()}

    best_value, best_vars, best_epoch = math.inf, snapshot(), 0
    prev_frames = None
    Tape.reset_stats()
    for epoch in range(cfg.epochs + 1):
        last = epoch == cfg.epochs
        for v in variables.values():
            v.zero_grad()
        calls_before = gen.calls
        prev_frames = accumulate_gradients_framewise(
            latent_of, conds, flows, occs, cfg.S, gen, sched, cfg.gamma, prev_frames
        )
        report.forwards_per_epoch = gen.calls - calls_before
        value = objective(prev_frames, flows, occs, cfg.S).item()
        if not math.isfinite(value):
            raise NumericalError(f"objective became non-finite at epoch {epoch}")
        report.objective.append(value)
        if callback is not None:
            callback(epoch, value)
        if value < best_value:
            best_value, best_vars, best_epoch = value, snapshot(), epoch
        if last or _should_stop(report.objective, cfg):
            break
        for t, v in variables.items():
            if v.grad is None:
                v.grad = np.zeros(v.shape)
            adam_step(v, states[t])
            if not np.all(np.isfinite(v.data)):
                raise NumericalError(f"latent {t} became non-finite at epoch {epoch}")
        report.epochs_run = epoch + 1

    for t, v in variables.items():
        v.data = best_vars[t]
        v.zero_grad()
    final_latents = [z.data.copy() for z in expand_keyframes(dict(variables), cfg.k, T)]
    frames = render(final_latents, conds, gen, sched, cfg.gamma)
    report.final_objective = objective(frames, flows, occs, cfg.S).item()
    report.per_frame_discrepancy = [
        discrepancy(frames, flows, occs, t, cfg.S).item() for t in range(T)
    ]
    report.best_epoch = best_epoch
    report.generator_forwards = gen.calls
    report.peak_live_graphs = Tape.peak
    report.wall_seconds = time.perf_counter() - started
    log.info(
        "optimized %d latents: objective %.6g -> %.6g in %d epochs",
        len(idx), report.objective[0], report.final_objective, report.epochs_run,
    )
    return LatentSequence(final_latents, cfg.gamma), report


def _should_stop(history: list[float], cfg: OptimConfig) -> bool:
    p = cfg.patience
    if p <= 0 or len(history) <= p:
        return False
    before = min(history[:-p])
    gain = before - min(history)
    return gain <= 0.0 or gain < cfg.min_rel_improvement * before
