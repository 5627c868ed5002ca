"""Endpoint error, warp error and an exhaustive block-matching flow estimator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .consistency import objective
from .errors import ContractError
from .flow import FlowField, OcclusionMask, ValidityMask, valid_mask
from .tensor import Tensor


@dataclass
class EpeResult:
    mean_epe: float
    per_frame: list[float] = field(default_factory=list)
    valid_pixel_fraction: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def _mask_array(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = mask.valid if isinstance(mask, ValidityMask) else np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ContractError(f"mask {m.shape} does not match flow {shape}")
    return m


def epe(pred: FlowField, gt: FlowField, mask: ValidityMask | np.ndarray | None = None) -> float:
    """Mean Euclidean distance between flow vectors over the masked pixels."""
    if pred.vectors.shape != gt.vectors.shape:
        raise ContractError(f"flow shapes differ: {pred.vectors.shape} vs {gt.vectors.shape}")
    m = _mask_array(mask, gt.vectors.shape[:2])
    if not m.any():
        raise ContractError("EPE over an empty mask is undefined")
    d = pred.vectors - gt.vectors
    return float(np.sqrt((d * d).sum(axis=-1))[m].mean())


def warp_error(frames: Sequence, flows: Sequence[FlowField], occs: Sequence[OcclusionMask], S: int | None = None) -> float:
    """The consistency objective as a plain number."""
    return objective([f if isinstance(f, Tensor) else Tensor(f) for f in frames], flows, occs, S).item()


def _candidate_order(radius: int) -> list[tuple[int, int]]:
    cands = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # smallest displacement first, then row-major
    return sorted(cands, key=lambda c: (c[0] * c[0] + c[1] * c[1], c[0], c[1]))


def block_costs(frame_a: np.ndarray, frame_b: np.ndarray, block: int, radius: int):
    """Per-tile mean SSD for every candidate displacement.

    Returns ``(candidates, costs)`` with ``costs[i, ty, tx]`` the cost of
    candidate ``i`` for tile ``(ty, tx)``; ``inf`` where the displaced tile
    leaves ``frame_b``.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape != b.shape:
        raise ContractError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if block < 1 or radius < 1:
        raise ContractError("block and radius must be at least 1")
    _, H, W = a.shape
    if H < block or W < block:
        raise ContractError(f"frames {H}x{W} are smaller than one {block}x{block} block")
    starts_y = np.arange(0, H, block)
    starts_x = np.arange(0, W, block)
    counts = np.outer(np.minimum(block, H - starts_y), np.minimum(block, W - starts_x)) * a.shape[0]
    cands = _candidate_order(radius)
    costs = np.empty((len(cands), len(starts_y), len(starts_x)))
    for i, (dy, dx) in enumerate(cands):
        sq = np.full((H, W), np.inf)
        ys, ye = max(0, -dy), min(H, H - dy)
        xs, xe = max(0, -dx), min(W, W - dx)
        if ys < ye and xs < xe:
            d = a[:, ys:ye, xs:xe] - b[:, ys + dy:ye + dy, xs + dx:xe + dx]
            sq[ys:ye, xs:xe] = (d * d).sum(axis=0)
        sums = np.add.reduceat(np.add.reduceat(sq, starts_y, axis=0), starts_x, axis=1)
        costs[i] = sums / counts
    return cands, costs


def block_match_flow(frame_a, frame_b, block: int = 4, radius: int = 3) -> FlowField:
    """Exhaustive integer block matching from ``frame_a`` to ``frame_b``."""
    a = np.asarray(frame_a.data if isinstance(frame_a, Tensor) else frame_a)
    b = np.asarray(frame_b.data if isinstance(frame_b, Tensor) else frame_b)
    cands, costs = block_costs(a, b, block, radius)
    # argmin returns the first minimum, and candidates are already in tie-break order
    best = np.argmin(costs, axis=0)
    H, W = a.shape[-2:]
    vec = np.zeros((H, W, 2))
    for ty in range(best.shape[0]):
        for tx in range(best.shape[1]):
            dy, dx = cands[best[ty, tx]]
            vec[ty * block:(ty + 1) * block, tx * block:(tx + 1) * block] = (dx, dy)
    return FlowField(vec)


def clip_epe(
    frames: Sequence,
    gt_flows: Sequence[FlowField],
    occs: Sequence[OcclusionMask] | None = None,
    block: int = 4,
    radius: int = 3,
    masked: bool = False,
) -> EpeResult:
    """Estimate flow between consecutive frames and score it against ground truth.

    With ``masked`` the score covers only pixels valid under the occlusions;
    otherwise every in-frame pixel counts.
    """
    per, valid_px, total_px = [], 0, 0
    for t, gt in enumerate(gt_flows):
        a = frames[t].data if isinstance(frames[t], Tensor) else frames[t]
        b = frames[t + 1].data if isinstance(frames[t + 1], Tensor) else frames[t + 1]
        pred = block_match_flow(a, b, block, radius)
        m = valid_mask(gt, occs[t]).valid if masked and occs is not None else None
        per.append(epe(pred, gt, m))
        n = gt.height * gt.width
        total_px += n
        valid_px += int(m.sum()) if m is not None else n
    return EpeResult(float(np.mean(per)), per, valid_px / total_px if total_px else 0.0)
