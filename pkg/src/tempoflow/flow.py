"""Nearest-neighbour flow warping, validity masks and depth-derived normals.

Flows are stored as ``[H, W, 2]`` arrays of ``(dx, dy)`` displacements in
pixels pointing from frame t to frame t+1.  Warping pulls frame t+1 back onto
frame t's grid: ``out[y, x] = frame[round(y + dy), round(x + dx)]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, gather_pixels


@dataclass(frozen=True)
class FlowField:
    vectors: np.ndarray  # [H, W, 2], (dx, dy)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ContractError(f"flow must be [H, W, 2], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("flow vectors must be finite")
        object.__setattr__(self, "vectors", v)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def dx(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def dy(self) -> np.ndarray:
        return self.vectors[..., 1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))


@dataclass(frozen=True)
class OcclusionMask:
    occluded: np.ndarray  # [H, W] bool, True = no correspondence in t+1

    def __post_init__(self):
        object.__setattr__(self, "occluded", np.asarray(self.occluded, dtype=bool))

    @property
    def shape(self):
        return self.occluded.shape

    @classmethod
    def clear(cls, height: int, width: int) -> "OcclusionMask":
        return cls(np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class ValidityMask:
    valid: np.ndarray  # [H, W] bool

    def __post_init__(self):
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))

    @property
    def shape(self):
        return self.valid.shape

    def __and__(self, other: "ValidityMask") -> "ValidityMask":
        return ValidityMask(self.valid & other.valid)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def flow_targets(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Integer (row, col) each pixel's flow lands on; may lie outside the frame."""
    h, w = flow.height, flow.width
    rows, cols = np.mgrid[0:h, 0:w]
    tr = (rows + round_half_away(flow.dy)).astype(np.int64)
    tc = (cols + round_half_away(flow.dx)).astype(np.int64)
    return tr, tc


def _in_frame(tr, tc, h, w):
    return (tr >= 0) & (tr < h) & (tc >= 0) & (tc < w)


def valid_mask(flow: FlowField, occ: OcclusionMask) -> ValidityMask:
    if occ.shape != (flow.height, flow.width):
        raise ContractError(f"occlusion {occ.shape} does not match flow {(flow.height, flow.width)}")
    tr, tc = flow_targets(flow)
    return ValidityMask(~occ.occluded & _in_frame(tr, tc, flow.height, flow.width))


def _check_frame(frame: Tensor, flow: FlowField):
    if frame.data.ndim != 3 or frame.shape[1:] != (flow.height, flow.width):
        raise ContractError(
            f"frame {frame.shape} does not match flow {(flow.height, flow.width)}"
        )


def _warp(frame: Tensor, flow: FlowField, mask: ValidityMask, carried=None):
    _check_frame(frame, flow)
    if mask.shape != (flow.height, flow.width):
        raise ContractError("mask does not match flow")
    tr, tc = flow_targets(flow)
    valid = mask.valid & _in_frame(tr, tc, flow.height, flow.width)
    if carried is not None:
        # a pixel stays valid only if the pixel it reads from was valid too
        valid[valid] &= carried[tr[valid], tc[valid]]
    return gather_pixels(frame, tr, tc, valid), ValidityMask(valid)


def warp_nearest(frame: Tensor, flow: FlowField, mask: ValidityMask) -> tuple[Tensor, ValidityMask]:
    """Pull ``frame`` (time t+1) onto the grid of time t through ``flow``."""
    return _warp(frame, flow, mask)


def warp_step(
    frame: Tensor, flow: FlowField, occ: OcclusionMask, carried: np.ndarray | None = None
) -> tuple[Tensor, ValidityMask]:
    """One link of a warp chain; ``carried`` is the validity on the source grid."""
    return _warp(frame, flow, valid_mask(flow, occ), carried)


def chain_warp(
    frame: Tensor, flows: Sequence[FlowField], occs: Sequence[OcclusionMask]
) -> tuple[Tensor, ValidityMask]:
    """Apply ``warp_nearest`` along ``flows`` in order, composing validity."""
    if len(flows) == 0 or len(flows) != len(occs):
        raise ContractError("chain_warp needs equally many flows and occlusions, at least one")
    out, carried = frame, None
    for flow, occ in zip(flows, occs):
        out, vm = warp_step(out, flow, occ, carried)
        carried = vm.valid
    return out, ValidityMask(carried)


def derive_occlusion(frame_t, frame_t1, flow: FlowField, threshold: float = 1e-3) -> OcclusionMask:
    """Mark pixels whose flow leaves the frame or whose colour changes too much."""
    if threshold <= 0:
        raise ContractError("threshold must be positive")
    a = frame_t.data if isinstance(frame_t, Tensor) else np.asarray(frame_t, dtype=np.float64)
    b = frame_t1.data if isinstance(frame_t1, Tensor) else np.asarray(frame_t1, dtype=np.float64)
    if a.shape != b.shape or a.shape[1:] != (flow.height, flow.width):
        raise ContractError("frames and flow disagree on dimensions")
    tr, tc = flow_targets(flow)
    inside = _in_frame(tr, tc, flow.height, flow.width)
    occluded = ~inside
    diff = a[:, inside] - b[:, tr[inside], tc[inside]]
    occluded[inside] = np.mean(diff * diff, axis=0) > threshold
    return OcclusionMask(occluded)


def intrinsics(fx: float, fy: float, cx: float = 0.0, cy: float = 0.0) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def depth_normal_vectors(depth: np.ndarray, cam: np.ndarray) -> np.ndarray:
    """Unit surface normals ``[3, H, W]`` from a depth map, before encoding."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ContractError(f"depth must be [H, W], got {depth.shape}")
    if np.any(~(depth > 0)):
        raise ContractError("depth must be strictly positive")
    cam = np.asarray(cam, dtype=np.float64)
    # np.gradient: central differences inside, one-sided at the borders
    d_rows, d_cols = np.gradient(depth) if min(depth.shape) > 1 else _gradient_small(depth)
    dx = d_cols * cam[0, 0] / depth
    dy = d_rows * cam[1, 1] / depth
    n = np.stack([-dx, -dy, np.ones_like(depth)])
    return n / np.sqrt((n * n).sum(axis=0, keepdims=True))


def _gradient_small(depth):
    h, w = depth.shape
    gr = np.gradient(depth, axis=0) if h > 1 else np.zeros_like(depth)
    gc = np.gradient(depth, axis=1) if w > 1 else np.zeros_like(depth)
    return gr, gc


def depth_to_normal(depth: np.ndarray, cam: np.ndarray) -> np.ndarray:
    """Normals encoded into [0, 1] as ``n * 0.5 + 0.5``."""
    return np.clip(depth_normal_vectors(depth, cam) * 0.5 + 0.5, 0.0, 1.0)
