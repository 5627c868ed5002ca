"""Procedural sprite scenes with exact frames, depths, flows and occlusions.

Every surface (the background and each sprite) carries its own texture,
indexed in surface-local coordinates, so a surface point that stays visible
has bit-identical colour in consecutive frames.  Blue levels are drawn from
a residue class per surface, which keeps any two surfaces distinguishable
at every pixel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .flow import FlowField, OcclusionMask, depth_to_normal, intrinsics

LEVELS = 32


@dataclass
class Sprite:
    w: int
    h: int
    x: int
    y: int
    vx: int = 1
    vy: int = 0
    depth: float = 3.0
    texture_seed: int = 1


@dataclass
class SceneSpec:
    width: int = 32
    height: int = 32
    T: int = 8
    background_seed: int = 0
    background_depth: float = 10.0
    sprites: list[Sprite] = field(default_factory=list)
    fx: float = 32.0
    fy: float = 32.0
    pan: tuple[int, int] = (0, 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pan"] = list(self.pan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        try:
            sprites = [Sprite(**s) for s in d.pop("sprites", [])]
            pan = tuple(int(v) for v in d.pop("pan", (0, 0)))
            return cls(sprites=sprites, pan=pan, **d)
        except TypeError as exc:
            raise ConfigError(f"bad scene spec: {exc}") from exc


@dataclass
class SceneBundle:
    frames: list[np.ndarray]  # T x [3, H, W] in [0, 1]
    depths: list[np.ndarray]  # T x [H, W]
    flows: list[FlowField]  # T-1, t -> t+1
    occlusions: list[OcclusionMask]  # T-1
    intrinsics: np.ndarray
    spec: SceneSpec

    @property
    def T(self) -> int:
        return len(self.frames)


def default_scene_spec(T: int = 8, size: int = 32) -> SceneSpec:
    """One 8x8 sprite crossing a static textured background at 1 px per frame."""
    return SceneSpec(
        width=size,
        height=size,
        T=T,
        sprites=[Sprite(w=8, h=8, x=size // 4, y=(size * 3) // 8, vx=1, vy=0, depth=3.0)],
    )


def _texture(rng: np.random.Generator, h: int, w: int, surface: int, n_surfaces: int) -> np.ndarray:
    rg = rng.integers(0, LEVELS, size=(2, h, w))
    blue_levels = np.arange(surface, LEVELS, n_surfaces)
    b = rng.choice(blue_levels, size=(1, h, w))
    return np.concatenate([rg, b]).astype(np.float64) / (LEVELS - 1)


def _validate(spec: SceneSpec) -> None:
    if spec.T < 2:
        raise ContractError("a scene needs at least two frames")
    if spec.width < 1 or spec.height < 1:
        raise ContractError("scene dimensions must be positive")
    if spec.background_depth <= 0:
        raise ContractError("background depth must be positive")
    if len(spec.sprites) + 1 > LEVELS:
        raise ContractError(f"at most {LEVELS - 1} sprites are supported")
    for i, s in enumerate(spec.sprites):
        if s.w < 1 or s.h < 1:
            raise ContractError(f"sprite {i} has zero area")
        if not 0 < s.depth < spec.background_depth:
            raise ContractError(f"sprite {i} must lie in front of the background")
        if s.x < 0 or s.y < 0 or s.x + s.w > spec.width or s.y + s.h > spec.height:
            raise ContractError(f"sprite {i} does not fit the first frame")
        for v in (s.vx, s.vy):
            if int(v) != v:
                raise ContractError(f"sprite {i} velocity must be integer")


def generate(spec: SceneSpec, seed: int = 0) -> SceneBundle:
    _validate(spec)
    H, W, T = spec.height, spec.width, spec.T
    n_surf = len(spec.sprites) + 1
    px, py = (int(v) for v in spec.pan)

    bg_rng = np.random.default_rng([seed, spec.background_seed, 0])
    canvas_h, canvas_w = H + abs(py) * (T - 1), W + abs(px) * (T - 1)
    bg_tex = _texture(bg_rng, canvas_h, canvas_w, 0, n_surf)
    off_y, off_x = max(py, 0) * (T - 1), max(px, 0) * (T - 1)
    sprite_tex = [
        _texture(np.random.default_rng([seed, s.texture_seed, i + 1]), s.h, s.w, i + 1, n_surf)
        for i, s in enumerate(spec.sprites)
    ]
    # far to near; later sprites win ties
    order = sorted(range(len(spec.sprites)), key=lambda i: -spec.sprites[i].depth)

    rows, cols = np.mgrid[0:H, 0:W]
    frames, depths, surfaces, vel = [], [], [], []
    for t in range(T):
        r0, c0 = off_y + rows - py * t, off_x + cols - px * t
        frame = bg_tex[:, r0, c0].copy()
        depth = np.full((H, W), float(spec.background_depth))
        surf = np.zeros((H, W), dtype=np.int64)
        v = np.zeros((H, W, 2))
        v[..., 0], v[..., 1] = px, py
        for i in order:
            s = spec.sprites[i]
            sx, sy = s.x + s.vx * t, s.y + s.vy * t
            inside = (cols >= sx) & (cols < sx + s.w) & (rows >= sy) & (rows < sy + s.h)
            if not inside.any():
                continue
            frame[:, inside] = sprite_tex[i][:, rows[inside] - sy, cols[inside] - sx]
            depth[inside] = s.depth
            surf[inside] = i + 1
            v[inside] = (s.vx, s.vy)
        frames.append(frame)
        depths.append(depth)
        surfaces.append(surf)
        vel.append(v)

    flows, occs = [], []
    for t in range(T - 1):
        tr = rows + vel[t][..., 1].astype(np.int64)
        tc = cols + vel[t][..., 0].astype(np.int64)
        inside = (tr >= 0) & (tr < H) & (tc >= 0) & (tc < W)
        occ = ~inside
        occ[inside] = surfaces[t + 1][tr[inside], tc[inside]] != surfaces[t][inside]
        flows.append(FlowField(vel[t]))
        occs.append(OcclusionMask(occ))
    return SceneBundle(frames, depths, flows, occs, intrinsics(spec.fx, spec.fy), spec)


def condition_stack(bundle: SceneBundle, modality: str = "depth") -> list[np.ndarray]:
    """Per-frame generator conditions: scaled depth (1 channel) or encoded normals (3)."""
    if modality == "depth":
        top = max(float(d.max()) for d in bundle.depths)
        return [(d / top)[None] for d in bundle.depths]
    if modality == "normal":
        return [depth_to_normal(d, bundle.intrinsics) for d in bundle.depths]
    raise ContractError(f"unknown modality {modality!r}")
