"""Command-line entry point: ``tempoflow <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Failures print one line ``error kind=<kind> code=<n> message=<json string>``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io as tio
from . import plotting
from .consistency import LatentSequence, OptimConfig, init_noise, optimize, render
from .diffusion import GeneratorSpec, make_schedule
from .errors import ConfigError, DataError, TempoflowError
from .flow import OcclusionMask, depth_to_normal, derive_occlusion, intrinsics
from .metrics import clip_epe, warp_error
from .scene import SceneSpec, generate

log = logging.getLogger("tempoflow")

_OPTIM_KEYS = {f.name for f in fields(OptimConfig)}


@dataclass
class RunConfig:
    optim: OptimConfig
    conditions: Path
    flows: Path
    occlusions: Path
    modality: str = "depth"
    intrinsics: tuple[float, float] | None = None
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    alpha_min: float = 1e-3
    output: Path | None = None


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    base = path.parent

    def _path(key, required=True):
        if key not in raw:
            if required:
                raise ConfigError(f"{path}: missing key {key!r}")
            return None
        p = Path(raw[key])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ConfigError(f"{path}: {key} path {p} does not exist")
        return p

    conditions, flows, occ = _path("conditions"), _path("flows"), _path("occlusions")
    n_cond = len(tio._numbered(conditions, ".pfm") if _has(conditions, ".pfm")
                 else tio._numbered(conditions, ".png"))
    optim_kw = {k: raw[k] for k in _OPTIM_KEYS if k in raw}
    optim_kw.setdefault("T", n_cond)
    unknown = set(raw) - _OPTIM_KEYS - {
        "conditions", "flows", "occlusions", "modality", "intrinsics", "generator_seed",
        "hidden_channels", "gain", "alpha_min", "output",
    }
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        optim = OptimConfig(**optim_kw)
        gen = GeneratorSpec(
            seed=int(raw.get("generator_seed", 0)),
            hidden_channels=int(raw.get("hidden_channels", 8)),
            gain=float(raw.get("gain", GeneratorSpec.gain)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    modality = raw.get("modality", "depth")
    if modality not in ("depth", "normal"):
        raise ConfigError(f"{path}: modality must be 'depth' or 'normal'")
    intr = raw.get("intrinsics")
    if intr is not None:
        if not (isinstance(intr, list) and len(intr) == 2):
            raise ConfigError(f"{path}: intrinsics must be [fx, fy]")
        intr = (float(intr[0]), float(intr[1]))
    out = raw.get("output")
    return RunConfig(
        optim=optim,
        conditions=conditions,
        flows=flows,
        occlusions=occ,
        modality=modality,
        intrinsics=intr,
        generator=gen,
        alpha_min=float(raw.get("alpha_min", 1e-3)),
        output=(base / out) if out else None,
    )


def _has(directory: Path, suffix: str) -> bool:
    return any(p.suffix.lower() == suffix for p in Path(directory).iterdir())


def _find_intrinsics(cfg: RunConfig) -> np.ndarray:
    if cfg.intrinsics is not None:
        return intrinsics(*cfg.intrinsics)
    for cand in (cfg.conditions / "intrinsics.json", cfg.conditions.parent / "intrinsics.json"):
        if cand.exists():
            return np.asarray(json.loads(cand.read_text()), dtype=np.float64)
    raise ConfigError("normal modality from depth maps needs intrinsics [fx, fy]")


def load_conditions(cfg: RunConfig) -> list[np.ndarray]:
    if _has(cfg.conditions, ".pfm"):
        depths = tio.read_depths(cfg.conditions)
        if cfg.modality == "depth":
            top = max(float(d.max()) for d in depths)
            if top <= 0:
                raise DataError("depth maps must be positive")
            return [(d / top)[None] for d in depths]
        cam = _find_intrinsics(cfg)
        return [depth_to_normal(d, cam) for d in depths]
    return tio.read_frames(cfg.conditions)


def _load_inputs(cfg: RunConfig):
    conds = load_conditions(cfg)
    flows = tio.read_flows(cfg.flows)
    occs = tio.read_occlusions(cfg.occlusions)
    T = cfg.optim.T
    if len(conds) != T or len(flows) != T - 1 or len(occs) != T - 1:
        raise DataError(
            f"expected {T} conditions and {T - 1} flows/occlusions, "
            f"got {len(conds)}, {len(flows)}, {len(occs)}"
        )
    dims = {c.shape[1:] for c in conds} | {(f.height, f.width) for f in flows} | {o.shape for o in occs}
    if len(dims) != 1:
        raise DataError(f"inputs disagree on dimensions: {sorted(dims)}")
    return conds, flows, occs


def _workers() -> int:
    raw = os.environ.get("TEMPOFLOW_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"TEMPOFLOW_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("TEMPOFLOW_THREADS must be at least 1")
    return n


def _emit(pairs: dict) -> None:
    for k, v in pairs.items():
        print(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")


def _write_frames(out: Path, frames) -> None:
    arrays = [np.asarray(f.data if hasattr(f, "data") else f) for f in frames]
    tio.write_sequence(out / "frames", arrays, tio.write_png, "frame", ".png")
    plotting.contact_sheet(arrays, out / "frames.png")


def cmd_gen_scene(args) -> int:
    try:
        spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    except FileNotFoundError as exc:
        raise ConfigError(f"{args.spec}: scene spec not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON ({exc.msg})") from exc
    bundle = generate(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tio.write_sequence(out / "frames", bundle.frames, tio.write_png, "frame", ".png")
    tio.write_sequence(out / "depths", bundle.depths, tio.write_pfm, "depth", ".pfm")
    tio.write_sequence(out / "flows", bundle.flows, tio.write_flo, "flow", ".flo")
    tio.write_sequence(out / "occlusions", [o.occluded for o in bundle.occlusions],
                       tio.write_pgm, "occ", ".pgm")
    (out / "intrinsics.json").write_text(json.dumps(bundle.intrinsics.tolist()) + "\n")
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    _emit({"frames": bundle.T, "width": spec.width, "height": spec.height, "out": str(out)})
    return 0


def _parse_pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected 'fx,fy', got {text!r}") from exc
    return a, b


def cmd_derive_normal(args) -> int:
    cam = intrinsics(*_parse_pair(args.intrinsics))
    depths = tio.read_depths(args.depth)
    normals = [depth_to_normal(d, cam) for d in depths]
    tio.write_sequence(Path(args.out), normals, tio.write_png, "normal", ".png")
    _emit({"normals": len(normals), "out": args.out})
    return 0


def cmd_derive_occlusion(args) -> int:
    frames = tio.read_frames(args.frames)
    flows = tio.read_flows(args.flows)
    if len(flows) != len(frames) - 1:
        raise DataError(f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}")
    if args.threshold <= 0:
        raise ConfigError("threshold must be positive")
    occs = [derive_occlusion(frames[t], frames[t + 1], flows[t], args.threshold)
            for t in range(len(flows))]
    tio.write_sequence(Path(args.out), [o.occluded for o in occs], tio.write_pgm, "occ", ".pgm")
    _emit({"occlusions": len(occs), "occluded_pixels": int(sum(o.occluded.sum() for o in occs)),
           "out": args.out})
    return 0


def cmd_optimize(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out) if args.out else cfg.output
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'output' in the config")
    conds, flows, occs = _load_inputs(cfg)
    sched = make_schedule(cfg.optim.L, cfg.alpha_min)
    latents, report = optimize(cfg.optim, conds, flows, occs, cfg.generator, sched)
    out.mkdir(parents=True, exist_ok=True)
    tio.write_latents(out / "latents", latents)
    frames = render(latents.latents, conds, cfg.generator, sched, latents.level, workers=_workers())
    _write_frames(out, frames)
    data = report.to_dict()
    timing = {"wall_seconds": data.pop("wall_seconds")}
    # wall-clock time kept apart so report.json is reproducible byte for byte
    (out / "report.json").write_text(json.dumps(data, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    plotting.plot_objective(report.objective, out / "objective.png")
    plotting.plot_per_frame(report.per_frame_discrepancy, out / "discrepancy.png", "discrepancy")
    _emit({
        "initial_objective": report.objective[0],
        "final_objective": report.final_objective,
        "epochs": report.epochs_run,
        "generator_forwards": report.generator_forwards,
        "forwards_per_epoch": report.forwards_per_epoch,
        "wall_seconds": timing["wall_seconds"],
        "out": str(out),
    })
    return 0


def cmd_render(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out) if args.out else cfg.output
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'output' in the config")
    conds = load_conditions(cfg)
    sched = make_schedule(cfg.optim.L, cfg.alpha_min)
    if args.latents:
        seq = tio.read_latents(args.latents)
    else:
        seq = init_noise(cfg.optim, (3,) + conds[0].shape[1:])
    if seq.T != len(conds):
        raise DataError(f"{seq.T} latents for {len(conds)} conditions")
    if seq.latents[0].shape[1:] != conds[0].shape[1:]:
        raise DataError("latent and condition dimensions differ")
    if not 1 <= seq.level <= sched.L:
        raise DataError(f"latent level {seq.level} outside [1, {sched.L}]")
    frames = render(seq.latents, conds, cfg.generator, sched, seq.level, workers=_workers())
    out.mkdir(parents=True, exist_ok=True)
    _write_frames(out, frames)
    _emit({"frames": len(frames), "level": seq.level, "out": str(out)})
    return 0


def cmd_eval(args) -> int:
    frames = tio.read_frames(args.frames)
    flows = tio.read_flows(args.flows)
    occs = tio.read_occlusions(args.occ)
    if len(flows) != len(frames) - 1 or len(occs) != len(flows):
        raise DataError(f"{len(frames)} frames need {len(frames) - 1} flows and occlusions")
    dims = {f.shape[1:] for f in frames} | {(f.height, f.width) for f in flows} | {o.shape for o in occs}
    if len(dims) != 1:
        raise DataError(f"inputs disagree on dimensions: {sorted(dims)}")
    result = {"frames": len(frames), "warp_error": warp_error(frames, flows, occs, args.window)}
    if args.estimator == "block":
        full = clip_epe(frames, flows, occs, args.block, args.radius, masked=False)
        masked = clip_epe(frames, flows, occs, args.block, args.radius, masked=True)
        result.update({
            "epe": full.mean_epe,
            "epe_masked": masked.mean_epe,
            "valid_pixel_fraction": masked.valid_pixel_fraction,
        })
        per_frame = full.per_frame
    _emit(result)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.estimator == "block":
            result["per_frame_epe"] = per_frame
            plotting.plot_per_frame(per_frame, out / "epe.png", "EPE (px)")
        (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempoflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a procedural scene with exact ground truth")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_scene)

    n = sub.add_parser("derive-normal", help="depth PFMs to encoded normal PNGs")
    n.add_argument("--depth", required=True)
    n.add_argument("--intrinsics", required=True, help="fx,fy")
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_derive_normal)

    o = sub.add_parser("derive-occlusion", help="occlusion masks from frames and flows")
    o.add_argument("--frames", required=True)
    o.add_argument("--flows", required=True)
    o.add_argument("--threshold", type=float, default=1e-3)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_derive_occlusion)

    op = sub.add_parser("optimize", help="optimize noise latents for temporal consistency")
    op.add_argument("--config", required=True)
    op.add_argument("--out")
    op.set_defaults(func=cmd_optimize)

    r = sub.add_parser("render", help="denoise latents without optimization")
    r.add_argument("--config", required=True)
    r.add_argument("--latents")
    r.add_argument("--out")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="warp error and block-matching EPE of a clip")
    e.add_argument("--frames", required=True)
    e.add_argument("--flows", required=True)
    e.add_argument("--occ", required=True)
    e.add_argument("--estimator", choices=["none", "block"], default="none")
    e.add_argument("--block", type=int, default=4)
    e.add_argument("--radius", type=int, default=3)
    e.add_argument("--window", type=int, default=None)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TempoflowError as exc:
        print(f"error kind={exc.kind} code={exc.exit_code} message={json.dumps(str(exc))}",
              file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
