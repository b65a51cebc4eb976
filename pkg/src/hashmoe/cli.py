"""Command-line interface.

Subcommands: ``train``, ``render``, ``eval``, ``export-decomposition`` and
``gen-synthetic``. ``train --config FILE`` reads a flat ``key = value`` file
(``#`` starts a comment); keys are the long flag names with ``-`` or ``_``.
Flags given on the command line override the file.

Scenes are a dataset directory (TransformsJson or MegaNerfLayout) or
``synthetic[:seed[:views[:resolution]]]`` for a generated scene.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from hashmoe.errors import ConfigError, DataError, DivergenceError
from hashmoe.render import SamplingConfig, SceneBound

log = logging.getLogger("hashmoe")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (type, default); shared by the config file and the train flags
TRAIN_KEYS: dict[str, tuple[type | object, object]] = {
    "scene": (str, "synthetic"),
    "preset": (str, "toy"),
    "experts": (int, 8),
    "topk": (int, 1),
    "capacity": (float, 1.0),
    "dispatch": (str, "fused"),
    "heterogeneous": (_bool, True),
    "gate": (str, "hash"),
    "steps": (int, 15_000),
    "seed": (int, 0),
    "out": (str, "runs/latest"),
    "lr0": (float, None),
    "lr_final": (float, None),
    "batch": (int, None),
    "balance_weight": (float, 5e-4),
    "log_every": (int, 100),
    "checkpoint_every": (int, 1000),
    "cache": (str, None),
    "resume": (str, None),
    "near": (float, None),
    "bg_far": (float, None),
    "scene_radius": (float, None),
}


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file into typed values."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for n, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TRAIN_KEYS:
            raise ConfigError(f"{p}:{n}: unknown key {key!r}")
        try:
            out[key] = TRAIN_KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{p}:{n}: bad value for {key}: {value!r}") from exc
    return out


def load_scene(spec: str, cache_dir=None):
    """Dataset from a directory or a ``synthetic[:seed[:views[:res]]]`` spec."""
    from hashmoe.scene import generate_synthetic, load_dataset

    if spec.startswith("synthetic"):
        parts = spec.split(":")[1:]
        try:
            seed, views, res = ([int(v) for v in parts] + [0, 32, 128][len(parts):])[:3]
        except ValueError as exc:
            raise ConfigError(f"bad synthetic scene spec {spec!r}") from exc
        ds, _ = generate_synthetic(seed, views, res, cache_dir=cache_dir)
        return ds
    return load_dataset(spec)


def _configs(opts: dict, n_images: int):
    from hashmoe.experts import FieldConfig
    from hashmoe.gating import GateConfig
    from hashmoe.presets import full_field, full_train, toy_field, toy_train

    if opts["preset"] == "toy":
        fcfg = toy_field(n_images, opts["experts"], heterogeneous=opts["heterogeneous"], top_k=opts["topk"],
                         capacity_factor=opts["capacity"], gate_mode=opts["gate"],
                         balance_weight=opts["balance_weight"])
        tcfg = toy_train(opts["steps"], opts["seed"])
    elif opts["preset"] == "full":
        base = full_field(n_images, opts["experts"], heterogeneous=opts["heterogeneous"], top_k=opts["topk"])
        gate = GateConfig(n_experts=opts["experts"], top_k=opts["topk"], capacity_factor=opts["capacity"],
                          mode=opts["gate"], balance_weight=opts["balance_weight"])
        fcfg = FieldConfig(**{**base.__dict__, "gate": gate})
        tcfg = full_train(opts["steps"], opts["seed"])
    else:
        raise ConfigError(f"unknown preset {opts['preset']!r} (expected 'toy' or 'full')")
    over = {"strategy": opts["dispatch"], "balance_weight": opts["balance_weight"],
            "log_every": opts["log_every"], "checkpoint_every": opts["checkpoint_every"]}
    for key, name in (("lr0", "lr0"), ("lr_final", "lr_final"), ("batch", "rays_per_batch")):
        if opts[key] is not None:
            over[name] = opts[key]
    sampling = {k: opts[k] for k in ("near", "bg_far") if opts[k] is not None}
    if sampling:
        over["sampling"] = dataclasses.replace(tcfg.sampling, **sampling)
    tcfg = type(tcfg)(**{**tcfg.__dict__, **over})
    return fcfg, tcfg


def with_bound(ds, bound: SceneBound):
    """Dataset with its scene bound replaced (cameras must still lie inside)."""
    return dataclasses.replace(ds, scene_bound=bound)


def cmd_train(args) -> int:
    from hashmoe.trainer import load_checkpoint, train

    opts = {k: d for k, (_, d) in TRAIN_KEYS.items()}
    if args.config:
        opts.update(read_config(args.config))
    for key in TRAIN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            opts[key] = v
    ds = load_scene(opts["scene"], opts["cache"])
    if opts["scene_radius"] is not None:
        ds = with_bound(ds, SceneBound(ds.scene_bound.center, opts["scene_radius"]))
    fcfg, tcfg = _configs(opts, ds.n_train)
    state = load_checkpoint(opts["resume"], fcfg, tcfg) if opts["resume"] else None
    out = Path(opts["out"])
    if state is None:
        from hashmoe.trainer import init_state

        state = init_state(fcfg, tcfg)
    state.meta["scene"] = opts["scene"]
    run = train(ds, fcfg, tcfg, out_dir=out, state=state)
    last = run.history[-1] if run.history else {}
    print(json.dumps({"step": run.state.step, "L_r": last.get("L_r"), "psnr": last.get("psnr"),
                      "checkpoint": str(out / "checkpoint.hmoe")}))
    return EXIT_OK


def _load_model(args):
    from hashmoe.trainer import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    scene = args.scene or state.meta.get("scene")
    if scene is None:
        raise ConfigError("checkpoint does not record its scene; pass --scene")
    return state, scene


def _bound_of(state, ds) -> SceneBound:
    b = state.meta.get("scene_bound")
    return SceneBound(tuple(b["center"]), b["radius"]) if b else ds.scene_bound


def _eval_sampling(state) -> SamplingConfig:
    return state.config.sampling


def cmd_render(args) -> int:
    from hashmoe.evaluation import render_camera
    from hashmoe.render import write_png, write_raw
    from hashmoe.scene import orbit_cameras

    state, scene = _load_model(args)
    ds = load_scene(scene, args.cache)
    bound = _bound_of(state, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.orbit:
        cam0 = ds.cameras[0]
        cams = orbit_cameras(args.orbit, cam0.width, phase=0.05)
        jobs = [(f"orbit_{i:03d}", c, 0) for i, c in enumerate(cams)]
    else:
        idx = args.camera_index
        if not 0 <= idx < len(ds.cameras):
            raise DataError(f"camera index {idx} out of range [0, {len(ds.cameras)})")
        jobs = [(f"view_{idx:04d}", ds.cameras[idx], ds.ae_row(idx))]
    for name, cam, row in jobs:
        img, depth, _ = render_camera(state.model, cam, bound, _eval_sampling(state), row)
        if args.format == "raw":
            write_raw(out / f"{name}.raw", img)
        else:
            write_png(out / f"{name}.png", img)
        print(out / f"{name}.{args.format}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from hashmoe.evaluation import evaluate

    state, scene = _load_model(args)
    ds = load_scene(scene, args.cache)
    ds = with_bound(ds, _bound_of(state, ds))
    report = evaluate(state.model, ds, args.split, _eval_sampling(state), limit=args.limit)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_export(args) -> int:
    from hashmoe.evaluation import export_decomposition
    from hashmoe.render import RayBatch

    state, scene = _load_model(args)
    ds = load_scene(scene, args.cache)
    bound = _bound_of(state, ds)
    idx = args.camera_index
    if not 0 <= idx < len(ds.cameras):
        raise DataError(f"camera index {idx} out of range [0, {len(ds.cameras)})")
    cam = ds.cameras[idx]
    pix = cam.pixel_grid()
    pix = pix[(pix[:, 0] % args.stride == 0) & (pix[:, 1] % args.stride == 0)]
    o, d = cam.rays(pix)
    rays = RayBatch(bound.normalize(o), d, np.full(len(o), ds.ae_row(idx), np.int64))
    n = export_decomposition(state.model, rays, args.out, bound, _eval_sampling(state), args.min_alpha)
    print(json.dumps({"points": n, "path": str(args.out)}))
    return EXIT_OK


def cmd_gen(args) -> int:
    from hashmoe.scene import generate_synthetic, save_dataset

    ds, _ = generate_synthetic(args.seed, args.views, args.resolution, layout=args.layout)
    save_dataset(ds, args.out)
    print(json.dumps({"path": str(args.out), "train": len(ds.train_ids), "val": len(ds.val_ids)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hashmoe", description="Mixture-of-hash-experts radiance fields")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--scene")
    t.add_argument("--preset", choices=["toy", "full"])
    t.add_argument("--experts", type=int)
    t.add_argument("--topk", type=int, choices=[1, 2])
    t.add_argument("--capacity", type=float)
    t.add_argument("--dispatch", choices=["uniform", "full", "fused"])
    t.add_argument("--heterogeneous", type=_bool)
    t.add_argument("--gate", choices=["hash", "mlp"])
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--lr0", type=float)
    t.add_argument("--lr-final", dest="lr_final", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--balance-weight", dest="balance_weight", type=float)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--cache", help="directory for cached synthetic renders")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--near", type=float, help="near distance in the normalized frame (default 0)")
    t.add_argument("--bg-far", dest="bg_far", type=float, help="far distance of background samples (default 100)")
    t.add_argument("--scene-radius", dest="scene_radius", type=float,
                   help="foreground radius in world units (default: estimated from camera positions)")
    t.set_defaults(func=cmd_train)

    def model_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--scene", help="defaults to the scene recorded in the checkpoint")
        p.add_argument("--cache")

    r = sub.add_parser("render", help="render views from a checkpoint")
    model_args(r)
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--camera-index", type=int)
    g.add_argument("--orbit", type=int, help="number of orbit frames")
    r.add_argument("--out", default="renders")
    r.add_argument("--format", choices=["png", "raw"], default="png")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM on a split")
    model_args(e)
    e.add_argument("--split", choices=["val", "train"], default="val")
    e.add_argument("--limit", type=int)
    e.add_argument("--out", help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-decomposition", help="PLY of samples coloured by expert")
    model_args(x)
    x.add_argument("--camera-index", type=int, default=0)
    x.add_argument("--stride", type=int, default=2, help="use every n-th pixel in x and y")
    x.add_argument("--min-alpha", dest="min_alpha", type=float, default=0.01)
    x.add_argument("--out", default="decomposition.ply")
    x.set_defaults(func=cmd_export)

    s = sub.add_parser("gen-synthetic", help="render a procedural scene to a TransformsJson directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=32)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--layout", choices=["city", "sphere", "empty"], default="city")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
