"""Command-line interface.

Subcommands: render, make-dataset, train-cache, optimize-material, ablate,
shadow-sweep, eval. Every command writes its outputs under a run directory
(--out) and is fully reproducible from (config, seed): images as PFM plus
tonemapped PNG previews, metrics as JSON, checkpoints in the binary cache /
materials formats, loss logs as newline-delimited JSON.

Options may come from a TOML config file (--config) with sections named
after the subcommands; command-line flags override config values. The
GLOWLAB_THREADS environment variable caps render worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import experiments
from .cache import load_cache, save_cache, snapshot
from .dataset import ManifestError, load_dataset, make_dataset
from .metrics import MetricsReport, metric_mse_clipped, render_material_buffers
from .pfm import write_pfm, write_png_preview
from .scene import SceneFormatError, load_scene
from .scenes import build_scene, default_cameras
from .training import (
    TrainConfig,
    load_materials,
    optimize_materials,
    save_materials,
    train_cache,
)
from .transport import InvalidConfigError, RenderConfig, render_image


class CliError(Exception):
    pass


def _load_config(path, section):
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    merged = dict(data.get("common", {}))
    merged.update(data.get(section, {}))
    return merged


def _resolve(args, config, key, default=None):
    cli_val = getattr(args, key.replace("-", "_"), None)
    if cli_val is not None:
        return cli_val
    return config.get(key, default)


def _get_scene(spec):
    """A bundled scene name or a path to a scene JSON file."""
    if spec is None:
        raise CliError("missing --scene")
    if os.path.exists(spec):
        return load_scene(spec)
    try:
        return build_scene(spec)
    except KeyError as exc:
        raise CliError(str(exc)) from exc


def _ensure_out(args):
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def _train_config(args, config) -> TrainConfig:
    cfg = TrainConfig(seed=int(_resolve(args, config, "seed", 0)))
    for key in ("learning_rate", "batch_size", "steps", "snapshot_every",
                "eps_recons", "saw_a", "saw_b", "lambda_prior", "lambda_rough",
                "lambda_sfm", "extra_bounce_weight", "warmup_steps",
                "material_spp", "material_lr", "max_depth", "m_cache",
                "hidden", "mlp_depth"):
        val = _resolve(args, config, key)
        if val is not None:
            setattr(cfg, key, type(getattr(cfg, key))(val)
                    if getattr(cfg, key) is not None else val)
    return cfg


def _progress(label):
    def log(*info):
        print(f"[{label}] {info}", file=sys.stderr)
    return log


def cmd_render(args):
    config = _load_config(args.config, "render")
    scene_spec = _resolve(args, config, "scene")
    scene = _get_scene(scene_spec)
    out = _ensure_out(args)
    mode = _resolve(args, config, "mode", "path")
    spp = int(_resolve(args, config, "spp", 64))
    seed = int(_resolve(args, config, "seed", 0))
    cam_index = int(_resolve(args, config, "camera", 0))
    if scene.cameras:
        cam = scene.cameras[cam_index]
    else:
        cam = default_cameras(scene_spec, max(cam_index + 1, 1),
                              seed=seed)[cam_index]
    from .scene import CaptureFrame
    frame = CaptureFrame(camera=cam,
                         light_position=cam.center + scene.flashlight.offset)
    cache = None
    if mode in ("cache", "naive_cache"):
        ckpt = _resolve(args, config, "cache")
        if not ckpt:
            raise CliError(f"mode {mode!r} needs --cache checkpoint")
        cache = snapshot(load_cache(ckpt), 0)
    cfg = RenderConfig(mode=mode, spp=spp, seed=seed,
                       max_depth=int(_resolve(args, config, "max_depth", 6)),
                       m_cache=int(_resolve(args, config, "m_cache", 1)))
    img = render_image(scene, frame, cfg, cache=cache)
    write_pfm(os.path.join(out, "render.pfm"), img)
    write_png_preview(os.path.join(out, "render.png"), img)
    print(os.path.join(out, "render.pfm"))


def cmd_make_dataset(args):
    config = _load_config(args.config, "make-dataset")
    name = _resolve(args, config, "scene")
    scene = _get_scene(name)
    out = _ensure_out(args)
    n_frames = int(_resolve(args, config, "frames",
                            experiments.DESK_TRAIN_FRAMES
                            + experiments.DESK_VAL_FRAMES))
    n_val = int(_resolve(args, config, "val-frames",
                         experiments.DESK_VAL_FRAMES))
    spp = int(_resolve(args, config, "spp", experiments.DESK_DATASET_SPP))
    seed = int(_resolve(args, config, "seed", 0))
    size = int(_resolve(args, config, "size", experiments.DESK_IMAGE_SIZE))
    cameras = default_cameras(name if not os.path.exists(name) else
                              "cornell-desk", n_frames, seed=seed,
                              width=size, height=size)
    make_dataset(scene, cameras, out, spp=spp, seed=seed, n_val=n_val,
                 write_previews=True,
                 log_fn=lambda i, n: print(f"frame {i + 1}/{n}",
                                           file=sys.stderr))
    print(os.path.join(out, "manifest.json"))


def cmd_train_cache(args):
    config = _load_config(args.config, "train-cache")
    manifest = _resolve(args, config, "dataset")
    if not manifest:
        raise CliError("missing --dataset manifest path")
    scene, train, _, _ = load_dataset(manifest, with_images=False)
    out = _ensure_out(args)
    kind = _resolve(args, config, "kind", "dynamic")
    cfg = _train_config(args, config)
    log_path = os.path.join(out, "train_cache_log.ndjson")
    with open(log_path, "w") as log:
        def log_fn(row):
            log.write(json.dumps(row) + "\n")
        cache, history = train_cache(scene, train, kind, cfg, log_fn=log_fn)
    ckpt = os.path.join(out, f"cache_{kind}.glwc")
    save_cache(cache, ckpt)
    print(ckpt)


def cmd_optimize_material(args):
    config = _load_config(args.config, "optimize-material")
    manifest = _resolve(args, config, "dataset")
    if not manifest:
        raise CliError("missing --dataset manifest path")
    scene, train, val, _ = load_dataset(manifest)
    out = _ensure_out(args)
    mode = _resolve(args, config, "mode", "cache")
    cfg = _train_config(args, config)
    log_path = os.path.join(out, "optimize_material_log.ndjson")
    with open(log_path, "w") as log:
        def log_fn(row):
            log.write(json.dumps(row) + "\n")
        mpv, history = optimize_materials(scene, train, mode, cfg,
                                          log_fn=log_fn)
    mats = mpv.to_material_set()
    mat_path = os.path.join(out, f"materials_{mode}.glwm")
    save_materials(mats, mat_path)
    metrics = experiments.evaluate_materials(scene, val, mats, seed=cfg.seed)
    _write_json(os.path.join(out, f"metrics_{mode}.json"), metrics)
    print(mat_path)


def cmd_ablate(args):
    config = _load_config(args.config, "ablate")
    manifest = _resolve(args, config, "dataset")
    if not manifest:
        raise CliError("missing --dataset manifest path")
    scene, train, val, _ = load_dataset(manifest)
    out = _ensure_out(args)
    cfg = experiments.ablation_train_config(
        seed=int(_resolve(args, config, "seed", 0)))
    steps = _resolve(args, config, "steps")
    if steps is not None:
        cfg.steps = int(steps)
    warmup = _resolve(args, config, "warmup_steps")
    if warmup is not None:
        cfg.warmup_steps = int(warmup)
    result = experiments.run_ablation(
        scene, train, val, cfg,
        log_fn=lambda mode, m: print(f"{mode}: {m}", file=sys.stderr))
    report = {"errors": result["errors"], "ordering": result.get("ordering")}
    _write_json(os.path.join(out, "ablation_report.json"), report)
    for mode in experiments.ABLATION_MODES:
        save_materials(result["recovered"][mode],
                       os.path.join(out, f"materials_{mode}.glwm"))
    ordering = result.get("ordering", {})
    for key in ("albedo_mse", "roughness_mse"):
        row = {m: result["errors"][m][key] for m in experiments.ABLATION_MODES}
        print(f"{key}: " + "  ".join(f"{m}={v:.3e}" for m, v in row.items()))
    print(f"ordering holds: {ordering.get('all_hold')}")
    if not ordering.get("all_hold", False):
        return 1
    return 0


def cmd_shadow_sweep(args):
    config = _load_config(args.config, "shadow-sweep")
    out = _ensure_out(args)
    scene_spec = _resolve(args, config, "scene", "occluder")
    scene = _get_scene(scene_spec)
    spp = int(_resolve(args, config, "spp", 16384))
    seed = int(_resolve(args, config, "seed", 5))
    res = experiments.run_shadow_sweep(scene, spp=spp, seed=seed)
    table = [{"x_l": float(x), "direct": float(d), "indirect": float(i)}
             for x, d, i in zip(res["lx"], res["direct"], res["indirect"])]
    payload = {k: v for k, v in res.items()
               if not isinstance(v, np.ndarray)}
    payload["table"] = table
    _write_json(os.path.join(out, "shadow_sweep.json"), payload)
    print(f"direct jump at lx={res['boundary_found']:.3f} "
          f"(analytic {res['boundary_analytic']:.3f}), "
          f"{res['direct_jump_fraction_of_lit'] * 100:.0f}% of lit value")
    print(f"indirect max/median adjacent diff: "
          f"{res['indirect_max_over_median_diff']:.2f}")
    ok = (res["boundary_within_one_step"]
          and res["direct_jump_at_least_half_lit"]
          and res["indirect_no_isolated_jump"])
    print(f"continuity verdict: {'pass' if ok else 'fail'}")
    return 0 if ok else 1


def cmd_eval(args):
    config = _load_config(args.config, "eval")
    manifest = _resolve(args, config, "dataset")
    materials_path = _resolve(args, config, "materials")
    if not manifest or not materials_path:
        raise CliError("eval needs --dataset and --materials")
    scene, _, val, _ = load_dataset(manifest, verify=True)
    mats = load_materials(materials_path)
    out = _ensure_out(args)
    seed = int(_resolve(args, config, "seed", 0))
    spp = int(_resolve(args, config, "spp", 64))
    report = MetricsReport()
    metrics = experiments.evaluate_materials(scene, val, mats,
                                             rerender_spp=spp, seed=seed)
    report.add("dataset", metrics["rerender_mse"], metrics["albedo_mse"],
               metrics["roughness_mse"])
    _write_json(os.path.join(out, "eval_report.json"), report.to_dict())
    print(json.dumps(report.to_dict(), indent=1))


def build_parser():
    p = argparse.ArgumentParser(
        prog="glowlab",
        description="Inverse rendering of co-located flashlight captures "
                    "with a dynamic neural radiance cache.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory for outputs")

    sp = sub.add_parser("render", help="render one view of a scene")
    common(sp)
    sp.add_argument("--scene", help="bundled scene name or scene.json path")
    sp.add_argument("--mode", choices=["path", "direct", "cache",
                                       "naive_cache"])
    sp.add_argument("--spp", type=int)
    sp.add_argument("--camera", type=int)
    sp.add_argument("--cache", help="cache checkpoint for cache modes")
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("make-dataset", help="path-trace a capture dataset")
    common(sp)
    sp.add_argument("--scene")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--val-frames", type=int)
    sp.add_argument("--spp", type=int)
    sp.add_argument("--size", type=int)
    sp.set_defaults(fn=cmd_make_dataset)

    sp = sub.add_parser("train-cache", help="train a radiance cache")
    common(sp)
    sp.add_argument("--dataset", help="manifest.json path")
    sp.add_argument("--kind", choices=["dynamic", "naive"])
    sp.add_argument("--steps", type=int)
    sp.set_defaults(fn=cmd_train_cache)

    sp = sub.add_parser("optimize-material", help="recover materials")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--mode", choices=["path", "direct", "cache",
                                       "naive_cache"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    sp.set_defaults(fn=cmd_optimize_material)

    sp = sub.add_parser("ablate", help="material recovery under all modes")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("shadow-sweep", help="continuity study across a "
                                             "cast-shadow boundary")
    common(sp)
    sp.add_argument("--scene")
    sp.add_argument("--spp", type=int)
    sp.set_defaults(fn=cmd_shadow_sweep)

    sp = sub.add_parser("eval", help="metrics for recovered materials")
    common(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--materials")
    sp.add_argument("--spp", type=int)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = args.fn(args)
    except (CliError, ManifestError, SceneFormatError, InvalidConfigError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0 if rc is None else int(rc)


if __name__ == "__main__":
    sys.exit(main())
