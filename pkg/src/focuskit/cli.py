"""Command-line surface: calibration, synthesis, training, focus control,
all-in-focus capture, benchmarking, and timing.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  All commands are
deterministic under --seed except ``timeit``.  Outputs are written through a
temp-then-rename so partial files never appear under the target name.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import allinfocus as aif
from . import nets, training
from .autofocus import AfConfig, run_autofocus
from .baselines import RuleParams, fibonacci_search, rule_based_search, tenengrad
from .defocus import (
    CalibrationConfig,
    DefocusModel,
    GammaCurve,
    calibrate_model,
    make_kernel,
    synthesize_defocus,
)
from .fusion import FocusStack, align, fuse
from .pgm import read_pgm, write_pgm
from .scene import (
    Camera,
    Scene,
    banded_scene,
    capture,
    make_texture,
    oracle_discriminator,
    oracle_estimator,
    scene_from_config,
    single_depth_scene,
)

DEFAULT_STARTS = (1100, 1400, 1700, 2000)

# Training presets; "paper" follows the published recipe, "desk" is sized for
# a workstation test run.
PROFILES = {
    "paper": {
        "estimator": {"samples": 20000, "epochs": 300, "batch": 32, "lr": 1e-3},
        "discriminator": {"samples": 20000, "epochs": 100, "batch": 128, "lr": 1e-3},
    },
    "desk": {
        "estimator": {"samples": training.DESK_SAMPLES, "epochs": training.DESK_EPOCHS,
                      "batch": 32, "lr": 1e-3},
        "discriminator": {"samples": training.DESK_SAMPLES, "epochs": training.DESK_EPOCHS,
                          "batch": 128, "lr": 1e-3},
    },
}


def _atomic_write_text(path, text: str) -> None:
    tmp = str(path) + ".tmp"
    Path(tmp).write_text(text)
    os.replace(tmp, path)


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _load_textures(args, parser) -> list[np.ndarray]:
    if args.textures:
        paths = sorted(Path(args.textures).glob("*.pgm"))
        if not paths:
            parser.error(f"no PGM files under {args.textures}")
        return [read_pgm(p) for p in paths]
    side = args.texture_side
    return [make_texture(side, args.seed * 1000 + i)
            for i in range(args.synthetic_textures)]


def _camera(args, model: DefocusModel) -> Camera:
    return Camera(model=model, dof_steps=args.dof, noise_sigma=args.noise,
                  rng_seed=args.seed)


def _load_scene(args, parser) -> Scene:
    if args.scene:
        return scene_from_config(args.scene)
    parser.error("--scene is required")


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args, parser) -> int:
    z0 = np.arange(args.z_min, args.z_max + args.spacing / 2, args.spacing).tolist()
    zi = _float_list(args.zi_list) if args.zi_list else list(z0)
    if not z0 or not zi:
        parser.error("empty focus axis: check --z-min/--z-max/--spacing/--zi-list")
    cfg = CalibrationConfig(
        r_candidates=tuple(_float_list(args.r_candidates)),
        alpha_candidates=tuple(_float_list(args.alpha_candidates)),
        outer_patch=args.outer_patch,
        inner_margin=args.inner_margin,
        search_window=args.search_window,
    )
    curve = GammaCurve(args.gamma)
    if args.frames:
        manifest = json.loads(Path(args.frames).read_text())
        base = Path(args.frames).parent
        table = {
            (float(e["z0"]), float(e["zi"])): base / e["path"]
            for e in manifest["frames"]
        }
        missing = [(a, b) for a in z0 for b in zi if (a, b) not in table]
        if missing:
            parser.error(f"frame manifest is missing {len(missing)} pairs, "
                         f"first: {missing[0]}")
        source = lambda a, b: read_pgm(table[(a, b)])
    elif args.sim_model:
        true_model = DefocusModel.load(args.sim_model)
        tex_side = args.texture_side
        tex = make_texture(tex_side, args.seed)
        cam = Camera(model=true_model, noise_sigma=args.noise, rng_seed=args.seed)

        def source(a, b):
            return capture(cam, single_depth_scene(tex_side, a, args.seed), b).pixels
    else:
        parser.error("need --frames or --sim-model")
    model = calibrate_model(source, z0, zi, cfg, curve, kernel_kind=args.kernel,
                            z_min=args.z_min, z_max=args.z_max)
    model.save(args.out)
    print(f"calibrated {len(z0)}x{len(zi)} grid -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args, parser) -> int:
    model = DefocusModel.load(args.model)
    if args.image:
        if args.z0 is None or args.zi is None:
            parser.error("--image mode needs --z0 and --zi")
        sharp = read_pgm(args.image)
        r, alpha = model.lookup(args.z0, args.zi)
        out = synthesize_defocus(sharp, model.kernel_for(r), alpha, model.gamma)
    else:
        scene = _load_scene(args, parser)
        if args.z is None:
            parser.error("--scene mode needs --z")
        cam = _camera(args, model)
        out = capture(cam, scene, args.z, args.t).pixels
    write_pgm(args.out, out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args, parser) -> int:
    model = DefocusModel.load(args.model)
    preset = dict(PROFILES[args.profile][args.target])
    if args.samples is not None:
        preset["samples"] = args.samples
    if args.epochs is not None:
        preset["epochs"] = args.epochs
    if args.batch is not None:
        preset["batch"] = args.batch
    if args.lr is not None:
        preset["lr"] = args.lr
    textures = _load_textures(args, parser)
    dataset = training.generate_training_set(
        textures, model, preset["samples"], seed=args.seed, target=args.target,
        dof_steps=args.dof, patch_side=args.patch_side,
    )
    cfg = training.TrainingConfig(
        batch_size=preset["batch"], learning_rate=preset["lr"],
        epochs=preset["epochs"], rng_seed=args.seed,
    )
    if args.target == "estimator":
        specs, head = nets.build_estimator_spec(), "abs"
    else:
        specs, head = nets.build_discriminator_spec(), "sigmoid"
    weights = train_and_log(dataset, specs, cfg, head)
    nets.save_weights(weights, args.out)
    print(f"trained {args.target} ({preset['samples']} samples, "
          f"{preset['epochs']} epochs) -> {args.out}")
    return 0


def train_and_log(dataset, specs, cfg, head):
    weights = training.train(dataset, specs, cfg, output=head)
    for i, loss in enumerate(weights.metadata["loss_history"]):
        print(f"epoch {i + 1:4d}  loss {loss:.6f}")
    return weights


# ---------------------------------------------------------------------------
# autofocus
# ---------------------------------------------------------------------------

def _build_af_callables(args, parser, scene, camera):
    if args.oracle:
        side = args.patch_side if args.patch_side else min(scene.sharp.shape)
        f_e = oracle_estimator(scene, patch_side=side)
        f_d = oracle_discriminator(scene, camera.dof_steps, patch_side=side)
    else:
        if not (args.estimator and args.discriminator):
            parser.error("need --oracle or both --estimator and --discriminator")
        f_e = nets.network_estimator(nets.load_weights(args.estimator))
        f_d = nets.network_discriminator(nets.load_weights(args.discriminator))
    return f_e, f_d


def cmd_autofocus(args, parser) -> int:
    model = DefocusModel.load(args.model)
    scene = _load_scene(args, parser)
    camera = _camera(args, model)
    f_e, f_d = _build_af_callables(args, parser, scene, camera)
    starts = _float_list(args.z_init) if args.z_init else list(DEFAULT_STARTS)
    cfg = AfConfig(z_min=model.z_min, z_max=model.z_max, rng_seed=args.seed)
    runs = []
    for z0 in starts:
        result = run_autofocus(lambda z: capture(camera, scene, z), f_e, f_d, z0, cfg)
        runs.append({"z_init": z0, **result.to_jsonable()})
        print(f"start {z0:7.1f} -> z {result.final_z:7.1f} in "
              f"{result.time_steps} time steps (converged={result.converged})")
    _atomic_write_text(args.out, json.dumps({"runs": runs}, indent=2))
    if args.trajectory:
        lines = []
        for run in runs:
            for step in run["trajectory"]:
                lines.append(json.dumps({"z_init": run["z_init"], **step}))
        _atomic_write_text(args.trajectory, "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# allinfocus
# ---------------------------------------------------------------------------

def cmd_allinfocus(args, parser) -> int:
    model = DefocusModel.load(args.model)
    scene = _load_scene(args, parser)
    camera = _camera(args, model)
    if args.oracle:
        side = args.patch_side if args.patch_side else min(
            512, scene.sharp.shape[0], scene.sharp.shape[1])
        source = aif.OracleDeviationSource(patch_side=side, stride_out=args.stride_out)
    elif args.estimator:
        weights = nets.load_weights(args.estimator)
        source = aif.NetworkDeviationSource(nets.to_global(weights),
                                            stride_out=args.stride_out)
    else:
        parser.error("need --oracle or --estimator")
    cfg = aif.StrategyConfig(
        sigma_of_z=args.sigma if args.sigma else camera.dof_steps,
        bin_width=args.bin_width, k=args.k, mode=args.mode,
        max_frames=args.max_frames,
    )
    z0 = args.z_init
    if args.mode == "static":
        result = aif.run_static(camera, scene, z0, cfg, source)
    else:
        result = aif.run_dynamic(camera, scene, z0, cfg, args.frames, source)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(result.frames):
        write_pgm(out / f"frame_{i:03d}.pgm", frame.pixels)
        write_pgm(out / f"mask_{i:03d}.pgm",
                  result.masks[i].bits.astype(np.float64))
        write_pgm(out / f"activation_{i:03d}.pgm",
                  result.activations[i].bits.astype(np.float64))
    trajectory = [
        {"t": s.t, "z": s.z, "delta": s.delta, "next_z": s.next_z}
        for s in result.trajectory
    ]
    run_doc = {
        "mode": args.mode,
        "k": args.k,
        "frames": len(result.frames),
        "truncated": result.truncated,
        "reason": result.reason,
        "trajectory": trajectory,
        "deviations": [d.values.tolist() for d in result.deviations],
    }
    _atomic_write_text(out / "run.json", json.dumps(run_doc, indent=2))
    stack = FocusStack(frames=tuple(result.frames), model=model)
    fused = fuse(FocusStack(frames=tuple(align(stack)), model=model))
    write_pgm(out / "fused.pgm", fused)
    print(f"{len(result.frames)} frames -> {out} (reason: {result.reason or 'n/a'})")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args, parser) -> int:
    model = DefocusModel.load(args.model)
    rng = np.random.default_rng(args.seed)
    scenes = []
    if args.synthetic:
        margin = 0.1 * (model.z_max - model.z_min)
        for i in range(args.synthetic):
            depth = float(rng.uniform(model.z_min + margin, model.z_max - margin))
            scenes.append((f"synthetic-{i}", single_depth_scene(
                args.scene_side, depth, texture_seed=args.seed + 17 * i), depth))
    elif args.scenes:
        manifest = json.loads(Path(args.scenes).read_text())
        base = Path(args.scenes).parent
        for e in manifest["scenes"]:
            scenes.append((e["name"], scene_from_config(base / e["path"]),
                           float(e["truth_z0"])))
    else:
        parser.error("need --synthetic N or --scenes manifest")
    camera = _camera(args, model)
    starts = _float_list(args.starts) if args.starts else list(DEFAULT_STARTS)
    rows = []
    for name, scene, truth in scenes:
        patch_side = min(512, *scene.sharp.shape)
        cap = lambda z: capture(camera, scene, z)
        metric = lambda frame: tenengrad(frame.pixels)
        f_e, f_d = _build_af_callables(args, parser, scene, camera)
        cfg = AfConfig(z_min=model.z_min, z_max=model.z_max, rng_seed=args.seed)
        for z0 in starts:
            res = run_autofocus(cap, f_e, f_d, z0, cfg)
            rows.append((name, "proposed", z0, res.time_steps, res.final_z,
                         abs(res.final_z - truth)))
        z, steps = fibonacci_search(cap, metric, model.z_min, model.z_max,
                                    args.resolution)
        rows.append((name, "fibonacci", "", steps, z, abs(z - truth)))
        z, steps = rule_based_search(cap, metric, RuleParams(), model.z_min,
                                     model.z_max, z_start=args.rule_start)
        rows.append((name, "rule_based", args.rule_start or model.z_min, steps,
                     z, abs(z - truth)))
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["scene", "method", "start", "time_steps", "final_z", "abs_error"])
    writer.writerows(rows)
    for method in ("proposed", "fibonacci", "rule_based"):
        sel = [r for r in rows if r[1] == method]
        writer.writerow([
            "MEAN", method, "",
            f"{np.mean([r[3] for r in sel]):.2f}", "",
            f"{np.mean([r[5] for r in sel]):.2f}",
        ])
    _atomic_write_text(args.out, buf.getvalue())
    print(f"benchmarked {len(scenes)} scenes -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# timeit
# ---------------------------------------------------------------------------

def cmd_timeit(args, parser) -> int:
    rng = np.random.default_rng(args.seed)
    patch = rng.random((512, 512))
    est = nets.init_weights(nets.build_estimator_spec(), 512, "abs", seed=args.seed)
    disc = nets.init_weights(nets.build_discriminator_spec(), 512, "sigmoid",
                             seed=args.seed)

    def time_call(fn):
        fn()  # warm-up
        samples = []
        for _ in range(args.runs):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        return float(np.mean(samples)), float(np.std(samples))

    t_trad = time_call(lambda: tenengrad(patch))
    t_est = time_call(lambda: nets.forward(est, patch))
    t_disc = time_call(lambda: nets.forward(disc, patch))
    rows = [
        ("traditional", *t_trad),
        ("estimator", *t_est),
        ("discriminator", *t_disc),
        ("proposed", t_est[0] + t_disc[0],
         float(np.hypot(t_est[1], t_disc[1]))),
    ]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["component", "mean_seconds", "std_seconds", "runs"])
    for name, mean, std in rows:
        writer.writerow([name, f"{mean:.6f}", f"{std:.6f}", args.runs])
    _atomic_write_text(args.out, buf.getvalue())
    print(f"timings ({args.runs} runs) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="focuskit",
        description="Defocus simulation, learned autofocus, all-in-focus capture.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--dof", type=float, default=20.0,
                        help="depth of focus half-width, motor steps")
    common.add_argument("--noise", type=float, default=0.0,
                        help="additive Gaussian noise sigma for simulated captures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common],
                       help="fit the blur/scale grids from frame pairs")
    p.add_argument("--frames", help="JSON manifest of recorded (z0, zi) frames")
    p.add_argument("--sim-model", help="true model JSON for simulator-backed runs")
    p.add_argument("--z-min", type=float, default=1050)
    p.add_argument("--z-max", type=float, default=2100)
    p.add_argument("--spacing", type=float, default=50)
    p.add_argument("--zi-list", help="comma-separated sensor positions "
                   "(default: same as the z0 axis)")
    p.add_argument("--r-candidates", default="0,1,2,3,4,5,6,8,10,12")
    p.add_argument("--alpha-candidates", default="0.98,0.99,1.0,1.01,1.02")
    p.add_argument("--outer-patch", type=int, default=256)
    p.add_argument("--inner-margin", type=int, default=32)
    p.add_argument("--search-window", type=int, default=None)
    p.add_argument("--gamma", type=float, default=2.2)
    p.add_argument("--kernel", choices=("disk", "gaussian"), default="disk")
    p.add_argument("--texture-side", type=int, default=384)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth", parents=[common],
                       help="render a defocused frame")
    p.add_argument("--model", required=True)
    p.add_argument("--image", help="sharp PGM for direct (z0, zi) synthesis")
    p.add_argument("--z0", type=float)
    p.add_argument("--zi", type=float)
    p.add_argument("--scene", help="scene config JSON for simulated capture")
    p.add_argument("--z", type=float)
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="train the estimator or the discriminator")
    p.add_argument("--target", choices=("estimator", "discriminator"),
                   required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--profile", choices=tuple(PROFILES), default="desk")
    p.add_argument("--samples", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--textures", help="directory of sharp PGM source images")
    p.add_argument("--synthetic-textures", type=int, default=12)
    p.add_argument("--texture-side", type=int, default=512)
    p.add_argument("--patch-side", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("autofocus", parents=[common],
                       help="single-shot autofocus runs")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--estimator")
    p.add_argument("--discriminator")
    p.add_argument("--patch-side", type=int)
    p.add_argument("--z-init", help="comma-separated starting positions "
                   f"(default {','.join(map(str, DEFAULT_STARTS))})")
    p.add_argument("--out", required=True)
    p.add_argument("--trajectory", help="optional JSON-lines trajectory output")
    p.set_defaults(func=cmd_autofocus)

    p = sub.add_parser("allinfocus", parents=[common],
                       help="all-in-focus capture and fusion")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--estimator")
    p.add_argument("--patch-side", type=int)
    p.add_argument("--mode", choices=("static", "dynamic"), default="static")
    p.add_argument("--k", type=int, default=0,
                   help="dynamic activation window (frames)")
    p.add_argument("--frames", type=int, default=8,
                   help="frame budget in dynamic mode")
    p.add_argument("--max-frames", type=int, default=32)
    p.add_argument("--bin-width", type=float, default=40.0)
    p.add_argument("--sigma", type=float, default=None,
                   help="in-focus threshold (default: dof)")
    p.add_argument("--stride-out", type=int, default=64)
    p.add_argument("--z-init", type=float, default=1500.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_allinfocus)

    p = sub.add_parser("bench", parents=[common],
                       help="compare proposed, Fibonacci, and rule-based search")
    p.add_argument("--model", required=True)
    p.add_argument("--scenes", help="JSON manifest of scene configs with truth")
    p.add_argument("--synthetic", type=int,
                   help="generate N synthetic single-depth scenes")
    p.add_argument("--scene-side", type=int, default=128)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--estimator")
    p.add_argument("--discriminator")
    p.add_argument("--patch-side", type=int)
    p.add_argument("--starts")
    p.add_argument("--resolution", type=float, default=4.0,
                   help="Fibonacci stopping width, motor steps")
    p.add_argument("--rule-start", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("timeit", parents=[common],
                       help="per-component inference timing on a 512x512 patch")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_timeit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except BrokenPipeError:
        return 1
    except Exception as err:  # runtime failure -> exit 1 with a message
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
