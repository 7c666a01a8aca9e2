"""Command-line entry point: ``acoustic-fusion run | simulate | bench``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from ._config import loads_toml
from .geometry import GeometryError, default_geometry, geometry_to_toml, load_geometry
from .pipeline import ConfigError, Parameters, benchmark, load_config, run_offline, run_streaming
from .simulator import SceneError, SceneScript, SourceSpec, load_scene, render_scene
from .stft import AudioFormatError, write_wav

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CONFIG_ERRORS = (ConfigError, GeometryError, SceneError, AudioFormatError, FileNotFoundError)

log = logging.getLogger("acoustic_fusion")


def _parse_value(text: str):
    try:
        return loads_toml(f"v = {text}")["v"]
    except Exception:
        return text


def _add_param_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("parameter overrides")
    for f in fields(Parameters):
        group.add_argument("--" + f.name.replace("_", "-"), dest="p_" + f.name, type=_parse_value,
                           default=None, metavar="VALUE")


def _overrides(args) -> dict:
    return {k[2:]: v for k, v in vars(args).items() if k.startswith("p_") and v is not None}


def _print_report(report) -> None:
    print(report.to_json())


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if args.output:
        cfg.output = Path(args.output)
    if args.stream:
        report = run_streaming(cfg, block=args.block, realtime=args.realtime)
    else:
        report = run_offline(cfg)
    _print_report(report)
    return EXIT_OK


def write_camera_fixture(out: Path, duration: float, fps: float, script: SceneScript,
                         seed: int, n_keypoints: int = 200) -> None:
    """Synthetic RGB-D side channel: camera model, depth frames and keypoints.

    Depth is a flat wall at 3 m with the sources standing in front of it at
    their scripted distance (full-height slabs around their columns).
    """
    from .fusion import azimuth_to_column, load_camera

    root = Path(__file__).parent / "profiles"
    cam_text = (root / "camera.toml").read_text()
    (out / "camera.toml").write_text(cam_text)
    camera = load_camera(out / "camera.toml")
    (out / "depth").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed + 1)
    times = np.arange(0.0, duration, 1.0 / fps)
    with open(out / "frames.csv", "w") as fr, open(out / "keypoints.csv", "w") as kp:
        fr.write("frame,timestamp,depth\n")
        kp.write("frame,u,v,score\n")
        for i, t in enumerate(times):
            depth = np.full((camera.height, camera.width), 3.0, dtype=np.float32)
            for src in script.sources:
                if not src.onset <= t < src.offset:
                    continue
                az, dist = src.position(t)
                col, clamped = azimuth_to_column(float(az), camera)
                if not clamped:
                    c = int(round(col))
                    depth[:, max(c - 20, 0) : c + 21] = float(dist)
            name = f"depth/{i:06d}.npy"
            np.save(out / name, depth)
            fr.write(f"{i},{t:.6f},{name}\n")
            u = rng.uniform(0, camera.width - 1, n_keypoints)
            v = rng.uniform(0, camera.height - 1, n_keypoints)
            s = rng.uniform(0, 1, n_keypoints)
            for row in zip(u, v, s):
                kp.write(f"{i},{row[0]:.3f},{row[1]:.3f},{row[2]:.4f}\n")


def write_run_config(out: Path, with_camera: bool, geometry_path: str | None) -> Path:
    lines = ["[paths]", 'audio = "scene.wav"', 'output = "out"']
    if geometry_path:
        lines.append(f'geometry = "{geometry_path}"')
    if with_camera:
        lines += ['camera = "camera.toml"', 'frames = "frames.csv"', 'keypoints = "keypoints.csv"']
    path = out / "config.toml"
    path.write_text("\n".join(lines) + "\n")
    return path


def simulate(scene: SceneScript, out, seed: int = 0, geometry=None, duration=None,
             camera_fps: float = 0.0, geometry_path: str | None = None) -> Path:
    """Render a scene into `out` with a ready-to-run config.toml."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    geometry = geometry or default_geometry()
    clip, gt = render_scene(scene, geometry, duration=duration, seed=seed)
    write_wav(out / "scene.wav", clip)
    gt.write_csv(out / "ground_truth.csv")
    if camera_fps > 0:
        write_camera_fixture(out, clip.duration, camera_fps, scene, seed)
    return write_run_config(out, camera_fps > 0, geometry_path)


def cmd_simulate(args) -> int:
    scene = load_scene(args.scene)
    geometry = load_geometry(args.geometry) if args.geometry else None
    gpath = str(Path(args.geometry).resolve()) if args.geometry else None
    cfg = simulate(scene, args.out, args.seed, geometry, args.duration, args.camera_fps, gpath)
    print(f"wrote {args.out} (run with: acoustic-fusion run --config {cfg})")
    return EXIT_OK


def synthetic_bench_scene(duration: float) -> SceneScript:
    return SceneScript(
        sources=[SourceSpec([(0.0, -60.0, 2.0), (duration, 60.0, 2.0)], "speech")],
        snr_db=20.0,
        duration=duration,
    )


def cmd_bench(args) -> int:
    overrides = _overrides(args)
    if args.config:
        cfg = load_config(args.config, overrides)
        report = benchmark(cfg, args.repetitions)
    else:
        geometry = load_geometry(args.geometry) if args.geometry else default_geometry()
        if args.channels:
            geometry = geometry.subset(list(range(args.channels)))
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            gpath = tmp / "geometry.toml"
            gpath.write_text(geometry_to_toml(geometry))
            cfg_path = simulate(synthetic_bench_scene(args.duration), tmp, args.seed, geometry,
                                geometry_path=str(gpath))
            cfg = load_config(cfg_path, overrides)
            report = benchmark(cfg, args.repetitions)
    _print_report(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acoustic-fusion",
                                 description="Sound source localization and audio-visual obstacle masking.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process a recording described by a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--stream", action="store_true", help="use the streaming path")
    run.add_argument("--realtime", action="store_true", help="pace the stream to the wall clock")
    run.add_argument("--block", type=int, default=None, help="streaming block size in samples")
    run.add_argument("--output", default=None, help="override the output directory")
    _add_param_flags(run)
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("simulate", help="render a synthetic scene")
    sim.add_argument("--scene", required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.add_argument("--geometry", default=None)
    sim.add_argument("--duration", type=float, default=None)
    sim.add_argument("--camera-fps", type=float, default=0.0,
                     help="also write synthetic camera frames, depth and keypoints")
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("bench", help="time the offline pipeline")
    bench.add_argument("--config", default=None, help="benchmark this config instead of a synthetic scene")
    bench.add_argument("--repetitions", type=int, default=3)
    bench.add_argument("--duration", type=float, default=60.0)
    bench.add_argument("--channels", type=int, default=None, help="use the first N microphones")
    bench.add_argument("--geometry", default=None)
    bench.add_argument("--seed", type=int, default=0)
    _add_param_flags(bench)
    bench.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
