"""End-to-end orchestration: audio -> SSL frames -> masks for camera frames."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._config import load_toml
from .clustering import SslFrame, SslTracker
from .dprtf import DpRtfEstimator, write_feature_csv
from .fusion import (CameraModel, ObstacleMask, SslHistory, azimuth_to_column, invalidate_depth,
                     load_camera, read_pgm, region_to_rectangle, split_features, write_pgm)
from .geometry import (ArrayGeometry, CandidateGrid, GeometryError, compute_steering_table,
                       default_geometry, load_geometry)
from .stft import (AudioClip, NoiseFloorTracker, StftAnalyzer, bin_power, read_wav,
                   select_reliable_bins)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    """Processing failure tagged with the stream and frame it happened on."""

    def __init__(self, stream: str, frame: int, cause: Exception):
        super().__init__(f"{stream} frame {frame}: {cause}")
        self.stream = stream
        self.frame = frame


@dataclass
class Parameters:
    """Processing parameters; defaults follow the reference setup
    (16 kHz audio, 256/128 STFT, Q = 8, 72 directions)."""

    sample_rate: int = 16000
    window: int = 256
    hop: int = 128
    noise_floor_factor: float = 3.0
    ctf_length: int = 8
    forgetting: float = 0.95
    residual_threshold: float = 0.5
    init_eps: float = 1e-2
    min_freq: float = 100.0
    max_freq: float | None = None  # None: Nyquist
    grid_spacing: float = 5.0
    variance: float = 0.5
    smoothing: float = 0.05
    delta: float = 0.3
    peak_threshold: float | None = None
    min_separation: float = 15.0
    max_half_width: float | None = None
    source_depth: float | None = None
    use_depth: bool = True

    def validate(self) -> None:
        if self.hop < 1 or self.window < self.hop:
            raise ConfigError("need hop >= 1 and window >= hop")
        if not 0.0 < self.forgetting <= 1.0:
            raise ConfigError("forgetting factor must be in (0, 1]")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must be in [0, 1]")
        if not 0.0 < self.smoothing <= 1.0:
            raise ConfigError("smoothing must be in (0, 1]")
        if self.ctf_length < 1:
            raise ConfigError("CTF length must be >= 1")
        if self.variance <= 0:
            raise ConfigError("variance must be positive")
        if self.noise_floor_factor < 0:
            raise ConfigError("noise floor factor must be >= 0")
        if self.max_freq is not None and self.min_freq >= self.max_freq:
            raise ConfigError("min_freq must be below max_freq")
        try:
            CandidateGrid(self.grid_spacing)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


PARAM_SECTIONS = {
    "audio": ("sample_rate", "window", "hop", "noise_floor_factor"),
    "dprtf": ("ctf_length", "forgetting", "residual_threshold", "init_eps", "min_freq", "max_freq"),
    "ssl": ("grid_spacing", "variance", "smoothing", "delta", "peak_threshold", "min_separation",
            "max_half_width"),
    "fusion": ("source_depth", "use_depth"),
}
PATH_KEYS = ("audio", "geometry", "camera", "frames", "keypoints")


@dataclass
class PipelineConfig:
    audio: Path
    output: Path
    geometry: Path | None = None
    camera: Path | None = None
    frames: Path | None = None
    keypoints: Path | None = None
    params: Parameters = field(default_factory=Parameters)
    write_features: bool = False

    def validate(self) -> None:
        for key in PATH_KEYS:
            p = getattr(self, key)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{key} file not found: {p}")
        if self.audio is None:
            raise ConfigError("no audio input configured")
        if self.frames is not None and self.camera is None:
            raise ConfigError("camera frames given without a camera model")
        self.params.validate()

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "PipelineConfig":
        base = Path(base_dir)
        paths = doc.get("paths", {})

        def resolve(v):
            return None if v in (None, "") else base / v

        if "audio" not in paths:
            raise ConfigError("config has no paths.audio entry")
        params = Parameters()
        known = {f.name for f in fields(Parameters)}
        for section, keys in PARAM_SECTIONS.items():
            for key, value in doc.get(section, {}).items():
                if key not in keys or key not in known:
                    raise ConfigError(f"unknown parameter {section}.{key}")
                setattr(params, key, value)
        return cls(
            audio=resolve(paths["audio"]),
            output=resolve(paths.get("output", "out")),
            geometry=resolve(paths.get("geometry")),
            camera=resolve(paths.get("camera")),
            frames=resolve(paths.get("frames")),
            keypoints=resolve(paths.get("keypoints")),
            params=params,
            write_features=bool(doc.get("output", {}).get("features_csv", False)),
        )


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = load_toml(path)
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = PipelineConfig.from_dict(doc, path.parent)
    for key, value in (overrides or {}).items():
        if not hasattr(cfg.params, key):
            raise ConfigError(f"unknown parameter {key}")
        setattr(cfg.params, key, value)
    cfg.validate()
    return cfg


@dataclass
class RunReport:
    frames_processed: int = 0
    audio_seconds: float = 0.0
    wall_seconds: float = 0.0
    ssl_rate_hz: float = 0.0
    real_time_factor: float = 0.0
    stage_seconds: dict = field(default_factory=dict)
    camera_frames: int = 0
    rejected_camera_frames: int = 0
    rls_resets: int = 0
    n_channels: int = 0
    repetitions: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class StageTimer:
    def __init__(self):
        self.seconds = defaultdict(float)

    def add(self, stage: str, t0: float) -> float:
        t1 = time.perf_counter()
        self.seconds[stage] += t1 - t0
        return t1


class SslPipeline:
    """Audio front end: STFT, energy gate, DP-RTF estimation, clustering.

    Push sample blocks of any size; complete SSL frames come back in order.
    Offline and streaming runs share this object, so chunking does not
    change any output value.
    """

    def __init__(self, geometry: ArrayGeometry, params: Parameters | None = None,
                 start_time: float = 0.0, keep_features: bool = False):
        self.params = p = params or Parameters()
        p.validate()
        self.geometry = geometry
        self.grid = CandidateGrid(p.grid_spacing)
        self.analyzer = StftAnalyzer(geometry.n_mics, p.window, p.hop)
        K = self.analyzer.n_bins
        self.table = compute_steering_table(geometry, self.grid, K, p.sample_rate)
        f = self.table.frequencies
        fmax = p.sample_rate / 2 if p.max_freq is None else p.max_freq
        self.band = (f >= p.min_freq) & (f <= fmax)
        self.noise = NoiseFloorTracker(K)
        self.estimator = DpRtfEstimator(geometry.n_mics, K, p.ctf_length, geometry.reference,
                                        p.forgetting, p.init_eps, p.residual_threshold)
        self.tracker = SslTracker(self.table, p.grid_spacing, p.variance, p.smoothing, p.delta,
                                  p.peak_threshold, p.min_separation, p.max_half_width)
        self.start_time = start_time
        self.timer = StageTimer()
        self.keep_features = keep_features
        self.features = []
        self.samples_in = 0

    def frame_timestamp(self, p: int) -> float:
        """Time at which frame p is complete (its last sample)."""
        return self.start_time + (p * self.params.hop + self.params.window) / self.params.sample_rate

    def push(self, block: np.ndarray) -> list[SslFrame]:
        t = time.perf_counter()
        frames = self.analyzer.push(block)
        self.samples_in += np.shape(block)[-1]
        t = self.timer.add("stft", t)
        out = []
        for fr in frames:
            try:
                out.append(self._frame(fr, t))
            except Exception as exc:
                raise PipelineError("audio", fr.index, exc) from exc
            t = time.perf_counter()
        return out

    def _frame(self, fr, t: float) -> SslFrame:
        floor = self.noise.update(bin_power(fr.coefficients))
        active = select_reliable_bins(fr.coefficients, self.params.noise_floor_factor, floor)
        active &= self.band
        t = self.timer.add("gate", t)
        feats = self.estimator.features(fr.index, fr.coefficients, active)
        t = self.timer.add("dprtf", t)
        if self.keep_features:
            self.features.append(feats)
        ssl = self.tracker.step(feats, fr.index, self.frame_timestamp(fr.index))
        self.timer.add("clustering", t)
        return ssl

    def record(self, frame: SslFrame) -> dict:
        return frame.to_record(self.grid.azimuths_deg, self.params.grid_spacing)


@dataclass
class CameraFrame:
    index: int
    timestamp: float
    depth_path: Path | None = None


def read_camera_frames(path) -> list[CameraFrame]:
    """CSV with columns ``frame,timestamp[,depth]``; depth paths are relative
    to the CSV and point at .npy (meters) or 16-bit PGM (millimeters)."""
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            depth = row.get("depth") or None
            out.append(CameraFrame(int(row["frame"]), float(row["timestamp"]),
                                   path.parent / depth if depth else None))
    return out


def load_depth(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(float)
    if path.suffix == ".pgm":
        raw = read_pgm(path)
        return raw.astype(float) / (1000.0 if raw.dtype != np.uint8 else 1.0)
    raise ConfigError(f"unsupported depth image format: {path}")


def read_keypoints(path) -> dict[int, np.ndarray]:
    """CSV ``frame,u,v[,score]`` grouped by frame."""
    groups = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        has_score = "score" in (reader.fieldnames or [])
        for row in reader:
            vals = [float(row["u"]), float(row["v"])]
            if has_score:
                vals.append(float(row["score"]))
            groups[int(row["frame"])].append(vals)
    return {k: np.array(v) for k, v in groups.items()}


def source_column_depth(depth: np.ndarray, column: float, halfwidth: int = 2) -> float | None:
    """Median valid depth on the image column of a source line."""
    c = int(round(column))
    strip = depth[:, max(c - halfwidth, 0) : c + halfwidth + 1]
    valid = strip[np.isfinite(strip) & (strip > 0)]
    return float(np.median(valid)) if valid.size else None


class FusionStage:
    """Per camera frame: look up the newest SSL frame and build its mask."""

    def __init__(self, camera: CameraModel, pipeline: SslPipeline, history: int | None = 512):
        self.camera = camera
        self.pipeline = pipeline
        self.history = SslHistory(history)

    def regions_deg(self, ssl: SslFrame | None):
        if ssl is None:
            return []
        return ssl.region_degrees(self.pipeline.grid.azimuths_deg, self.pipeline.params.grid_spacing)

    def process(self, cam: CameraFrame, depth: np.ndarray | None = None):
        ssl = self.history.latest_at_or_before(cam.timestamp)
        p = self.pipeline.params
        rects = []
        for region in self.regions_deg(ssl):
            d = p.source_depth
            if depth is not None and p.use_depth and d is None:
                col, clamped = azimuth_to_column(region[0], self.camera)
                if not clamped:
                    d = source_column_depth(depth, col)
            rects.append(region_to_rectangle(region, self.camera, d))
        mask = ObstacleMask(cam.index, self.camera.width, self.camera.height, rects,
                            timestamp=cam.timestamp, ssl_frame=None if ssl is None else ssl.frame)
        return mask


class OutputWriter:
    def __init__(self, out_dir: Path, pipeline: SslPipeline, with_camera: bool):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.pipeline = pipeline
        self._ssl = open(self.dir / "ssl.jsonl", "w")
        self._weights = open(self.dir / "weights.csv", "w")
        az = pipeline.grid.azimuths_deg
        self._weights.write("frame,timestamp," + ",".join(f"{a:g}" for a in az) + "\n")
        self._rects = self._kps = None
        if with_camera:
            (self.dir / "masks").mkdir(exist_ok=True)
            self._rects = open(self.dir / "rects.jsonl", "w")
            self._kps = open(self.dir / "keypoints_filtered.csv", "w")
            self._kps.write("frame,u,v,score\n")

    def ssl(self, frames) -> None:
        for f in frames:
            self._ssl.write(json.dumps(self.pipeline.record(f), separators=(",", ":")) + "\n")
            self._weights.write(f"{f.frame},{f.timestamp:.9f}," + ",".join(f"{w:.9g}" for w in f.weights) + "\n")

    def mask(self, mask, kept=None, depth_masked=None) -> None:
        write_pgm(self.dir / "masks" / f"{mask.frame:06d}.pgm", mask)
        self._rects.write(json.dumps(mask.to_record(), sort_keys=True) + "\n")
        if kept is not None:
            for row in kept:
                score = f"{row[2]:.6g}" if len(row) > 2 else ""
                self._kps.write(f"{mask.frame},{row[0]:.6g},{row[1]:.6g},{score}\n")
        if depth_masked is not None:
            (self.dir / "depth_masked").mkdir(exist_ok=True)
            np.save(self.dir / "depth_masked" / f"{mask.frame:06d}.npy", depth_masked)

    def close(self) -> None:
        for fh in (self._ssl, self._weights, self._rects, self._kps):
            if fh is not None:
                fh.close()


class _Run:
    """Shared state of one run (offline or streaming)."""

    def __init__(self, config: PipelineConfig, write: bool = True):
        self.config = config
        p = config.params
        try:
            geometry = load_geometry(config.geometry) if config.geometry else default_geometry()
        except GeometryError as exc:
            raise ConfigError(str(exc)) from exc
        self.clip = read_wav(config.audio, expected_channels=geometry.n_mics)
        if self.clip.sample_rate != p.sample_rate:
            log.info("using file sample rate %d Hz", self.clip.sample_rate)
            p.sample_rate = self.clip.sample_rate
        self.pipeline = SslPipeline(geometry, p, keep_features=config.write_features)
        self.camera = load_camera(config.camera) if config.camera else None
        self.cam_frames = read_camera_frames(config.frames) if config.frames else []
        self.keypoints = read_keypoints(config.keypoints) if config.keypoints else {}
        self.fusion = FusionStage(self.camera, self.pipeline, None) if self.camera else None
        self.writer = OutputWriter(config.output, self.pipeline, self.fusion is not None) if write else None
        self.ssl_frames: list[SslFrame] = []
        self.masks = []
        self.rejected = 0
        self._last_cam_ts = -np.inf

    def on_ssl(self, frames) -> None:
        self.ssl_frames.extend(frames)
        if self.fusion is not None:
            for f in frames:
                self.fusion.history.append(f)
        if self.writer:
            self.writer.ssl(frames)

    def on_camera(self, cam: CameraFrame) -> None:
        if cam.timestamp < self._last_cam_ts:
            log.warning("camera frame %d out of timestamp order; rejected", cam.index)
            self.rejected += 1
            return
        self._last_cam_ts = cam.timestamp
        t = time.perf_counter()
        depth = load_depth(cam.depth_path) if cam.depth_path else None
        mask = self.fusion.process(cam, depth)
        kept = None
        if cam.index in self.keypoints:
            kept, _ = split_features(self.keypoints[cam.index], mask)
        masked = invalidate_depth(depth, mask) if depth is not None else None
        self.masks.append(mask)
        if self.writer:
            self.writer.mask(mask, kept, masked)
        self.pipeline.timer.add("fusion", t)

    def finish(self, wall: float) -> RunReport:
        p = self.pipeline.params
        audio_s = self.clip.duration
        report = RunReport(
            frames_processed=len(self.ssl_frames),
            audio_seconds=audio_s,
            wall_seconds=wall,
            ssl_rate_hz=p.frame_rate,
            real_time_factor=audio_s / wall if wall > 0 else float("inf"),
            stage_seconds=dict(self.pipeline.timer.seconds),
            camera_frames=len(self.masks),
            rejected_camera_frames=self.rejected,
            rls_resets=self.pipeline.estimator.resets,
            n_channels=self.clip.n_channels,
        )
        if self.writer:
            if self.config.write_features:
                with open(self.writer.dir / "features.csv", "w") as fh:
                    write_feature_csv(fh, self.pipeline.features, self.pipeline.geometry.non_reference)
            with open(self.writer.dir / "report.json", "w") as fh:
                fh.write(report.to_json() + "\n")
            self.writer.close()
        return report


def run_offline(config: PipelineConfig, write: bool = True) -> RunReport:
    """Process a whole recording and write every output file."""
    config.validate()
    run = _Run(config, write)
    t0 = time.perf_counter()
    run.on_ssl(run.pipeline.push(run.clip.samples))
    for cam in run.cam_frames:
        run.on_camera(cam)
    report = run.finish(time.perf_counter() - t0)
    run_offline.last_run = run
    return report


class StreamingSession:
    """Live input contract: audio blocks and camera frames in time order.

    ``push_audio`` returns SSL frames as soon as they are complete;
    ``push_camera`` returns the mask built from the newest SSL frame at or
    before the camera timestamp (no rectangles before the first SSL frame).
    Out-of-order camera frames are rejected with a warning; ``poll`` logs a
    heartbeat diagnostic when audio has stalled.
    """

    def __init__(self, geometry: ArrayGeometry, params: Parameters | None = None,
                 camera: CameraModel | None = None, stall_timeout: float = 0.5):
        self.pipeline = SslPipeline(geometry, params)
        self.fusion = FusionStage(camera, self.pipeline) if camera else None
        self.stall_timeout = stall_timeout
        self._last_audio_wall = None
        self._last_cam_ts = -np.inf
        self.rejected = 0

    def push_audio(self, block, now: float | None = None) -> list[SslFrame]:
        self._last_audio_wall = time.monotonic() if now is None else now
        frames = self.pipeline.push(block)
        if self.fusion is not None:
            for f in frames:
                self.fusion.history.append(f)
        return frames

    def push_camera(self, cam: CameraFrame, depth=None):
        if self.fusion is None:
            raise RuntimeError("session has no camera model")
        if cam.timestamp < self._last_cam_ts:
            log.warning("camera frame %d out of timestamp order; rejected", cam.index)
            self.rejected += 1
            return None
        self._last_cam_ts = cam.timestamp
        return self.fusion.process(cam, depth)

    def poll(self, now: float | None = None) -> dict | None:
        now = time.monotonic() if now is None else now
        if self._last_audio_wall is not None and now - self._last_audio_wall > self.stall_timeout:
            log.warning("audio stream stalled for %.2f s", now - self._last_audio_wall)
            return {"heartbeat": True, "stalled_for": now - self._last_audio_wall}
        return None


def run_streaming(config: PipelineConfig, block: int | None = None, realtime: bool = False,
                  write: bool = True) -> RunReport:
    """Replay the configured inputs through the streaming path.

    Audio is fed in blocks of `block` samples (default one hop); each camera
    frame is handled once the audio up to its timestamp has been received.
    With `realtime` the feed is paced to the wall clock.
    """
    config.validate()
    run = _Run(config, write)
    p = run.pipeline.params
    block = block or p.hop
    fs = run.clip.sample_rate
    x = run.clip.samples
    cams = list(run.cam_frames)
    ci = 0
    t0 = time.perf_counter()
    for start in range(0, x.shape[1], block):
        stop = min(start + block, x.shape[1])
        run.on_ssl(run.pipeline.push(x[:, start:stop]))
        now_audio = stop / fs
        while ci < len(cams) and cams[ci].timestamp <= now_audio:
            run.on_camera(cams[ci])
            ci += 1
        if realtime:
            lag = now_audio - (time.perf_counter() - t0)
            if lag > 0:
                time.sleep(lag)
    for cam in cams[ci:]:
        run.on_camera(cam)
    report = run.finish(time.perf_counter() - t0)
    run_streaming.last_run = run
    return report


def benchmark(config: PipelineConfig, repetitions: int = 3) -> RunReport:
    """Median wall time of `repetitions` offline runs (outputs not written)."""
    reports = [run_offline(config, write=False) for _ in range(max(1, repetitions))]
    walls = [r.wall_seconds for r in reports]
    med = statistics.median(walls)
    best = min(reports, key=lambda r: abs(r.wall_seconds - med))
    stages = {k: statistics.median(r.stage_seconds.get(k, 0.0) for r in reports)
              for k in reports[0].stage_seconds}
    return RunReport(
        frames_processed=best.frames_processed,
        audio_seconds=best.audio_seconds,
        wall_seconds=med,
        ssl_rate_hz=best.ssl_rate_hz,
        real_time_factor=best.audio_seconds / med if med > 0 else float("inf"),
        stage_seconds=stages,
        camera_frames=best.camera_frames,
        rls_resets=best.rls_resets,
        n_channels=best.n_channels,
        repetitions=len(reports),
    )
