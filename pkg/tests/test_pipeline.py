import json
import logging
import shutil
from dataclasses import replace

import numpy as np
import pytest

from acoustic_fusion.cli import simulate
from acoustic_fusion.fusion import load_camera, read_pgm
from acoustic_fusion.geometry import default_geometry
from acoustic_fusion.pipeline import (CameraFrame, ConfigError, Parameters, PipelineError, SslPipeline,
                                      StreamingSession, benchmark, load_config, run_offline,
                                      run_streaming, source_column_depth)
from acoustic_fusion.simulator import SceneScript, SourceSpec
from acoustic_fusion.stft import AudioClip, AudioFormatError, write_wav


def two_source_scene(duration=3.0):
    return SceneScript([SourceSpec([(0.0, 25.0, 2.0)], "speech"),
                        SourceSpec([(0.0, -30.0, 1.5)], "speech", onset=1.0)], snr_db=20.0,
                       duration=duration)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    simulate(two_source_scene(), root, seed=3, camera_fps=30.0)
    return root


@pytest.fixture(scope="module")
def offline(scene_dir):
    cfg = load_config(scene_dir / "config.toml")
    cfg.write_features = True
    report = run_offline(cfg)
    return cfg, report, run_offline.last_run


def test_output_set(offline):
    cfg, report, run = offline
    out = cfg.output
    for name in ("ssl.jsonl", "weights.csv", "rects.jsonl", "keypoints_filtered.csv", "report.json",
                 "features.csv"):
        assert (out / name).is_file(), name
    n_cam = len(run.cam_frames)
    assert len(list((out / "masks").glob("*.pgm"))) == n_cam
    assert len(list((out / "depth_masked").glob("*.npy"))) == n_cam
    lines = (out / "ssl.jsonl").read_text().splitlines()
    assert len(lines) == report.frames_processed == (3 * 16000 - 256) // 128 + 1
    rec = json.loads(lines[-1])
    assert len(rec["weights"]) == 72 and abs(sum(rec["weights"]) - 1) < 1e-9
    header = (out / "weights.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["frame", "timestamp", "-175"] and header[-1] == "180"
    saved = json.loads((out / "report.json").read_text())
    assert saved["frames_processed"] == report.frames_processed
    assert set(saved["stage_seconds"]) >= {"stft", "gate", "dprtf", "clustering", "fusion"}


def test_masks_match_rectangles(offline):
    cfg, _, run = offline
    for mask in run.masks[::10]:
        img = read_pgm(cfg.output / "masks" / f"{mask.frame:06d}.pgm")
        assert np.array_equal(img > 0, mask.validity)
        dm = np.load(cfg.output / "depth_masked" / f"{mask.frame:06d}.npy")
        assert np.all(dm[~mask.validity] == 0)


def test_source_masked(offline):
    """While only the first talker is active its image column is masked."""
    cfg, _, run = offline
    camera = load_camera(cfg.camera)
    col = int(round(camera.cx - camera.fx * np.tan(np.radians(25.0))))
    solo = [m for m in run.masks if 0.5 < m.timestamp < 1.0]
    hit = sum(not m.validity[camera.height // 2, col] for m in solo)
    assert hit >= 0.8 * len(solo)


def test_filtered_keypoints_outside_rectangles(offline):
    cfg, _, run = offline
    rows = np.loadtxt(cfg.output / "keypoints_filtered.csv", delimiter=",", skiprows=1)
    by_frame = {m.frame: m for m in run.masks}
    for frame, u, v, _ in rows[::25]:
        for r in by_frame[int(frame)].rectangles:
            assert r.out_of_view or not (r.col_min <= u <= r.col_max and r.row_min <= v <= r.row_max)
    assert len(rows) < 200 * len(run.masks)


def test_camera_references_recent_ssl(offline):
    _, _, run = offline
    ts = {f.frame: f.timestamp for f in run.ssl_frames}
    first = run.ssl_frames[0].timestamp
    for m in run.masks:
        if m.timestamp < first:
            assert m.ssl_frame is None and m.rectangles == []
            continue
        age = m.timestamp - ts[m.ssl_frame]
        assert 0.0 <= age < 0.008 + 1e-12


def test_streaming_matches_offline(scene_dir, offline, tmp_path):
    cfg, _, _ = offline
    for block in (1, 128, 1000):
        scfg = load_config(scene_dir / "config.toml")
        scfg.output = tmp_path / f"stream{block}"
        run_streaming(scfg, block=block)
        for name in ("ssl.jsonl", "weights.csv", "rects.jsonl", "keypoints_filtered.csv"):
            assert (scfg.output / name).read_bytes() == (cfg.output / name).read_bytes(), (block, name)
        for p in sorted((cfg.output / "masks").glob("*.pgm"))[::15]:
            assert (scfg.output / "masks" / p.name).read_bytes() == p.read_bytes()


def test_audio_only_mode(tmp_path):
    simulate(two_source_scene(1.0), tmp_path, seed=1)
    cfg = load_config(tmp_path / "config.toml")
    report = run_offline(cfg)
    assert report.camera_frames == 0
    assert (cfg.output / "ssl.jsonl").is_file()
    assert not (cfg.output / "masks").exists()
    assert not (cfg.output / "rects.jsonl").exists()


def test_out_of_order_camera_rejected(scene_dir, tmp_path, caplog):
    shutil.copytree(scene_dir, tmp_path / "s", ignore=shutil.ignore_patterns("out"))
    frames = tmp_path / "s" / "frames.csv"
    lines = frames.read_text().splitlines()
    lines[5], lines[6] = lines[6], lines[5]
    frames.write_text("\n".join(lines) + "\n")
    cfg = load_config(tmp_path / "s" / "config.toml")
    with caplog.at_level(logging.WARNING):
        report = run_offline(cfg, write=False)
    assert report.rejected_camera_frames == 1
    assert report.camera_frames == len(lines) - 2
    assert "out of timestamp order" in caplog.text


# ---------------------------------------------------------------- config

def test_config_errors(scene_dir, tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text(f'[paths]\naudio = "{scene_dir / "scene.wav"}"\ngeometry = "nope.toml"\n')
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text(f'[paths]\naudio = "{scene_dir / "scene.wav"}"\n[dprtf]\nwobble = 3\n')
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[paths]\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("this is = = not toml")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(scene_dir / "config.toml", {"forgetting": 1.5})
    with pytest.raises(ConfigError):
        load_config(scene_dir / "config.toml", {"no_such_knob": 1})


def test_config_sections_and_overrides(scene_dir, tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(f'[paths]\naudio = "{scene_dir / "scene.wav"}"\n'
                    "[audio]\nnoise_floor_factor = 2.0\n[dprtf]\nctf_length = 4\n"
                    "[ssl]\nsmoothing = 0.1\n[fusion]\nsource_depth = 2.5\n")
    cfg = load_config(path, {"delta": 0.5})
    p = cfg.params
    assert (p.noise_floor_factor, p.ctf_length, p.smoothing, p.source_depth, p.delta) == (2.0, 4, 0.1, 2.5, 0.5)


def test_channel_mismatch(scene_dir, tmp_path):
    path = tmp_path / "c.toml"
    geo = tmp_path / "g.toml"
    geo.write_text("mics = [[0.0, 0.02, 0.0], [0.0, -0.02, 0.0]]\n")
    path.write_text(f'[paths]\naudio = "{scene_dir / "scene.wav"}"\ngeometry = "g.toml"\n')
    with pytest.raises(AudioFormatError):
        run_offline(load_config(path), write=False)


# ---------------------------------------------------------------- streaming session

def test_cold_start_mask_empty():
    camera = load_camera(default_camera_path())
    s = StreamingSession(default_geometry(), camera=camera)
    mask = s.push_camera(CameraFrame(0, 0.0))
    assert mask.rectangles == [] and mask.ssl_frame is None
    assert mask.validity.all()


def test_session_rejects_and_heartbeat(caplog):
    camera = load_camera(default_camera_path())
    s = StreamingSession(default_geometry(), camera=camera, stall_timeout=0.5)
    assert s.poll(now=0.0) is None
    s.push_audio(np.zeros((7, 128)), now=10.0)
    assert s.poll(now=10.2) is None
    with caplog.at_level(logging.WARNING):
        beat = s.poll(now=11.0)
    assert beat["heartbeat"] and beat["stalled_for"] == pytest.approx(1.0)
    assert s.push_camera(CameraFrame(1, 0.5)) is not None
    assert s.push_camera(CameraFrame(2, 0.4)) is None
    assert s.rejected == 1


def test_session_without_camera():
    s = StreamingSession(default_geometry())
    with pytest.raises(RuntimeError):
        s.push_camera(CameraFrame(0, 0.0))


def default_camera_path():
    from pathlib import Path
    import acoustic_fusion
    return Path(acoustic_fusion.__file__).parent / "profiles" / "camera.toml"


# ---------------------------------------------------------------- edge inputs

def test_silence_does_not_crash():
    pipe = SslPipeline(default_geometry())
    frames = pipe.push(np.zeros((7, 16000)))
    assert len(frames) == 124
    assert all(np.isfinite(f.weights).all() for f in frames)
    assert all(abs(f.weights.sum() - 1) < 1e-9 for f in frames)


def test_short_audio(tmp_path):
    write_wav(tmp_path / "a.wav", AudioClip(np.zeros((7, 100), np.float32), 16000))
    (tmp_path / "c.toml").write_text('[paths]\naudio = "a.wav"\n')
    report = run_offline(load_config(tmp_path / "c.toml"))
    assert report.frames_processed == 0
    assert (tmp_path / "out" / "ssl.jsonl").read_text() == ""


def test_chunking_invariance(speech_scene):
    clip, _ = speech_scene
    x = clip.samples[:, :16000]
    a = SslPipeline(default_geometry()).push(x)
    pipe = SslPipeline(default_geometry())
    b = []
    rng = np.random.default_rng(0)
    start = 0
    while start < x.shape[1]:
        n = int(rng.integers(1, 700))
        b += pipe.push(x[:, start:start + n])
        start += n
    assert len(a) == len(b)
    for fa, fb in zip(a, b):
        assert fa.weights.tobytes() == fb.weights.tobytes()
        assert fa.timestamp == fb.timestamp and fa.peaks == fb.peaks


def test_frame_timestamps():
    pipe = SslPipeline(default_geometry())
    frames = pipe.push(np.random.default_rng(0).standard_normal((7, 2048)) * 0.01)
    assert [f.timestamp for f in frames] == [(p * 128 + 256) / 16000 for p in range(len(frames))]
    assert Parameters().frame_rate == 125.0


def test_all_invalid_depth():
    depth = np.zeros((48, 64))
    assert source_column_depth(depth, 30.0) is None
    depth[:, 28:33] = np.nan
    assert source_column_depth(depth, 30.0) is None
    depth[:, 30] = 2.0
    assert source_column_depth(depth, 30.0) == 2.0


def test_pipeline_error_carries_position():
    pipe = SslPipeline(default_geometry())
    with pytest.raises(PipelineError) as info:
        pipe.estimator = None  # break the estimator stage
        pipe.push(np.zeros((7, 512)))
    assert info.value.frame == 0 and info.value.stream == "audio"


def test_benchmark_reports(scene_dir):
    cfg = load_config(scene_dir / "config.toml")
    report = benchmark(replace(cfg), repetitions=1)
    assert report.real_time_factor > 0 and report.repetitions == 1
    assert report.frames_processed > 0
