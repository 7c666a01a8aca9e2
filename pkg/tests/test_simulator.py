import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acoustic_fusion.geometry import ArrayGeometry, far_field_tdoa
from acoustic_fusion.simulator import (ReverbSpec, SceneError, SceneScript, SourceSpec, fractional_delay,
                                       load_scene, oracle_tdoa, render_scene, speech_like)
from acoustic_fusion.stft import AudioClip


def white(az, dist=2.0, **kw):
    return SourceSpec([(0.0, az, dist)], "white", **kw)


# ---------------------------------------------------------------- rendering

def test_forward_source_identical_channels(pair_geometry):
    clip, _ = render_scene(SceneScript([white(0.0)]), pair_geometry, 16000, 1.0, seed=3)
    assert np.array_equal(clip.samples[0], clip.samples[1])


def test_lateral_delay_samples(pair_geometry):
    clip, _ = render_scene(SceneScript([white(90.0)]), pair_geometry, 16000, 2.0, seed=3)
    expected = 0.05 / 343.0
    assert expected * 16000 == pytest.approx(2.33, abs=0.01)
    tau = oracle_tdoa(clip, (0, 1))
    assert tau == pytest.approx(1.458e-4, rel=0.05)
    assert tau == pytest.approx(expected, rel=0.02)


def test_fractional_delay_shifts_by_integer():
    x = np.random.default_rng(0).standard_normal(400)
    y = fractional_delay(x, 5.0)
    assert np.allclose(y[5:], x[:-5], atol=1e-12)
    assert np.allclose(y[:5], 0.0)


def test_fractional_delay_constant_matches_per_sample():
    x = np.random.default_rng(1).standard_normal(2000)
    for d in (0.3, -2.7, 11.5):
        assert np.allclose(fractional_delay(x, d), fractional_delay(x, np.full(len(x), d)), atol=1e-12)


@settings(max_examples=15)
@given(az=st.floats(-180, 180), seed=st.integers(0, 1000))
def test_render_oracle_closure(geometry, az, seed):
    clip, _ = render_scene(SceneScript([white(az)], snr_db=30.0), geometry, 16000, 0.5, seed=seed)
    for m in (1, 3, 5):
        expected = far_field_tdoa(geometry, az, m)
        assert abs(oracle_tdoa(clip, (geometry.reference, m)) - expected) < 10e-6


def test_energy_inverse_square(geometry):
    powers = []
    for dist in (1.0, 2.0, 3.0):
        script = SceneScript([white(30.0, dist, gain=0.1)])
        clip, _ = render_scene(script, geometry, 16000, 2.0, seed=11)
        assert np.max(np.abs(clip.samples)) < 0.99
        powers.append(np.mean(clip.samples.astype(float) ** 2, axis=1))
    powers = np.array(powers)
    assert np.allclose(powers[0] / powers[1], 4.0, rtol=0.01)
    assert np.allclose(powers[0] / powers[2], 9.0, rtol=0.01)


def test_snr(geometry):
    script = SceneScript([white(0.0, gain=0.05)], snr_db=10.0)
    noisy, _ = render_scene(script, geometry, 16000, 2.0, seed=5)
    clean, _ = render_scene(SceneScript([white(0.0, gain=0.05)]), geometry, 16000, 2.0, seed=5)
    noise = noisy.samples.astype(float) - clean.samples
    ratio = np.mean(clean.samples.astype(float) ** 2) / np.mean(noise ** 2)
    assert 10 * np.log10(ratio) == pytest.approx(10.0, abs=0.2)


def test_deterministic_under_seed(geometry):
    script = SceneScript([SourceSpec([(0.0, -30.0, 2.0), (2.0, 30.0, 1.5)], "speech")], snr_db=15.0,
                         reverb=ReverbSpec())
    a, _ = render_scene(script, geometry, 16000, 2.0, seed=9)
    b, _ = render_scene(script, geometry, 16000, 2.0, seed=9)
    c, _ = render_scene(script, geometry, 16000, 2.0, seed=10)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.samples.tobytes() != c.samples.tobytes()


def test_moving_source_delay_tracks(pair_geometry):
    script = SceneScript([SourceSpec([(0.0, 90.0, 2.0), (1.0, 90.0, 2.0), (1.001, -90.0, 2.0)], "white")])
    clip, _ = render_scene(script, pair_geometry, 16000, 2.0, seed=2)
    first = AudioClip(clip.samples[:, :15000], 16000)
    second = AudioClip(clip.samples[:, 17000:], 16000)
    assert oracle_tdoa(first, (0, 1)) > 1e-4
    assert oracle_tdoa(second, (0, 1)) < -1e-4


def test_reverb_changes_signal(geometry):
    dry, _ = render_scene(SceneScript([white(20.0)]), geometry, 16000, 1.0, seed=4)
    wet, _ = render_scene(SceneScript([white(20.0)], reverb=ReverbSpec(taps=4)), geometry, 16000, 1.0,
                          seed=4)
    assert dry.samples.shape == wet.samples.shape
    assert not np.allclose(dry.samples, wet.samples)


def test_speech_like_is_bursty():
    x, env = speech_like(16000 * 10, 16000, np.random.default_rng(0))
    frac = np.mean(env > 0.5)
    assert 0.3 < frac < 0.95
    assert np.std(x[env < 0.5]) < 0.2 * np.std(x[env > 0.5])


def test_bands_restrict_spectrum(geometry):
    src = SourceSpec([(0.0, 0.0, 1.0)], "white", bands=[(1000.0, 2000.0)], gain=0.1)
    clip, _ = render_scene(SceneScript([src]), geometry, 16000, 1.0, seed=1)
    spec = np.abs(np.fft.rfft(clip.samples[0])) ** 2
    f = np.fft.rfftfreq(clip.n_samples, 1 / 16000)
    inside = spec[(f > 1050) & (f < 1950)].mean()
    outside = spec[(f < 800) | (f > 2300)].mean()
    assert outside < 1e-3 * inside


# ---------------------------------------------------------------- ground truth

def test_disjoint_onsets_one_source_per_frame(geometry):
    script = SceneScript([white(-40.0, offset=1.0), white(40.0, onset=1.0)])
    _, gt = render_scene(script, geometry, 16000, 2.0, seed=0)
    assert all(len(gt.active(p)) == 1 for p in range(len(gt.frames)))
    ids = [gt.active(p)[0][0] for p in range(len(gt.frames))]
    t = gt.frame_times
    assert all(i == (0 if tt < 1.0 else 1) for i, tt in zip(ids, t))


def test_ground_truth_at_frame_centres(geometry):
    script = SceneScript([SourceSpec([(0.0, 0.0, 2.0), (1.0, 90.0, 2.0)], "white")])
    _, gt = render_scene(script, geometry, 16000, 1.0, seed=0)
    assert gt.frame_times[0] == pytest.approx(128 / 16000)
    assert len(gt.frames) == (16000 - 256) // 128 + 1
    for p in (0, 40, 100):
        assert gt.active(p)[0][1] == pytest.approx(90.0 * gt.frame_times[p])


def test_ground_truth_csv(tmp_path, geometry):
    script = SceneScript([white(-40.0, offset=0.5), white(40.0, onset=0.25)])
    _, gt = render_scene(script, geometry, 16000, 1.0, seed=0)
    path = tmp_path / "gt.csv"
    gt.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "frame,source,azimuth,distance,voiced"
    assert len(lines) - 1 == sum(len(f) for f in gt.frames)
    p, sid, az, dist, voiced = lines[1].split(",")
    assert (int(p), int(sid), float(az), float(dist)) == (0, 0, -40.0, 2.0)


def test_load_scene(tmp_path, geometry):
    path = tmp_path / "scene.toml"
    path.write_text(
        "snr_db = 20.0\nduration = 1.0\n\n[reverb]\ntaps = 3\n\n"
        "[[sources]]\ntrajectory = [[0.0, 30.0, 2.0]]\nsignal = \"white\"\n"
    )
    script = load_scene(path)
    assert script.reverb.taps == 3 and script.snr_db == 20.0
    clip, gt = render_scene(script, geometry)
    assert clip.samples.shape == (geometry.n_mics, 16000)


# ---------------------------------------------------------------- errors

@pytest.mark.parametrize("kwargs", [
    dict(trajectory=[(0.0, 0.0, -1.0)]),
    dict(trajectory=[(1.0, 0.0, 1.0), (0.5, 0.0, 1.0)]),
    dict(trajectory=[(0.0, 0.0)]),
    dict(trajectory=[(0.0, 0.0, 1.0)], onset=2.0, offset=1.0),
    dict(trajectory=[(0.0, 0.0, 1.0)], signal="violin"),
    dict(trajectory=[(0.0, 0.0, 1.0)], signal="wav"),
])
def test_invalid_sources(kwargs):
    with pytest.raises(SceneError):
        SourceSpec(**kwargs)


def test_invalid_scripts(geometry):
    with pytest.raises(SceneError):
        render_scene(SceneScript([]), geometry, 16000, 1.0)
    with pytest.raises(SceneError):
        render_scene(SceneScript([white(0.0)]), geometry, 16000, None)
    with pytest.raises(SceneError):
        ReverbSpec(taps=0)
    with pytest.raises(SceneError):
        SceneScript.from_dict({"sources": [{"trajectory": [[0, 0, 1]], "colour": "red"}]})


def test_oracle_antisymmetry_and_identity(pair_geometry):
    clip, _ = render_scene(SceneScript([white(60.0)]), pair_geometry, 16000, 1.0, seed=8)
    fwd = oracle_tdoa(clip, (0, 1))
    assert oracle_tdoa(clip, (1, 0)) == pytest.approx(-fwd, abs=1e-9)
    same = AudioClip(np.vstack([clip.samples[0], clip.samples[0]]), 16000)
    assert oracle_tdoa(same, (0, 1)) == 0.0


def test_oracle_errors():
    with pytest.raises(ValueError):
        oracle_tdoa(AudioClip(np.zeros((2, 800), np.float32), 16000), (0, 1))
    with pytest.raises(ValueError):
        oracle_tdoa(AudioClip(np.zeros((2, 16000), np.float32), 16000), (0, 1))


def test_three_d_geometry_renders():
    g = ArrayGeometry(np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [0.0, 0.0, 0.05]]))
    clip, _ = render_scene(SceneScript([white(0.0)]), g, 16000, 0.5, seed=0)
    assert clip.samples.shape == (3, 8000)
