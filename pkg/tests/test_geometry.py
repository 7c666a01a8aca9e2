import numpy as np
import pytest
from hypothesis import given, strategies as st

from acoustic_fusion.geometry import (ArrayGeometry, CandidateGrid, GeometryError, bin_frequencies,
                                      compute_steering_table, default_geometry, far_field_tdoa,
                                      geometry_to_toml, load_geometry, tdoa_matrix, wrap_deg)
from oracles import tdoa_by_distance

PAIR = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]])


def test_minimal_geometry_loads(tmp_path):
    f = tmp_path / "g.toml"
    f.write_text("mics = [[0,0,0],[0.05,0,0]]\nreference = 0\n")
    g = load_geometry(f)
    assert g.n_mics == 2 and g.reference == 0 and g.speed_of_sound == 343.0


def test_default_profile_has_seven_planar_mics():
    g = default_geometry()
    assert g.n_mics == 7
    assert np.allclose(g.mic_positions[:, 2], 0.0)


def test_reference_out_of_range(tmp_path):
    f = tmp_path / "g.toml"
    f.write_text(geometry_to_toml(default_geometry()).replace("reference = 0", "reference = 7"))
    with pytest.raises(GeometryError, match="out of range"):
        load_geometry(f)


@pytest.mark.parametrize("text", [
    "mics = [[0,0,0]]",
    "mics = [[0,0,0],[0,0,0]]",
    "mics = [[0,0,0],[1,0]]",
    "reference = 0",
    "mics = [[0,0,0],[0.05,0,0]\n",
])
def test_invalid_geometry_documents(tmp_path, text):
    f = tmp_path / "g.toml"
    f.write_text(text)
    with pytest.raises(GeometryError):
        load_geometry(f)


def test_missing_geometry_file(tmp_path):
    with pytest.raises(GeometryError):
        load_geometry(tmp_path / "nope.toml")


def test_toml_round_trip(tmp_path):
    g = default_geometry().with_reference(3)
    f = tmp_path / "g.toml"
    f.write_text(geometry_to_toml(g))
    back = load_geometry(f)
    assert np.array_equal(back.mic_positions, g.mic_positions)
    assert back.reference == 3


def test_grid_defaults():
    grid = CandidateGrid()
    az = grid.azimuths_deg
    assert grid.size == 72
    assert az[0] == -175.0 and az[-1] == 180.0
    assert np.allclose(np.diff(az), 5.0)
    assert wrap_deg(az[-1] + 5.0) == az[0]


def test_grid_rejects_bad_spacing():
    with pytest.raises(ValueError):
        CandidateGrid(7.0)
    with pytest.raises(ValueError):
        CandidateGrid(0.0)
    assert CandidateGrid(360.0).size == 1


def test_tdoa_along_baseline():
    g = ArrayGeometry(PAIR)
    assert far_field_tdoa(g, 0.0, 1) == pytest.approx(-0.05 / 343.0, rel=1e-12)
    assert far_field_tdoa(g, 180.0, 1) == pytest.approx(0.05 / 343.0, rel=1e-12)
    assert abs(far_field_tdoa(g, 90.0, 1)) < 1e-18
    assert far_field_tdoa(g, 33.0, 0) == 0.0


@given(st.floats(-180, 180), st.integers(0, 6))
def test_tdoa_matches_path_length_oracle(az, m):
    g = default_geometry()
    expect = tdoa_by_distance(g.mic_positions[m], g.mic_positions[0], az)
    assert far_field_tdoa(g, az, m) == pytest.approx(expect, abs=1e-15)
    assert abs(far_field_tdoa(g, az, m)) <= np.linalg.norm(g.mic_positions[m]) / 343.0 + 1e-15


def test_steering_phase_example():
    g = ArrayGeometry(PAIR[::-1].copy())  # reference at 0.05 m, channel 1 at origin
    tau = far_field_tdoa(g, 0.0, 1)
    assert tau == pytest.approx(1.4577e-4, rel=1e-3)
    K = 129
    fs = 2.0 * (K - 1) * 1000.0 / 16  # bin 16 sits at exactly 1 kHz
    tab = compute_steering_table(g, CandidateGrid(), K, fs)
    d = CandidateGrid().nearest_index(0.0)
    assert tab.frequencies[16] == 1000.0
    assert np.angle(tab.means[16, 0, d]) == pytest.approx(-2 * np.pi * 1000.0 * tau, abs=1e-12)
    assert np.angle(tab.means[16, 0, d]) == pytest.approx(-0.9159, abs=1e-3)


def test_full_table_shape_and_modulus():
    tab = compute_steering_table(default_geometry(), CandidateGrid(), 129, 16000)
    assert tab.means.shape == (129, 6, 72)
    assert np.max(np.abs(np.abs(tab.means) - 1.0)) < 1e-9
    assert tab.channels == (1, 2, 3, 4, 5, 6)


def test_zero_delay_table_is_ones():
    g = ArrayGeometry(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.1]]))  # vertical pair
    tab = compute_steering_table(g, CandidateGrid(), 9, 16000)
    assert np.allclose(tab.means, 1.0)


def test_reference_swap_inverts_entries():
    g = default_geometry()
    K, grid = 65, CandidateGrid()
    a = compute_steering_table(g, grid, K, 16000)
    b = compute_steering_table(g.with_reference(2), grid, K, 16000)
    # channel 2 relative to 0, vs channel 0 relative to 2
    assert np.max(np.abs(a.means[:, 1, :] * b.means[:, 0, :] - 1.0)) < 1e-9


def test_negated_delay_conjugates():
    g = default_geometry()
    tab = compute_steering_table(g, CandidateGrid(), 65, 16000)
    tau = tdoa_matrix(g, CandidateGrid().azimuths_deg)[1:]
    f = bin_frequencies(65, 16000)
    neg = np.exp(-2j * np.pi * f[:, None, None] * (-tau)[None])
    assert np.allclose(neg, tab.means.conj(), atol=1e-12)


def test_bin_frequencies():
    f = bin_frequencies(129, 16000)
    assert f[0] == 0.0 and f[-1] == 8000.0 and f[16] == 1000.0
    assert bin_frequencies(1, 16000)[0] == 0.0


def test_subset_keeps_reference():
    g = default_geometry()
    s = g.subset([0, 1, 4])
    assert s.n_mics == 3 and s.reference == 0
    with pytest.raises(GeometryError):
        g.subset([1, 2])


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_range(a):
    w = wrap_deg(a)
    assert -180.0 < w <= 180.0
    assert np.isclose(np.cos(np.radians(w)), np.cos(np.radians(a)), atol=1e-9)
