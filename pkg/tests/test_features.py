import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings
from hypothesis import strategies as st

from spoofmtl.features import (
    AudioClip,
    LFCCConfig,
    deltas,
    extract,
    filter_centers,
    filterbank_energies,
    frame_and_window,
    linear_filterbank,
    lfcc,
    num_frames,
    read_features,
    read_raw_float32,
    read_wav,
    write_features,
    write_wav,
)

CFG = LFCCConfig()


def test_one_second_gives_99_frames():
    frames = frame_and_window(np.zeros(16000))
    assert frames.shape == (99, 320)
    assert num_frames(16000) == 99


def test_zero_clip_gives_zero_frames():
    assert not frame_and_window(np.zeros(1000)).any()


def test_short_clip_rejected():
    with pytest.raises(ValueError, match="shorter"):
        frame_and_window(np.zeros(319))


def test_impulse_reads_back_the_periodic_hann_value():
    x = np.zeros(2000)
    x[160 + 160] = 1.0  # sample 160 of frame 1
    frames = frame_and_window(x)
    hann = scipy.signal.get_window("hann", 320, fftbins=True)
    assert frames[1, 160] == pytest.approx(hann[160])
    assert frames[1, 160] == pytest.approx(1.0)
    assert frames[2, 0] == pytest.approx(0.0)


def test_silence_gives_log_floor_statics_and_zero_deltas():
    feats = lfcc(frame_and_window(np.zeros(4000)))
    floor = np.log(1e-30)
    expected = np.zeros(20)
    expected[0] = floor * np.sqrt(20)  # orthonormal DCT of a constant vector
    np.testing.assert_allclose(feats[:, :20], np.tile(expected, (feats.shape[0], 1)), atol=1e-9)
    assert np.all(feats[:, 20:] == 0)


def test_delta_of_constant_is_zero():
    assert np.all(deltas(np.full((7, 3), 2.5)) == 0)


def test_delta_definition_with_replicated_edges():
    x = np.array([[0.0], [1.0], [4.0], [9.0]])
    np.testing.assert_allclose(deltas(x).ravel(), [0.5, 2.0, 4.0, 2.5])


def test_sine_energy_peaks_in_nearest_filter():
    t = np.arange(8000) / 16000
    energies = filterbank_energies(frame_and_window(np.sin(2 * np.pi * 1000 * t)))
    nearest = int(np.argmin(np.abs(filter_centers() - 1000)))
    assert np.all(np.argmax(energies, axis=1) == nearest)


def test_filterbank_shape_and_peaks():
    fb = linear_filterbank()
    assert fb.shape == (20, 257)
    assert np.all(fb.max(axis=1) > 0.9)
    assert np.all(fb >= 0)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(320, 6000), seed=st.integers(0, 1000))
def test_dimension_and_frame_count(n, seed):
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, n)
    feats = extract(x)
    assert feats.shape == (num_frames(n), 60)
    assert feats.dtype == np.float32
    assert np.all(np.isfinite(feats))


def test_shift_by_one_hop_shifts_frames():
    x = np.random.default_rng(0).standard_normal(5000)
    a = lfcc(frame_and_window(x))
    b = lfcc(frame_and_window(x[160:]))
    # deltas reach two frames, so compare statics everywhere and deltas in the interior
    np.testing.assert_array_equal(a[1:, :20], b[: a.shape[0] - 1, :20])
    np.testing.assert_array_equal(a[3:-2], b[2:a.shape[0] - 3])


@pytest.mark.parametrize("gain", [0.1, 3.0])
def test_gain_moves_only_c0_and_leaves_deltas(gain):
    x = np.random.default_rng(1).standard_normal(4000)
    a, b = lfcc(frame_and_window(x)), lfcc(frame_and_window(gain * x))
    shift = b[:, :20] - a[:, :20]
    np.testing.assert_allclose(shift[:, 0], 2 * np.log(gain) * np.sqrt(20), rtol=1e-9)
    np.testing.assert_allclose(shift[:, 1:], 0, atol=1e-9)
    np.testing.assert_allclose(b[:, 20:], a[:, 20:], atol=1e-9)


def test_audio_clip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.array([]))
    with pytest.raises(ValueError):
        AudioClip(np.zeros(10), sample_rate=0)
    assert AudioClip(np.zeros(16000)).duration == 1.0


def test_wav_round_trip(tmp_path):
    x = np.round(np.random.default_rng(2).uniform(-0.9, 0.9, 1600) * 32768) / 32768
    write_wav(tmp_path / "a.wav", AudioClip(x))
    clip = read_wav(tmp_path / "a.wav")
    assert clip.sample_rate == 16000
    np.testing.assert_array_equal(clip.samples, x)


def test_raw_float32_reader(tmp_path):
    x = np.linspace(-1, 1, 500, dtype="<f4")
    x.tofile(tmp_path / "a.raw")
    np.testing.assert_array_equal(read_raw_float32(tmp_path / "a.raw").samples, x.astype(np.float64))


def test_feature_file_round_trip_and_corruption(tmp_path):
    feats = extract(np.random.default_rng(3).standard_normal(3000))
    write_features(tmp_path / "f.bin", feats)
    np.testing.assert_array_equal(read_features(tmp_path / "f.bin"), feats)
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "g.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="header"):
        read_features(tmp_path / "g.bin")


def test_no_delta_config():
    cfg = LFCCConfig(with_deltas=False)
    assert extract(np.ones(1000), cfg).shape[1] == cfg.dim == 20
