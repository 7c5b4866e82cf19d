"""Frontend tests: decoding, STFT, specific loudness, log-mel, files."""

import numpy as np
import pytest

from dynamark import audio
from dynamark.audio import (
    CRITICAL_BAND_EDGES_HZ,
    CRITICAL_BAND_CENTERS_HZ,
    PEAK_TARGET,
    SAMPLE_RATE,
    Waveform,
    SpecificLoudness,
    bssl,
    decode_and_prepare,
    log_mel,
    mel_filterbank,
    phon_to_sone,
    stft_power,
    total_loudness,
)
from dynamark.errors import ConfigError, DecodeError, EmptyInputError


def tone(freq, seconds, rate=SAMPLE_RATE, amp=1.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return amp * np.sin(2 * np.pi * freq * t)


# -- decode_and_prepare -----------------------------------------------------

def test_decode_stereo_downmix_and_peak(wav_writer):
    # 3 Hz sine starts and ends at zero, so the resampler preserves its peak
    x = 0.5 * np.column_stack([tone(3.0, 1.0, rate=44100)] * 2)
    path = wav_writer("stereo.wav", x, 44100)
    wav = decode_and_prepare(path)
    assert wav.sample_rate == SAMPLE_RATE
    assert len(wav.samples) == 22050
    assert abs(np.abs(wav.samples).max() - PEAK_TARGET) < 1e-3


def test_decode_downmix_is_channel_mean(wav_writer):
    left = tone(200.0, 0.5, amp=0.6)
    right = np.zeros_like(left)
    wav = decode_and_prepare(wav_writer("lr.wav", np.column_stack([left, right]), SAMPLE_RATE))
    # mean of channels halves the sine, then normalisation rescales the peak
    assert abs(np.abs(wav.samples).max() - PEAK_TARGET) < 1e-9


def test_decode_native_rate_peak_exact(wav_writer):
    x = tone(440.0, 1.0, amp=0.37)
    wav = decode_and_prepare(wav_writer("sine.wav", x, SAMPLE_RATE))
    assert abs(np.abs(wav.samples).max() - PEAK_TARGET) < 1e-9


def test_decode_all_zero_unchanged(wav_writer):
    wav = decode_and_prepare(wav_writer("zero.wav", np.zeros(22050), SAMPLE_RATE))
    assert len(wav.samples) == 22050
    np.testing.assert_array_equal(wav.samples, 0.0)


def test_decode_resampled_sine_spectral_peak(wav_writer):
    # oracle: FFT peak of the resampler output
    x = tone(1000.0, 2.0, rate=44100, amp=0.8)
    wav = decode_and_prepare(wav_writer("sine44.wav", x, 44100))
    assert wav.sample_rate == SAMPLE_RATE
    spec = np.abs(np.fft.rfft(wav.samples * np.hanning(len(wav.samples))))
    freqs = np.fft.rfftfreq(len(wav.samples), 1.0 / SAMPLE_RATE)
    assert abs(freqs[spec.argmax()] - 1000.0) < 1.0


@pytest.mark.parametrize("sampwidth", ["int16", "int24", "float32"])
def test_decode_sample_formats(wav_writer, sampwidth):
    x = tone(500.0, 0.25, amp=0.25)
    wav = decode_and_prepare(wav_writer(f"fmt_{sampwidth}.wav", x, SAMPLE_RATE, sampwidth))
    assert abs(np.abs(wav.samples).max() - PEAK_TARGET) < 1e-3


def test_decode_corrupt_file(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav at all")
    with pytest.raises(DecodeError):
        decode_and_prepare(bad)


def test_decode_empty_audio(tmp_path):
    import struct
    empty = tmp_path / "empty.wav"
    with open(empty, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 36) + b"WAVE")
        fh.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 22050, 44100, 2, 16))
        fh.write(b"data" + struct.pack("<I", 0))
    with pytest.raises(EmptyInputError):
        decode_and_prepare(empty)


# -- stft_power --------------------------------------------------------------

def test_stft_frame_count_60s():
    wav = Waveform(np.zeros(60 * SAMPLE_RATE), SAMPLE_RATE)
    spec = stft_power(wav)
    assert spec.bins.shape == (513, 3000)
    assert spec.fps == 50.0


def test_stft_silence_all_zero():
    spec = stft_power(Waveform(np.zeros(4410), SAMPLE_RATE))
    np.testing.assert_array_equal(spec.bins, 0.0)


def test_stft_too_short_names_minimum():
    with pytest.raises(EmptyInputError, match="1024"):
        stft_power(Waveform(np.zeros(1000), SAMPLE_RATE))


def test_stft_exact_bin_sine_matches_direct_dft():
    # bin 128 of a 1024-point DFT at 22.05 kHz is 2756.25 Hz
    freq = 128 * SAMPLE_RATE / 1024
    x = tone(freq, 0.2, amp=1.0)
    spec = stft_power(Waveform(x, SAMPLE_RATE))
    # oracle: direct DFT of the first windowed frame
    frame = x[:1024]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1024) / 1024)
    n = np.arange(1024)
    k = np.arange(513)
    dft = (frame * window) @ np.exp(-2j * np.pi * np.outer(n, k) / 1024)
    np.testing.assert_allclose(spec.bins[:, 0], np.abs(dft) ** 2, rtol=1e-9, atol=1e-6)
    col = spec.bins[:, 0]
    assert col.argmax() == 128
    # Hann leakage: adjacent bins carry 1/4 of the peak power
    np.testing.assert_allclose(col[127] / col[128], 0.25, rtol=1e-2)
    np.testing.assert_allclose(col[129] / col[128], 0.25, rtol=1e-2)


def test_stft_rejects_wrong_rate():
    with pytest.raises(ConfigError):
        stft_power(Waveform(np.zeros(44100), 44100))


# -- bssl ---------------------------------------------------------------------

def test_band_edges_shape_and_coverage():
    edges = CRITICAL_BAND_EDGES_HZ
    assert len(edges) == 23
    assert (np.diff(edges) > 0).all()
    assert edges[0] <= 100.0
    assert edges[-1] == 9500.0


def test_bssl_silence_is_zero():
    spec = stft_power(Waveform(np.zeros(22050), SAMPLE_RATE))
    sl = bssl(spec)
    assert sl.sone.shape == (22, 50)
    np.testing.assert_array_equal(sl.sone, 0.0)


def test_forty_phon_is_one_sone():
    assert abs(phon_to_sone(np.float64(40.0)) - 1.0) < 1e-6
    # the map is continuous and monotone through the knee
    phons = np.linspace(0.0, 100.0, 2001)
    sones = phon_to_sone(phons)
    assert (np.diff(sones) >= 0).all()
    assert sones[0] == 0.0


def test_pure_tone_localizes_to_its_band():
    for center in CRITICAL_BAND_CENTERS_HZ:
        wav = Waveform(tone(center, 0.5, amp=0.5), SAMPLE_RATE)
        sl = bssl(stft_power(wav))
        got = sl.sone.mean(axis=1).argmax()
        # oracle: independent lookup in the band-edge table
        want = np.searchsorted(CRITICAL_BAND_EDGES_HZ, center, side="right") - 1
        assert got == want, f"{center} Hz: got band {got}, want {want}"


def test_one_khz_band_index():
    wav = Waveform(tone(1000.0, 0.5, amp=0.5), SAMPLE_RATE)
    sl = bssl(stft_power(wav))
    assert sl.sone.mean(axis=1).argmax() == 8  # 920-1080 Hz band


def test_amplitude_monotonicity():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(4410, 11025))
        x = rng.standard_normal(n) * rng.uniform(0.005, 0.05)
        g = rng.uniform(1.0, 25.0)
        lo = bssl(stft_power(Waveform(x, SAMPLE_RATE))).sone
        hi = bssl(stft_power(Waveform(g * x, SAMPLE_RATE))).sone
        assert (hi >= lo).all()


def test_bssl_deterministic_bits():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(22050) * 0.1
    a = bssl(stft_power(Waveform(x, SAMPLE_RATE))).sone
    b = bssl(stft_power(Waveform(x.copy(), SAMPLE_RATE))).sone
    assert np.array_equal(a, b)


# -- log_mel -------------------------------------------------------------------

def test_log_mel_silence_is_floor():
    spec = stft_power(Waveform(np.zeros(22050), SAMPLE_RATE))
    lm = log_mel(spec)
    assert lm.values.shape == (128, 50)
    np.testing.assert_allclose(lm.values, np.log(1e-10), rtol=1e-6)


def test_log_mel_preserves_frame_count():
    spec = stft_power(Waveform(np.zeros(60 * SAMPLE_RATE), SAMPLE_RATE))
    assert log_mel(spec).values.shape == (128, 3000)


def test_mel_filterbank_energy_preservation():
    fb = mel_filterbank()
    assert fb.shape == (128, 513)
    bin_hz = np.arange(513) * (SAMPLE_RATE / 1024)
    response = fb.sum(axis=0)
    # oracle: direct summation of the filter responses; unit-height
    # triangles tile between the first and last filter centres
    from dynamark.audio import _hz_to_mel, _mel_to_hz
    centers = _mel_to_hz(np.linspace(0.0, _hz_to_mel(SAMPLE_RATE / 2), 130))[1:-1]
    interior = (bin_hz > centers[0]) & (bin_hz < centers[-1])
    np.testing.assert_allclose(response[interior], 1.0, atol=0.01)


def test_mel_profile_tracks_bandwidth_for_white_noise():
    # wider filters collect more of a flat spectrum; discretisation makes
    # the profile only broadly monotone, so assert the trend not each step
    fb = mel_filterbank()
    response = fb @ np.ones(513)
    bandwidth = fb.sum(axis=1)
    corr = np.corrcoef(response, bandwidth)[0, 1]
    assert corr > 0.99
    q = len(response) // 4
    assert response[-q:].mean() > 3 * response[:q].mean()


def test_log_mel_matches_direct_filterbank_summation():
    rng = np.random.default_rng(9)
    x = rng.standard_normal(22050) * 0.1
    spec = stft_power(Waveform(x, SAMPLE_RATE))
    lm = log_mel(spec)
    want = np.log(mel_filterbank(128, spec.bin_hz) @ spec.bins + 1e-10)
    np.testing.assert_allclose(lm.values, want.astype(np.float32), rtol=1e-6)


# -- total loudness -------------------------------------------------------------

def _sl_from_bands(bands):
    sone = np.zeros((22, 1), dtype=np.float32)
    sone[: len(bands), 0] = bands
    return SpecificLoudness(sone=sone, band_edges_hz=CRITICAL_BAND_EDGES_HZ.copy())


def test_total_loudness_zeros():
    np.testing.assert_array_equal(total_loudness(_sl_from_bands([])), [0.0])


def test_total_loudness_single_band():
    np.testing.assert_allclose(total_loudness(_sl_from_bands([2.0])), [2.0])


def test_total_loudness_max_plus_fraction():
    np.testing.assert_allclose(total_loudness(_sl_from_bands([2.0, 1.0, 1.0])), [2.3], rtol=1e-6)


# -- feature files ----------------------------------------------------------------

def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    values = rng.standard_normal((22, 137)).astype(np.float32)
    path = tmp_path / "x.dynf"
    audio.save_features(path, values, "bssl")
    loaded, kind = audio.load_features(path)
    assert kind == "bssl"
    assert np.array_equal(loaded, values)
    assert loaded.tobytes() == values.tobytes()


def test_feature_file_errors(tmp_path):
    path = tmp_path / "x.dynf"
    audio.save_features(path, np.zeros((2, 3), dtype=np.float32), "logmel")
    blob = path.read_bytes()
    (tmp_path / "magic.dynf").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DecodeError, match="not a DYNF"):
        audio.load_features(tmp_path / "magic.dynf")
    (tmp_path / "trunc.dynf").write_bytes(blob[:-4])
    with pytest.raises(DecodeError, match="truncated"):
        audio.load_features(tmp_path / "trunc.dynf")
    (tmp_path / "ver.dynf").write_bytes(blob[:4] + b"\x63\x00\x00\x00" + blob[8:])
    with pytest.raises(DecodeError, match="version"):
        audio.load_features(tmp_path / "ver.dynf")


def test_extract_features_shapes():
    wav = Waveform(np.zeros(2 * SAMPLE_RATE), SAMPLE_RATE)
    assert audio.extract_features(wav, "bssl").shape == (22, 100)
    assert audio.extract_features(wav, "logmel").shape == (128, 100)
    with pytest.raises(ConfigError):
        audio.extract_features(wav, "mfcc")
