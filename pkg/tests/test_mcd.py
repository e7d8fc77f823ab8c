import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caplab import kernels
from caplab.errors import ConfigurationError, FormatError, InputError
from caplab.mcd import (
    MCD_SCALE,
    SAMPLE_RATE,
    band_centres,
    dtw,
    features,
    frame_count,
    frame_distances,
    hz_to_mel,
    mcd_dtw,
    mel_filterbank,
    mel_spectrogram,
    mel_to_hz,
    mfcc13,
    wav_bytes,
    wav_parse,
    wav_read,
)
from caplab.toydata import generate_dataset

from dtw_oracle import brute_force_dtw
from helpers import tiny_spec


def _fmt(tag=1, channels=1, rate=16000, bits=16):
    block = channels * bits // 8
    body = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, bits)
    return b"fmt " + struct.pack("<I", len(body)) + body


def _riff(*chunks):
    body = b"WAVE" + b"".join(chunks)
    return b"RIFF" + struct.pack("<I", len(body)) + body


def _data(raw):
    pad = b"\0" if len(raw) % 2 else b""
    return b"data" + struct.pack("<I", len(raw)) + raw + pad


# -- WAV ------------------------------------------------------------------------------------

def test_wav_roundtrip(tmp_path):
    x = np.sin(np.linspace(0, 20, 500)) * 0.5
    path = tmp_path / "a.wav"
    path.write_bytes(wav_bytes(x, 16000))
    y, rate = wav_read(path)
    assert rate == 16000
    assert np.max(np.abs(y - x)) <= 0.5 / 32768 + 1e-15


def test_wav_known_samples():
    raw = np.array([0, 16384, -32768, 32767], dtype="<i2").tobytes()
    y, _ = wav_parse(_riff(_fmt(), _data(raw)))
    assert np.array_equal(y, [0.0, 0.5, -1.0, 32767 / 32768])


def test_wav_stereo_is_averaged():
    raw = np.array([100, 300, -200, 0], dtype="<i2").tobytes()
    y, _ = wav_parse(_riff(_fmt(channels=2), _data(raw)))
    assert np.array_equal(y, np.array([200, -100]) / 32768)


def test_wav_skips_unknown_and_odd_chunks():
    odd = b"LIST" + struct.pack("<I", 3) + b"abc" + b"\0"
    raw = np.array([1, 2], dtype="<i2").tobytes()
    y, _ = wav_parse(_riff(odd, _fmt(), odd, _data(raw)))
    assert len(y) == 2


@pytest.mark.parametrize("buf,chunk", [
    (b"RIFX0000WAVE", "RIFF"),
    (b"RIF", "RIFF"),
    (_riff(_fmt(tag=3), _data(b"\0\0")), "fmt "),
    (_riff(_fmt(bits=8), _data(b"\0\0")), "fmt "),
    (_riff(_fmt(bits=24), _data(b"\0\0\0")), "fmt "),
    (_riff(_data(b"\0\0"), _fmt()), "data"),
    (_riff(_fmt()), "data"),
    (_riff(_data(b"\0\0")), "data"),
    (_riff(_fmt(), _data(b"\0\0\0")), "data"),
    (_riff(_fmt(channels=2), _data(b"\0\0")), "data"),
    (_riff(_fmt(), _data(b"\0" * 8))[:-3], "data"),
    (_riff(_fmt())[:-4], "fmt "),
])
def test_wav_errors_name_the_chunk(buf, chunk):
    with pytest.raises(FormatError, match=repr(chunk)):
        wav_parse(buf)


def test_wav_extensible_pcm_accepted():
    body = struct.pack("<HHIIHH", 0xFFFE, 1, 8000, 16000, 2, 16) + struct.pack("<HHI", 22, 16, 4)
    body += struct.pack("<H", 1) + b"\0" * 14
    fmt = b"fmt " + struct.pack("<I", len(body)) + body
    y, rate = wav_parse(_riff(fmt, _data(b"\0\x40")))
    assert rate == 8000 and y[0] == 0.5


# -- features ------------------------------------------------------------------------------

def test_mel_scale_roundtrip():
    f = np.array([0.0, 80.0, 1000.0, 12000.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f, rtol=1e-12)
    assert hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2))


def test_filterbank_shape_and_peaks():
    fb = mel_filterbank()
    assert fb.shape == (80, 1025)
    assert np.all(fb >= 0) and fb.max() <= 1.0
    freqs = np.arange(1025) * SAMPLE_RATE / 2048
    peaks = freqs[fb.argmax(axis=1)]
    centres = band_centres()
    assert np.all(np.abs(peaks - centres) <= SAMPLE_RATE / 2048)
    assert np.all(np.diff(centres) > 0)


def _reference_log_mel(samples, rate):
    """Straightforward per-frame loop with numpy's FFT and an explicit periodic Hann."""
    frame, hop = int(0.05 * rate), int(0.0125 * rate)
    n = np.arange(frame)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / frame)
    fb = mel_filterbank(rate, 2048, 80, 80.0, min(12000.0, rate / 2))
    rows = []
    start = 0
    while start + frame <= len(samples):
        mag = np.abs(np.fft.rfft(samples[start:start + frame] * window, 2048))
        rows.append(np.log(np.maximum(fb @ mag, 1e-10)))
        start += hop
    return np.array(rows)


def test_mel_spectrogram_matches_reference_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=6000) * 0.1
    mel = mel_spectrogram(x)
    assert mel.frames.shape == (frame_count(6000, 1200, 300), 80)
    assert np.allclose(mel.frames, _reference_log_mel(x, SAMPLE_RATE), atol=1e-9)
    assert mel.hop == 0.0125


def test_sine_energy_lands_in_nearest_band():
    t = np.arange(4800) / SAMPLE_RATE
    mel = mel_spectrogram(np.sin(2 * np.pi * 1000.0 * t))
    band = int(np.argmax(mel.frames.mean(axis=0)))
    assert abs(band_centres()[band] - 1000.0) == np.min(np.abs(band_centres() - 1000.0))


def test_silence_hits_the_floor():
    mel = mel_spectrogram(np.zeros(2400))
    assert np.all(mel.frames == math.log(1e-10))
    assert np.allclose(mfcc13(mel), 0.0, atol=1e-12)


def test_short_signal_rejected():
    with pytest.raises(InputError):
        mel_spectrogram(np.zeros(100))


def test_mfcc_of_constant_frame_is_zero():
    assert np.max(np.abs(mfcc13(np.full((3, 80), 4.2)))) <= 1e-12
    assert mfcc13(np.zeros((1, 80))).shape == (1, 13)


def test_mfcc_matches_explicit_dct():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 80))
    k = np.arange(80)[:, None]
    n = np.arange(80)[None, :]
    basis = np.cos(np.pi * k * (2 * n + 1) / 160) * math.sqrt(2 / 80)
    assert np.allclose(mfcc13(x), (x @ basis.T)[:, 1:14], atol=1e-12)


# -- DTW --------------------------------------------------------------------------------------

seqs = st.integers(1, 6).flatmap(
    lambda n: arrays(np.float64, (n, 3), elements=st.floats(-3, 3, allow_nan=False)))


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, st.sampled_from([0.0, 0.5, 1.0, 3.0]))
def test_dtw_equals_brute_force(a, b, penalty):
    res = dtw(a, b, penalty)
    assert res.total_cost == brute_force_dtw(frame_distances(a, b), penalty)


@settings(max_examples=100, deadline=None)
@given(seqs, seqs)
def test_dtw_path_is_valid_and_prices_to_total(a, b):
    res = dtw(a, b, 1.0)
    d = frame_distances(a, b)
    assert res.path[0] == (0, 0) and res.path[-1] == (len(a) - 1, len(b) - 1)
    total = d[0, 0]
    for (i0, j0), (i1, j1) in zip(res.path, res.path[1:]):
        step = (i1 - i0, j1 - j0)
        assert step in ((1, 1), (1, 0), (0, 1))
        total = d[i1, j1] + (total + (0.0 if step == (1, 1) else 1.0))
    assert total == res.total_cost
    assert res.per_frame_cost == res.total_cost / len(res.path)


@settings(max_examples=100, deadline=None)
@given(seqs, seqs)
def test_dtw_symmetry_and_identity(a, b):
    assert dtw(a, b).total_cost == pytest.approx(dtw(b, a).total_cost, abs=1e-12)
    assert dtw(a, a).total_cost == 0.0
    assert dtw(a, b).total_cost >= 0.0


def test_dtw_hand_example():
    a = np.array([[0.0], [1.0], [2.0]])
    b = np.array([[0.0], [2.0]])
    res = dtw(a, b, 1.0)
    # both (0,0)-(1,0)-(2,1) and (0,0)-(1,1)-(2,1) cost 2; at (2,1) the tie goes diagonal
    assert res.total_cost == 2.0
    assert res.path == [(0, 0), (1, 0), (2, 1)]


def test_dtw_prefers_diagonal_on_ties():
    d = np.zeros((2, 2))
    acc, moves = kernels.dtw_accumulate(d, 0.0)
    assert moves[1, 1] == kernels.DIAG
    assert acc[1, 1] == 0.0


def test_dtw_input_checks():
    with pytest.raises(InputError):
        dtw(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(InputError):
        dtw(np.zeros((0, 3)), np.zeros((2, 3)))


# -- mcd_dtw ------------------------------------------------------------------------------------

def test_mcd_self_distance_is_zero(tmp_path):
    u = generate_dataset(tiny_spec(), 1)[0]
    assert mcd_dtw(u, u) == 0.0
    path = tmp_path / "a.wav"
    path.write_bytes(wav_bytes(np.random.default_rng(0).normal(size=4000) * 0.1, 16000))
    assert abs(mcd_dtw(str(path), path)) <= 1e-12


def test_mcd_options():
    a = np.array([[0.0], [1.0], [2.0]])
    b = np.array([[0.0], [2.0]])
    assert mcd_dtw(a, b) == pytest.approx(2.0 / 3)
    assert mcd_dtw(a, b, denominator="max_len") == pytest.approx(2.0 / 3)
    assert mcd_dtw(a, b, warp_penalty=0.0) == pytest.approx(1.0 / 3)
    assert mcd_dtw(a, b, scaled=True) == pytest.approx(2.0 / 3 * MCD_SCALE)
    with pytest.raises(ConfigurationError):
        mcd_dtw(a, b, denominator="other")


def test_features_dispatch(tmp_path):
    x = np.random.default_rng(2).normal(size=3000) * 0.1
    path = tmp_path / "x.wav"
    path.write_bytes(wav_bytes(x, SAMPLE_RATE))
    from_path = features(path)
    from_pair = features((wav_read(path)[0], SAMPLE_RATE))
    assert np.array_equal(from_path, from_pair)
    assert from_path.shape[1] == 13
    with pytest.raises(InputError):
        features(np.zeros(5))


def test_time_shift_costs_less_than_different_signal():
    t = np.arange(12000) / SAMPLE_RATE
    a = np.sin(2 * np.pi * 440 * t) * 0.3
    shifted = np.concatenate([np.zeros(600), a])[:12000]
    other = np.sin(2 * np.pi * 2000 * t) * 0.3
    assert mcd_dtw((a, SAMPLE_RATE), (shifted, SAMPLE_RATE)) < mcd_dtw((a, SAMPLE_RATE), (other, SAMPLE_RATE))
