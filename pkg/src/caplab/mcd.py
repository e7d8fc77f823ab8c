"""Mel-cepstral distance under dynamic time warping.

Audio path: WAV -> Hann-windowed magnitude STFT -> 80-band mel filterbank ->
log -> orthonormal DCT-II, keeping coefficients 1..13.  Model-native path: toy
frames are used directly as the per-frame feature vectors.

Two feature sequences are aligned with steps (1,1), (1,0), (0,1); the two
non-diagonal steps pay ``warp_penalty``.  The reported score is the minimal
accumulated cost divided by the alignment length.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct, rfft
from scipy.signal import get_window
from scipy.spatial.distance import cdist

from caplab import kernels
from caplab.errors import ConfigurationError, FormatError, InputError

SAMPLE_RATE = 24000
FRAME_SECONDS = 0.050
HOP_SECONDS = 0.0125
N_FFT = 2048
N_MELS = 80
F_MIN = 80.0
F_MAX = 12000.0
LOG_FLOOR = 1e-10
N_MFCC = 13
WARP_PENALTY = 1.0
MCD_SCALE = 10.0 * math.sqrt(2.0) / math.log(10.0)
DENOMINATORS = ("path", "max_len")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, bands) natural-log energies
    sample_rate: int
    hop: float  # seconds


@dataclass
class DtwResult:
    total_cost: float
    path: list
    per_frame_cost: float


# -- WAV -----------------------------------------------------------------------------------

def _chunks(buf):
    pos = 12
    while pos < len(buf):
        if pos + 8 > len(buf):
            raise FormatError(f"truncated chunk header after {len(buf) - pos} bytes", pos)
        cid = buf[pos:pos + 4]
        (size,) = struct.unpack("<I", buf[pos + 4:pos + 8])
        name = cid.decode("latin-1")
        if pos + 8 + size > len(buf):
            raise FormatError(f"chunk {name!r} declares {size} bytes but only "
                              f"{len(buf) - pos - 8} remain", pos)
        yield name, pos, buf[pos + 8:pos + 8 + size]
        pos += 8 + size + (size & 1)


def wav_parse(buf: bytes):
    """Decode 16-bit PCM WAV bytes to ``(mono samples in [-1, 1), rate)``."""
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise FormatError("chunk 'RIFF': not a RIFF/WAVE file", 0)
    fmt = data = None
    for name, pos, body in _chunks(buf):
        if name == "fmt ":
            if len(body) < 16:
                raise FormatError("chunk 'fmt ' is shorter than 16 bytes", pos)
            tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == 0xFFFE and len(body) >= 26:
                tag = struct.unpack("<H", body[24:26])[0]
            if tag != 1:
                raise FormatError(f"chunk 'fmt ': format tag {tag} is not PCM", pos)
            if bits != 16:
                raise FormatError(f"chunk 'fmt ': {bits}-bit samples unsupported, need 16", pos)
            if channels not in (1, 2):
                raise FormatError(f"chunk 'fmt ': {channels} channels unsupported", pos)
            fmt = (channels, rate)
        elif name == "data":
            if fmt is None:
                raise FormatError("chunk 'data' appears before chunk 'fmt '", pos)
            data = (pos, body)
    if fmt is None:
        raise FormatError("chunk 'fmt ' is missing")
    if data is None:
        raise FormatError("chunk 'data' is missing")
    channels, rate = fmt
    pos, body = data
    if len(body) % (2 * channels):
        raise FormatError("chunk 'data' holds a partial sample frame", pos)
    pcm = np.frombuffer(body, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        pcm = pcm.reshape(-1, 2).mean(axis=1)
    return pcm, rate


def wav_read(path):
    return wav_parse(Path(path).read_bytes())


def wav_bytes(samples, rate=SAMPLE_RATE):
    """Encode mono samples in [-1, 1] as 16-bit PCM WAV bytes."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, rate, rate * 2, 2, 16)
    return (b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)) + b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt)) + fmt
            + b"data" + struct.pack("<I", len(body)) + body)


# -- features --------------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(rate=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, f_min=F_MIN, f_max=F_MAX):
    """Triangular filters with unit peak, centres equally spaced in mel."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs[None] - lower) / (centre - lower)
    fall = (upper - freqs[None]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rise, fall))


def band_centres(rate=SAMPLE_RATE, n_mels=N_MELS, f_min=F_MIN, f_max=F_MAX):
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def frame_count(num_samples, frame, hop):
    return 1 + (num_samples - frame) // hop


def mel_spectrogram(samples, rate=SAMPLE_RATE, n_mels=N_MELS) -> MelSpectrogram:
    samples = np.asarray(samples, dtype=np.float64)
    frame = int(round(FRAME_SECONDS * rate))
    hop = int(round(HOP_SECONDS * rate))
    if samples.ndim != 1 or len(samples) < frame:
        raise InputError(f"signal needs at least {frame} samples for one frame")
    n_fft = max(N_FFT, frame)
    count = frame_count(len(samples), frame, hop)
    idx = np.arange(frame)[None, :] + hop * np.arange(count)[:, None]
    spec = np.abs(rfft(samples[idx] * get_window("hann", frame), n=n_fft, axis=1))
    energies = spec @ mel_filterbank(rate, n_fft, n_mels, F_MIN, min(F_MAX, rate / 2)).T
    return MelSpectrogram(np.log(np.maximum(energies, LOG_FLOOR)), rate, hop / rate)


def mfcc13(mel) -> np.ndarray:
    """Orthonormal DCT-II over bands; coefficients 1..13 (fewer if there are fewer bands)."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.atleast_2d(mel)
    if frames.shape[0] < 1:
        raise InputError("need at least one frame")
    return dct(frames, type=2, norm="ortho", axis=1)[:, 1:N_MFCC + 1]


# -- alignment ----------------------------------------------------------------------------------

def frame_distances(a, b):
    return cdist(np.atleast_2d(a), np.atleast_2d(b), "euclidean")


def _backtrack(moves):
    i, j = moves.shape[0] - 1, moves.shape[1] - 1
    path = [(i, j)]
    while i or j:
        mv = moves[i, j]
        if mv == kernels.DIAG:
            i, j = i - 1, j - 1
        elif mv == kernels.DOWN:
            i -= 1
        else:
            j -= 1
        path.append((i, j))
    path.reverse()
    return path


def dtw(a, b, warp_penalty=WARP_PENALTY) -> DtwResult:
    a, b = np.atleast_2d(np.asarray(a, float)), np.atleast_2d(np.asarray(b, float))
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise InputError("both sequences must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise InputError(f"feature sizes differ: {a.shape[1]} vs {b.shape[1]}")
    acc, moves = kernels.dtw_accumulate(np.ascontiguousarray(frame_distances(a, b)),
                                        float(warp_penalty))
    path = _backtrack(moves)
    total = float(acc[-1, -1])
    return DtwResult(total, path, total / len(path))


def features(x, rate=SAMPLE_RATE):
    """Feature frames for anything ``mcd_dtw`` accepts.

    A path to a ``.wav`` file or a ``(samples, rate)`` pair goes through the
    audio pipeline; an utterance or a 2-D array is used as-is.
    """
    if isinstance(x, (str, Path)):
        samples, rate = wav_read(x)
        return mfcc13(mel_spectrogram(samples, rate))
    if isinstance(x, tuple) and len(x) == 2 and np.ndim(x[0]) == 1:
        return mfcc13(mel_spectrogram(x[0], x[1]))
    frames = getattr(x, "frames", x)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise InputError("model-native input must be a (length, channels) array")
    return frames


def mcd_dtw(a, b, warp_penalty=WARP_PENALTY, denominator="path", scaled=False):
    if denominator not in DENOMINATORS:
        raise ConfigurationError(f"denominator must be one of {DENOMINATORS}")
    fa, fb = features(a), features(b)
    res = dtw(fa, fb, warp_penalty)
    if denominator == "path":
        value = res.per_frame_cost
    else:
        value = res.total_cost / max(len(fa), len(fb))
    return value * MCD_SCALE if scaled else value
