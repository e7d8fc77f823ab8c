"""Synthetic conditional sequences with known generative factors.

Each utterance is a (length x channels) frame matrix.  Its content is a
per-class sinusoidal template scaled by a log-normal amplitude, shifted by a
per-speaker offset vector and corrupted by Gaussian noise.  The length is
``round(base_length[text] * tempo)``, so length carries information about the
text class as well as about the tempo factor.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from caplab.errors import ConfigurationError, FormatError

MAGIC = b"CAPTOY1"
_HEADER = struct.Struct("<IIIqd")
_RECORD = struct.Struct("<IIIdd")
TEMPO_RANGE = (0.75, 1.25)
AMPLITUDE_LOG_STD = 0.25
TEMPLATE_AMPLITUDE = 2.0


def default_base_lengths(num_classes):
    return [int(v) for v in np.rint(np.linspace(12, 40, num_classes))]


@dataclass
class ToySpec:
    channels: int = 8
    num_text_classes: int = 10
    num_speakers: int = 4
    base_lengths: list = None
    seed: int = 0
    noise_std: float = 0.05

    def __post_init__(self):
        if self.base_lengths is None:
            self.base_lengths = default_base_lengths(self.num_text_classes)
        self.base_lengths = [int(v) for v in self.base_lengths]
        if self.num_text_classes < 2 or self.num_speakers < 2:
            raise ConfigurationError("need at least two text classes and two speakers")
        if self.channels < 1:
            raise ConfigurationError("need at least one channel")
        if len(self.base_lengths) != self.num_text_classes:
            raise ConfigurationError("one base length per text class is required")
        if any(not 12 <= v <= 40 for v in self.base_lengths):
            raise ConfigurationError("base lengths must lie in [12, 40]")
        if len(set(self.base_lengths)) < 2:
            raise ConfigurationError("base lengths must differ across at least two classes")

    @property
    def max_length(self):
        return int(round(max(self.base_lengths) * TEMPO_RANGE[1]))


@dataclass(eq=False)
class Utterance:
    frames: np.ndarray
    y_text: int
    y_speaker: int
    amplitude: float
    tempo: float
    offset: np.ndarray = field(repr=False)

    @property
    def length(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.y_text == other.y_text
            and self.y_speaker == other.y_speaker
            and self.amplitude == other.amplitude
            and self.tempo == other.tempo
            and np.array_equal(self.offset, other.offset)
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(frozen=True)
class Factors:
    """Per-class template parameters and per-speaker offsets drawn from the seed."""

    frequency: np.ndarray  # (T, D) cycles per utterance
    phase: np.ndarray  # (T, D)
    offsets: np.ndarray  # (S, D)

    def template(self, y_text, length):
        u = np.arange(length)[:, None] / length
        return TEMPLATE_AMPLITUDE * np.sin(2.0 * np.pi * self.frequency[y_text] * u + self.phase[y_text])


def factors(spec: ToySpec) -> Factors:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    T, D, S = spec.num_text_classes, spec.channels, spec.num_speakers
    return Factors(
        frequency=rng.uniform(0.5, 2.0, size=(T, D)),
        phase=rng.uniform(0.0, 2.0 * np.pi, size=(T, D)),
        offsets=rng.normal(0.0, 0.5, size=(S, D)),
    )


def generate_dataset(spec: ToySpec, n, shard=0, debug=False):
    """Draw ``n`` utterances; deterministic in ``(spec, n, shard)``.

    ``debug`` forces amplitude 1, tempo 1 and zero noise so frames equal
    template plus speaker offset exactly.
    """
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    fac = factors(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, shard]))
    out = []
    for _ in range(n):
        y_t = int(rng.integers(spec.num_text_classes))
        y_s = int(rng.integers(spec.num_speakers))
        a = float(rng.lognormal(0.0, AMPLITUDE_LOG_STD))
        tau = float(rng.uniform(*TEMPO_RANGE))
        if debug:
            a, tau = 1.0, 1.0
        length = int(round(spec.base_lengths[y_t] * tau))
        noise = rng.normal(0.0, spec.noise_std, size=(length, spec.channels))
        if debug:
            noise[:] = 0.0
        frames = a * fac.template(y_t, length) + fac.offsets[y_s] + noise
        out.append(Utterance(frames, y_t, y_s, a, tau, fac.offsets[y_s].copy()))
    return out


def split(dataset, train_fraction):
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must lie strictly between 0 and 1")
    cut = int(round(len(dataset) * train_fraction))
    return list(dataset[:cut]), list(dataset[cut:])


# -- on-disk format -------------------------------------------------------------

def dumps(spec: ToySpec, dataset) -> bytes:
    parts = [MAGIC, _HEADER.pack(spec.channels, spec.num_text_classes, spec.num_speakers,
                                 spec.seed, spec.noise_std)]
    parts.append(struct.pack(f"<{spec.num_text_classes}I", *spec.base_lengths))
    parts.append(struct.pack("<Q", len(dataset)))
    for u in dataset:
        if u.frames.shape[1] != spec.channels:
            raise ConfigurationError("utterance channel count does not match ToySpec.channels")
        parts.append(_RECORD.pack(u.length, u.y_text, u.y_speaker, u.amplitude, u.tempo))
        parts.append(np.asarray(u.offset, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(u.frames, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, size, what):
        if self.pos + size > len(self.buf):
            raise FormatError(
                f"truncated dataset file while reading {what}: need {size} bytes, "
                f"{len(self.buf) - self.pos} left",
                self.pos,
            )
        out = self.buf[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, st, what):
        return st.unpack(self.take(st.size, what))

    def floats(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def loads(buf: bytes):
    """Parse bytes written by :func:`dumps`; returns ``(spec, dataset)``."""
    r = _Reader(bytes(buf))
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    D, T, S, seed, noise = r.unpack(_HEADER, "header")
    base = list(struct.unpack(f"<{T}I", r.take(4 * T, "base lengths")))
    try:
        spec = ToySpec(D, T, S, base, seed, noise)
    except ConfigurationError as exc:
        raise FormatError(f"invalid header: {exc}", len(MAGIC)) from exc
    (n,) = struct.unpack("<Q", r.take(8, "record count"))
    dataset = []
    for k in range(n):
        start = r.pos
        length, y_t, y_s, a, tau = r.unpack(_RECORD, f"record {k} header")
        if length < 1 or y_t >= T or y_s >= S:
            raise FormatError(f"record {k} has invalid length or labels", start)
        offset = r.floats(D, f"record {k} offset")
        frames = r.floats(length * D, f"record {k} frames").reshape(length, D)
        dataset.append(Utterance(frames, y_t, y_s, a, tau, offset))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after the last record", r.pos)
    return spec, dataset


def save(path, spec, dataset):
    Path(path).write_bytes(dumps(spec, dataset))


def load(path):
    return loads(Path(path).read_bytes())


def pad_frames(dataset, channels=None):
    """Stack utterances into a zero-padded (N, L_max, D) array plus lengths."""
    lengths = np.array([u.length for u in dataset], dtype=np.int64)
    D = channels or dataset[0].frames.shape[1]
    out = np.zeros((len(dataset), int(lengths.max()), D))
    for i, u in enumerate(dataset):
        out[i, :u.length] = u.frames
    return out, lengths
