import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caplab.errors import ConfigurationError, FormatError
from caplab.toydata import (
    MAGIC,
    TEMPO_RANGE,
    ToySpec,
    dumps,
    factors,
    generate_dataset,
    load,
    loads,
    pad_frames,
    save,
    split,
)


@pytest.fixture(scope="module")
def spec():
    return ToySpec(channels=3, num_text_classes=4, num_speakers=3, seed=5)


def test_debug_mode_is_template_plus_offset(spec):
    fac = factors(spec)
    for u in generate_dataset(spec, 20, debug=True):
        assert u.length == spec.base_lengths[u.y_text]
        expected = fac.template(u.y_text, u.length) + fac.offsets[u.y_speaker]
        assert np.array_equal(u.frames, expected)


def test_lengths_follow_tempo(spec):
    for u in generate_dataset(spec, 200):
        assert u.length == int(round(spec.base_lengths[u.y_text] * u.tempo))
        assert TEMPO_RANGE[0] <= u.tempo <= TEMPO_RANGE[1]
        assert u.amplitude > 0
        assert u.frames.shape == (u.length, spec.channels)


def test_generation_is_deterministic(spec):
    a = generate_dataset(spec, 30)
    b = generate_dataset(spec, 30)
    assert a == b
    assert generate_dataset(spec, 30, shard=1) != a


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ToySpec(num_text_classes=1)
    with pytest.raises(ConfigurationError):
        ToySpec(num_text_classes=2, base_lengths=[20, 20])
    with pytest.raises(ConfigurationError):
        ToySpec(num_text_classes=2, base_lengths=[11, 20])
    with pytest.raises(ConfigurationError):
        ToySpec(num_text_classes=3, base_lengths=[12, 20])
    with pytest.raises(ConfigurationError):
        generate_dataset(ToySpec(), 0)


def test_split(spec):
    data = generate_dataset(spec, 12)
    train, held = split(data, 5 / 6)
    assert len(train) == 10 and len(held) == 2
    with pytest.raises(ConfigurationError):
        split(data, 1.0)


def test_roundtrip_file(tmp_path, spec):
    data = generate_dataset(spec, 25)
    path = tmp_path / "d.captoy"
    save(path, spec, data)
    spec2, data2 = load(path)
    assert spec2 == spec
    assert data2 == data
    assert path.read_bytes().startswith(MAGIC)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4), st.integers(1, 4), st.integers(0, 2**31),
       st.integers(1, 15))
def test_roundtrip_property(T, S, D, seed, n):
    spec = ToySpec(D, T, S, seed=seed)
    data = generate_dataset(spec, n)
    assert loads(dumps(spec, data)) == (spec, data)


def test_truncation_reports_offset(spec):
    buf = dumps(spec, generate_dataset(spec, 3))
    for cut in (3, 20, len(buf) - 1):
        with pytest.raises(FormatError) as info:
            loads(buf[:cut])
        assert info.value.offset is not None
        assert "truncated" in str(info.value)


def test_bad_magic_and_trailing_bytes(spec):
    buf = dumps(spec, generate_dataset(spec, 2))
    with pytest.raises(FormatError, match="magic"):
        loads(b"XXXXXXX" + buf[7:])
    with pytest.raises(FormatError, match="trailing"):
        loads(buf + b"\0")


def test_bad_label_rejected(spec):
    data = generate_dataset(spec, 1)
    data[0].y_text = 99
    with pytest.raises(FormatError, match="record 0"):
        loads(dumps(spec, data))


def test_pad_frames(spec):
    data = generate_dataset(spec, 6)
    x, lengths = pad_frames(data)
    assert x.shape == (6, lengths.max(), spec.channels)
    for i, u in enumerate(data):
        assert np.array_equal(x[i, :u.length], u.frames)
        assert not x[i, u.length:].any()
