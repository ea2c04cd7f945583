import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from digit_ensemble.audio_io import (
    AudioClip,
    DatasetManifest,
    ManifestEntry,
    SplitSpec,
    encode_wav,
    fix_duration,
    load_dataset,
    parse_wav,
    split_dataset,
    write_wav,
)
from digit_ensemble.errors import (
    ClassTooSmall,
    EmptyDataset,
    MalformedContainer,
    UnlabeledFile,
    UnsupportedEncoding,
)


def pcm16(values, rate=8000, channels=1):
    raw = np.asarray(values, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, channels, rate, rate * 2 * channels, 2 * channels, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(raw)) + raw
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestParseWav:
    def test_zero_sample(self):
        clip = parse_wav(pcm16([0]))
        assert clip.samples.tolist() == [0.0]

    def test_negative_full_scale(self):
        assert parse_wav(pcm16([-32768])).samples.tolist() == [-1.0]

    def test_sample_rate_field(self):
        data = pcm16([0, 1, 2])
        assert data[24:28] == bytes([0x40, 0x1F, 0, 0])
        assert parse_wav(data).sample_rate == 8000

    def test_stereo_is_averaged(self):
        clip = parse_wav(pcm16([16384, -16384, 16384, 0], channels=2))
        np.testing.assert_array_equal(clip.samples, [0.0, 0.25])

    def test_eight_bit_unsigned(self):
        data = encode_wav([0.0, -1.0, 0.5], 8000, bits=8)
        np.testing.assert_array_equal(parse_wav(data).samples, [0.0, -1.0, 0.5])

    def test_skips_unknown_chunks(self):
        data = pcm16([100, 200])
        junk = b"LIST" + struct.pack("<I", 3) + b"abc" + b"\x00"
        patched = data[:12] + junk + data[12:]
        patched = patched[:4] + struct.pack("<I", len(patched) - 8) + patched[8:]
        np.testing.assert_array_equal(parse_wav(patched).samples, [100 / 32768, 200 / 32768])

    @pytest.mark.parametrize("data", [b"", b"RIFX" + bytes(40), b"RIFF\x00\x00\x00\x00WAVE"])
    def test_malformed(self, data):
        with pytest.raises(MalformedContainer):
            parse_wav(data)

    def test_missing_data_chunk(self):
        data = pcm16([1, 2])
        with pytest.raises(MalformedContainer):
            parse_wav(data[:36])

    def test_truncated_data_chunk(self):
        with pytest.raises(MalformedContainer):
            parse_wav(pcm16([1, 2, 3, 4])[:-3])

    def test_float_format_rejected(self):
        data = bytearray(pcm16([0, 0]))
        data[20:22] = struct.pack("<H", 3)
        with pytest.raises(UnsupportedEncoding):
            parse_wav(bytes(data))

    def test_24_bit_rejected(self):
        data = bytearray(pcm16([0, 0]))
        data[34:36] = struct.pack("<H", 24)
        with pytest.raises(UnsupportedEncoding):
            parse_wav(bytes(data))

    @pytest.mark.parametrize("bits", [8, 16])
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=200))
    def test_round_trip(self, bits, values):
        clip = parse_wav(encode_wav(values, 8000, bits=bits))
        assert clip.samples.size == len(values)
        assert np.max(np.abs(clip.samples - values)) <= 1.0 / 2 ** (bits - 1)


class TestFixDuration:
    def clip(self, n):
        return AudioClip(np.full(n, 0.25), 8000)

    def test_pad(self):
        out = fix_duration(self.clip(8000), 2.0)
        assert out.samples.size == 16000
        assert np.all(out.samples[8000:] == 0) and np.all(out.samples[:8000] == 0.25)

    def test_truncate(self):
        c = AudioClip(np.linspace(-1, 1, 20000), 8000)
        out = fix_duration(c, 2.0)
        np.testing.assert_array_equal(out.samples, c.samples[:16000])

    def test_identity(self):
        c = self.clip(16000)
        np.testing.assert_array_equal(fix_duration(c, 2.0).samples, c.samples)

    def test_rejects_nonpositive_target(self):
        with pytest.raises(ValueError):
            fix_duration(self.clip(10), 0.0)

    @given(st.integers(1, 30000), st.floats(0.01, 3.0))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, n, target):
        once = fix_duration(self.clip(n), target)
        twice = fix_duration(once, target)
        np.testing.assert_array_equal(once.samples, twice.samples)
        assert once.samples.size == round(target * 8000)


def test_clip_invariants():
    with pytest.raises(ValueError):
        AudioClip(np.array([1.5]), 8000)
    with pytest.raises(ValueError):
        AudioClip(np.array([0.1]), 0)
    with pytest.raises(ValueError):
        AudioClip(np.array([]), 8000)
    with pytest.raises(ValueError):
        AudioClip(np.array([np.nan]), 8000)


class TestLoadDataset:
    def test_fsdd_label_from_name(self, tmp_path):
        write_wav(tmp_path / "7_jackson_32.wav", [0.0, 0.1], 8000)
        m = load_dataset(tmp_path, "fsdd")
        assert [(e.label, e.speaker_id) for e in m.entries] == [(7, "jackson")]

    def test_folder_label_from_directory(self, tmp_path):
        (tmp_path / "digits" / "3").mkdir(parents=True)
        write_wav(tmp_path / "digits" / "3" / "rec001.wav", [0.0], 8000)
        m = load_dataset(tmp_path / "digits", "folder")
        assert m.entries[0].label == 3

    def test_fsdd_full_size_counts(self, tmp_path):
        # FSDD layout: 3 speakers x 50 takes x 10 digits
        data = encode_wav([0.0], 8000)
        for d in range(10):
            for spk in ("jackson", "nicolas", "theo"):
                for i in range(50):
                    (tmp_path / f"{d}_{spk}_{i}.wav").write_bytes(data)
        m = load_dataset(tmp_path)
        assert len(m) == 1500
        assert Counter(m.labels.tolist()) == {d: 150 for d in range(10)}

    def test_sorted_and_deterministic(self, small_corpus):
        a, b = load_dataset(small_corpus), load_dataset(small_corpus)
        assert a == b
        paths = [e.path for e in a.entries]
        assert paths == sorted(paths)

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyDataset):
            load_dataset(tmp_path)

    def test_unlabeled_fsdd_name(self, tmp_path):
        write_wav(tmp_path / "hello.wav", [0.0], 8000)
        with pytest.raises(UnlabeledFile):
            load_dataset(tmp_path, "fsdd")

    def test_unlabeled_folder(self, tmp_path):
        (tmp_path / "cats").mkdir()
        write_wav(tmp_path / "cats" / "a.wav", [0.0], 8000)
        with pytest.raises(UnlabeledFile):
            load_dataset(tmp_path, "folder")


def manifest(n, classes=10):
    return DatasetManifest(tuple(ManifestEntry(f"f{i:04d}.wav", i % classes) for i in range(n)))


class TestSplit:
    def test_fsdd_sizes(self):
        train, val, test = split_dataset(manifest(1500), SplitSpec(seed=1))
        assert (len(train), len(val), len(test)) == (1080, 120, 300)

    def test_deterministic(self):
        a = split_dataset(manifest(10), SplitSpec(seed=42))
        b = split_dataset(manifest(10), SplitSpec(seed=42))
        assert a == b

    def test_seed_changes_split(self):
        a = split_dataset(manifest(100), SplitSpec(seed=1))
        b = split_dataset(manifest(100), SplitSpec(seed=2))
        assert a[2] != b[2]

    def test_stratified_equal_counts(self):
        train, val, test = split_dataset(manifest(1000), SplitSpec(seed=5, stratified=True))
        for part, per_class in ((test, 20), (val, 8), (train, 72)):
            assert Counter(part.labels.tolist()) == {c: per_class for c in range(10)}

    def test_stratified_unbalanced_within_one(self):
        entries = [ManifestEntry(f"a{i}", 0) for i in range(37)] + [ManifestEntry(f"b{i}", 1) for i in range(13)]
        m = DatasetManifest(tuple(entries))
        train, val, test = split_dataset(m, SplitSpec(seed=0, stratified=True))
        assert len(test) == 10 and len(val) == 4
        for part, frac in ((test, 10 / 50), (val, 4 / 50), (train, 36 / 50)):
            counts = Counter(part.labels.tolist())
            assert abs(counts[0] - 37 * frac) <= 1 and abs(counts[1] - 13 * frac) <= 1

    def test_class_too_small(self):
        entries = [ManifestEntry(f"a{i}", 0) for i in range(10)] + [ManifestEntry("b", 1), ManifestEntry("c", 1)]
        with pytest.raises(ClassTooSmall):
            split_dataset(DatasetManifest(tuple(entries)), SplitSpec(stratified=True))

    @pytest.mark.parametrize("kw", [{"test_fraction": 0}, {"test_fraction": 1}, {"val_fraction_of_train": 1.0}])
    def test_bad_fractions(self, kw):
        with pytest.raises(ValueError):
            SplitSpec(**kw)

    @pytest.mark.parametrize("stratified", [False, True])
    def test_partition_property_1000_seeds(self, stratified):
        m = manifest(97)
        everything = set(m.entries)
        for seed in range(1000):
            train, val, test = split_dataset(m, SplitSpec(seed=seed, stratified=stratified))
            a, b, c = set(train.entries), set(val.entries), set(test.entries)
            assert a | b | c == everything
            assert not (a & b) and not (a & c) and not (b & c)
            assert len(c) == round(0.2 * 97) and len(b) == round(0.1 * (97 - len(c)))
