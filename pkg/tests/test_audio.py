import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snorewatch import audio
from snorewatch.audio import (
    AudioClip,
    DoubleBuffer,
    Label,
    RecentAudioRing,
    load_wav,
    resample,
    save_wav,
    stream_windows,
    synth_corpus,
)
from snorewatch.errors import (
    EvictedError,
    FormatError,
    IoError,
    RangeError,
    UnsupportedError,
)


def make_wav(sample_rate, channels, bits, audio_format, frames: bytes) -> bytes:
    """Assemble raw RIFF bytes so the reader is tested independently of the writer."""
    block = channels * bits // 8
    fmt = struct.pack(
        "<HHIIHH", audio_format, channels, sample_rate, sample_rate * block, block, bits
    )
    data = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(frames)) + frames
    return b"RIFF" + struct.pack("<I", 4 + len(data)) + b"WAVE" + data


class TestWavIO:
    def test_constant_16bit_scales_to_half(self, tmp_path):
        raw = make_wav(16000, 1, 16, 1, struct.pack("<100h", *([16384] * 100)))
        path = tmp_path / "c.wav"
        path.write_bytes(raw)
        clip = load_wav(path)
        assert clip.sample_rate == 16000
        np.testing.assert_array_equal(clip.samples, 0.5)

    def test_stereo_downmix_cancels(self, tmp_path):
        frames = struct.pack("<4h", 8192, -8192, 8192, -8192)  # +0.25 / -0.25
        path = tmp_path / "s.wav"
        path.write_bytes(make_wav(8000, 2, 16, 1, frames))
        clip = load_wav(path)
        np.testing.assert_array_equal(clip.samples, [0.0, 0.0])

    def test_sine_round_trip_within_quantization(self, tmp_path):
        t = np.arange(16000) / 16000
        clip = AudioClip(0.8 * np.sin(2 * np.pi * 440 * t), 16000)
        path = tmp_path / "sine.wav"
        save_wav(clip, path)
        back = load_wav(path)
        assert back.sample_rate == 16000
        assert np.abs(back.samples - clip.samples).max() <= 1 / 32768

    def test_empty_clip_writes_44_byte_header(self, tmp_path):
        path = tmp_path / "empty.wav"
        save_wav(AudioClip(np.array([]), 16000), path)
        assert path.stat().st_size == 44

    def test_data_chunk_is_two_bytes_per_sample(self, tmp_path):
        path = tmp_path / "sec.wav"
        save_wav(AudioClip(np.zeros(16000), 16000), path)
        raw = path.read_bytes()
        assert len(raw) == 44 + 32000
        assert struct.unpack_from("<I", raw, 40)[0] == 32000

    def test_full_scale_clamps_to_int16_max(self, tmp_path):
        path = tmp_path / "max.wav"
        save_wav(AudioClip(np.ones(64), 16000), path)
        back = load_wav(path)
        np.testing.assert_array_equal(back.samples, 32767 / 32768)

    def test_float32_wav(self, tmp_path):
        frames = struct.pack("<4f", 0.5, -0.25, 1.0, 0.0)
        path = tmp_path / "f.wav"
        path.write_bytes(make_wav(44100, 1, 32, 3, frames))
        clip = load_wav(path)
        assert clip.sample_rate == 44100
        np.testing.assert_allclose(clip.samples, [0.5, -0.25, 1.0, 0.0])

    def test_24bit_wav(self, tmp_path):
        value = 1 << 22  # half of full scale
        frames = struct.pack("<I", value)[:3] + struct.pack("<I", (-value) & 0xFFFFFF)[:3]
        path = tmp_path / "b24.wav"
        path.write_bytes(make_wav(16000, 1, 24, 1, frames))
        clip = load_wav(path)
        np.testing.assert_allclose(clip.samples, [0.5, -0.5])

    def test_not_riff_raises_format_error(self, tmp_path):
        path = tmp_path / "x.wav"
        path.write_bytes(b"not a wave file at all")
        with pytest.raises(FormatError):
            load_wav(path)

    def test_missing_chunks_raise_format_error(self, tmp_path):
        path = tmp_path / "x.wav"
        path.write_bytes(b"RIFF" + struct.pack("<I", 4) + b"WAVE")
        with pytest.raises(FormatError):
            load_wav(path)

    def test_compressed_codec_raises_unsupported(self, tmp_path):
        path = tmp_path / "ulaw.wav"
        path.write_bytes(make_wav(8000, 1, 8, 7, b"\x00\x00"))  # mu-law
        with pytest.raises(UnsupportedError):
            load_wav(path)

    def test_weird_bit_depth_raises_unsupported(self, tmp_path):
        path = tmp_path / "b12.wav"
        path.write_bytes(make_wav(8000, 1, 12, 1, b"\x00\x00"))
        with pytest.raises(UnsupportedError):
            load_wav(path)

    def test_missing_file_raises_io_error(self, tmp_path):
        with pytest.raises(IoError):
            load_wav(tmp_path / "nope.wav")


class TestResample:
    def test_same_rate_is_identity(self):
        clip = AudioClip(np.linspace(-1, 1, 100), 16000)
        out = resample(clip, 16000)
        np.testing.assert_array_equal(out.samples, clip.samples)

    def test_downsample_halves_length(self):
        clip = AudioClip(np.sin(np.linspace(0, 20, 32000)), 32000)
        out = resample(clip, 16000)
        assert out.sample_rate == 16000
        assert abs(out.samples.size - 16000) <= 1
        # linear interpolation of a smooth signal stays close
        assert np.abs(out.samples[:100] - clip.samples[:200:2]).max() < 1e-6


class TestStreamWindows:
    def test_exact_fit_yields_one_window(self):
        clip = AudioClip(np.zeros(16000), 16000)
        windows = stream_windows(clip, 1000, 333)
        assert len(windows) == 1 and windows[0].start_time_ms == 0

    def test_two_seconds_yields_four_windows(self):
        clip = AudioClip(np.zeros(32000), 16000)
        windows = stream_windows(clip, 1000, 333)
        assert [w.start_time_ms for w in windows] == [0, 333, 666, 999]

    def test_short_clip_yields_nothing(self):
        clip = AudioClip(np.zeros(8000), 16000)
        assert stream_windows(clip, 1000, 333) == []

    def test_count_formula_and_overlap(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            duration_ms = int(rng.integers(100, 5000))
            window_ms = int(rng.integers(100, 1500))
            hop_ms = int(rng.integers(50, window_ms + 1))
            clip = AudioClip(rng.uniform(-1, 1, duration_ms * 16), 16000)
            windows = stream_windows(clip, window_ms, hop_ms)
            if duration_ms >= window_ms:
                expected = (duration_ms - window_ms) // hop_ms + 1
            else:
                expected = 0
            assert len(windows) == expected
            for k, w in enumerate(windows):
                assert w.start_time_ms == k * hop_ms
            if len(windows) >= 2:
                hop_samples = hop_ms * 16
                np.testing.assert_array_equal(
                    windows[0].samples[hop_samples:], windows[1].samples[: len(windows[0].samples) - hop_samples]
                )

    def test_bad_args_raise(self):
        clip = AudioClip(np.zeros(16000), 16000)
        with pytest.raises(ValueError):
            stream_windows(clip, 100, 200)
        with pytest.raises(ValueError):
            stream_windows(clip, 100, 0)


class TestDoubleBuffer:
    def test_single_thread_concatenation(self):
        rng = np.random.default_rng(1)
        stream = rng.uniform(-1, 1, 1003)
        buf = DoubleBuffer(100)
        out = []
        pos = 0
        while pos < stream.size:
            # chunks no larger than a bank plus a drain per iteration keep a
            # lone writer from blocking on two full banks
            chunk = stream[pos : pos + int(rng.integers(1, 101))]
            pos += chunk.size
            while (bank := buf.take(block=False)) is not None:
                out.append(bank)
            buf.write(chunk)
        buf.close()
        while (bank := buf.take(block=False)) is not None:
            out.append(bank)
        got = np.concatenate(out) if out else np.array([])
        assert got.size == 1000  # trailing partial bank never delivered
        np.testing.assert_array_equal(got, stream[:1000])

    def test_partial_bank_not_released_on_close(self):
        buf = DoubleBuffer(10)
        buf.write(np.arange(7))
        buf.close()
        assert buf.take(block=False) is None

    def test_concurrent_writer_reader_no_gaps_or_duplicates(self):
        rng = np.random.default_rng(2)
        stream = rng.uniform(-1, 1, 20_000)
        buf = DoubleBuffer(257)
        consumed = []

        def writer():
            pos = 0
            while pos < stream.size:
                n = int(rng.integers(1, 600))
                buf.write(stream[pos : pos + n])
                pos += n
            buf.close()

        def reader():
            while (bank := buf.take()) is not None:
                consumed.append(bank)

        threads = [threading.Thread(target=writer), threading.Thread(target=reader)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        full = (stream.size // 257) * 257
        np.testing.assert_array_equal(np.concatenate(consumed), stream[:full])


class TestRecentAudioRing:
    def test_extract_last_ten_seconds_after_two_minutes(self):
        rng = np.random.default_rng(3)
        stream = rng.uniform(-1, 1, 120 * 16000)
        ring = RecentAudioRing(60_000, 16000)
        pos = 0
        while pos < stream.size:
            n = int(rng.integers(100, 50_000))
            ring.write(stream[pos : pos + n])
            pos += n
        clip = ring.extract(110_000, 120_000)
        np.testing.assert_array_equal(clip.samples, stream[110 * 16000 : 120 * 16000])

    def test_evicted_range(self):
        ring = RecentAudioRing(60_000, 16000)
        ring.write(np.zeros(120 * 16000))
        with pytest.raises(EvictedError):
            ring.extract(0, 30_000)

    def test_zero_length_range(self):
        ring = RecentAudioRing(60_000, 16000)
        ring.write(np.zeros(16000))
        with pytest.raises(RangeError):
            ring.extract(500, 500)
        with pytest.raises(RangeError):
            ring.extract(700, 500)

    def test_future_range(self):
        ring = RecentAudioRing(60_000, 16000)
        ring.write(np.zeros(16000))
        with pytest.raises(RangeError):
            ring.extract(500, 2_000)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(min_value=1, max_value=5000), min_size=1, max_size=20), st.data())
    def test_any_retained_range_matches_source(self, chunks, data):
        rate = 1000  # 1 sample per ms keeps the arithmetic exact
        ring = RecentAudioRing(3_000, rate)
        rng = np.random.default_rng(sum(chunks))
        stream = rng.uniform(-1, 1, sum(chunks))
        pos = 0
        for n in chunks:
            ring.write(stream[pos : pos + n])
            pos += n
        total_ms = pos
        oldest_ms = max(0, total_ms - 3_000)
        if total_ms - oldest_ms < 2:
            return
        start = data.draw(st.integers(min_value=oldest_ms, max_value=total_ms - 1))
        stop = data.draw(st.integers(min_value=start + 1, max_value=total_ms))
        clip = ring.extract(start, stop)
        np.testing.assert_array_equal(clip.samples, stream[start:stop])


class TestSynthCorpus:
    def test_same_seed_is_byte_identical(self):
        a = synth_corpus(7, 4)
        b = synth_corpus(7, 4)
        assert len(a) == len(b)
        for clip_a, clip_b in zip(a, b):
            assert clip_a.label == clip_b.label
            assert clip_a.samples.tobytes() == clip_b.samples.tobytes()

    def test_classes_balanced(self):
        clips = synth_corpus(0, 5)
        assert sum(1 for c in clips if c.label == Label.SNORING) == 5
        assert sum(1 for c in clips if c.label == Label.NON_SNORING) == 5

    def test_snore_centroid_below_every_tonal_centroid(self):
        clips = synth_corpus(11, 9)

        def centroid(clip):
            mags = np.abs(np.fft.rfft(clip.samples))
            freqs = np.fft.rfftfreq(clip.samples.size, d=1 / clip.sample_rate)
            return float((freqs * mags).sum() / mags.sum())

        snore_centroids = [centroid(c) for c in clips if c.label == Label.SNORING]
        # tonal clips are every third non-snore clip by construction
        non_snore = [c for c in clips if c.label == Label.NON_SNORING]
        tonal = [c for i, c in enumerate(non_snore) if i % 3 == 1]
        assert tonal, "expected tonal clips in the mixture"
        assert max(snore_centroids) < min(centroid(c) for c in tonal)

    def test_rejects_bad_count(self):
        with pytest.raises(ValueError):
            synth_corpus(0, 0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        clips = synth_corpus(1, 2, clip_seconds=0.5)
        entries = []
        for i, clip in enumerate(clips):
            name = f"clip_{i}.wav"
            save_wav(clip, tmp_path / name)
            entries.append((name, clip.label))
        audio.write_manifest(tmp_path / "manifest.csv", entries)
        loaded = audio.load_manifest_clips(tmp_path / "manifest.csv")
        assert [c.label for c in loaded] == [c.label for c in clips]
        for got, want in zip(loaded, clips):
            assert np.abs(got.samples - want.samples).max() <= 1 / 32768

    def test_bad_header_raises(self, tmp_path):
        bad = tmp_path / "m.csv"
        bad.write_text("file,class\nx.wav,snoring\n")
        with pytest.raises(FormatError):
            audio.read_manifest(bad)
