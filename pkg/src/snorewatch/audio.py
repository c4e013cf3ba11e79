"""PCM audio: WAV files, stream windowing, capture buffers, synthetic corpora.

Everything downstream works on mono float samples in [-1, 1]. The canonical
pipeline rate is 16 kHz; ``resample`` converts clips that arrive at other
rates.
"""

from __future__ import annotations

import csv
import enum
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EvictedError,
    FormatError,
    IoError,
    RangeError,
    UnsupportedError,
)

CANONICAL_RATE = 16000


class Label(enum.Enum):
    """Clip class label, with the manifest spelling as value."""

    SNORING = "snoring"
    NON_SNORING = "non_snoring"

    @classmethod
    def from_name(cls, name: str) -> "Label":
        for label in cls:
            if label.value == name:
                return label
        raise ValueError(f"unknown label {name!r}")


def _ms_to_samples(ms: int, sample_rate: int) -> int:
    return (ms * sample_rate) // 1000


@dataclass(frozen=True)
class AudioClip:
    """Mono PCM samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int
    label: Label | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be 1-D")
        if samples.size and (np.abs(samples).max() > 1.0 or not np.isfinite(samples).all()):
            raise ValueError("AudioClip samples must be finite and within [-1, 1]")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_ms(self) -> int:
        return (self.samples.size * 1000) // self.sample_rate

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrameWindow:
    """Fixed-length analysis slice of a stream, tagged with its start offset."""

    samples: np.ndarray
    start_time_ms: int
    sample_rate: int


# --- WAV (RIFF) ---------------------------------------------------------
#
# Hand-rolled reader/writer: the stdlib `wave` module cannot read IEEE-float
# files and gives no control over the error taxonomy. Only uncompressed PCM
# (8/16/24/32-bit int) and 32-bit float are accepted.

_WAVE_PCM = 1
_WAVE_FLOAT = 3
_WAVE_EXTENSIBLE = 0xFFFE


def load_wav(path) -> AudioClip:
    """Read a PCM/float WAV file as a mono clip scaled to [-1, 1].

    Multi-channel audio is downmixed by arithmetic mean. The file's sample
    rate is preserved.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_wav(raw, name=str(path))


def decode_wav(raw: bytes, name: str = "<bytes>") -> AudioClip:
    """Parse WAV container bytes (see load_wav for the accepted formats)."""
    path = name
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_len,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_len]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_EXTENSIBLE:
                if len(body) < 26:
                    raise FormatError(f"{path}: truncated extensible fmt chunk")
                (sub_format,) = struct.unpack_from("<H", body, 24)
                fmt = (sub_format,) + fmt[1:]
        elif chunk_id == b"data":
            if len(body) < chunk_len:
                raise FormatError(f"{path}: data chunk shorter than declared")
            data = body
        pos += 8 + chunk_len + (chunk_len & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels < 1 or sample_rate < 1:
        raise FormatError(f"{path}: invalid channel count or sample rate")

    if audio_format == _WAVE_PCM:
        if bits == 8:
            samples = (raw_u8 := np.frombuffer(data, dtype=np.uint8)).astype(np.float64)
            samples = (samples - 128.0) / 128.0
            del raw_u8
        elif bits == 16:
            samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
        elif bits == 24:
            usable = (len(data) // 3) * 3
            triples = np.frombuffer(data[:usable], dtype=np.uint8).reshape(-1, 3)
            vals = (
                triples[:, 0].astype(np.int32)
                | (triples[:, 1].astype(np.int32) << 8)
                | (triples[:, 2].astype(np.int32) << 16)
            )
            vals = np.where(vals >= 1 << 23, vals - (1 << 24), vals)
            samples = vals.astype(np.float64) / float(1 << 23)
        elif bits == 32:
            samples = np.frombuffer(data, dtype="<i4").astype(np.float64) / float(1 << 31)
        else:
            raise UnsupportedError(f"{path}: {bits}-bit PCM not supported")
    elif audio_format == _WAVE_FLOAT:
        if bits != 32:
            raise UnsupportedError(f"{path}: {bits}-bit float not supported")
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedError(f"{path}: compressed codec 0x{audio_format:04x} not supported")

    if channels > 1:
        usable = (samples.size // channels) * channels
        samples = samples[:usable].reshape(-1, channels).mean(axis=1)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples=samples, sample_rate=sample_rate)


def encode_wav(clip: AudioClip) -> bytes:
    """Render a clip as 16-bit PCM mono WAV bytes."""
    scaled = np.round(clip.samples * 32768.0)
    pcm = np.clip(scaled, -32768, 32767).astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(pcm),
        b"WAVE",
        b"fmt ",
        16,
        _WAVE_PCM,
        1,
        clip.sample_rate,
        clip.sample_rate * 2,
        2,
        16,
        b"data",
        len(pcm),
    )
    return header + pcm


def save_wav(clip: AudioClip, path) -> None:
    """Write a clip as 16-bit PCM mono WAV.

    ``load_wav(save_wav(clip))`` reproduces samples within 1/32768 each.
    """
    try:
        Path(path).write_bytes(encode_wav(clip))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resample; identity when rates already match."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if clip.sample_rate == target_rate or clip.samples.size == 0:
        return AudioClip(clip.samples, target_rate, clip.label)
    n_out = int(round(clip.samples.size * target_rate / clip.sample_rate))
    src_t = np.arange(clip.samples.size) / clip.sample_rate
    dst_t = np.arange(n_out) / target_rate
    out = np.interp(dst_t, src_t, clip.samples)
    return AudioClip(out, target_rate, clip.label)


# --- Windowing ----------------------------------------------------------


def stream_windows(clip: AudioClip, window_len_ms: int, hop_ms: int) -> list[FrameWindow]:
    """Slice a clip into fixed windows starting at 0, hop, 2*hop, ...

    The trailing partial window is discarded; a clip shorter than one window
    yields an empty list.
    """
    if not (window_len_ms >= hop_ms > 0):
        raise ValueError("need window_len_ms >= hop_ms > 0")
    win = _ms_to_samples(window_len_ms, clip.sample_rate)
    windows = []
    k = 0
    while True:
        start = _ms_to_samples(k * hop_ms, clip.sample_rate)
        if start + win > clip.samples.size:
            break
        windows.append(
            FrameWindow(
                samples=clip.samples[start : start + win],
                start_time_ms=k * hop_ms,
                sample_rate=clip.sample_rate,
            )
        )
        k += 1
    return windows


# --- Capture buffers ----------------------------------------------------


class DoubleBuffer:
    """Two alternating fixed-size capture banks between one writer and one reader.

    The writer fills one bank at a time; a bank is handed to the reader only
    when completely full, so consumed banks concatenate to the input stream
    with no gaps or duplicates. When both banks are full the writer blocks
    until the reader frees one.
    """

    def __init__(self, bank_size: int):
        if bank_size <= 0:
            raise ValueError("bank_size must be positive")
        self.bank_size = bank_size
        self._banks = [np.zeros(bank_size), np.zeros(bank_size)]
        self._ready: list[int] = []  # bank indexes full and awaiting the reader
        self._active = 0
        self._fill = 0
        self._closed = False
        self._cond = threading.Condition()

    @property
    def active_bank(self) -> int:
        return self._active

    @property
    def fill_count(self) -> int:
        return self._fill

    def write(self, samples: np.ndarray) -> None:
        """Append samples, blocking while both banks are full."""
        samples = np.asarray(samples, dtype=np.float64)
        offset = 0
        with self._cond:
            if self._closed:
                raise RuntimeError("write after close")
            while offset < samples.size:
                while len(self._ready) == 2:
                    self._cond.wait()
                take = min(self.bank_size - self._fill, samples.size - offset)
                bank = self._banks[self._active]
                bank[self._fill : self._fill + take] = samples[offset : offset + take]
                self._fill += take
                offset += take
                if self._fill == self.bank_size:
                    self._ready.append(self._active)
                    self._active = 1 - self._active
                    self._fill = 0
                    self._cond.notify_all()

    def take(self, block: bool = True, timeout: float | None = None) -> np.ndarray | None:
        """Return the oldest full bank (a copy), or None.

        None means no bank is ready (non-blocking / timed out) or the stream
        is closed and drained. A partially filled bank is never returned.
        """
        with self._cond:
            if block:
                self._cond.wait_for(lambda: self._ready or self._closed, timeout=timeout)
            if not self._ready:
                return None
            bank_idx = self._ready.pop(0)
            out = self._banks[bank_idx].copy()
            self._cond.notify_all()
            return out

    def close(self) -> None:
        """End of stream: drop any partial bank and wake a blocked reader."""
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class RecentAudioRing:
    """Circular store retaining exactly the most recent ``capacity_ms`` of audio.

    Safe for one concurrent writer and one reader. Extraction addresses the
    stream by absolute offset, so in-retention ranges come back identical to
    what was written.
    """

    def __init__(self, capacity_ms: int, sample_rate: int):
        if capacity_ms <= 0 or sample_rate <= 0:
            raise ValueError("capacity_ms and sample_rate must be positive")
        self.capacity_ms = capacity_ms
        self.sample_rate = sample_rate
        self.capacity = _ms_to_samples(capacity_ms, sample_rate)
        self._buf = np.zeros(self.capacity)
        self._write_head = 0
        self._total = 0
        self._lock = threading.Lock()

    @property
    def total_written(self) -> int:
        with self._lock:
            return self._total

    @property
    def total_written_ms(self) -> int:
        return (self.total_written * 1000) // self.sample_rate

    def write(self, samples: np.ndarray) -> None:
        samples = np.asarray(samples, dtype=np.float64)
        with self._lock:
            if samples.size >= self.capacity:
                self._buf[:] = samples[-self.capacity :]
                self._write_head = 0
                self._total += samples.size
                return
            end = self._write_head + samples.size
            if end <= self.capacity:
                self._buf[self._write_head : end] = samples
            else:
                first = self.capacity - self._write_head
                self._buf[self._write_head :] = samples[:first]
                self._buf[: end - self.capacity] = samples[first:]
            self._write_head = end % self.capacity
            self._total += samples.size

    def extract(self, from_ms: int, to_ms: int) -> AudioClip:
        """Return the samples originally written for [from_ms, to_ms).

        Raises RangeError for empty/reversed/future ranges and EvictedError
        when any part of the range has aged out of retention.
        """
        start = _ms_to_samples(from_ms, self.sample_rate)
        stop = _ms_to_samples(to_ms, self.sample_rate)
        with self._lock:
            if stop <= start or start < 0:
                raise RangeError(f"bad range [{from_ms}, {to_ms}) ms")
            if stop > self._total:
                raise RangeError(f"range [{from_ms}, {to_ms}) ms not yet written")
            oldest = max(0, self._total - self.capacity)
            if start < oldest:
                raise EvictedError(f"range [{from_ms}, {to_ms}) ms older than retention")
            # map the absolute offset onto the physical buffer
            phys_start = (start + self._write_head - self._total % self.capacity) % self.capacity
            n = stop - start
            if phys_start + n <= self.capacity:
                out = self._buf[phys_start : phys_start + n].copy()
            else:
                first = self.capacity - phys_start
                out = np.concatenate([self._buf[phys_start:], self._buf[: n - first]])
            return AudioClip(out, self.sample_rate)


def ring_extract(ring: RecentAudioRing, from_ms: int, to_ms: int) -> AudioClip:
    """Module-level alias for :meth:`RecentAudioRing.extract`."""
    return ring.extract(from_ms, to_ms)


# --- Synthetic corpus ---------------------------------------------------


def _lowpass(noise: np.ndarray, sample_rate: int, cutoff_hz: float) -> np.ndarray:
    """Zero out spectral content above the cutoff (hard FFT brick wall)."""
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(noise.size, d=1.0 / sample_rate)
    spec[freqs > cutoff_hz] = 0.0
    return np.fft.irfft(spec, n=noise.size)


def _synth_snore(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    """Low-frequency amplitude-modulated pulse train with colored noise."""
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(60.0, 280.0)
    burst_rate = rng.uniform(0.2, 0.5)
    duty = rng.uniform(0.35, 0.5)
    burst_len = duty / burst_rate
    first_start = rng.uniform(0.0, 0.4)

    phase = np.mod(t - first_start, 1.0 / burst_rate)
    env = np.where(phase < burst_len, np.sin(np.pi * np.clip(phase, 0, burst_len) / burst_len) ** 2, 0.0)

    carrier = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    carrier += 0.5 * np.sin(2 * np.pi * 2 * f0 * t + rng.uniform(0, 2 * np.pi))
    turbulence = _lowpass(rng.standard_normal(n), sample_rate, 400.0)
    turbulence /= max(1e-12, np.abs(turbulence).max())
    floor = _lowpass(rng.standard_normal(n), sample_rate, 400.0)
    floor /= max(1e-12, np.abs(floor).max())

    sig = env * (0.8 * carrier + 0.3 * turbulence) + 0.002 * floor
    peak = rng.uniform(0.5, 0.9)
    return sig / np.abs(sig).max() * peak


def _synth_non_snore(rng: np.random.Generator, n: int, sample_rate: int, kind: str) -> np.ndarray:
    t = np.arange(n) / sample_rate
    if kind == "tone":
        freq = rng.uniform(500.0, 6000.0)
        sig = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        sig += 0.0005 * rng.standard_normal(n)
        peak = rng.uniform(0.3, 0.8)
    elif kind == "noise":
        sig = rng.standard_normal(n)
        peak = rng.uniform(0.3, 0.8)
    else:  # near-silence
        sig = rng.standard_normal(n)
        peak = 0.001
    return sig / np.abs(sig).max() * peak


_NON_SNORE_KINDS = ("noise", "tone", "silence")


def synth_corpus(
    seed: int,
    n_per_class: int,
    sample_rate: int = CANONICAL_RATE,
    clip_seconds: float = 3.0,
) -> list[AudioClip]:
    """Deterministic labeled corpus: snore pulse trains vs noise/tones/silence.

    Classes are exactly balanced; the same seed always reproduces the same
    samples bit for bit.
    """
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(clip_seconds * sample_rate))
    clips = []
    for _ in range(n_per_class):
        clips.append(AudioClip(_synth_snore(rng, n, sample_rate), sample_rate, Label.SNORING))
    for i in range(n_per_class):
        kind = _NON_SNORE_KINDS[i % len(_NON_SNORE_KINDS)]
        clips.append(AudioClip(_synth_non_snore(rng, n, sample_rate, kind), sample_rate, Label.NON_SNORING))
    return clips


# --- Corpus manifests ---------------------------------------------------


def write_manifest(path, entries: list[tuple[str, Label]]) -> None:
    """Write a `path,label` CSV manifest."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        for clip_path, label in entries:
            writer.writerow([clip_path, label.value])


def read_manifest(path) -> list[tuple[Path, Label]]:
    """Read a `path,label` manifest; relative paths resolve next to the CSV."""
    base = Path(path).parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"path", "label"}:
            raise FormatError(f"{path}: manifest must have a 'path,label' header")
        for row in reader:
            clip_path = Path(row["path"])
            if not clip_path.is_absolute():
                clip_path = base / clip_path
            entries.append((clip_path, Label.from_name(row["label"])))
    return entries


def load_manifest_clips(path, target_rate: int = CANONICAL_RATE) -> list[AudioClip]:
    """Load every manifest entry, resampling to the canonical rate."""
    clips = []
    for clip_path, label in read_manifest(path):
        clip = resample(load_wav(clip_path), target_rate)
        clips.append(AudioClip(clip.samples, target_rate, label))
    return clips
