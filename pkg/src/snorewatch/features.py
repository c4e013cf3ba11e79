"""Audio-to-image front end: magnitude spectra, log-mel, resize, normalize.

A FrameWindow becomes a square grayscale image with time on the horizontal
axis and mel frequency on the vertical axis (low bands at the bottom). All
functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import FrameWindow
from .errors import NumericError

VALID_SIDES = (24, 64)


@dataclass(frozen=True)
class SpectrogramConfig:
    """Short-time analysis parameters for the log-mel front end."""

    fft_size: int = 512
    frame_hop: int = 256
    mel_bands: int = 40
    fmin: float = 20.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.fft_size < 2 or self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.frame_hop <= 0:
            raise ValueError("frame_hop must be positive")
        if self.mel_bands < 2:
            raise ValueError("need at least 2 mel bands")
        if not (0 < self.fmin < self.fmax):
            raise ValueError("need 0 < fmin < fmax")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@dataclass(frozen=True)
class FeatureImage:
    """Square grid of values in [0, 1], the network's input tensor."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("FeatureImage must be square")
        if not np.isfinite(values).all() or values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("FeatureImage values must be finite and within [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def side(self) -> int:
        return self.values.shape[0]


def dft_magnitude(frame: np.ndarray, fft_size: int) -> np.ndarray:
    """Magnitude spectrum of one frame: fft_size/2 + 1 bins.

    Frames shorter than ``fft_size`` are zero-padded; no window is applied
    here (callers window before transforming).
    """
    frame = np.asarray(frame, dtype=np.float64)
    if not np.isfinite(frame).all():
        raise NumericError("non-finite samples in frame")
    if frame.size > fft_size:
        raise ValueError(f"frame of {frame.size} samples exceeds fft_size {fft_size}")
    return np.abs(np.fft.rfft(frame, n=fft_size))


def hz_to_mel(hz):
    """HTK mel scale: 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SpectrogramConfig, sample_rate: int) -> np.ndarray:
    """Triangular filterbank matrix of shape (mel_bands, fft_size/2 + 1)."""
    if cfg.fmax > sample_rate / 2:
        raise ValueError("fmax exceeds Nyquist")
    mel_points = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bands + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.fft.rfftfreq(cfg.fft_size, d=1.0 / sample_rate)
    bank = np.zeros((cfg.mel_bands, bin_freqs.size))
    for m in range(cfg.mel_bands):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def log_mel(window: FrameWindow, cfg: SpectrogramConfig) -> np.ndarray:
    """Log mel-power matrix of shape (frames, mel_bands) for one window.

    Frames are Hann-windowed slices of length fft_size advancing by
    frame_hop; a window shorter than one frame yields a single zero-padded
    frame.
    """
    samples = np.asarray(window.samples, dtype=np.float64)
    if samples.size <= cfg.fft_size:
        frames = np.zeros((1, cfg.fft_size))
        frames[0, : samples.size] = samples
    else:
        n_frames = 1 + (samples.size - cfg.fft_size) // cfg.frame_hop
        offsets = np.arange(n_frames) * cfg.frame_hop
        frames = samples[offsets[:, None] + np.arange(cfg.fft_size)]
    frames = frames * np.hanning(cfg.fft_size)
    if not np.isfinite(frames).all():
        raise NumericError("non-finite samples in window")
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    bank = mel_filterbank(cfg, window.sample_rate)
    return np.log(power @ bank.T + cfg.log_floor)


def resize_bilinear(matrix: np.ndarray, side: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D matrix to side x side."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValueError("need a non-empty 2-D matrix")

    def axis_coords(src_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if src_len == 1 or side == 1:
            pos = np.zeros(side)
        else:
            pos = np.arange(side) * (src_len - 1) / (side - 1)
        lo = np.clip(np.floor(pos).astype(int), 0, src_len - 1)
        hi = np.clip(lo + 1, 0, src_len - 1)
        return lo, hi, pos - lo

    r_lo, r_hi, r_frac = axis_coords(matrix.shape[0])
    c_lo, c_hi, c_frac = axis_coords(matrix.shape[1])
    rows = matrix[r_lo] * (1 - r_frac)[:, None] + matrix[r_hi] * r_frac[:, None]
    return rows[:, c_lo] * (1 - c_frac) + rows[:, c_hi] * c_frac


def normalize(matrix: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant matrix maps to all 0.5."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.isfinite(matrix).all():
        raise NumericError("non-finite values")
    lo, hi = matrix.min(), matrix.max()
    if hi == lo:
        return np.full(matrix.shape, 0.5)
    return (matrix - lo) / (hi - lo)


def extract(window: FrameWindow, cfg: SpectrogramConfig, side: int) -> FeatureImage:
    """Full front end: log-mel, orient, resize, normalize.

    The result has time left-to-right and mel bands bottom-up, so snore
    energy (low frequency) concentrates in the bottom rows.
    """
    if side not in VALID_SIDES:
        raise ValueError(f"side must be one of {VALID_SIDES}")
    mel = log_mel(window, cfg)  # (frames, bands)
    image = mel.T[::-1]  # rows = bands, top row = highest band
    return FeatureImage(normalize(resize_bilinear(image, side)))


def write_pgm(image: FeatureImage, path) -> None:
    """Dump a feature image as plain-text PGM (P2) for eyeballing."""
    grey = np.round(image.values * 255).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{image.side} {image.side}\n255\n")
        for row in grey:
            fh.write(" ".join(str(v) for v in row) + "\n")
