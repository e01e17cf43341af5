"""MFCC front end for the audio branch.

Conventions follow the usual toolkit defaults for 16 kHz speech: a 400-point
FFT on periodic-Hann windows with a 200-sample hop, centered frames obtained
by reflection padding, a 128-filter HTK mel filterbank, decibel log power and
an orthonormal DCT-II truncated to 40 coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

MAX_FRAMES = 8192
POWER_FLOOR = 1e-10


@dataclass(frozen=True)
class MfccParams:
    n_fft: int = 400
    hop: int = 200
    n_mels: int = 128
    n_mfcc: int = 40
    sample_rate: int = 16000

    def __post_init__(self):
        if self.hop * 2 != self.n_fft:
            raise ValueError("hop must be n_fft / 2")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must not exceed n_mels")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class RawAudio:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != 16000:
            raise ValueError(f"unsupported sample rate {self.sample_rate}; expected 16000")

    @classmethod
    def from_pcm16(cls, pcm: np.ndarray, sample_rate: int = 16000) -> "RawAudio":
        return cls(np.asarray(pcm, dtype=np.int16).astype(np.float64) / 32768.0, sample_rate)


@dataclass
class MfccSequence:
    frames: np.ndarray
    source_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@lru_cache(maxsize=8)
def mel_filterbank(n_bins: int = 201, n_mels: int = 128, sample_rate: int = 16000) -> np.ndarray:
    """Triangular filters with unit peak at each mel-spaced center, shape (n_bins, n_mels)."""
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    f_pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    widths = np.diff(f_pts)
    offsets = f_pts[None, :] - freqs[:, None]
    down = -offsets[:, :-2] / widths[:-1]
    up = offsets[:, 2:] / widths[1:]
    fb = np.maximum(0.0, np.minimum(down, up))
    fb.setflags(write=False)
    return fb


def frame_signal(audio: RawAudio, params: MfccParams = MfccParams()) -> np.ndarray:
    """Split into centered, Hann-windowed frames; returns (T, n_fft) with T = L // hop + 1."""
    x = audio.samples
    if x.size == 0:
        raise ValueError("empty audio")
    pad = params.n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    n_frames = x.size // params.hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(padded, params.n_fft)[:: params.hop][:n_frames]
    return frames * periodic_hann(params.n_fft)


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return spec.real**2 + spec.imag**2


def log_mel_spectrogram(audio: RawAudio, params: MfccParams = MfccParams()) -> np.ndarray:
    power = power_spectrum(frame_signal(audio, params), params.n_fft)
    mel = power @ mel_filterbank(params.n_bins, params.n_mels, params.sample_rate)
    return 10.0 * np.log10(np.maximum(mel, POWER_FLOOR))


def mfcc(audio: RawAudio, params: MfccParams = MfccParams(), source_id: str = "") -> MfccSequence:
    log_mel = log_mel_spectrogram(audio, params)
    coeffs = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=-1)[:, : params.n_mfcc]
    return MfccSequence(np.ascontiguousarray(coeffs), source_id)


def within_length_limit(seq: MfccSequence, limit: int = MAX_FRAMES) -> bool:
    return seq.n_frames <= limit
