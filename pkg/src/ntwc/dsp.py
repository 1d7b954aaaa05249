"""Waveform ingestion, framing/overlap-add, and mel-cepstral features.

All functions are pure; tensors in, tensors out.  The mel-cepstral path is
written with torch ops end to end so the perceptual loss can backpropagate
through it.
"""

from __future__ import annotations

import wave as wave_module
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import AudioFormatError

SAMPLE_RATE = 16000
FRAME_LENGTH = 512
OVERLAP = 32

_INT16_SCALE = 32768.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.isfinite(self.samples).all():
            raise AudioFormatError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FrameStack:
    """Batched frames, shape (num_frames, 1, frame_length)."""

    data: Tensor
    frame_length: int = FRAME_LENGTH
    overlap: int = OVERLAP

    @property
    def hop(self) -> int:
        return self.frame_length - self.overlap

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


def normalize(samples: np.ndarray) -> np.ndarray:
    """int16 -> float in [-1, 1)."""
    return np.asarray(samples, dtype=np.float64) / _INT16_SCALE


def denormalize(samples: np.ndarray) -> np.ndarray:
    """float -> int16, rounding and clipping to the representable range."""
    scaled = np.rint(np.asarray(samples, dtype=np.float64) * _INT16_SCALE)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


def waveform_from_wave(wav: wave_module.Wave_read) -> Waveform:
    """Validate and read an already-open WAV stream."""
    channels = wav.getnchannels()
    width = wav.getsampwidth()
    rate = wav.getframerate()
    count = wav.getnframes()
    if width != 2:
        raise AudioFormatError(f"expected 16-bit PCM, got {8 * width}-bit")
    if channels != 1 or rate != SAMPLE_RATE:
        raise AudioFormatError(
            f"expected 16 kHz mono, got {rate} Hz / {channels} channel(s)")
    if count == 0:
        raise AudioFormatError("empty stream")
    samples = np.frombuffer(wav.readframes(count), dtype="<i2")
    return Waveform(normalize(samples), sample_rate=rate)


def load_pcm(path: str | Path) -> Waveform:
    """Read a 16 kHz mono 16-bit PCM WAV file.

    Anything else (wrong rate, channels, or sample width) is rejected with an
    explicit format error rather than resampled.
    """
    try:
        with wave_module.open(str(path), "rb") as wav:
            return waveform_from_wave(wav)
    except (wave_module.Error, EOFError) as exc:
        raise AudioFormatError(f"not a readable WAV file: {exc}") from exc


def save_pcm(w: Waveform, path: str | Path) -> None:
    """Write a waveform as 16-bit PCM mono WAV (little-endian)."""
    data = denormalize(w.samples).astype("<i2").tobytes()
    with wave_module.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(w.sample_rate)
        wav.writeframes(data)


def num_frames_for(length: int, frame_length: int = FRAME_LENGTH,
                   overlap: int = OVERLAP) -> int:
    if length <= overlap:
        return 1
    hop = frame_length - overlap
    return -(-(length - overlap) // hop)


def frame_signal(w: Waveform, frame_length: int = FRAME_LENGTH,
                 overlap: int = OVERLAP) -> FrameStack:
    """Slice a waveform into overlapping frames, zero-padding the tail.

    Frame i covers samples [i*hop, i*hop + frame_length).
    """
    if frame_length <= overlap:
        raise ValueError("frame_length must exceed overlap")
    hop = frame_length - overlap
    n = num_frames_for(len(w), frame_length, overlap)
    padded = np.zeros((n - 1) * hop + frame_length, dtype=np.float64)
    padded[: len(w)] = w.samples
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n)[:, None]
    frames = torch.from_numpy(padded[idx]).unsqueeze(1)
    return FrameStack(data=frames, frame_length=frame_length, overlap=overlap)


def overlap_add(frames: FrameStack, original_length: int | None = None) -> Waveform:
    """Merge frames back into one waveform with a linear crossfade.

    Within each overlap region the outgoing frame is weighted 1 -> 0 and the
    incoming frame 0 -> 1, so weights sum to one and untouched frames
    reconstruct the input exactly.
    """
    n = frames.num_frames
    length = frames.frame_length
    overlap = frames.overlap
    hop = frames.hop
    data = frames.data.detach().cpu().numpy().reshape(n, length)
    out = np.zeros((n - 1) * hop + length, dtype=np.float64)
    out[:length] = data[0]
    if overlap > 0:
        ramp_in = np.linspace(0.0, 1.0, overlap)
    for i in range(1, n):
        start = i * hop
        if overlap > 0:
            out[start : start + overlap] *= 1.0 - ramp_in
            out[start : start + overlap] += ramp_in * data[i, :overlap]
            out[start + overlap : start + length] = data[i, overlap:]
        else:
            out[start : start + length] = data[i]
    if original_length is not None:
        out = out[:original_length]
    return Waveform(out)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_bins: int, window_size: int,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filterbank, shape (num_bins, window_size // 2 + 1)."""
    num_fft_bins = window_size // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, num_fft_bins)
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), num_bins + 2)
    hz_points = mel_to_hz(mel_points)
    bank = np.zeros((num_bins, num_fft_bins))
    for b in range(num_bins):
        left, center, right = hz_points[b : b + 3]
        up = (fft_freqs - left) / max(center - left, 1e-12)
        down = (right - fft_freqs) / max(right - center, 1e-12)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def dct_matrix(num_coeffs: int, num_inputs: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix (num_coeffs x num_inputs)."""
    k = np.arange(num_coeffs)[:, None]
    n = np.arange(num_inputs)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2 * num_inputs))
    mat *= np.sqrt(2.0 / num_inputs)
    mat[0] *= np.sqrt(0.5)
    return mat


@dataclass
class MelCepstrumConfig:
    """Multi-scale mel-cepstrum settings for the perceptual loss.

    One scale pairs a mel bin count with an analysis window size; coefficient
    counts are capped by the bin count of each scale.
    """

    mel_bins: tuple[int, ...] = (8, 32, 64, 128)
    window_sizes: tuple[int, ...] = (64, 128, 256, 512)
    num_cepstral_coeffs: int = 13
    log_floor: float = 1e-5
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if len(self.mel_bins) != len(self.window_sizes):
            raise ValueError("mel_bins and window_sizes must align")
        if any(b >= c for b, c in zip(self.mel_bins, self.mel_bins[1:])):
            raise ValueError("mel_bins must be strictly increasing")

    @property
    def num_scales(self) -> int:
        return len(self.mel_bins)

    def coeffs_at(self, scale: int) -> int:
        return min(self.num_cepstral_coeffs, self.mel_bins[scale])


class _ScaleOps:
    """Cached window/filterbank/DCT tensors for one scale."""

    def __init__(self, cfg: MelCepstrumConfig, scale: int):
        size = cfg.window_sizes[scale]
        self.window_size = size
        self.window = torch.from_numpy(np.hanning(size + 1)[:size].copy())
        self.bank = torch.from_numpy(mel_filterbank(cfg.mel_bins[scale], size,
                                                    cfg.sample_rate))
        self.dct = torch.from_numpy(dct_matrix(cfg.coeffs_at(scale),
                                               cfg.mel_bins[scale]))
        self.log_floor = cfg.log_floor


_SCALE_CACHE: dict[tuple, _ScaleOps] = {}


def _scale_ops(cfg: MelCepstrumConfig, scale: int) -> _ScaleOps:
    key = (cfg.mel_bins, cfg.window_sizes, cfg.num_cepstral_coeffs,
           cfg.log_floor, cfg.sample_rate, scale)
    if key not in _SCALE_CACHE:
        _SCALE_CACHE[key] = _ScaleOps(cfg, scale)
    return _SCALE_CACHE[key]


def log_mel_energies(x: Tensor, cfg: MelCepstrumConfig, scale: int) -> Tensor:
    """Floored log filterbank energies of the leading analysis window.

    ``x`` may carry leading batch dimensions; the last axis is time and only
    its first window_size samples are analyzed.
    """
    ops = _scale_ops(cfg, scale)
    if x.shape[-1] < ops.window_size:
        raise ValueError(
            f"frame of {x.shape[-1]} samples shorter than window {ops.window_size}")
    segment = x[..., : ops.window_size].to(torch.float64) * ops.window
    spectrum = torch.fft.rfft(segment, dim=-1)
    power = spectrum.real.square() + spectrum.imag.square()
    energies = power @ ops.bank.T
    return torch.log(torch.clamp(energies, min=ops.log_floor))


def mel_cepstrum(x: Tensor, cfg: MelCepstrumConfig, scale: int) -> Tensor:
    """Mel-frequency cepstral coefficients of the leading analysis window."""
    return log_mel_energies(x, cfg, scale) @ _scale_ops(cfg, scale).dct.T


def mel_cepstrum_sliding(x: Tensor, cfg: MelCepstrumConfig, scale: int) -> Tensor:
    """Cepstra over half-overlapped windows covering the whole frame.

    Output shape (..., num_windows, coeffs); used by the perceptual loss and
    the cepstral-distortion metric so every sample of a codec frame
    contributes at every scale.
    """
    size = _scale_ops(cfg, scale).window_size
    hop = size // 2
    length = x.shape[-1]
    if length < size:
        raise ValueError(f"frame of {length} samples shorter than window {size}")
    windows = x.unfold(-1, size, hop)
    return mel_cepstrum(windows, cfg, scale)
