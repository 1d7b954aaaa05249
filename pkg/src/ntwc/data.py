"""Seeded synthetic speech-like corpus for hermetic training and evaluation.

Each utterance mixes 2-5 sinusoids with slow random amplitude-modulation
envelopes on top of pink noise.  Everything derives from one integer seed,
so corpora are reproducible across runs and platforms.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from . import dsp


def pink_noise(rng: np.random.Generator, length: int) -> np.ndarray:
    """1/f-shaped noise with unit peak normalization."""
    spectrum = rng.standard_normal(length // 2 + 1) + 1j * rng.standard_normal(length // 2 + 1)
    freqs = np.arange(len(spectrum), dtype=np.float64)
    freqs[0] = 1.0
    shaped = spectrum / np.sqrt(freqs)
    noise = np.fft.irfft(shaped, n=length)
    peak = np.abs(noise).max()
    return noise / peak if peak > 0 else noise


def synthetic_utterance(rng: np.random.Generator, duration: float = 0.5,
                        sample_rate: int = dsp.SAMPLE_RATE) -> dsp.Waveform:
    length = int(round(duration * sample_rate))
    t = np.arange(length) / sample_rate
    signal = np.zeros(length)
    num_tones = int(rng.integers(2, 6))
    for _ in range(num_tones):
        freq = float(np.exp(rng.uniform(np.log(100.0), np.log(3500.0))))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        am_freq = rng.uniform(0.5, 8.0)
        am_phase = rng.uniform(0.0, 2.0 * np.pi)
        depth = rng.uniform(0.3, 1.0)
        envelope = (1.0 + depth * np.sin(2.0 * np.pi * am_freq * t + am_phase)) / (1.0 + depth)
        signal += envelope * np.sin(2.0 * np.pi * freq * t + phase) / num_tones
    signal += rng.uniform(0.02, 0.08) * pink_noise(rng, length)
    target_peak = rng.uniform(0.3, 0.8)
    peak = np.abs(signal).max()
    if peak > 0:
        signal *= target_peak / peak
    return dsp.Waveform(signal, sample_rate)


class SyntheticCorpus:
    def __init__(self, seed: int = 0, count: int = 64, duration: float = 0.5,
                 sample_rate: int = dsp.SAMPLE_RATE):
        self.seed = seed
        self.count = count
        self.duration = duration
        self.sample_rate = sample_rate
        rng = np.random.default_rng(seed)
        self.utterances = [synthetic_utterance(rng, duration, sample_rate)
                           for _ in range(count)]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> dsp.Waveform:
        return self.utterances[i]

    def frames(self, frame_length: int = dsp.FRAME_LENGTH,
               overlap: int = dsp.OVERLAP) -> torch.Tensor:
        """All frames of all utterances stacked into one (M, 1, L) tensor."""
        stacks = [dsp.frame_signal(w, frame_length, overlap).data
                  for w in self.utterances]
        return torch.cat(stacks, dim=0)

    def write_wavs(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, w in enumerate(self.utterances):
            path = directory / f"utt{i:04d}.wav"
            dsp.save_pcm(w, path)
            paths.append(path)
        return paths


def load_corpus_frames(path: str | Path, frame_length: int = dsp.FRAME_LENGTH,
                       overlap: int = dsp.OVERLAP) -> torch.Tensor:
    """Frames of every WAV file under a directory (sorted for determinism)."""
    wavs = sorted(Path(path).glob("*.wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files under {path}")
    stacks = [dsp.frame_signal(dsp.load_pcm(p), frame_length, overlap).data
              for p in wavs]
    return torch.cat(stacks, dim=0)
