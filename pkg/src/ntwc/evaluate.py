"""Objective metrics and rate-allocation reporting.

PESQ-style licensed metrics are out of scope; fidelity is reported as SNR
plus a mel-cepstral distortion built from the same multi-scale features the
perceptual loss uses.  An external scorer can be attached through the CLI's
plugin hook.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .container import ContainerHeader, stream_bits

SNR_CAP_DB = 120.0


def snr(reference: dsp.Waveform, test: dsp.Waveform) -> float:
    """Signal-to-noise ratio in dB, capped at +-120 dB."""
    if len(reference) != len(test):
        raise ValueError("waveforms must have equal length")
    ref = reference.samples
    err = ref - test.samples
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("reference is all zeros")
    err_energy = float(np.dot(err, err))
    if err_energy == 0.0:
        return SNR_CAP_DB
    value = 10.0 * math.log10(ref_energy / err_energy)
    return max(min(value, SNR_CAP_DB), -SNR_CAP_DB)


def mel_cepstral_distortion(reference: dsp.Waveform, test: dsp.Waveform,
                            cfg: dsp.MelCepstrumConfig | None = None) -> float:
    """RMS cepstral difference averaged over frames and all scales."""
    if len(reference) != len(test):
        raise ValueError("waveforms must have equal length")
    cfg = cfg or dsp.MelCepstrumConfig()
    ref_frames = dsp.frame_signal(reference).data
    test_frames = dsp.frame_signal(test).data
    per_scale = []
    with torch.no_grad():
        for k in range(cfg.num_scales):
            diff = (dsp.mel_cepstrum_sliding(ref_frames, cfg, k)
                    - dsp.mel_cepstrum_sliding(test_frames, cfg, k))
            per_scale.append(float(diff.square().mean()))
    return math.sqrt(sum(per_scale) / len(per_scale))


@dataclass
class EvalResult:
    kbps: float
    snr_db: float
    mel_cepstral_distortion: float
    share_y: float
    share_z: float
    share_yr: float

    def to_dict(self) -> dict:
        return {
            "kbps": self.kbps,
            "snr_db": self.snr_db,
            "mel_cepstral_distortion": self.mel_cepstral_distortion,
            "share_y": self.share_y,
            "share_z": self.share_z,
            "share_yr": self.share_yr,
        }


def rate_allocation(container: bytes | str | Path) -> tuple[float, float, float]:
    """Fractions of coded payload bits spent on y, z and y_r."""
    data = container if isinstance(container, bytes) else Path(container).read_bytes()
    _, bits_y, bits_z, bits_yr = stream_bits(data)
    total = bits_y + bits_z + bits_yr
    if total == 0:
        return 0.0, 0.0, 0.0
    return bits_y / total, bits_z / total, bits_yr / total


def container_kbps(data: bytes) -> tuple[ContainerHeader, float]:
    """Measured rate: payload bits over hop-based duration."""
    header, bits_y, bits_z, bits_yr = stream_bits(data)
    seconds = header.num_frames * header.hop / header.sample_rate
    return header, (bits_y + bits_z + bits_yr) / seconds / 1000.0


def container_info(data: bytes) -> dict:
    """Header fields plus measured kbps and per-stream shares."""
    header, bits_y, bits_z, bits_yr = stream_bits(data)
    total = bits_y + bits_z + bits_yr
    seconds = header.num_frames * header.hop / header.sample_rate
    return {
        "version": header.version,
        "residual": header.residual,
        "model_hash": header.model_hash.hex(),
        "sample_rate": header.sample_rate,
        "frame_length": header.frame_length,
        "overlap": header.overlap,
        "num_frames": header.num_frames,
        "original_length": header.original_length,
        "precision": header.precision,
        "tail_mass_exp": header.tail_mass_exp,
        "duration_seconds": header.original_length / header.sample_rate,
        "payload_bits": total,
        "bits_y": bits_y,
        "bits_z": bits_z,
        "bits_yr": bits_yr,
        "kbps": total / seconds / 1000.0 if seconds > 0 else 0.0,
        "share_y": bits_y / total if total else 0.0,
        "share_z": bits_z / total if total else 0.0,
        "share_yr": bits_yr / total if total else 0.0,
    }


def evaluate_decoded(reference: dsp.Waveform, decoded: dsp.Waveform,
                     container: bytes) -> EvalResult:
    header, kbps = container_kbps(container)
    share_y, share_z, share_yr = rate_allocation(container)
    return EvalResult(
        kbps=kbps,
        snr_db=snr(reference, decoded),
        mel_cepstral_distortion=mel_cepstral_distortion(reference, decoded),
        share_y=share_y, share_z=share_z, share_yr=share_yr,
    )
