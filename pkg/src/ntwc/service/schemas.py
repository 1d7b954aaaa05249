"""Pydantic request/response models for the codec service.

Audio and containers travel as base64-encoded bytes: WAV payloads are full
RIFF files, containers are the NTWC format.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ModelInfo(BaseModel):
    name: str
    hash: str
    residual: bool
    parameters: int


class ModelsResponse(BaseModel):
    model_dir: str | None
    models: list[ModelInfo]


class RateInfo(BaseModel):
    kbps: float
    coded_bits_y: int
    coded_bits_z: int
    coded_bits_yr: int
    estimated_bits: float
    num_frames: int


class EncodeRequest(BaseModel):
    wav_b64: str = Field(description="base64 RIFF WAV, 16 kHz mono 16-bit PCM")
    model: str | None = Field(default=None, description="checkpoint name or path")


class EncodeResponse(BaseModel):
    container_b64: str
    rate: RateInfo


class DecodeRequest(BaseModel):
    container_b64: str
    model: str | None = None


class DecodeResponse(BaseModel):
    wav_b64: str
    num_samples: int
    duration_seconds: float


class EvalRequest(BaseModel):
    reference_wav_b64: str
    test_wav_b64: str


class EvalResponse(BaseModel):
    snr_db: float
    mel_cepstral_distortion: float


class InfoRequest(BaseModel):
    container_b64: str


class InfoResponse(BaseModel):
    version: int
    residual: bool
    model_hash: str
    sample_rate: int
    frame_length: int
    overlap: int
    num_frames: int
    original_length: int
    precision: int
    tail_mass_exp: int
    duration_seconds: float
    payload_bits: int
    bits_y: int
    bits_z: int
    bits_yr: int
    kbps: float
    share_y: float
    share_z: float
    share_yr: float
