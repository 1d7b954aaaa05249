"""FastAPI service wrapping the codec.

Checkpoints load once and stay cached, so repeated encode/decode requests
skip model setup.  Inference is read-only on parameters and safe to serve
concurrently; the cache itself is guarded by a lock.
"""

from __future__ import annotations

import base64
import binascii
import os
import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__, dsp
from ..container import decode_container, encode_waveform
from ..errors import CodecError, ModelMismatchError
from ..evaluate import container_info, mel_cepstral_distortion, snr
from ..model import SpeechCodec, load_checkpoint, model_hash
from ..transforms import parameter_count
from .schemas import (
    DecodeRequest,
    DecodeResponse,
    EncodeRequest,
    EncodeResponse,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    InfoRequest,
    InfoResponse,
    ModelInfo,
    ModelsResponse,
    RateInfo,
)

MODEL_DIR_ENV = "NTWC_MODEL_DIR"
_CHECKPOINT_SUFFIXES = (".ckpt", ".npz")


class ModelRegistry:
    def __init__(self, model_dir: str | None):
        self.model_dir = Path(model_dir) if model_dir else None
        self._cache: dict[Path, SpeechCodec] = {}
        self._lock = threading.Lock()

    def available(self) -> list[Path]:
        if self.model_dir is None or not self.model_dir.is_dir():
            return []
        return sorted(p for p in self.model_dir.iterdir()
                      if p.suffix in _CHECKPOINT_SUFFIXES)

    def resolve(self, name: str | None) -> Path:
        if name is None:
            candidates = self.available()
            if len(candidates) == 1:
                return candidates[0]
            raise HTTPException(
                status_code=400,
                detail="no model given and the model directory does not hold "
                       "exactly one checkpoint")
        path = Path(name)
        if not path.is_absolute() and self.model_dir is not None:
            in_dir = self.model_dir / name
            if in_dir.exists():
                path = in_dir
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"model not found: {name}")
        return path

    def get(self, name: str | None) -> SpeechCodec:
        path = self.resolve(name).resolve()
        with self._lock:
            if path not in self._cache:
                model, _, _ = load_checkpoint(path)
                self._cache[path] = model
            return self._cache[path]


def _wav_from_b64(data_b64: str) -> dsp.Waveform:
    import io
    import wave

    try:
        raw = base64.b64decode(data_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(status_code=400, detail=f"bad base64 payload: {exc}")
    try:
        with wave.open(io.BytesIO(raw), "rb") as handle:
            return dsp.waveform_from_wave(handle)
    except (wave.Error, EOFError) as exc:
        raise HTTPException(status_code=400, detail=f"unreadable WAV: {exc}")


def _wav_to_b64(waveform: dsp.Waveform) -> str:
    import io
    import wave

    buffer = io.BytesIO()
    with wave.open(buffer, "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(waveform.sample_rate)
        handle.writeframes(dsp.denormalize(waveform.samples).astype("<i2").tobytes())
    return base64.b64encode(buffer.getvalue()).decode()


def _container_from_b64(data_b64: str) -> bytes:
    try:
        return base64.b64decode(data_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(status_code=400, detail=f"bad base64 payload: {exc}")


def create_app(model_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="ntwc codec service", version=__version__)
    registry = ModelRegistry(model_dir or os.environ.get(MODEL_DIR_ENV))
    app.state.registry = registry

    @app.exception_handler(CodecError)
    async def codec_error_handler(request, exc: CodecError):
        from fastapi.responses import JSONResponse

        status = 409 if isinstance(exc, ModelMismatchError) else 400
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.get("/models", response_model=ModelsResponse)
    def models() -> ModelsResponse:
        infos = []
        for path in registry.available():
            model = registry.get(path.name)
            infos.append(ModelInfo(
                name=path.name,
                hash=model_hash(model),
                residual=model.residual_enabled,
                parameters=parameter_count(model),
            ))
        return ModelsResponse(
            model_dir=str(registry.model_dir) if registry.model_dir else None,
            models=infos)

    @app.post("/encode", response_model=EncodeResponse)
    def encode(request: EncodeRequest) -> EncodeResponse:
        model = registry.get(request.model)
        waveform = _wav_from_b64(request.wav_b64)
        data, report = encode_waveform(model, waveform)
        return EncodeResponse(
            container_b64=base64.b64encode(data).decode(),
            rate=RateInfo(
                kbps=report.kbps,
                coded_bits_y=report.coded_bits_y,
                coded_bits_z=report.coded_bits_z,
                coded_bits_yr=report.coded_bits_yr,
                estimated_bits=report.total_bits,
                num_frames=report.num_frames,
            ))

    @app.post("/decode", response_model=DecodeResponse)
    def decode(request: DecodeRequest) -> DecodeResponse:
        model = registry.get(request.model)
        data = _container_from_b64(request.container_b64)
        waveform, _ = decode_container(model, data)
        return DecodeResponse(
            wav_b64=_wav_to_b64(waveform),
            num_samples=len(waveform),
            duration_seconds=waveform.duration,
        )

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(request: EvalRequest) -> EvalResponse:
        reference = _wav_from_b64(request.reference_wav_b64)
        test = _wav_from_b64(request.test_wav_b64)
        try:
            return EvalResponse(
                snr_db=snr(reference, test),
                mel_cepstral_distortion=mel_cepstral_distortion(reference, test),
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/info", response_model=InfoResponse)
    def info(request: InfoRequest) -> InfoResponse:
        data = _container_from_b64(request.container_b64)
        return InfoResponse(**container_info(data))

    return app
