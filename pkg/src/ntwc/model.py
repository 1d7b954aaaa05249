"""The full codec model and its checkpoint format.

Checkpoints are ``.npz`` archives holding every weight as a float64 array,
the architecture config as JSON, and a content hash over both.  The first 8
bytes of the hash are embedded in encoded bitstreams so a decoder can refuse
containers produced by a different model.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .entropy import FactorizedDensity
from .errors import ModelMismatchError
from .transforms import (
    AnalysisTransform,
    CodecConfig,
    HyperAnalysisTransform,
    HyperSynthesisTransform,
    ResidualAnalysisTransform,
    ResidualSynthesisTransform,
    SynthesisTransform,
    parameter_count,
    seeded_init,
)


class SpeechCodec(nn.Module):
    """All transforms plus the factorized densities for z and the residual code."""

    def __init__(self, config: CodecConfig | None = None, seed: int | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        cfg = self.config
        self.analysis = AnalysisTransform(cfg)
        self.synthesis_net = SynthesisTransform(cfg)
        self.hyper_analysis = HyperAnalysisTransform(cfg)
        self.hyper_synthesis = HyperSynthesisTransform(cfg)
        self.z_density = FactorizedDensity(cfg.hyper_latent_channels)
        if cfg.residual_enabled:
            self.residual_analysis = ResidualAnalysisTransform(cfg)
            self.residual_synthesis = ResidualSynthesisTransform(cfg)
            self.yr_density = FactorizedDensity(cfg.residual_channels)
        self.double()
        if seed is not None:
            seeded_init(self, seed)

    @property
    def residual_enabled(self) -> bool:
        return self.config.residual_enabled

    def synthesis(self, y_hat: Tensor, residual: Tensor | None = None) -> Tensor:
        """Reconstruct frames from a latent, merging the residual additively."""
        if residual is not None:
            if not self.residual_enabled:
                raise ValueError("residual supplied to a non-residual model")
            y_hat = y_hat + residual
        return self.synthesis_net(y_hat)

    def backbone_parameter_count(self) -> int:
        modules = [self.analysis, self.synthesis_net, self.hyper_analysis,
                   self.hyper_synthesis, self.z_density]
        return sum(parameter_count(m) for m in modules)

    def residual_parameter_count(self) -> int:
        if not self.residual_enabled:
            return 0
        return sum(parameter_count(m) for m in
                   [self.residual_analysis, self.residual_synthesis, self.yr_density])


def _state_arrays(model: SpeechCodec) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy()
            for name, tensor in model.state_dict().items()}


def model_hash(model: SpeechCodec) -> str:
    """SHA-256 over the config and every weight, stable across sessions."""
    digest = hashlib.sha256()
    digest.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    arrays = _state_arrays(model)
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())
    return digest.hexdigest()


def model_hash_bytes(model: SpeechCodec) -> bytes:
    return bytes.fromhex(model_hash(model))[:8]


def save_checkpoint(
    model: SpeechCodec,
    path: str | Path,
    step: int = 0,
    train_state: dict[str, np.ndarray] | None = None,
    metadata: dict | None = None,
) -> str:
    """Write a checkpoint; returns the model content hash.

    ``train_state`` arrays (optimizer moments, RNG state) ride along under a
    reserved prefix so training can resume with an identical trajectory.
    """
    arrays = {f"weights/{k}": v for k, v in _state_arrays(model).items()}
    if train_state:
        arrays.update({f"train/{k}": np.asarray(v) for k, v in train_state.items()})
    meta = {
        "config": model.config.to_dict(),
        "hash": model_hash(model),
        "step": int(step),
        **(metadata or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)
    if path.suffix != ".npz":  # np.savez appends .npz when missing
        Path(str(path) + ".npz").replace(path)
    return meta["hash"]


def load_checkpoint(path: str | Path):
    """Load a checkpoint; returns (model, metadata, train_state)."""
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode())
        weights = {k[len("weights/"):]: archive[k]
                   for k in archive.files if k.startswith("weights/")}
        train_state = {k[len("train/"):]: archive[k]
                       for k in archive.files if k.startswith("train/")}
    config = CodecConfig.from_dict(meta["config"])
    model = SpeechCodec(config)
    state = {k: torch.from_numpy(v).to(torch.float64) for k, v in weights.items()}
    model.load_state_dict(state)
    model.eval()
    if model_hash(model) != meta["hash"]:
        raise ModelMismatchError("checkpoint content does not match stored hash")
    return model, meta, train_state


def resolve_model(checkpoint: str | Path | SpeechCodec) -> SpeechCodec:
    if isinstance(checkpoint, SpeechCodec):
        return checkpoint
    model, _, _ = load_checkpoint(checkpoint)
    return model
