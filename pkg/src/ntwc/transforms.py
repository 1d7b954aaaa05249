"""Analysis/synthesis transform pairs built from dilated 1-D conv blocks.

Four pairs: waveform analysis/synthesis, hyper analysis/synthesis, and a
lightweight residual analysis/synthesis.  Stride-1 layers use same-padding so
time lengths only change at the stride-2 stages, making shape arithmetic
exact: a frame of L samples maps to a latent of L/4 steps and a hyperlatent
of L/16 steps.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
from torch import Tensor, nn

LATENT_DOWNSAMPLE = 4
HYPER_DOWNSAMPLE = 16


@dataclass(frozen=True)
class CodecConfig:
    frame_length: int = 512
    overlap: int = 32
    sample_rate: int = 16000
    base_channels: int = 64
    hyper_channels: int = 32
    latent_channels: int = 4
    hyper_latent_channels: int = 2
    residual_hidden: int = 32
    residual_channels: int = 2
    kernel_coarse: int = 9
    kernel_fine: int = 5
    blocks_coarse: int = 4
    blocks_fine: int = 4
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    hyper_blocks_coarse: int = 3
    hyper_blocks_fine: int = 2
    hyper_dilations_coarse: tuple[int, ...] = (1, 2, 4)
    hyper_dilations_fine: tuple[int, ...] = (1, 2)
    residual_enabled: bool = True
    sigma_min: float = 1e-6
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.frame_length % HYPER_DOWNSAMPLE != 0:
            raise ValueError("frame_length must be divisible by 16")
        if self.overlap >= self.frame_length or self.overlap < 0:
            raise ValueError("overlap must be in [0, frame_length)")

    @property
    def hop(self) -> int:
        return self.frame_length - self.overlap

    @property
    def latent_length(self) -> int:
        return self.frame_length // LATENT_DOWNSAMPLE

    @property
    def hyper_length(self) -> int:
        return self.frame_length // HYPER_DOWNSAMPLE

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CodecConfig":
        data = dict(data)
        for key in ("dilations", "hyper_dilations_coarse", "hyper_dilations_fine"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def _conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1,
          dilation: int = 1) -> nn.Conv1d:
    return nn.Conv1d(in_ch, out_ch, kernel, stride=stride, dilation=dilation,
                     padding=dilation * (kernel - 1) // 2)


def _deconv(in_ch: int, out_ch: int, kernel: int) -> nn.ConvTranspose1d:
    # stride-2 transposed conv that exactly doubles the time length
    return nn.ConvTranspose1d(in_ch, out_ch, kernel, stride=2,
                              padding=(kernel - 1) // 2, output_padding=1)


class DilatedBlock(nn.Module):
    """Convs with increasing dilations plus an identity shortcut.

    Channel count is preserved, so the shortcut is a plain addition; the
    block output itself has no activation.
    """

    def __init__(self, channels: int, kernel: int, dilations: tuple[int, ...],
                 negative_slope: float):
        super().__init__()
        self.convs = nn.ModuleList(
            _conv(channels, channels, kernel, dilation=d) for d in dilations)
        self.act = nn.LeakyReLU(negative_slope)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = self.act(conv(h))
        return x + h


class AnalysisTransform(nn.Module):
    """Waveform frames (N, 1, L) -> latent (N, latent_channels, L/4)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        c, kc, kf = cfg.base_channels, cfg.kernel_coarse, cfg.kernel_fine
        self.net = nn.Sequential(
            _conv(1, c, kc),
            *[DilatedBlock(c, kc, cfg.dilations, cfg.negative_slope)
              for _ in range(cfg.blocks_coarse)],
            _conv(c, c, kc, stride=2),
            *[DilatedBlock(c, kf, cfg.dilations, cfg.negative_slope)
              for _ in range(cfg.blocks_fine)],
            _conv(c, cfg.latent_channels, kf, stride=2),
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % LATENT_DOWNSAMPLE != 0:
            raise ValueError("frame length must be divisible by 4")
        return self.net(x)


class SynthesisTransform(nn.Module):
    """Latent (N, latent_channels, L/4) -> frames (N, 1, L); mirror of analysis."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        c, kc, kf = cfg.base_channels, cfg.kernel_coarse, cfg.kernel_fine
        self.net = nn.Sequential(
            _deconv(cfg.latent_channels, c, kf),
            *[DilatedBlock(c, kf, cfg.dilations, cfg.negative_slope)
              for _ in range(cfg.blocks_fine)],
            _deconv(c, c, kc),
            *[DilatedBlock(c, kc, cfg.dilations, cfg.negative_slope)
              for _ in range(cfg.blocks_coarse)],
            _conv(c, 1, kc),
        )

    def forward(self, y: Tensor) -> Tensor:
        return self.net(y)


class HyperAnalysisTransform(nn.Module):
    """Latent (N, latent_channels, T) -> hyperlatent (N, hyper_latent, T/4)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        h, kc, kf = cfg.hyper_channels, cfg.kernel_coarse, cfg.kernel_fine
        self.net = nn.Sequential(
            _conv(cfg.latent_channels, h, kc),
            *[DilatedBlock(h, kc, cfg.hyper_dilations_coarse, cfg.negative_slope)
              for _ in range(cfg.hyper_blocks_coarse)],
            _conv(h, h, kc, stride=2),
            *[DilatedBlock(h, kf, cfg.hyper_dilations_fine, cfg.negative_slope)
              for _ in range(cfg.hyper_blocks_fine)],
            _conv(h, cfg.hyper_latent_channels, kf, stride=2),
        )

    def forward(self, y: Tensor) -> Tensor:
        if y.shape[-1] % 4 != 0:
            raise ValueError("latent length must be divisible by 4")
        return self.net(y)


class HyperSynthesisTransform(nn.Module):
    """Hyperlatent -> strictly positive scale field shaped like the latent."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        h, kc, kf = cfg.hyper_channels, cfg.kernel_coarse, cfg.kernel_fine
        self.sigma_min = cfg.sigma_min
        self.net = nn.Sequential(
            _deconv(cfg.hyper_latent_channels, h, kf),
            *[DilatedBlock(h, kf, cfg.hyper_dilations_fine, cfg.negative_slope)
              for _ in range(cfg.hyper_blocks_fine)],
            _deconv(h, h, kc),
            *[DilatedBlock(h, kc, cfg.hyper_dilations_coarse, cfg.negative_slope)
              for _ in range(cfg.hyper_blocks_coarse)],
            _conv(h, cfg.latent_channels, kc),
        )

    def forward(self, z: Tensor) -> Tensor:
        return torch.clamp(nn.functional.softplus(self.net(z)), min=self.sigma_min)


class ResidualAnalysisTransform(nn.Module):
    """Rounding residual (N, latent_channels, T) -> code (N, residual_channels, T)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        k = cfg.kernel_fine
        self.net = nn.Sequential(
            _conv(cfg.latent_channels, cfg.residual_hidden, k),
            nn.LeakyReLU(cfg.negative_slope),
            _conv(cfg.residual_hidden, cfg.residual_channels, k),
        )

    def forward(self, r: Tensor) -> Tensor:
        return self.net(r)


class ResidualSynthesisTransform(nn.Module):
    """Code -> reconstructed residual, bounded to [-1/2, 1/2] by a scaled tanh."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        k = cfg.kernel_fine
        self.net = nn.Sequential(
            _conv(cfg.residual_channels, cfg.residual_hidden, k),
            nn.LeakyReLU(cfg.negative_slope),
            _conv(cfg.residual_hidden, cfg.latent_channels, k),
        )

    def forward(self, code: Tensor) -> Tensor:
        return 0.5 * torch.tanh(self.net(code))


def seeded_init(module: nn.Module, seed: int) -> None:
    """Re-draw all conv weights with variance-scaled uniforms from one seed.

    Matches the spread of the default initializer but is reproducible and
    independent of construction order and global RNG state.
    """
    generator = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
            fan_in = m.weight.shape[1] * m.kernel_size[0]
            bound = fan_in ** -0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


def parameter_count(params) -> int:
    """Total scalar weight count of a module, or of an iterable of tensors."""
    if isinstance(params, nn.Module):
        params = params.parameters()
    return sum(int(p.numel()) for p in params)
