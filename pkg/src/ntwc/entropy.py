"""Quantization, likelihood models, and rate estimation.

Two probability models feed both the training loss and the entropy coder:

* a conditional zero-mean Gaussian, convolved with the unit-width rounding
  box, whose scale is predicted per element by the hyper decoder;
* a learned per-channel factorized density (monotone cumulative network)
  for streams with no side information.

``build_quantized_cdf`` bridges either model to the integer coder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .rangecoder import MAX_PRECISION, MIN_PRECISION, CdfTable

SIGMA_MIN = 1e-6
DEFAULT_TAIL_MASS = 2.0 ** -8
# Likelihoods are floored inside the loss so the rate term keeps bounded
# gradients on silence and dead channels.
LIKELIHOOD_FLOOR = 2.0 ** -15

_INV_SQRT2 = 2.0 ** -0.5


def quantize(values: Tensor) -> Tensor:
    """Round to nearest integer, ties away from zero."""
    if not torch.isfinite(values).all():
        raise ValueError("quantize requires finite input")
    return torch.sign(values) * torch.floor(values.abs() + 0.5)


def noise_proxy(values: Tensor, generator: torch.Generator) -> Tensor:
    """Differentiable stand-in for rounding: add fresh U(-1/2, 1/2) noise."""
    offset = torch.empty_like(values).uniform_(-0.5, 0.5, generator=generator)
    # uniform_ samples the half-open interval; keep the offset strictly inside.
    offset = torch.where(offset <= -0.5, torch.zeros_like(offset), offset)
    return values + offset


def gaussian_box_likelihood(values, scale) -> Tensor:
    """Probability that a zero-mean Gaussian lands within +-1/2 of ``values``.

    Evaluates Phi((v+1/2)/scale) - Phi((v-1/2)/scale) through scaled
    complementary error functions, which stays accurate far in the tails.
    Accepts tensors or floats; broadcasts.
    """
    v = torch.as_tensor(values, dtype=torch.float64)
    s = torch.as_tensor(scale, dtype=torch.float64)
    if (s < SIGMA_MIN).any():
        raise ValueError(f"scale must be >= {SIGMA_MIN}")
    a = v.abs()
    denom = s * _INV_SQRT2
    return 0.5 * (torch.erfc((a - 0.5) / denom) - torch.erfc((a + 0.5) / denom))


class FactorizedDensity(nn.Module):
    """Per-channel learned density with a monotone cumulative network.

    Each channel owns a small stack of softplus-constrained matrix layers
    with tanh-gated nonlinearities, so the cumulative c(v) = sigmoid(logits)
    is nondecreasing in v with limits 0 and 1.  Likelihood of a unit bin is
    c(v + 1/2) - c(v - 1/2).
    """

    def __init__(self, channels: int, hidden=(3, 3, 3), init_scale: float = 10.0,
                 tail_mass: float = DEFAULT_TAIL_MASS):
        super().__init__()
        self.channels = channels
        self.tail_mass = float(tail_mass)
        dims = (1, *hidden, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._gates = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self._matrices.append(nn.Parameter(
                torch.full((channels, dims[i + 1], dims[i]), init, dtype=torch.float64)))
            self._biases.append(nn.Parameter(
                torch.zeros(channels, dims[i + 1], 1, dtype=torch.float64)))
            if i < len(dims) - 2:
                self._gates.append(nn.Parameter(
                    torch.zeros(channels, dims[i + 1], 1, dtype=torch.float64)))

    def _logits(self, v: Tensor) -> Tensor:
        # v: (channels, 1, n) -> logits of the cumulative at v
        x = v
        for i, matrix in enumerate(self._matrices):
            x = torch.nn.functional.softplus(matrix) @ x + self._biases[i]
            if i < len(self._gates):
                x = x + torch.tanh(self._gates[i]) * torch.tanh(x)
        return x

    def cumulative(self, v: Tensor) -> Tensor:
        """c(v) per channel; v shaped (channels, n) or (channels,)."""
        v2 = torch.as_tensor(v, dtype=torch.float64)
        squeeze = v2.dim() == 1
        if squeeze:
            v2 = v2.unsqueeze(-1)
        out = torch.sigmoid(self._logits(v2.unsqueeze(1)).squeeze(1))
        return out.squeeze(-1) if squeeze else out

    def likelihood(self, values: Tensor) -> Tensor:
        """Bin probability of each element; values shaped (N, channels, n)."""
        if values.shape[-2] != self.channels:
            raise ValueError(
                f"expected {self.channels} channels, got {values.shape[-2]}")
        shape = values.shape
        v = values.transpose(-2, 0).reshape(self.channels, 1, -1)
        lower = self._logits(v - 0.5)
        upper = self._logits(v + 0.5)
        # Evaluate both sigmoids on whichever tail is flatter to avoid
        # catastrophic cancellation for large |v|.
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return lik.reshape(self.channels, *shape[:-2], shape[-1]).transpose(0, -2).reshape(shape)

    @torch.no_grad()
    def quantile_bound(self) -> int:
        """Smallest q with total mass of integers in [-q, q] >= 1 - tail_mass."""
        target = 1.0 - self.tail_mass
        for q in range(1, 1 << 20):
            lo = self.cumulative(torch.full((self.channels,), -q - 0.5))
            hi = self.cumulative(torch.full((self.channels,), q + 0.5))
            if ((hi - lo) >= target).all():
                return q
        raise RuntimeError("density tail did not close; model is degenerate")

    @torch.no_grad()
    def channel_support(self, channel: int) -> tuple[int, int]:
        """Integer support [v_min, v_max] leaving <= tail_mass/2 per side."""
        half = self.tail_mass / 2.0

        def cum(x: float) -> float:
            return float(self.cumulative(
                torch.full((self.channels,), float(x)))[channel])

        v_min = 0
        while cum(v_min - 0.5) > half and v_min > -(1 << 20):
            v_min -= 1
        v_max = 0
        while cum(v_max + 0.5) < 1.0 - half and v_max < (1 << 20):
            v_max += 1
        return v_min, v_max


@dataclass
class RateReport:
    """Estimated and actually-coded bit counts for the three streams."""

    bits_y: float = 0.0
    bits_z: float = 0.0
    bits_yr: float = 0.0
    coded_bits_y: int = 0
    coded_bits_z: int = 0
    coded_bits_yr: int = 0
    num_frames: int = 0
    hop: int = 480
    sample_rate: int = 16000

    @property
    def total_bits(self) -> float:
        return self.bits_y + self.bits_z + self.bits_yr

    @property
    def total_coded_bits(self) -> int:
        return self.coded_bits_y + self.coded_bits_z + self.coded_bits_yr

    def _kbps(self, bits: float) -> float:
        seconds = self.num_frames * self.hop / self.sample_rate
        if seconds <= 0:
            return 0.0
        return bits / seconds / 1000.0

    @property
    def kbps_estimated(self) -> float:
        return self._kbps(self.total_bits)

    @property
    def kbps(self) -> float:
        """Measured rate when coded sizes are known, else the estimate."""
        if self.total_coded_bits > 0:
            return self._kbps(self.total_coded_bits)
        return self.kbps_estimated


def bits_from_likelihood(likelihood: Tensor, floor: float = 0.0) -> Tensor:
    """Total information content, in bits, of a likelihood tensor."""
    if floor > 0.0:
        likelihood = torch.clamp(likelihood, min=floor)
    elif (likelihood <= 0).any():
        raise ValueError("zero likelihood; apply a floor before rating")
    return -torch.log2(likelihood).sum()


def estimate_rate(
    lik_y: Tensor,
    lik_z: Tensor,
    lik_yr: Tensor | None,
    num_frames: int,
    hop: int = 480,
    sample_rate: int = 16000,
    floor: float = 0.0,
) -> RateReport:
    """Sum per-stream codelengths and convert to kbps over hop-based duration."""
    return RateReport(
        bits_y=float(bits_from_likelihood(lik_y, floor)),
        bits_z=float(bits_from_likelihood(lik_z, floor)),
        bits_yr=float(bits_from_likelihood(lik_yr, floor)) if lik_yr is not None else 0.0,
        num_frames=num_frames,
        hop=hop,
        sample_rate=sample_rate,
    )


def quantize_pmf(pmf: np.ndarray, precision: int) -> np.ndarray:
    """Scale a pmf to integer counts summing to 2**precision, all >= 1."""
    total = 1 << precision
    n = len(pmf)
    if n > total:
        raise ValueError("more symbols than available counts")
    counts = np.maximum(np.rint(pmf / pmf.sum() * total).astype(np.int64), 1)
    # Repair the sum by nudging the largest entries; keeps every count >= 1.
    while counts.sum() != total:
        diff = total - int(counts.sum())
        idx = int(np.argmax(counts))
        step = diff if diff > 0 else max(diff, 1 - int(counts[idx]))
        if step == 0:
            raise RuntimeError("cannot normalize pmf counts")
        counts[idx] += step
    return counts


def _counts_to_table(counts: np.ndarray, offset: int, precision: int) -> CdfTable:
    cdf = np.concatenate(([0], np.cumsum(counts)))
    return CdfTable(cdf=tuple(int(c) for c in cdf), offset=offset, precision=precision)


def gaussian_support(sigma: float, tail_mass: float = DEFAULT_TAIL_MASS) -> tuple[int, int]:
    """Symmetric integer support keeping truncated mass <= tail_mass."""
    from scipy.stats import norm

    radius = int(math.ceil(sigma * float(norm.isf(tail_mass / 2.0)) - 0.5))
    radius = max(radius, 0)
    return -radius, radius


def build_gaussian_cdf(
    sigma: float,
    precision: int = MAX_PRECISION,
    tail_mass: float = DEFAULT_TAIL_MASS,
) -> CdfTable:
    """Quantized CDF for the box-convolved Gaussian plus an escape symbol."""
    if not MIN_PRECISION <= precision <= MAX_PRECISION:
        raise ValueError(f"precision must be in [{MIN_PRECISION}, {MAX_PRECISION}]")
    if sigma < SIGMA_MIN:
        raise ValueError(f"sigma must be >= {SIGMA_MIN}")
    v_min, v_max = gaussian_support(sigma, tail_mass)
    values = torch.arange(v_min, v_max + 1, dtype=torch.float64)
    pmf = gaussian_box_likelihood(values, sigma).numpy()
    escape = max(1.0 - pmf.sum(), 0.0)
    counts = quantize_pmf(np.append(pmf, escape), precision)
    return _counts_to_table(counts, v_min, precision)


def build_factorized_cdf(
    model: FactorizedDensity,
    channel: int,
    precision: int = MAX_PRECISION,
) -> CdfTable:
    """Quantized CDF for one channel of a factorized density, plus escape."""
    if not MIN_PRECISION <= precision <= MAX_PRECISION:
        raise ValueError(f"precision must be in [{MIN_PRECISION}, {MAX_PRECISION}]")
    v_min, v_max = model.channel_support(channel)
    with torch.no_grad():
        values = torch.arange(v_min, v_max + 1, dtype=torch.float64)
        grid = values.unsqueeze(0).expand(model.channels, -1)
        pmf = model.likelihood(grid)[channel].numpy()
    escape = max(1.0 - pmf.sum(), 0.0)
    counts = quantize_pmf(np.append(pmf, escape), precision)
    return _counts_to_table(counts, v_min, precision)


def build_scale_table(levels: int = 64, lo: float = 1e-4, hi: float = 256.0) -> np.ndarray:
    """Log-spaced grid of Gaussian scales used to index shared CDF tables.

    Coding quantizes each predicted scale up to the next grid value, so the
    encoder and decoder agree on one of ``levels`` precomputed tables instead
    of building a table per element.
    """
    return np.geomspace(lo, hi, levels)


def scale_indices(sigma: Tensor | np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the smallest table scale >= sigma (clamped to the grid)."""
    s = sigma.detach().cpu().numpy() if isinstance(sigma, Tensor) else np.asarray(sigma)
    return np.clip(np.searchsorted(table, s, side="left"), 0, len(table) - 1)
