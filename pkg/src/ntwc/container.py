"""On-disk bitstream container and the deployable encode/decode pipelines.

Layout (all little-endian):

* header: magic ``NTWC``, version u8, flags u8 (bit0 = residual present),
  model hash 8 bytes, sample_rate u32, frame_length u16, overlap u16,
  num_frames u32, original_length u64, coder precision u8, tail-mass
  exponent u8 (tail_mass = 2**-e);
* per frame: unsigned LEB128 lengths of the z / y / y_r payloads followed by
  the three payloads in that order.

Frames are coded independently, so packets can be decoded (or lost) in
isolation.  The scale field for coding the latent always comes from the
hyper decoder applied to the hard-quantized hyperlatent, then snapped up to
a fixed log-spaced scale grid, so encoder and decoder index the same
precomputed CDF table.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .entropy import (
    DEFAULT_TAIL_MASS,
    RateReport,
    bits_from_likelihood,
    build_factorized_cdf,
    build_gaussian_cdf,
    build_scale_table,
    gaussian_box_likelihood,
    quantize,
    scale_indices,
)
from .errors import ContainerFormatError, ModelMismatchError
from .model import SpeechCodec, model_hash_bytes, resolve_model
from .rangecoder import CdfTable, SymbolStream, decode_symbols, encode_symbols

MAGIC = b"NTWC"
VERSION = 1
FLAG_RESIDUAL = 0x01

_HEADER_FMT = "<4sBB8sIHHIQBB"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

DEFAULT_PRECISION = 16
DEFAULT_TAIL_MASS_EXP = 8


@dataclass
class ContainerHeader:
    flags: int
    model_hash: bytes
    sample_rate: int
    frame_length: int
    overlap: int
    num_frames: int
    original_length: int
    precision: int = DEFAULT_PRECISION
    tail_mass_exp: int = DEFAULT_TAIL_MASS_EXP
    version: int = VERSION

    @property
    def residual(self) -> bool:
        return bool(self.flags & FLAG_RESIDUAL)

    @property
    def hop(self) -> int:
        return self.frame_length - self.overlap

    @property
    def tail_mass(self) -> float:
        return 2.0 ** -self.tail_mass_exp

    def pack(self) -> bytes:
        return struct.pack(
            _HEADER_FMT, MAGIC, self.version, self.flags, self.model_hash,
            self.sample_rate, self.frame_length, self.overlap, self.num_frames,
            self.original_length, self.precision, self.tail_mass_exp)

    @classmethod
    def unpack(cls, data: bytes) -> "ContainerHeader":
        if len(data) < HEADER_SIZE:
            raise ContainerFormatError("container shorter than header")
        magic, version, flags, mhash, rate, length, overlap, frames, orig, prec, tme = \
            struct.unpack_from(_HEADER_FMT, data)
        if magic != MAGIC:
            raise ContainerFormatError("bad magic; not an NTWC container")
        if version != VERSION:
            raise ContainerFormatError(f"unsupported container version {version}")
        if length <= overlap:
            raise ContainerFormatError("frame_length must exceed overlap")
        return cls(flags=flags, model_hash=mhash, sample_rate=rate,
                   frame_length=length, overlap=overlap, num_frames=frames,
                   original_length=orig, precision=prec, tail_mass_exp=tme,
                   version=version)


def write_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint must be nonnegative")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        out.append(byte | (0x80 if value else 0))
        if not value:
            return bytes(out)


def read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise ContainerFormatError("truncated varint")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise ContainerFormatError("varint too long")


class CodecTables:
    """Precomputed CDF tables shared by all frames of one model.

    The latent uses one Gaussian table per scale-grid level; the hyperlatent
    and residual code use one factorized table per channel.
    """

    def __init__(self, model: SpeechCodec, precision: int = DEFAULT_PRECISION,
                 tail_mass: float = DEFAULT_TAIL_MASS):
        self.precision = precision
        self.tail_mass = tail_mass
        self.scale_grid = build_scale_table()
        self.y_tables = [build_gaussian_cdf(s, precision, tail_mass)
                         for s in self.scale_grid]
        self.z_tables = [build_factorized_cdf(model.z_density, ch, precision)
                         for ch in range(model.config.hyper_latent_channels)]
        self.yr_tables: list[CdfTable] = []
        if model.residual_enabled:
            self.yr_tables = [build_factorized_cdf(model.yr_density, ch, precision)
                              for ch in range(model.config.residual_channels)]


_TABLE_CACHE: dict[tuple[int, int, float], CodecTables] = {}


def tables_for(model: SpeechCodec, precision: int = DEFAULT_PRECISION,
               tail_mass: float = DEFAULT_TAIL_MASS) -> CodecTables:
    key = (id(model), precision, tail_mass)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = CodecTables(model, precision, tail_mass)
    return _TABLE_CACHE[key]


def _channel_ids(channels: int, steps: int) -> list[int]:
    return np.repeat(np.arange(channels), steps).tolist()


def encode_waveform(model: SpeechCodec, waveform: dsp.Waveform,
                    precision: int = DEFAULT_PRECISION,
                    tail_mass_exp: int = DEFAULT_TAIL_MASS_EXP) -> tuple[bytes, RateReport]:
    """Encode a waveform to container bytes; also reports estimated/coded bits."""
    cfg = model.config
    if waveform.sample_rate != cfg.sample_rate:
        raise ContainerFormatError(
            f"model expects {cfg.sample_rate} Hz, got {waveform.sample_rate}")
    model.eval()
    tables = tables_for(model, precision, 2.0 ** -tail_mass_exp)
    frames = dsp.frame_signal(waveform, cfg.frame_length, cfg.overlap)
    num_frames = frames.num_frames

    with torch.no_grad():
        y = model.analysis(frames.data)
        z = model.hyper_analysis(y)
        z_bar = quantize(z)
        sigma = model.hyper_synthesis(z_bar)
        y_bar = quantize(y)
        if model.residual_enabled:
            r = y - y_bar
            yr = model.residual_analysis(r)
            yr_bar = quantize(yr)

    sigma_idx = scale_indices(sigma, tables.scale_grid)
    sigma_snapped = torch.from_numpy(tables.scale_grid[sigma_idx])

    report = RateReport(num_frames=num_frames, hop=cfg.hop,
                        sample_rate=cfg.sample_rate)
    with torch.no_grad():
        report.bits_y = float(bits_from_likelihood(
            gaussian_box_likelihood(y_bar, sigma_snapped), floor=2.0 ** -32))
        report.bits_z = float(bits_from_likelihood(
            model.z_density.likelihood(z_bar), floor=2.0 ** -32))
        if model.residual_enabled:
            report.bits_yr = float(bits_from_likelihood(
                model.yr_density.likelihood(yr_bar), floor=2.0 ** -32))

    y_int = y_bar.numpy().astype(np.int64)
    z_int = z_bar.numpy().astype(np.int64)
    yr_int = yr_bar.numpy().astype(np.int64) if model.residual_enabled else None

    z_ids = _channel_ids(cfg.hyper_latent_channels, cfg.hyper_length)
    yr_ids = _channel_ids(cfg.residual_channels, cfg.latent_length)

    flags = FLAG_RESIDUAL if model.residual_enabled else 0
    header = ContainerHeader(
        flags=flags, model_hash=model_hash_bytes(model),
        sample_rate=cfg.sample_rate, frame_length=cfg.frame_length,
        overlap=cfg.overlap, num_frames=num_frames,
        original_length=len(waveform), precision=precision,
        tail_mass_exp=tail_mass_exp)

    chunks = [header.pack()]
    for i in range(num_frames):
        z_payload = encode_symbols(SymbolStream(
            z_int[i].ravel().tolist(), tables.z_tables, z_ids)).payload
        y_payload = encode_symbols(SymbolStream(
            y_int[i].ravel().tolist(), tables.y_tables,
            sigma_idx[i].ravel().tolist())).payload
        yr_payload = b""
        if yr_int is not None:
            yr_payload = encode_symbols(SymbolStream(
                yr_int[i].ravel().tolist(), tables.yr_tables, yr_ids)).payload
        chunks.append(write_varint(len(z_payload)))
        chunks.append(write_varint(len(y_payload)))
        chunks.append(write_varint(len(yr_payload)))
        chunks.extend((z_payload, y_payload, yr_payload))
        report.coded_bits_z += 8 * len(z_payload)
        report.coded_bits_y += 8 * len(y_payload)
        report.coded_bits_yr += 8 * len(yr_payload)
    return b"".join(chunks), report


def _split_packets(header: ContainerHeader, data: bytes):
    pos = HEADER_SIZE
    packets = []
    for i in range(header.num_frames):
        z_len, pos = read_varint(data, pos)
        y_len, pos = read_varint(data, pos)
        yr_len, pos = read_varint(data, pos)
        if header.residual and yr_len == 0:
            raise ContainerFormatError(
                f"frame {i}: residual flag set but y_r payload empty")
        if not header.residual and yr_len != 0:
            raise ContainerFormatError(
                f"frame {i}: y_r payload present without residual flag")
        end = pos + z_len + y_len + yr_len
        if end > len(data):
            raise ContainerFormatError(f"frame {i}: truncated packet")
        z_payload = data[pos : pos + z_len]
        y_payload = data[pos + z_len : pos + z_len + y_len]
        yr_payload = data[pos + z_len + y_len : end]
        packets.append((z_payload, y_payload, yr_payload))
        pos = end
    if pos != len(data):
        raise ContainerFormatError("trailing bytes after last frame packet")
    return packets


def decode_container(model: SpeechCodec, data: bytes) -> tuple[dsp.Waveform, ContainerHeader]:
    """Decode container bytes back to a waveform."""
    header = ContainerHeader.unpack(data)
    cfg = model.config
    if header.model_hash != model_hash_bytes(model):
        raise ModelMismatchError()
    if header.residual != model.residual_enabled:
        raise ContainerFormatError("residual flag does not match model")
    if (header.frame_length, header.overlap, header.sample_rate) != \
            (cfg.frame_length, cfg.overlap, cfg.sample_rate):
        raise ContainerFormatError("frame geometry does not match model")
    expected = dsp.num_frames_for(header.original_length, cfg.frame_length, cfg.overlap)
    if header.num_frames != expected:
        raise ContainerFormatError("num_frames inconsistent with original_length")

    model.eval()
    tables = tables_for(model, header.precision, header.tail_mass)
    packets = _split_packets(header, data)
    n = header.num_frames
    latents = decode_latents(model, tables, packets)
    y_bar, yr_bar = latents

    with torch.no_grad():
        residual = None
        if model.residual_enabled:
            residual = model.residual_synthesis(yr_bar)
        x_hat = model.synthesis(y_bar, residual)
    frames = dsp.FrameStack(data=x_hat, frame_length=cfg.frame_length,
                            overlap=cfg.overlap)
    waveform = dsp.overlap_add(frames, original_length=header.original_length)
    return waveform, header


def decode_latents(model: SpeechCodec, tables: CodecTables, packets):
    """Entropy-decode all frame packets to integer latent tensors."""
    cfg = model.config
    n = len(packets)
    z_ids = _channel_ids(cfg.hyper_latent_channels, cfg.hyper_length)
    yr_ids = _channel_ids(cfg.residual_channels, cfg.latent_length)
    z_count = cfg.hyper_latent_channels * cfg.hyper_length
    y_count = cfg.latent_channels * cfg.latent_length

    z_bar = np.empty((n, cfg.hyper_latent_channels, cfg.hyper_length), dtype=np.int64)
    for i, (z_payload, _, _) in enumerate(packets):
        z_bar[i] = np.reshape(
            decode_symbols(z_payload, tables.z_tables, z_count, z_ids),
            z_bar.shape[1:])
    z_tensor = torch.from_numpy(z_bar).to(torch.float64)
    with torch.no_grad():
        sigma = model.hyper_synthesis(z_tensor)
    sigma_idx = scale_indices(sigma, tables.scale_grid)

    y_bar = np.empty((n, cfg.latent_channels, cfg.latent_length), dtype=np.int64)
    for i, (_, y_payload, _) in enumerate(packets):
        y_bar[i] = np.reshape(
            decode_symbols(y_payload, tables.y_tables, y_count,
                           sigma_idx[i].ravel().tolist()),
            y_bar.shape[1:])

    yr_tensor = None
    if model.residual_enabled:
        yr_count = cfg.residual_channels * cfg.latent_length
        yr_bar = np.empty((n, cfg.residual_channels, cfg.latent_length), dtype=np.int64)
        for i, (_, _, yr_payload) in enumerate(packets):
            yr_bar[i] = np.reshape(
                decode_symbols(yr_payload, tables.yr_tables, yr_count, yr_ids),
                yr_bar.shape[1:])
        yr_tensor = torch.from_numpy(yr_bar).to(torch.float64)
    return torch.from_numpy(y_bar).to(torch.float64), yr_tensor


def stream_bits(data: bytes) -> tuple[ContainerHeader, int, int, int]:
    """Header plus per-stream payload bit totals (y, z, y_r)."""
    header = ContainerHeader.unpack(data)
    bits_y = bits_z = bits_yr = 0
    for z_payload, y_payload, yr_payload in _split_packets(header, data):
        bits_z += 8 * len(z_payload)
        bits_y += 8 * len(y_payload)
        bits_yr += 8 * len(yr_payload)
    return header, bits_y, bits_z, bits_yr


def encode_file(wav_path: str | Path, checkpoint, out_path: str | Path,
                precision: int = DEFAULT_PRECISION,
                tail_mass_exp: int = DEFAULT_TAIL_MASS_EXP) -> RateReport:
    model = resolve_model(checkpoint)
    waveform = dsp.load_pcm(wav_path)
    data, report = encode_waveform(model, waveform, precision, tail_mass_exp)
    Path(out_path).write_bytes(data)
    return report


def decode_file(container_path: str | Path, checkpoint,
                out_wav_path: str | Path) -> dsp.Waveform:
    model = resolve_model(checkpoint)
    data = Path(container_path).read_bytes()
    waveform, _ = decode_container(model, data)
    dsp.save_pcm(waveform, out_wav_path)
    return waveform
