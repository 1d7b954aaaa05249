"""Rate-perception-distortion objective and the optimization loop.

The loss couples three entropy-coded streams with three distortion terms:

* rate: codelength of the noise-proxied latent under the conditional
  Gaussian, of the hyperlatent and of the residual code under their
  factorized densities;
* waveform MSE and a multi-scale mel-cepstral perceptual term between the
  input frame and its reconstruction;
* residual MSE between the rounding residual and its decoded estimate,
  which reaches only the residual transforms: the residual input is a
  stop-gradient rounding of the latent, so the waveform analysis transform
  is optimized independently of the residual branch.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import dsp
from .data import SyntheticCorpus, load_corpus_frames
from .entropy import LIKELIHOOD_FLOOR, bits_from_likelihood, gaussian_box_likelihood, noise_proxy, quantize
from .errors import TrainingDiverged
from .model import SpeechCodec, load_checkpoint, save_checkpoint
from .transforms import CodecConfig

LOSS_CSV_COLUMNS = ["step", "rate_bits_y", "rate_bits_z", "rate_bits_yr",
                    "mse", "perc", "total"]


@dataclass(frozen=True)
class LossWeights:
    lambda_mse: float = 4000.0
    lambda_res: float = 4000.0
    lambda_perc: float = 400.0

    def __post_init__(self):
        if min(self.lambda_mse, self.lambda_res, self.lambda_perc) < 0:
            raise ValueError("loss weights must be nonnegative")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.lambda_mse * factor, self.lambda_res * factor,
                           self.lambda_perc * factor)


@dataclass
class LossBreakdown:
    """Per-frame loss components; tensors stay differentiable."""

    bits_y: Tensor
    bits_z: Tensor
    bits_yr: Tensor
    mse: Tensor
    res_mse: Tensor
    perc: Tensor
    total: Tensor

    @property
    def rate_bits(self) -> Tensor:
        return self.bits_y + self.bits_z + self.bits_yr

    def floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach())
                for k in ("bits_y", "bits_z", "bits_yr", "mse", "res_mse",
                          "perc", "total")}

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.floats().values())

    def non_finite_components(self) -> list[str]:
        return [k for k, v in self.floats().items() if not np.isfinite(v)]


@dataclass
class TrainConfig:
    steps: int = 200_000
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    residual_enabled: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    # "synthetic" generates the seeded corpus; anything else is a directory
    # of 16 kHz mono WAV files.
    dataset: str = "synthetic"
    synthetic_count: int = 48
    synthetic_duration: float = 0.5
    checkpoint_every: int = 1000
    out_dir: str = "runs/default"
    residual_train_mode: str = "round"  # or "proxy"
    model: CodecConfig = field(default_factory=CodecConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.residual_train_mode not in ("round", "proxy"):
            raise ValueError("residual_train_mode must be 'round' or 'proxy'")
        if self.weights.lambda_mse == 0 and self.weights.lambda_perc == 0:
            raise ValueError("at least one of lambda_mse/lambda_perc must be > 0")
        if self.residual_enabled and self.weights.lambda_res == 0:
            raise ValueError("residual models need lambda_res > 0")
        if not self.residual_enabled and self.weights.lambda_res != 0:
            self.weights = dataclasses.replace(self.weights, lambda_res=0.0)
        if self.model.residual_enabled != self.residual_enabled:
            self.model = dataclasses.replace(
                self.model, residual_enabled=self.residual_enabled)


def perceptual_loss(x: Tensor, x_hat: Tensor,
                    cfg: dsp.MelCepstrumConfig | None = None) -> Tensor:
    """Sum over scales of squared mel-cepstrum differences, mean over frames."""
    cfg = cfg or dsp.MelCepstrumConfig()
    n = x.shape[0]
    total = x.new_zeros(())
    for k in range(cfg.num_scales):
        ref = dsp.mel_cepstrum_sliding(x, cfg, k)
        test = dsp.mel_cepstrum_sliding(x_hat, cfg, k)
        total = total + (ref - test).square().sum()
    return total / n


def rd_loss(x: Tensor, model: SpeechCodec, weights: LossWeights,
            generator: torch.Generator,
            mel_cfg: dsp.MelCepstrumConfig | None = None,
            residual_mode: str = "round") -> LossBreakdown:
    """Differentiable training objective on a batch of frames (N, 1, L).

    Quantizers are replaced by fresh uniform noise; rates are in bits per
    frame.  Raises if any component goes non-finite, naming the culprit.
    """
    n = x.shape[0]
    y = model.analysis(x)
    z = model.hyper_analysis(y)
    z_tilde = noise_proxy(z, generator)
    sigma = model.hyper_synthesis(z_tilde)
    y_tilde = noise_proxy(y, generator)

    bits_y = bits_from_likelihood(
        gaussian_box_likelihood(y_tilde, sigma), LIKELIHOOD_FLOOR) / n
    bits_z = bits_from_likelihood(
        model.z_density.likelihood(z_tilde), LIKELIHOOD_FLOOR) / n

    zero = x.new_zeros(())
    bits_yr, res_mse = zero, zero
    decoder_in = y_tilde
    if model.residual_enabled:
        y_frozen = y.detach()
        if residual_mode == "round":
            r = y_frozen - quantize(y_frozen)
        else:
            r = (y_frozen - noise_proxy(y_frozen, generator)).detach()
        yr = model.residual_analysis(r)
        yr_tilde = noise_proxy(yr, generator)
        bits_yr = bits_from_likelihood(
            model.yr_density.likelihood(yr_tilde), LIKELIHOOD_FLOOR) / n
        r_hat = model.residual_synthesis(yr_tilde)
        res_mse = (r - r_hat).square().sum() / n
        decoder_in = y_tilde + r_hat

    x_hat = model.synthesis_net(decoder_in)
    mse = (x - x_hat).square().sum() / n
    perc = perceptual_loss(x, x_hat, mel_cfg) if weights.lambda_perc > 0 else zero

    total = (bits_y + bits_z + bits_yr
             + weights.lambda_mse * mse
             + weights.lambda_res * res_mse
             + weights.lambda_perc * perc)
    breakdown = LossBreakdown(bits_y=bits_y, bits_z=bits_z, bits_yr=bits_yr,
                              mse=mse, res_mse=res_mse, perc=perc, total=total)
    if not breakdown.is_finite():
        raise TrainingDiverged(
            f"non-finite loss components: {breakdown.non_finite_components()}")
    return breakdown


@dataclass
class TrainResult:
    checkpoint_path: Path
    history: list[dict]
    model: SpeechCodec
    config: TrainConfig


def _corpus_frames(config: TrainConfig) -> Tensor:
    if config.dataset == "synthetic":
        corpus = SyntheticCorpus(seed=config.seed, count=config.synthetic_count,
                                 duration=config.synthetic_duration)
        return corpus.frames(config.model.frame_length, config.model.overlap)
    return load_corpus_frames(config.dataset, config.model.frame_length,
                              config.model.overlap)


def _optimizer_arrays(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    state = optimizer.state_dict()
    arrays = {"param_groups": np.frombuffer(
        json.dumps(state["param_groups"]).encode(), dtype=np.uint8)}
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            arrays[f"opt.{idx}.{key}"] = (
                value.detach().cpu().numpy() if isinstance(value, Tensor)
                else np.asarray(value))
    return arrays


def _load_optimizer_arrays(optimizer: torch.optim.Optimizer,
                           arrays: dict[str, np.ndarray]) -> None:
    groups = json.loads(bytes(arrays["param_groups"]).decode())
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        if not key.startswith("opt."):
            continue
        _, idx, name = key.split(".", 2)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(value.copy())
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def train(config: TrainConfig, corpus_frames: Tensor | None = None,
          resume_from: str | Path | None = None,
          log_every: int = 100, quiet: bool = True) -> TrainResult:
    """Adaptive-moment descent on the full parameter set.

    Deterministic for a fixed seed: runs single-threaded and drives all
    sampling and noise from one checkpointed generator, so resuming from a
    checkpoint continues the identical trajectory.
    """
    torch.set_num_threads(1)
    frames = corpus_frames if corpus_frames is not None else _corpus_frames(config)
    if frames.shape[0] == 0:
        raise ValueError("empty training corpus")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "model.ckpt"
    csv_path = out_dir / "loss_history.csv"

    generator = torch.Generator().manual_seed(config.seed)
    model = SpeechCodec(config.model, seed=config.seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    start_step = 0
    history: list[dict] = []

    if resume_from is not None:
        model, meta, train_state = load_checkpoint(resume_from)
        model.train()
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        if train_state:
            _load_optimizer_arrays(optimizer, train_state)
            generator.set_state(torch.from_numpy(train_state["generator"].copy()))
        start_step = meta.get("step", 0)

    def save(step: int) -> None:
        train_state = _optimizer_arrays(optimizer)
        train_state["generator"] = generator.get_state().numpy()
        save_checkpoint(model, ckpt_path, step=step, train_state=train_state,
                        metadata={"train_config": _config_to_dict(config)})
        _write_history_csv(csv_path, history)

    num_frames = frames.shape[0]
    for step in range(start_step + 1, config.steps + 1):
        idx = torch.randint(0, num_frames, (config.batch_size,), generator=generator)
        batch = frames[idx]
        try:
            loss = rd_loss(batch, model, config.weights, generator,
                           residual_mode=config.residual_train_mode)
        except TrainingDiverged:
            save(step - 1)
            raise
        optimizer.zero_grad()
        loss.total.backward()
        optimizer.step()
        record = loss.floats()
        history.append({
            "step": step,
            "rate_bits_y": record["bits_y"],
            "rate_bits_z": record["bits_z"],
            "rate_bits_yr": record["bits_yr"],
            "mse": record["mse"],
            "perc": record["perc"],
            "total": record["total"],
        })
        if not quiet and step % log_every == 0:
            print(f"step {step}: total={record['total']:.3f} "
                  f"rate={record['bits_y'] + record['bits_z'] + record['bits_yr']:.1f} "
                  f"mse={record['mse']:.5f}")
        if step % config.checkpoint_every == 0:
            save(step)
    save(config.steps)
    model.eval()
    return TrainResult(checkpoint_path=ckpt_path, history=history, model=model,
                       config=config)


def _write_history_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(history)


def _config_to_dict(config: TrainConfig) -> dict:
    data = dataclasses.asdict(config)
    return data


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    if "weights" in data:
        data["weights"] = LossWeights(**data["weights"])
    if "model" in data:
        data["model"] = CodecConfig.from_dict(data["model"])
    return TrainConfig(**data)


def parse_config_file(path: str | Path) -> TrainConfig:
    """Parse a ``key = value`` training config; dotted keys reach subobjects.

    Example::

        steps = 2000
        weights.lambda_mse = 8000
        model.base_channels = 16
    """
    flat: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        flat[key] = value
    nested: dict = {}
    for key, value in flat.items():
        target = nested
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = _parse_value(value)
    return config_from_dict(nested)


def _parse_value(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if "," in text:
        return tuple(_parse_value(v.strip()) for v in text.split(","))
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average used for loss-trend checks."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) < window:
        window = max(len(arr), 1)
    kernel = np.ones(window) / window
    return np.convolve(arr, kernel, mode="valid")


def sweep_lambdas(base_config: TrainConfig, grid,
                  corpus_frames: Tensor | None = None,
                  eval_seed: int = 777) -> list[dict]:
    """Train one model per lambda_mse value and measure its operating point.

    Returns one row per grid entry with the measured kbps (coded bits over
    hop-based duration), waveform MSE and perceptual loss on a held-out
    seeded corpus.
    """
    from .container import encode_waveform, decode_container

    grid = list(grid)
    if not grid:
        raise ValueError("lambda grid must be nonempty")
    base = base_config.weights
    rows = []
    for lam in grid:
        factor = lam / base.lambda_mse
        weights = base.scaled(factor)
        config = dataclasses.replace(
            base_config, weights=weights,
            out_dir=str(Path(base_config.out_dir) / f"lambda_{lam:g}"))
        result = train(config, corpus_frames=corpus_frames)
        row = {"lambda_mse": lam,
               "checkpoint": str(result.checkpoint_path),
               **measure_operating_point(result.model, eval_seed)}
        rows.append(row)
    return rows


def measure_operating_point(model: SpeechCodec, eval_seed: int = 777,
                            count: int = 8, duration: float = 0.5) -> dict:
    """Coded kbps plus distortion metrics on a held-out synthetic corpus."""
    from .container import decode_container, encode_waveform

    corpus = SyntheticCorpus(seed=eval_seed, count=count, duration=duration)
    total_bits = 0
    total_seconds = 0.0
    mse_terms = []
    perc_terms = []
    for waveform in corpus.utterances:
        data, report = encode_waveform(model, waveform)
        decoded, _ = decode_container(model, data)
        total_bits += report.total_coded_bits
        total_seconds += report.num_frames * report.hop / report.sample_rate
        ref = dsp.frame_signal(waveform, model.config.frame_length,
                               model.config.overlap).data
        test = dsp.frame_signal(decoded, model.config.frame_length,
                                model.config.overlap).data
        mse_terms.append(float((ref - test).square().sum() / ref.shape[0]))
        perc_terms.append(float(perceptual_loss(ref, test)))
    return {
        "kbps": total_bits / total_seconds / 1000.0,
        "mse": float(np.mean(mse_terms)),
        "perc": float(np.mean(perc_terms)),
    }
