"""Command-line interface.

Codec operations (encode/decode/eval/info) run in-process by default; with
``--server`` (or the NTWC_SERVER environment variable) they act as a thin
client against a running service instead, so one loaded model can serve many
invocations.  Training and RD sweeps are batch jobs and always run locally.

Machine-readable output: single-line JSON on stdout for encode/decode/eval/
info, CSV for rd-curve.  Exit codes: 0 success, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import base64
import csv
import json
import os
import sys
from pathlib import Path

from . import __version__
from .errors import CodecError

SERVER_ENV = "NTWC_SERVER"
MODEL_DIR_ENV = "NTWC_MODEL_DIR"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntwc",
        description="Neural transform waveform codec for 16 kHz speech.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec on a WAV corpus")
    p.add_argument("config", help="key = value training config file")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("encode", help="encode a WAV file to a container")
    p.add_argument("wav")
    p.add_argument("model")
    p.add_argument("out")
    p.add_argument("--server", default=os.environ.get(SERVER_ENV))

    p = sub.add_parser("decode", help="decode a container to a WAV file")
    p.add_argument("container")
    p.add_argument("model")
    p.add_argument("out")
    p.add_argument("--server", default=os.environ.get(SERVER_ENV))

    p = sub.add_parser("eval", help="compare a test WAV against a reference")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--scorer", help="external scorer command template; "
                   "{ref} and {test} are substituted and its stdout is "
                   "attached to the report")
    p.add_argument("--server", default=os.environ.get(SERVER_ENV))

    p = sub.add_parser("info", help="print container header and rate info")
    p.add_argument("container")
    p.add_argument("--server", default=os.environ.get(SERVER_ENV))

    p = sub.add_parser("rd-curve", help="rate-distortion table over models")
    p.add_argument("model_dir")
    p.add_argument("corpus")
    p.add_argument("--csv", required=True, dest="csv_out")

    p = sub.add_parser("make-corpus", help="write the seeded synthetic corpus")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--duration", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="run the codec HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8330)
    p.add_argument("--model-dir", default=os.environ.get(MODEL_DIR_ENV))

    return parser


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


def _post(server: str, route: str, payload: dict) -> dict:
    import httpx

    response = httpx.post(server.rstrip("/") + route, json=payload, timeout=600.0)
    if response.status_code != 200:
        detail = response.json().get("detail", response.text)
        raise CodecError(str(detail))
    return response.json()


def cmd_train(args) -> int:
    from .training import parse_config_file, train

    config = parse_config_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    result = train(config, resume_from=args.resume, quiet=not args.verbose)
    _emit({"checkpoint": str(result.checkpoint_path),
           "steps": config.steps,
           "final_total": result.history[-1]["total"] if result.history else None})
    return 0


def cmd_encode(args) -> int:
    if args.server:
        wav_b64 = base64.b64encode(Path(args.wav).read_bytes()).decode()
        reply = _post(args.server, "/encode",
                      {"wav_b64": wav_b64, "model": args.model})
        Path(args.out).write_bytes(base64.b64decode(reply["container_b64"]))
        _emit(reply["rate"])
        return 0
    from .container import encode_file

    report = encode_file(args.wav, args.model, args.out)
    _emit({"kbps": report.kbps,
           "coded_bits_y": report.coded_bits_y,
           "coded_bits_z": report.coded_bits_z,
           "coded_bits_yr": report.coded_bits_yr,
           "estimated_bits": report.total_bits,
           "num_frames": report.num_frames})
    return 0


def cmd_decode(args) -> int:
    if args.server:
        container_b64 = base64.b64encode(Path(args.container).read_bytes()).decode()
        reply = _post(args.server, "/decode",
                      {"container_b64": container_b64, "model": args.model})
        Path(args.out).write_bytes(base64.b64decode(reply["wav_b64"]))
        _emit({"samples": reply["num_samples"],
               "duration_seconds": reply["duration_seconds"]})
        return 0
    from .container import decode_file

    waveform = decode_file(args.container, args.model, args.out)
    _emit({"samples": len(waveform), "duration_seconds": waveform.duration})
    return 0


def cmd_eval(args) -> int:
    if args.server:
        reply = _post(args.server, "/eval", {
            "reference_wav_b64": base64.b64encode(Path(args.reference).read_bytes()).decode(),
            "test_wav_b64": base64.b64encode(Path(args.test).read_bytes()).decode(),
        })
        _emit(reply)
        return 0
    from . import dsp
    from .evaluate import mel_cepstral_distortion, snr

    reference = dsp.load_pcm(args.reference)
    test = dsp.load_pcm(args.test)
    payload = {"snr_db": snr(reference, test),
               "mel_cepstral_distortion": mel_cepstral_distortion(reference, test)}
    if args.scorer:
        import subprocess

        command = args.scorer.format(ref=args.reference, test=args.test)
        proc = subprocess.run(command, shell=True, capture_output=True, text=True)
        payload["external_scorer"] = proc.stdout.strip()
        if proc.returncode != 0:
            raise CodecError(f"external scorer failed: {proc.stderr.strip()}")
    _emit(payload)
    return 0


def cmd_info(args) -> int:
    if args.server:
        container_b64 = base64.b64encode(Path(args.container).read_bytes()).decode()
        _emit(_post(args.server, "/info", {"container_b64": container_b64}))
        return 0
    from .evaluate import container_info

    _emit(container_info(Path(args.container).read_bytes()))
    return 0


def cmd_rd_curve(args) -> int:
    from . import dsp
    from .container import decode_container, encode_waveform
    from .evaluate import mel_cepstral_distortion, snr
    from .model import load_checkpoint

    model_paths = sorted(Path(args.model_dir).glob("*.ckpt")) + \
        sorted(Path(args.model_dir).glob("*.npz"))
    if not model_paths:
        raise CodecError(f"no checkpoints under {args.model_dir}")
    wavs = sorted(Path(args.corpus).glob("*.wav"))
    if not wavs:
        raise CodecError(f"no .wav files under {args.corpus}")

    rows = []
    for path in model_paths:
        model, meta, _ = load_checkpoint(path)
        total_bits = 0
        seconds = 0.0
        snrs, mcds = [], []
        for wav in wavs:
            reference = dsp.load_pcm(wav)
            data, report = encode_waveform(model, reference)
            decoded, _ = decode_container(model, data)
            total_bits += report.total_coded_bits
            seconds += report.num_frames * report.hop / report.sample_rate
            snrs.append(snr(reference, decoded))
            mcds.append(mel_cepstral_distortion(reference, decoded))
        lambda_mse = (meta.get("train_config", {}).get("weights", {})
                      .get("lambda_mse", ""))
        rows.append({
            "model": path.name,
            "lambda_mse": lambda_mse,
            "kbps": total_bits / seconds / 1000.0,
            "snr_db": sum(snrs) / len(snrs),
            "mel_cepstral_distortion": sum(mcds) / len(mcds),
        })
    rows.sort(key=lambda row: row["kbps"])
    with open(args.csv_out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "model", "lambda_mse", "kbps", "snr_db", "mel_cepstral_distortion"])
        writer.writeheader()
        writer.writerows(rows)
    _emit({"rows": len(rows), "csv": args.csv_out})
    return 0


def cmd_make_corpus(args) -> int:
    from .data import SyntheticCorpus

    corpus = SyntheticCorpus(seed=args.seed, count=args.count,
                             duration=args.duration)
    paths = corpus.write_wavs(args.out_dir)
    _emit({"files": len(paths), "dir": args.out_dir})
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    app = create_app(model_dir=args.model_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


_HANDLERS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "info": cmd_info,
    "rd-curve": cmd_rd_curve,
    "make-corpus": cmd_make_corpus,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (CodecError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
