"""Command-line front end: nmr analysis, embed, extract, train, eval,
selfcheck.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
import time

import numpy as np

from . import audio, autodiff as ad, losses, models, psycho, training
from .audio import SEGMENT_SAMPLES
from .autodiff import Tape, Tensor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _load_segments(path, pad_policy="zero-pad-last"):
    signal, _ = audio.load_wav(path)
    segments = audio.segment_signal(signal, pad_policy)
    if not segments:
        raise DataError(f"{path}: no audio samples")
    return signal, segments


# ---------------------------------------------------------------------------
# commands


def cmd_nmr(args):
    host_signal, host_segments = _load_segments(args.host)
    marked_signal, marked_segments = _load_segments(args.marked)
    if host_signal.size != marked_signal.size:
        raise DataError(
            f"length mismatch: {args.host} has {host_signal.size} samples, "
            f"{args.marked} has {marked_signal.size}")
    tables = psycho.build_ear_tables()
    csv_fh = open(args.csv, "w", newline="") if args.csv else None

    def one(i):
        host_spec = audio.stft(host_segments[i])
        marked_spec = audio.stft(marked_segments[i])
        return psycho.nmr(host_spec, marked_spec, tables)

    try:
        if args.threads > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                values = list(pool.map(one, range(len(host_segments))))
        else:
            values = [one(i) for i in range(len(host_segments))]
        frames_per_segment = audio.DEFAULT_STFT.num_frames(SEGMENT_SAMPLES)
        for i, value in enumerate(values):
            print(f"segment={i} nmr={value:.9e} nmr_db={psycho.nmr_db(value):.3f}")
            if csv_fh:
                psycho.write_pattern_csv(
                    csv_fh, audio.stft(host_segments[i]),
                    audio.stft(marked_segments[i]), tables,
                    frame_offset=i * frames_per_segment)
        mean = float(np.mean(values))
        print(f"mean nmr={mean:.9e} nmr_db={psycho.nmr_db(mean):.3f}")
    finally:
        if csv_fh:
            csv_fh.close()
    return EXIT_OK


def cmd_embed(args):
    params, cfg = models.load_model(args.model)
    try:
        message = models.hex_to_bits(args.message, cfg.message_bits)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    signal, segments = _load_segments(args.wav_in, pad_policy="zero-pad-last")
    marked = []
    for seg in segments:
        out, _ = models.embed_forward(seg, message, params, cfg)
        marked.append(out)
    full = np.concatenate(marked)[:signal.size]
    audio.write_wav(args.wav_out, full)
    print(f"embedded {cfg.message_bits} bits into {len(segments)} segment(s) "
          f"-> {args.wav_out}")
    return EXIT_OK


def cmd_extract(args):
    params, cfg = models.load_model(args.model)
    _, segments = _load_segments(args.wav_in, pad_policy="zero-pad-last")
    soft = np.zeros(cfg.message_bits)
    for seg in segments:
        soft += models.extract_forward(seg, params, cfg)
    soft /= len(segments)
    bits = models.round_message(soft)
    confidence = float(np.mean(np.abs(soft - 0.5) * 2.0))
    print(f"message={models.bits_to_hex(bits)}")
    print(f"confidence={confidence:.4f}")
    return EXIT_OK


_CONFIG_SCHEMA = {
    "data": {"train_dir", "val_dir", "test_dir"},
    "model": {"message_bits", "preset"},
    "training": {"mode", "final_alpha", "max_epochs", "patience", "lr",
                 "batch_size", "seed"},
    "output": {"checkpoint_dir", "log", "model_out"},
}


def _read_train_config(path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise DataError(f"cannot read config file {path}")
    flat = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise UsageError(f"{path}: unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in _CONFIG_SCHEMA[section]:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            flat[f"{section}.{key}"] = value
    for section, keys in _CONFIG_SCHEMA.items():
        for key in keys:
            env = os.environ.get(f"NMWM_{section.upper()}_{key.upper()}")
            if env is not None:
                flat[f"{section}.{key}"] = env
    return flat


def cmd_train(args):
    flat = _read_train_config(args.config)
    train_dir = flat.get("data.train_dir")
    val_dir = flat.get("data.val_dir")
    if not train_dir or not val_dir:
        raise UsageError("config must set data.train_dir and data.val_dir")

    preset = flat.get("model.preset", "full")
    if preset == "desk":
        net_cfg = models.desk_config()
    elif preset == "full":
        net_cfg = models.NetworkConfig()
    else:
        raise UsageError(f"unknown model preset {preset!r}")
    if "model.message_bits" in flat:
        bits = int(flat["model.message_bits"])
        if bits != net_cfg.message_bits:
            net_cfg = models.NetworkConfig(message_bits=bits) \
                if preset == "full" else models.desk_config()

    try:
        cfg = training.TrainingConfig(
            mode=flat.get("training.mode", "nmr"),
            final_alpha=float(flat.get("training.final_alpha", 0.3)),
            max_epochs=int(flat.get("training.max_epochs", 30)),
            patience=int(flat.get("training.patience", 2)),
            lr=float(flat.get("training.lr", 1e-3)),
            batch_size=int(flat.get("training.batch_size", 16)),
            seed=int(flat.get("training.seed", args.seed)),
            train_dir=train_dir, val_dir=val_dir,
            test_dir=flat.get("data.test_dir"),
            checkpoint_dir=flat.get("output.checkpoint_dir"),
            log_path=flat.get("output.log"),
        )
    except ValueError as exc:
        raise UsageError(f"bad training config: {exc}") from exc

    tables = psycho.build_ear_tables()
    print(f"loading training corpus from {train_dir}")
    train_corpus = training.Corpus.from_wav_dir(train_dir, tables)
    print(f"loading validation corpus from {val_dir}")
    val_corpus = training.Corpus.from_wav_dir(val_dir, tables)
    print(f"training {net_cfg.message_bits}-bit {cfg.mode} model "
          f"({len(train_corpus)} train / {len(val_corpus)} val segments)")
    result = training.train(cfg, net_cfg, train_corpus, val_corpus)
    for row in result.log:
        print(training._log_line(row))
    out_path = flat.get("output.model_out", "model.nmwm")
    models.save_model(result.params, net_cfg, out_path,
                      provenance=f"mode={cfg.mode} best_epoch={result.best_epoch}")
    print(f"best epoch {result.best_epoch} -> {out_path}")
    return EXIT_OK


def cmd_eval(args):
    params, cfg = models.load_model(args.model)
    tables = psycho.build_ear_tables()
    corpus = training.Corpus.from_wav_dir(args.dataset, tables)
    report = training.evaluate(params, cfg, corpus, seed=args.seed,
                               threads=args.threads)
    name = os.path.basename(args.model)
    print("model BER SNR_dB NMR_dB")
    snr = "inf" if math.isinf(report.snr_db) else f"{report.snr_db:.2f}"
    print(f"{name} {report.ber:.5f} {snr} {report.nmr_db:.2f}")
    return EXIT_OK


def cmd_selfcheck(args):
    started = time.time()
    failures = []

    def check(name, ok, detail=""):
        status = "ok" if ok else "FAIL"
        print(f"selfcheck {name}: {status}{' ' + detail if detail else ''}")
        if not ok:
            failures.append(name)

    tables = psycho.build_ear_tables()
    check("critical-band-count", tables.num_bands == 109,
          f"got {tables.num_bands}")
    cols = tables.band_map.sum(axis=0)
    in_band = (tables.bin_hz >= psycho.BAND_MIN_HZ) & \
              (tables.bin_hz <= psycho.BAND_MAX_HZ)
    check("band-map-column-sums",
          bool(np.all(np.abs(cols[in_band] - 1.0) < 1e-9)))

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal(SEGMENT_SAMPLES)
        worst = max(worst, float(np.max(np.abs(
            audio.istft(audio.stft(x)) - x))))
    check("stft-round-trip", worst < 1e-6, f"max dev {worst:.2e}")

    host = audio.stft(training.make_desk_corpus(1, seed=args.seed)[0])
    marked = host + 1e-4 * rng.standard_normal(host.shape)
    grad = psycho.nmr_gradient(host, marked, tables)
    coords = rng.integers(0, host.size, size=8)
    numeric = ad.numeric_grad(
        lambda m: psycho.nmr(host, m.reshape(host.shape), tables),
        [marked.ravel()], 0, coords, step=1e-6)
    rel = ad.relative_error(grad.ravel()[coords], numeric)
    check("nmr-gradient", rel < 1e-5, f"rel err {rel:.2e}")

    w = Tensor(rng.standard_normal((4, 3, 5, 5)), requires_grad=True, dtype=np.float64)
    xin = rng.standard_normal((2, 3, 12, 10))
    proj = rng.standard_normal((2, 4, 6, 5))

    def conv_loss(wv):
        t = Tape()
        out = ad.conv2d(t, Tensor(xin), Tensor(wv.reshape(w.shape)), stride=2)
        return float((out.data * proj).sum())

    tape = Tape()
    out = ad.conv2d(tape, Tensor(xin), w, stride=2)
    loss = ad.attach_loss(tape, float((out.data * proj).sum()), [(out, proj)])
    ad.backward(tape, loss)
    coords = rng.integers(0, w.data.size, size=8)
    numeric = ad.numeric_grad(conv_loss, [w.data.ravel()], 0, coords)
    rel = ad.relative_error(w.grad.ravel()[coords], numeric)
    check("conv2d-gradient", rel < 1e-6, f"rel err {rel:.2e}")

    net_cfg = models.desk_config()
    params = models.build_params(net_cfg, seed=args.seed)
    corpus = training.Corpus(training.make_desk_corpus(20, seed=args.seed),
                             tables)
    report = training.evaluate(params, net_cfg, corpus, seed=args.seed)
    check("untrained-null-ber", abs(report.ber - 0.5) < 0.15,
          f"ber {report.ber:.3f}")

    print(f"selfcheck finished in {time.time() - started:.1f}s")
    if failures:
        print(f"FAILED: {', '.join(failures)}")
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nmwm",
        description="Psychoacoustic (noise-to-mask) audio watermarking tools")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1,
                        help="segment-level parallelism (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("nmr", help="noise-to-mask ratio between two WAVs")
    p.add_argument("--host", required=True)
    p.add_argument("--marked", required=True)
    p.add_argument("--csv", help="export (frame, band, pitch, mask, noise) rows")
    p.set_defaults(func=cmd_nmr)

    p = sub.add_parser("embed", help="embed a message into a WAV")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="wav_in", required=True)
    p.add_argument("--message", required=True, help="hex, message_bits/4 chars")
    p.add_argument("--out", dest="wav_out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover a message from a marked WAV")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="wav_in", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="BER/SNR/NMR of a model over a WAV directory")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="run built-in numeric sanity checks")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, audio.AudioError, models.ContainerError,
            training.CorpusError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
