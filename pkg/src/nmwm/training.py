"""Two-phase training schedules, early stopping, evaluation, model selection.

Each epoch draws a fresh random message for every segment, runs the joint
embed -> inverse STFT -> STFT -> extract pipeline in minibatches, and applies
Adam to the combined loss. MSE-family runs warm up for one epoch at alpha
0.5; NMR-family runs warm up for three epochs at alpha 1e-4, 1e-2, 1e-1.
Training stops early once the validation loss has not improved for two
consecutive epochs, and the checkpoint with the best validation loss wins.
"""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import audio, autodiff as ad, losses, models, psycho
from .audio import DEFAULT_STFT, SEGMENT_SAMPLES
from .autodiff import ParamStore, Tape, Tensor
from .losses import LossWeights
from .models import NetworkConfig

MSE_WARMUP = (0.5,)
NMR_WARMUP = (1e-4, 1e-2, 1e-1)


class CorpusError(Exception):
    pass


class NumericError(Exception):
    """Non-finite loss or a failed numeric sanity check."""


class SelectionError(Exception):
    """No candidate model satisfies the selection constraint."""


@dataclass
class TrainingConfig:
    mode: str = "nmr"                 # distortion term: "nmr" or "mse"
    final_alpha: float = 0.3
    warmup_alphas: tuple | None = None  # derived from mode when None
    max_epochs: int = 30
    patience: int = 2
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    train_dir: str | None = None
    val_dir: str | None = None
    test_dir: str | None = None
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.mode not in ("nmr", "mse"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not 0.0 <= self.final_alpha <= 1.0:
            raise ValueError("final_alpha must lie in [0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    @property
    def warmup(self) -> tuple:
        if self.warmup_alphas is not None:
            return tuple(self.warmup_alphas)
        return MSE_WARMUP if self.mode == "mse" else NMR_WARMUP

    def alpha_for_epoch(self, epoch: int) -> float:
        """Transparency weight for a 1-based epoch index."""
        warm = self.warmup
        if epoch < 1:
            raise ValueError("epochs are 1-based")
        if epoch <= len(warm):
            return float(warm[epoch - 1])
        return float(self.final_alpha)


@dataclass
class MetricsReport:
    ber: float
    snr_db: float
    nmr_db: float
    bce: float
    loss: float | None = None


def ber(predicted, target) -> float:
    """Fraction of mismatched bits."""
    p = np.asarray(predicted).ravel()
    t = np.asarray(target).ravel()
    if p.size != t.size:
        raise ValueError("message length mismatch")
    return float(np.mean(p != t))


class EarlyStopper:
    """Stops after `patience` consecutive epochs without a strictly better
    validation loss; remembers which epoch was best."""

    def __init__(self, patience: int = 2):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self._bad_streak = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch's validation loss; True means stop now."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self._bad_streak = 0
            return False
        self._bad_streak += 1
        return self._bad_streak >= self.patience


# ---------------------------------------------------------------------------
# corpora


class Corpus:
    """Segments plus cached per-segment masking patterns (host-only data)."""

    def __init__(self, segments: np.ndarray, tables: psycho.EarModelTables):
        segments = np.asarray(segments, dtype=np.float64)
        if segments.ndim != 2 or segments.shape[1] != SEGMENT_SAMPLES:
            raise CorpusError(f"segments must be (n, {SEGMENT_SAMPLES})")
        if segments.shape[0] == 0:
            raise CorpusError("empty corpus")
        self.segments = segments
        self.tables = tables
        self._masking = [None] * len(segments)
        self._host_specs = [None] * len(segments)

    def __len__(self):
        return self.segments.shape[0]

    @classmethod
    def from_wav_dir(cls, directory, tables, pad_policy="drop-last"):
        paths = sorted(
            os.path.join(directory, n) for n in os.listdir(directory)
            if n.lower().endswith(".wav"))
        if not paths:
            raise CorpusError(f"no .wav files under {directory}")
        segments = []
        for p in paths:
            signal, _ = audio.load_wav(p)
            segments.extend(audio.segment_signal(signal, pad_policy))
        if not segments:
            raise CorpusError(f"no full segments in {directory}")
        return cls(np.stack(segments), tables)

    def host_spec(self, i: int) -> np.ndarray:
        if self._host_specs[i] is None:
            self._host_specs[i] = audio.stft(self.segments[i])
        return self._host_specs[i]

    def masking(self, i: int) -> np.ndarray:
        if self._masking[i] is None:
            self._masking[i] = psycho.masking_patterns(self.host_spec(i),
                                                       self.tables)
        return self._masking[i]

    def precompute(self):
        for i in range(len(self)):
            self.masking(i)
        return self


def make_desk_corpus(n_segments: int, seed: int = 0,
                     peak: float = 0.5) -> np.ndarray:
    """Synthetic tone+noise segments so tests need no external dataset.

    Each segment mixes three to six sinusoids (100 Hz - 5 kHz, random
    amplitude envelopes) with band-limited noise, normalized to the given
    peak.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(SEGMENT_SAMPLES) / audio.SAMPLE_RATE
    out = np.empty((n_segments, SEGMENT_SAMPLES))
    for i in range(n_segments):
        x = np.zeros(SEGMENT_SAMPLES)
        for _ in range(rng.integers(3, 7)):
            freq = rng.uniform(100.0, 5000.0)
            amp = rng.uniform(0.1, 1.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            env_rate = rng.uniform(0.5, 4.0)
            env = 0.55 + 0.45 * np.sin(2.0 * np.pi * env_rate * t
                                       + rng.uniform(0.0, 2.0 * np.pi))
            x += amp * env * np.cos(2.0 * np.pi * freq * t + phase)
        noise = rng.standard_normal(SEGMENT_SAMPLES)
        spec = np.fft.rfft(noise)
        cutoff = rng.uniform(2000.0, 8000.0)
        freqs = np.fft.rfftfreq(SEGMENT_SAMPLES, 1.0 / audio.SAMPLE_RATE)
        spec *= 1.0 / (1.0 + (freqs / cutoff) ** 4)
        x += rng.uniform(0.05, 0.3) * np.fft.irfft(spec, n=SEGMENT_SAMPLES)
        out[i] = x * (peak / np.max(np.abs(x)))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ParamStore
    net_cfg: NetworkConfig
    log: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


def _seed_list(seed) -> list:
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    return [int(seed)]


def _draw_messages(seed, epoch: int, purpose: str, count: int, bits: int):
    tag = zlib.crc32(purpose.encode("ascii"))
    rng = np.random.default_rng(_seed_list(seed) + [epoch, tag])
    return rng.integers(0, 2, size=(count, bits), dtype=np.int64)


def _batch_loss_and_grads(batch_idx, corpus, specs32, probs_data, messages,
                          weights, mode):
    """Per-item combined losses; returns (mean value, mean bce, seed grads)."""
    b = len(batch_idx)
    grad_spec = np.zeros_like(specs32)
    grad_probs = np.zeros_like(probs_data, dtype=np.float64)
    total = 0.0
    total_bce = 0.0
    for j, idx in enumerate(batch_idx):
        value, g_marked, g_pred = losses.combined_loss(
            corpus.host_spec(idx), specs32[j].astype(np.float64),
            probs_data[j], messages[idx], weights, mode,
            tables=corpus.tables, masking=corpus.masking(idx))
        total += value
        total_bce += losses.bce(probs_data[j], messages[idx])
        grad_spec[j] = (g_marked / b).astype(specs32.dtype)
        grad_probs[j] = g_pred / b
    return total / b, total_bce / b, grad_spec, grad_probs


def _log_line(row: dict) -> str:
    return " ".join(f"{k}={row[k]}" for k in row)


def train(cfg: TrainingConfig, net_cfg: NetworkConfig, train_corpus: Corpus,
          val_corpus: Corpus, params: ParamStore | None = None,
          stft_cfg=DEFAULT_STFT) -> TrainResult:
    """Run the full schedule; returns the best-validation-loss checkpoint.

    The validation loss is always computed at the final transparency weight
    so that epochs remain comparable across the warmup.
    """
    if params is None:
        params = models.build_params(net_cfg, seed=cfg.seed)
    n_train = len(train_corpus)
    log_fh = open(cfg.log_path, "w") if cfg.log_path else None
    if cfg.checkpoint_dir:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)

    stopper = EarlyStopper(cfg.patience)
    best_params = params.clone()
    result = TrainResult(params=best_params, net_cfg=net_cfg)
    final_weights = LossWeights(cfg.final_alpha)

    try:
        for epoch in range(1, cfg.max_epochs + 1):
            alpha = cfg.alpha_for_epoch(epoch)
            weights = LossWeights(alpha)
            order = np.random.default_rng([cfg.seed, epoch, 0xD0]).permutation(n_train)
            messages = _draw_messages(cfg.seed, epoch, "train", n_train,
                                      net_cfg.message_bits)
            drop_rng = np.random.default_rng([cfg.seed, epoch, 0xD1])

            epoch_loss = 0.0
            epoch_bce = 0.0
            n_batches = 0
            for start in range(0, n_train, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                if batch.size < 2:
                    continue  # train-mode batch norm needs >= 2 samples
                specs = np.stack([train_corpus.host_spec(i) for i in batch])
                host_t = Tensor(specs.astype(np.float32))
                msgs = messages[batch]

                tape = Tape()
                marked, _ = models.embed_batch(tape, params, net_cfg, host_t,
                                               msgs, "train", drop_rng, stft_cfg)
                marked_spec = ad.stft_bridge(tape, marked, stft_cfg)
                probs = models.extract_from_spec(tape, params, net_cfg,
                                                 marked_spec, "train")
                value, bce_value, g_spec, g_probs = _batch_loss_and_grads(
                    batch, train_corpus, marked_spec.data, probs.data,
                    messages, weights, cfg.mode)
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite training loss at epoch {epoch} "
                        f"(alpha={alpha}): {value}")
                loss = ad.attach_loss(tape, value,
                                      [(marked_spec, g_spec), (probs, g_probs)])
                params.zero_grad()
                ad.backward(tape, loss)
                params.adam_step(lr=cfg.lr)
                epoch_loss += value
                epoch_bce += bce_value
                n_batches += 1

            if n_batches == 0:
                raise CorpusError("corpus smaller than one usable batch")
            report = evaluate(params, net_cfg, val_corpus,
                              seed=(cfg.seed, epoch, 0xE0),
                              weights=final_weights, mode=cfg.mode,
                              stft_cfg=stft_cfg)
            row = {
                "epoch": epoch,
                "alpha": alpha,
                "train_loss": epoch_loss / n_batches,
                "train_bce": epoch_bce / n_batches,
                "val_loss": report.loss,
                "val_ber": report.ber,
                "val_snr_db": report.snr_db,
                "val_nmr_db": report.nmr_db,
            }
            result.log.append(row)
            if log_fh:
                print(_log_line(row), file=log_fh, flush=True)
            if cfg.checkpoint_dir:
                models.save_model(
                    params, net_cfg,
                    os.path.join(cfg.checkpoint_dir, f"ckpt_epoch{epoch:03d}.nmwm"),
                    provenance=f"epoch {epoch} mode {cfg.mode} alpha {alpha}")

            improved = report.loss < stopper.best
            stop = stopper.update(epoch, report.loss)
            if improved:
                best_params = params.clone()
            result.stopped_epoch = epoch
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()

    result.params = best_params
    result.best_epoch = stopper.best_epoch
    return result


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params: ParamStore, net_cfg: NetworkConfig, corpus: Corpus,
             seed=0, weights: LossWeights | None = None, mode: str = "nmr",
             batch_size: int = 16, threads: int = 1,
             stft_cfg=DEFAULT_STFT) -> MetricsReport:
    """Embed a fresh random message in every segment, extract it at exact
    alignment, and report mean BER / SNR / NMR (and the combined loss when
    weights are given)."""
    n = len(corpus)
    messages = _draw_messages(seed, 0, "eval", n, net_cfg.message_bits)

    bit_errors = 0
    total_bits = 0
    snrs = []
    nmr_values = []
    bce_values = []
    mse_values = []

    def segment_metrics(i, marked_i, probs_i):
        host_spec = corpus.host_spec(i)
        marked_spec = audio.stft(marked_i)
        predicted = models.round_message(probs_i)
        nmr_lin = psycho.nmr(host_spec, marked_spec, corpus.tables,
                             masking=corpus.masking(i))
        return (int(np.sum(predicted != messages[i])),
                audio.snr_db(corpus.segments[i], marked_i),
                nmr_lin,
                losses.bce(probs_i, messages[i]),
                losses.mse_spec(host_spec, marked_spec))

    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        specs = np.stack([corpus.host_spec(i) for i in idx]).astype(np.float32)
        host_t = Tensor(specs)
        marked, _ = models.embed_batch(None, params, net_cfg, host_t,
                                       messages[idx], "eval", None, stft_cfg)
        probs = models.extract_batch(None, params, net_cfg, marked, "eval",
                                     stft_cfg)
        rows = list(zip(idx, marked.data.astype(np.float64), probs.data))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                metrics = list(pool.map(lambda r: segment_metrics(*r), rows))
        else:
            metrics = [segment_metrics(*r) for r in rows]
        for errs, snr, nmr_lin, bce_v, mse_v in metrics:
            bit_errors += errs
            total_bits += net_cfg.message_bits
            snrs.append(snr)
            nmr_values.append(nmr_lin)
            bce_values.append(bce_v)
            mse_values.append(mse_v)

    finite_snrs = [s for s in snrs if math.isfinite(s)]
    mean_snr = float(np.mean(finite_snrs)) if finite_snrs else math.inf
    mean_nmr = float(np.mean(nmr_values))
    mean_bce = float(np.mean(bce_values))
    loss = None
    if weights is not None:
        distortion = float(np.mean(mse_values)) if mode == "mse" else mean_nmr
        loss = weights.alpha * distortion + (1.0 - weights.alpha) * mean_bce
    return MetricsReport(ber=bit_errors / total_bits, snr_db=mean_snr,
                         nmr_db=psycho.nmr_db(mean_nmr), bce=mean_bce,
                         loss=loss)


def select_model(candidates, mode: str, reference_ber: float | None = None):
    """Pick per the two family rules: MSE -> best SNR; NMR -> best (lowest)
    NMR among candidates whose BER does not exceed the MSE reference."""
    if not candidates:
        raise SelectionError("no candidates")
    if mode == "mse":
        return max(candidates, key=lambda pair: pair[1].snr_db)
    if mode == "nmr":
        if reference_ber is None:
            raise ValueError("nmr selection needs the reference BER")
        eligible = [pair for pair in candidates if pair[1].ber <= reference_ber]
        if not eligible:
            raise SelectionError(
                f"no candidate has BER <= reference {reference_ber}")
        return min(eligible, key=lambda pair: pair[1].nmr_db)
    raise ValueError(f"unknown selection mode {mode!r}")
