"""Embedder and extractor networks, plus the model container file format.

The embedder is a U-Net over a 2x128x64 crop of the host STFT (bins 3..130,
frames 16..79): four stride-2 downsampling units to a 256x8x4 bottleneck,
message bits replicated 8x4 and concatenated, an embedding convolution, four
stride-2 upsampling units with skip connections (dropout on the two
bottommost), a final convolution over the concatenated input and topmost
features back to 2 channels, and re-insertion into the host STFT. The
extractor reads the 160 lowest bins of all 96 frames through three stride-2
convolutions, then a dense layer with a sigmoid.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import audio
from . import autodiff as ad
from .audio import DEFAULT_STFT, SEGMENT_SAMPLES, StftConfig
from .autodiff import ParamStore, Tape, Tensor

CONTAINER_MAGIC = b"NMWM"
CONTAINER_VERSION = 1
SPEC_FEATURE_SCALE = 1.0 / 64.0  # spectral values -> feature-map scale


class ContainerError(Exception):
    """Unreadable or incompatible model container file."""


@dataclass(frozen=True)
class NetworkConfig:
    message_bits: int = 256
    encoder_channels: tuple = (32, 64, 128, 256)
    extractor_channels: tuple = (32, 64, 128)
    top_channels: int = 16
    crop_rows: tuple = (3, 130)        # inclusive bin range of the watermark
    crop_frames: tuple = (16, 79)      # inclusive frame range
    extractor_rows: tuple = (0, 159)   # inclusive bin range seen by extraction
    dropout_levels: int = 2

    def __post_init__(self):
        rows = self.crop_rows[1] - self.crop_rows[0] + 1
        frames = self.crop_frames[1] - self.crop_frames[0] + 1
        down = 2 ** len(self.encoder_channels)
        if rows % down or frames % down:
            raise ValueError("crop size must be divisible by the total stride")
        if self.message_bits <= 0:
            raise ValueError("message_bits must be positive")

    @property
    def row_slice(self):
        return (self.crop_rows[0], self.crop_rows[1] + 1)

    @property
    def frame_slice(self):
        return (self.crop_frames[0], self.crop_frames[1] + 1)

    @property
    def extractor_row_slice(self):
        return (self.extractor_rows[0], self.extractor_rows[1] + 1)

    @property
    def bottleneck_hw(self):
        down = 2 ** len(self.encoder_channels)
        return ((self.crop_rows[1] - self.crop_rows[0] + 1) // down,
                (self.crop_frames[1] - self.crop_frames[0] + 1) // down)


def desk_config() -> NetworkConfig:
    """Scaled-down preset for CPU-sized training runs and tests."""
    return NetworkConfig(message_bits=64, encoder_channels=(8, 16, 32, 64),
                         extractor_channels=(8, 16, 32))


# ---------------------------------------------------------------------------
# parameter construction


def _kaiming_uniform(rng, shape, fan_in, slope=0.2):
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_conv(params, rng, name, c_in, c_out, bias, dtype):
    params.add(f"{name}.w", _kaiming_uniform(rng, (c_out, c_in, 5, 5), c_in * 25),
               dtype=dtype)
    if bias:
        params.add(f"{name}.b", np.zeros(c_out), dtype=dtype)


def _add_tconv(params, rng, name, c_in, c_out, dtype):
    params.add(f"{name}.w", _kaiming_uniform(rng, (c_in, c_out, 5, 5), c_in * 25),
               dtype=dtype)


def _add_bn(params, rng, name, c, dtype):
    params.add(f"{name}.scale", np.ones(c), dtype=dtype)
    params.add(f"{name}.shift", np.zeros(c), dtype=dtype)
    params.add(f"{name}.rmean", np.zeros(c), trainable=False, dtype=dtype)
    params.add(f"{name}.rvar", np.ones(c), trainable=False, dtype=dtype)


def build_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Initialize all embedder and extractor parameters in manifest order."""
    rng = np.random.default_rng(seed)
    params = ParamStore()
    enc = cfg.encoder_channels
    prev = 2
    for i, c in enumerate(enc, start=1):
        _add_conv(params, rng, f"emb.enc{i}", prev, c, bias=False, dtype=dtype)
        _add_bn(params, rng, f"emb.enc{i}.bn", c, dtype=dtype)
        prev = c
    bottleneck = enc[-1]
    _add_conv(params, rng, "emb.embed", bottleneck + cfg.message_bits, bottleneck,
              bias=True, dtype=dtype)
    dec_out = list(reversed((cfg.top_channels,) + enc[:-1]))  # c3, c2, c1, top
    prev = bottleneck
    for i, c in enumerate(dec_out, start=1):
        skip = enc[len(enc) - i]
        _add_tconv(params, rng, f"emb.dec{i}", skip + prev, c, dtype=dtype)
        _add_bn(params, rng, f"emb.dec{i}.bn", c, dtype=dtype)
        prev = c
    _add_conv(params, rng, "emb.final", 2 + cfg.top_channels, 2, bias=True,
              dtype=dtype)
    prev = 2
    for i, c in enumerate(cfg.extractor_channels, start=1):
        _add_conv(params, rng, f"ext.conv{i}", prev, c, bias=False, dtype=dtype)
        _add_bn(params, rng, f"ext.conv{i}.bn", c, dtype=dtype)
        prev = c
    rows = cfg.extractor_rows[1] - cfg.extractor_rows[0] + 1
    frames = 96
    down = 2 ** len(cfg.extractor_channels)
    feat = cfg.extractor_channels[-1] * int(np.ceil(rows / down)) * (frames // down)
    params.add("ext.dense.w", _kaiming_uniform(rng, (cfg.message_bits, feat), feat),
               dtype=dtype)
    params.add("ext.dense.b", np.zeros(cfg.message_bits), dtype=dtype)
    return params


def architecture_manifest(cfg: NetworkConfig) -> str:
    """Layer/shape listing used as a golden conformance artifact."""
    params = build_params(cfg, seed=0)
    lines = [f"message_bits {cfg.message_bits}"]
    for name, t in params.items():
        kind = "param" if params.is_trainable(name) else "state"
        dims = "x".join(str(d) for d in t.data.shape)
        lines.append(f"{kind} {name} {dims}")
    lines.append(f"trainable_parameters {params.num_parameters()}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# forward passes


def _down_unit(tape, params, name, h, mode):
    h = ad.conv2d(tape, h, params[f"{name}.w"], stride=2)
    h = ad.batch_norm2d(tape, h, params[f"{name}.bn.scale"],
                        params[f"{name}.bn.shift"], params[f"{name}.bn.rmean"],
                        params[f"{name}.bn.rvar"], mode)
    return ad.leaky_relu(tape, h, 0.2)


def embed_batch(tape: Tape | None, params: ParamStore, cfg: NetworkConfig,
                host_specs: Tensor, messages: np.ndarray, mode: str,
                rng=None, stft_cfg: StftConfig = DEFAULT_STFT, trace=None):
    """Embed one message per segment into a batch of host spectrograms.

    host_specs is a (B, 2, F, T) tensor, messages a (B, message_bits) 0/1
    array. Returns (marked signal tensor (B, L), full output spectrogram
    tensor (B, 2, F, T)).
    """
    if messages.shape != (host_specs.shape[0], cfg.message_bits):
        raise ValueError(f"messages must be (batch, {cfg.message_bits})")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for dropout")

    def note(label, t):
        if trace is not None:
            trace.append((label, t.shape))

    x0 = ad.crop2d(tape, host_specs, cfg.row_slice, cfg.frame_slice)
    note("crop", x0)
    # Fixed conditioning constant: raw spectral values reach ~2^6 while the
    # normalized feature maps are O(1); without it the final convolution's
    # skip path drowns the decoder features.
    x0s = ad.scale(tape, x0, SPEC_FEATURE_SCALE)
    skips = []
    h = x0s
    for i in range(1, len(cfg.encoder_channels) + 1):
        h = _down_unit(tape, params, f"emb.enc{i}", h, mode)
        note(f"enc{i}", h)
        skips.append(h)

    bh, bw = cfg.bottleneck_hw
    msg_maps = np.repeat(
        messages.astype(h.data.dtype)[:, :, None, None], bh * bw,
        axis=2).reshape(-1, cfg.message_bits, bh, bw)
    h = ad.concat_channels(tape, h, Tensor(msg_maps))
    note("message_concat", h)
    h = ad.conv2d(tape, h, params["emb.embed.w"], params["emb.embed.b"], stride=1)
    h = ad.leaky_relu(tape, h, 0.2)
    note("embed_unit", h)

    n_dec = len(cfg.encoder_channels)
    for i in range(1, n_dec + 1):
        h = ad.concat_channels(tape, skips[n_dec - i], h)
        h = ad.conv_transpose2d(tape, h, params[f"emb.dec{i}.w"], stride=2)
        h = ad.batch_norm2d(tape, h, params[f"emb.dec{i}.bn.scale"],
                            params[f"emb.dec{i}.bn.shift"],
                            params[f"emb.dec{i}.bn.rmean"],
                            params[f"emb.dec{i}.bn.rvar"], mode)
        h = ad.relu(tape, h)
        if i <= cfg.dropout_levels:
            h = ad.dropout(tape, h, 0.5, mode, rng)
        note(f"dec{i}", h)

    h = ad.concat_channels(tape, x0s, h)
    patch = ad.conv2d(tape, h, params["emb.final.w"], params["emb.final.b"],
                      stride=1)
    note("patch", patch)
    # Residual insertion: a zero patch leaves the host untouched.
    marked_crop = ad.add(tape, x0, patch)
    marked_spec = ad.insert_patch(tape, host_specs, marked_crop, cfg.row_slice,
                                  cfg.frame_slice)
    marked = ad.istft_bridge(tape, marked_spec, stft_cfg)
    return marked, marked_spec


def extract_from_spec(tape: Tape | None, params: ParamStore, cfg: NetworkConfig,
                      spec: Tensor, mode: str, trace=None):
    """Extractor head over a (B, 2, F, T) spectrogram tensor -> (B, L) probs."""
    h = ad.crop2d(tape, spec, cfg.extractor_row_slice, (0, spec.shape[-1]))
    if trace is not None:
        trace.append(("extractor_input", h.shape))
    h = ad.scale(tape, h, SPEC_FEATURE_SCALE)
    for i in range(1, len(cfg.extractor_channels) + 1):
        h = _down_unit(tape, params, f"ext.conv{i}", h, mode)
        if trace is not None:
            trace.append((f"ext{i}", h.shape))
    flat = ad.reshape(tape, h, (h.shape[0], -1))
    logits = ad.dense(tape, flat, params["ext.dense.w"], params["ext.dense.b"])
    probs = ad.sigmoid(tape, logits)
    if trace is not None:
        trace.append(("probabilities", probs.shape))
    return probs


def extract_batch(tape: Tape | None, params: ParamStore, cfg: NetworkConfig,
                  marked: Tensor, mode: str,
                  stft_cfg: StftConfig = DEFAULT_STFT):
    spec = ad.stft_bridge(tape, marked, stft_cfg)
    return extract_from_spec(tape, params, cfg, spec, mode)


def embed_forward(host: np.ndarray, message: np.ndarray, params: ParamStore,
                  cfg: NetworkConfig, mode: str = "eval", rng=None,
                  stft_cfg: StftConfig = DEFAULT_STFT):
    """Single-segment embedding; returns (marked segment, output spectrogram)."""
    host = np.asarray(host, dtype=np.float64)
    if host.shape != (SEGMENT_SAMPLES,):
        raise ValueError(f"segment must have {SEGMENT_SAMPLES} samples")
    spec = Tensor(audio.stft(host, stft_cfg).astype(np.float32)[None])
    msgs = np.asarray(message).reshape(1, -1)
    marked, full = embed_batch(None, params, cfg, spec, msgs, mode, rng, stft_cfg)
    return marked.data[0].astype(np.float64), full.data[0].astype(np.float64)


def extract_forward(marked: np.ndarray, params: ParamStore, cfg: NetworkConfig,
                    mode: str = "eval",
                    stft_cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Single-segment extraction; returns message probabilities."""
    marked = np.asarray(marked, dtype=np.float64)
    if marked.shape != (SEGMENT_SAMPLES,):
        raise ValueError(f"segment must have {SEGMENT_SAMPLES} samples")
    t = Tensor(marked.astype(np.float32)[None])
    probs = extract_batch(None, params, cfg, t, mode, stft_cfg)
    return probs.data[0].astype(np.float64)


def round_message(soft: np.ndarray) -> np.ndarray:
    """Probabilities -> bits; exact 0.5 rounds to 1."""
    return (np.asarray(soft, dtype=np.float64) >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# message formatting


def hex_to_bits(text: str, message_bits: int) -> np.ndarray:
    expected = message_bits // 4
    if len(text) != expected:
        raise ValueError(f"message must be {expected} hex chars for "
                         f"{message_bits} bits, got {len(text)}")
    try:
        value = int(text, 16)
    except ValueError:
        raise ValueError(f"invalid hex message {text!r}") from None
    bits = [(value >> (message_bits - 1 - i)) & 1 for i in range(message_bits)]
    return np.array(bits, dtype=np.uint8)


def bits_to_hex(bits: np.ndarray) -> str:
    bits = np.asarray(bits).ravel()
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return format(value, f"0{bits.size // 4}x")


# ---------------------------------------------------------------------------
# container file format
#
# magic "NMWM", version u16, header-length u32, text header (key=value
# lines), then per tensor: name (u16 length + utf-8), rank u8, dims u32...,
# float32 little-endian data; finally a crc32 of all tensor record bytes.


def _header_text(cfg: NetworkConfig, provenance: str) -> str:
    items = {
        "message_bits": cfg.message_bits,
        "encoder_channels": ",".join(map(str, cfg.encoder_channels)),
        "extractor_channels": ",".join(map(str, cfg.extractor_channels)),
        "top_channels": cfg.top_channels,
        "crop_rows": ",".join(map(str, cfg.crop_rows)),
        "crop_frames": ",".join(map(str, cfg.crop_frames)),
        "extractor_rows": ",".join(map(str, cfg.extractor_rows)),
        "dropout_levels": cfg.dropout_levels,
        "dft_length": DEFAULT_STFT.dft_length,
        "hop": DEFAULT_STFT.hop,
        "provenance": provenance.replace("\n", " "),
    }
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _parse_header(text: str) -> tuple[NetworkConfig, str]:
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key] = value
    try:
        def ints(key):
            return tuple(int(v) for v in fields[key].split(","))
        cfg = NetworkConfig(
            message_bits=int(fields["message_bits"]),
            encoder_channels=ints("encoder_channels"),
            extractor_channels=ints("extractor_channels"),
            top_channels=int(fields["top_channels"]),
            crop_rows=ints("crop_rows"),
            crop_frames=ints("crop_frames"),
            extractor_rows=ints("extractor_rows"),
            dropout_levels=int(fields["dropout_levels"]),
        )
    except (KeyError, ValueError) as exc:
        raise ContainerError(f"invalid container header: {exc}") from exc
    return cfg, fields.get("provenance", "")


def save_model(params: ParamStore, cfg: NetworkConfig, path,
               provenance: str = "") -> None:
    header = _header_text(cfg, provenance).encode("utf-8")
    payload = io.BytesIO()
    for name, t in params.items():
        data = np.ascontiguousarray(t.data, dtype="<f4")
        encoded = name.encode("utf-8")
        payload.write(struct.pack("<H", len(encoded)))
        payload.write(encoded)
        payload.write(struct.pack("<B", data.ndim))
        payload.write(struct.pack(f"<{data.ndim}I", *data.shape))
        payload.write(data.tobytes())
    body = payload.getvalue()
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<HI", CONTAINER_VERSION, len(header)))
        fh.write(header)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_model(path, expected_message_bits: int | None = None):
    """Read a container; returns (params, cfg). Raises ContainerError on a
    bad magic/version, truncation, checksum failure, or shape disagreement."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != CONTAINER_MAGIC:
        raise ContainerError(f"{path}: not a model container (bad magic)")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != CONTAINER_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    pos = 10
    if pos + header_len + 4 > len(blob):
        raise ContainerError(f"{path}: truncated container header")
    cfg, _ = _parse_header(blob[pos:pos + header_len].decode("utf-8"))
    if expected_message_bits is not None and cfg.message_bits != expected_message_bits:
        raise ContainerError(
            f"{path}: container holds a {cfg.message_bits}-bit model, "
            f"expected {expected_message_bits}-bit")
    pos += header_len
    body = blob[pos:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise ContainerError(f"{path}: payload checksum mismatch")

    params = build_params(cfg, seed=0)
    values = {}
    cur = 0
    try:
        for name, t in params.items():
            (name_len,) = struct.unpack_from("<H", body, cur)
            cur += 2
            got_name = body[cur:cur + name_len].decode("utf-8")
            cur += name_len
            (rank,) = struct.unpack_from("<B", body, cur)
            cur += 1
            dims = struct.unpack_from(f"<{rank}I", body, cur)
            cur += 4 * rank
            if got_name != name or dims != t.data.shape:
                raise ContainerError(
                    f"{path}: tensor {got_name} {dims} disagrees with the "
                    f"declared architecture ({name} {t.data.shape})")
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=cur)
            cur += 4 * count
            values[name] = arr.reshape(dims)
    except (struct.error, ValueError) as exc:
        raise ContainerError(f"{path}: truncated container") from exc
    if cur != len(body):
        raise ContainerError(f"{path}: trailing bytes in container payload")
    params.load_values(values)
    return params, cfg
