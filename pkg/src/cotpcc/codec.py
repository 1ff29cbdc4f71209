"""Bit-exact bitstream coding of quantized latents with the factorized model."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .entropy import FactorizedModel, PROB_FLOOR, QuantizerConfig, quantize
from .nets import LatentCode
from .rangecoder import ArithmeticDecoder, ArithmeticEncoder

MAGIC = b"COTP"
VERSION = 1
INIT_FEATURE_SCALE = 16.0
TABLE_TOTAL = 1 << 16  # 16-bit fixed-point coder probabilities
SUPPORT_HALF_WIDTH = 4096  # symbols searched for model support
RAW_BITS = 32  # bypass width for out-of-support values

__all__ = [
    "EntropyModels",
    "Bitstream",
    "DecodedLatent",
    "DigestMismatchError",
    "BitstreamError",
    "encode_bitstream",
    "decode_bitstream",
    "model_digest",
]


class BitstreamError(ValueError):
    """Malformed or truncated bitstream."""


class DigestMismatchError(BitstreamError):
    """Bitstream was produced with a different entropy model."""


class EntropyModels(nn.Module):
    """Bundle of coding distributions: one shared model for coordinate
    residuals, one per feature channel, and a learned per-channel feature
    scale applied before quantization."""

    def __init__(self, latent_dim: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.coord = FactorizedModel(1)
        self.feat = FactorizedModel(latent_dim)
        # start well above the unit quantization step so feature detail
        # survives quantization before the rate term adapts the scales
        self.log_feature_scale = nn.Parameter(
            torch.full((latent_dim,), math.log(INIT_FEATURE_SCALE))
        )

    @property
    def feature_scales(self) -> torch.Tensor:
        return torch.exp(self.log_feature_scale)


def model_digest(models: EntropyModels, config: QuantizerConfig) -> bytes:
    h = hashlib.sha256()
    h.update(struct.pack("<dd", config.coord_step, config.feature_step))
    for name, tensor in sorted(models.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().to(torch.float64).numpy().tobytes())
    return h.digest()[:8]


@dataclass
class Bitstream:
    """Serialized compressed cloud: fixed header plus range-coded payloads."""

    n: int
    m: int
    d: int
    ratios: tuple[float, float, float]
    coord_step: float
    feature_scales: np.ndarray  # (d,) float32
    digest: bytes  # 8 bytes
    coord_payload: bytes
    feat_payload: bytes

    HEADER_FMT_FIXED = "<4sBIIH3ff"

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.coord_payload) + len(self.feat_payload))

    @property
    def header_bits(self) -> int:
        fixed = struct.calcsize(self.HEADER_FMT_FIXED) + 4 * self.d + 8 + 4 + 4
        return 8 * fixed

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += struct.pack(
            self.HEADER_FMT_FIXED, MAGIC, VERSION, self.n, self.m, self.d,
            *[float(r) for r in self.ratios], self.coord_step,
        )
        out += np.asarray(self.feature_scales, dtype="<f4").tobytes()
        out += self.digest
        out += struct.pack("<I", len(self.coord_payload)) + self.coord_payload
        out += struct.pack("<I", len(self.feat_payload)) + self.feat_payload
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        fixed = struct.calcsize(cls.HEADER_FMT_FIXED)
        if len(data) < fixed:
            raise BitstreamError(f"truncated stream at offset {len(data)}: header needs {fixed} bytes")
        magic, version, n, m, d, r1, r2, r3, coord_step = struct.unpack_from(
            cls.HEADER_FMT_FIXED, data, 0
        )
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        off = fixed
        if len(data) < off + 4 * d + 8:
            raise BitstreamError(f"truncated stream at offset {len(data)}")
        scales = np.frombuffer(data, dtype="<f4", count=d, offset=off).copy()
        off += 4 * d
        digest = data[off:off + 8]
        off += 8
        payloads = []
        for _ in range(2):
            if len(data) < off + 4:
                raise BitstreamError(f"truncated stream at offset {off}")
            (plen,) = struct.unpack_from("<I", data, off)
            off += 4
            if len(data) < off + plen:
                raise BitstreamError(
                    f"truncated stream at offset {off}: payload needs {plen} bytes"
                )
            payloads.append(data[off:off + plen])
            off += plen
        return cls(
            n=n, m=m, d=d, ratios=(r1, r2, r3), coord_step=coord_step,
            feature_scales=scales, digest=digest,
            coord_payload=payloads[0], feat_payload=payloads[1],
        )

    def write(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def read(cls, path) -> "Bitstream":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@dataclass
class DecodedLatent:
    """Quantized latent as decoded from a bitstream."""

    q_coords: np.ndarray  # (m, 3) int64
    q_feats: np.ndarray  # (m, d) int64
    coord_step: float
    feature_scales: np.ndarray
    feature_step: float
    ratios: tuple[float, float, float]
    n: int

    def dequantize(self) -> LatentCode:
        p3 = torch.as_tensor(self.q_coords, dtype=torch.get_default_dtype()) * self.coord_step
        scales = torch.as_tensor(
            np.asarray(self.feature_scales, dtype=np.float64), dtype=torch.get_default_dtype()
        )
        f3 = torch.as_tensor(self.q_feats, dtype=torch.get_default_dtype()) * self.feature_step / scales
        return LatentCode(p3=p3, f3=f3, stage_ratios=tuple(self.ratios))


# ---------------------------------------------------------------------------
# Coding tables


@torch.no_grad()
def _channel_table(model: FactorizedModel, channel: int) -> tuple[int, np.ndarray]:
    """Quantized cumulative frequencies for one channel.

    Returns (lo, cum) where symbols are lo..lo+S-1 plus a trailing escape
    symbol for out-of-support values. Every symbol keeps frequency >= 1
    (the 2^-16 probability floor).
    """
    dtype = next(model.parameters()).dtype
    grid = torch.arange(
        -SUPPORT_HALF_WIDTH, SUPPORT_HALF_WIDTH + 1, dtype=dtype
    ).unsqueeze(0).expand(model.channels, -1)
    probs = model.bin_prob(grid)[channel].cpu().numpy()
    inside = probs > PROB_FLOOR * 1.000001
    if inside.any():
        lo_i = int(np.argmax(inside))
        hi_i = len(inside) - 1 - int(np.argmax(inside[::-1]))
    else:
        lo_i = SUPPORT_HALF_WIDTH - 1
        hi_i = SUPPORT_HALF_WIDTH + 1
    lo = lo_i - SUPPORT_HALF_WIDTH
    pmf = probs[lo_i:hi_i + 1]
    freqs = np.maximum(np.rint(pmf * TABLE_TOTAL).astype(np.int64), 1)
    freqs = np.append(freqs, 1)  # escape symbol
    # repair the total to exactly TABLE_TOTAL without dropping any symbol
    excess = int(freqs.sum()) - TABLE_TOTAL
    while excess != 0:
        j = int(np.argmax(freqs))
        adj = -excess if excess < 0 else -min(excess, int(freqs[j]) - 1)
        freqs[j] += adj
        excess += adj
        if adj == 0:
            raise RuntimeError("cannot normalize frequency table")
    cum = np.zeros(len(freqs) + 1, dtype=np.int64)
    np.cumsum(freqs, out=cum[1:])
    return lo, cum


def _encode_channel(enc: ArithmeticEncoder, values: np.ndarray, lo: int, cum: np.ndarray):
    n_sym = len(cum) - 2  # excludes escape
    escape = n_sym
    for q in values:
        q = int(q)
        s = q - lo
        if 0 <= s < n_sym:
            enc.encode(cum, s)
        else:
            if not -(1 << 31) <= q < (1 << 31):
                raise ValueError(f"quantized value {q} out of 32-bit bypass range")
            enc.encode(cum, escape)
            enc.encode_bits(q & 0xFFFFFFFF, RAW_BITS)


def _decode_channel(dec: ArithmeticDecoder, count: int, lo: int, cum: np.ndarray) -> np.ndarray:
    n_sym = len(cum) - 2
    escape = n_sym
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        s = dec.decode(cum)
        if s == escape:
            raw = dec.decode_bits(RAW_BITS)
            out[i] = raw - (1 << 32) if raw >= (1 << 31) else raw
        else:
            out[i] = s + lo
    return out


def quantize_latent(
    latent: LatentCode, models: EntropyModels, config: QuantizerConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize a latent with the coder's float32 feature scales."""
    scales = models.feature_scales.detach().cpu().numpy().astype(np.float32)
    p3 = latent.p3.detach().cpu().to(torch.float64).numpy()
    f3 = latent.f3.detach().cpu().to(torch.float64).numpy()
    q_coords = quantize(p3, config.coord_step)
    q_feats = quantize(f3 * scales.astype(np.float64), config.feature_step)
    return q_coords, q_feats, scales


def encode_bitstream(
    latent: LatentCode, models: EntropyModels, config: QuantizerConfig, n_source: int = 0
) -> Bitstream:
    q_coords, q_feats, scales = quantize_latent(latent, models, config)
    m, d = q_feats.shape

    enc = ArithmeticEncoder()
    lo, cum = _channel_table(models.coord, 0)
    _encode_channel(enc, q_coords.reshape(-1), lo, cum)
    coord_payload = enc.finish()

    enc = ArithmeticEncoder()
    for c in range(d):
        lo, cum = _channel_table(models.feat, c)
        _encode_channel(enc, q_feats[:, c], lo, cum)
    feat_payload = enc.finish()

    return Bitstream(
        n=n_source, m=m, d=d, ratios=tuple(latent.stage_ratios), coord_step=config.coord_step,
        feature_scales=scales, digest=model_digest(models, config),
        coord_payload=coord_payload, feat_payload=feat_payload,
    )


def decode_bitstream(
    bs: Bitstream, models: EntropyModels, config: QuantizerConfig
) -> DecodedLatent:
    digest = model_digest(models, config)
    if digest != bs.digest:
        raise DigestMismatchError(
            f"model digest {digest.hex()} does not match stream digest {bs.digest.hex()}"
        )
    dec = ArithmeticDecoder(bs.coord_payload)
    lo, cum = _channel_table(models.coord, 0)
    q_coords = _decode_channel(dec, bs.m * 3, lo, cum).reshape(bs.m, 3)

    dec = ArithmeticDecoder(bs.feat_payload)
    q_feats = np.empty((bs.m, bs.d), dtype=np.int64)
    for c in range(bs.d):
        lo, cum = _channel_table(models.feat, c)
        q_feats[:, c] = _decode_channel(dec, bs.m, lo, cum)

    return DecodedLatent(
        q_coords=q_coords, q_feats=q_feats, coord_step=bs.coord_step,
        feature_scales=bs.feature_scales, feature_step=config.feature_step,
        ratios=bs.ratios, n=bs.n,
    )
