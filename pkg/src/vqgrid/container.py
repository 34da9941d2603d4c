"""Bit-exact on-disk container for quantized models (``.vqrf``).

Layout: a fixed-size little-endian header, a six-entry section table, then
the six section payloads in fixed order -- MASK, CODEBOOK, INDICES, DENSITY,
KEPT, META -- each compressed as an independent raw DEFLATE stream.  Mask
labels pack to 2 bits, code indices to ceil(log2(K)) bits, densities and
KEPT features quantize to 8-bit integers with one (scale, offset) pair per
section, and the codebook itself is stored as binary16 (it is small enough
that quantizing it buys nothing).  FORMAT.md documents every field.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .grid import GridDims, VoxelClassMask, Codebook, VQModel, PRUNED, VQ, KEPT

_MAGIC = b"VQRF"
_VERSION = 1
_HEADER = struct.Struct("<4sH3IBHI3Q6f")
_SECTION_ENTRY = struct.Struct("<BQQ")
_META = struct.Struct("<6d")

SECTION_MASK = 1
SECTION_CODEBOOK = 2
SECTION_INDICES = 3
SECTION_DENSITY = 4
SECTION_KEPT = 5
SECTION_META = 6
SECTION_NAMES = {
    SECTION_MASK: "mask",
    SECTION_CODEBOOK: "codebook",
    SECTION_INDICES: "indices",
    SECTION_DENSITY: "density",
    SECTION_KEPT: "kept",
    SECTION_META: "meta",
}
_SECTION_ORDER = (SECTION_MASK, SECTION_CODEBOOK, SECTION_INDICES,
                  SECTION_DENSITY, SECTION_KEPT, SECTION_META)

_DEFLATE_LEVEL = 6  # pinned so encodes are byte-reproducible


class ContainerError(RuntimeError):
    """Base error for malformed or unreadable containers."""


class BadMagicError(ContainerError):
    """The stream does not start with the container magic."""


class TruncatedError(ContainerError):
    """The stream ends before a declared section does."""


class InflateError(ContainerError):
    """A section's DEFLATE stream is corrupt or the wrong length."""


class CorruptIndexError(ContainerError):
    """A decoded code index points outside the codebook."""


@dataclass(frozen=True)
class QuantizedArray:
    """8-bit uniform quantization of a float array."""

    data: bytes
    scale: float
    offset: float
    count: int

    def __post_init__(self):
        if len(self.data) != self.count:
            raise ValueError("quantized byte count must match count")


def quantize_u8(values) -> QuantizedArray:
    """Map floats onto [0, 255] with a uniform scale and offset.

    ``scale = (max - min) / 255`` (1.0 for a constant array), ``offset =
    min``; codes round half away from zero.  Scale and offset are rounded to
    float32 before quantizing, since that is how the container stores them.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("cannot quantize an empty array")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    offset = float(np.float32(v.min()))
    span = float(v.max()) - offset
    if span > 0.0:
        q = np.floor((v - offset) * (255.0 / span) + 0.5)
        scale = float(np.float32(span / 255.0))
    else:
        q = np.zeros_like(v)
        scale = 1.0
    q = np.clip(q, 0.0, 255.0).astype(np.uint8)
    return QuantizedArray(q.tobytes(), scale, offset, v.size)


def dequantize_u8(q: QuantizedArray) -> np.ndarray:
    """Reconstruct float32 values; error is at most scale/2 for in-range input."""
    codes = np.frombuffer(q.data, dtype=np.uint8, count=q.count)
    return (q.offset + codes.astype(np.float64) * q.scale).astype(np.float32)


def pack_bits(symbols, bits: int) -> bytes:
    """Pack fixed-width symbols LSB-first into bytes (final byte zero-padded)."""
    if not 1 <= bits <= 16:
        raise ValueError("bits must lie in [1, 16]")
    s = np.asarray(symbols)
    if s.size and (s.min() < 0 or s.max() >= (1 << bits)):
        raise ValueError("symbol overflow")
    if s.size == 0:
        return b""
    lanes = np.unpackbits(s.astype("<u2").view(np.uint8).reshape(-1, 2),
                          axis=1, bitorder="little")[:, :bits]
    return np.packbits(lanes.reshape(-1), bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    """Exact inverse of :func:`pack_bits` given the symbol count."""
    if not 1 <= bits <= 16:
        raise ValueError("bits must lie in [1, 16]")
    if count == 0:
        return np.zeros(0, dtype=np.uint32)
    stream = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if stream.size < count * bits:
        raise ValueError("bit stream shorter than count")
    lanes = stream[:count * bits].reshape(count, bits)
    padded = np.zeros((count, 16), dtype=np.uint8)
    padded[:, :bits] = lanes
    return np.packbits(padded, axis=1, bitorder="little").view("<u2")[:, 0].astype(np.uint32)


def index_bits(K: int) -> int:
    """Bits per packed code index: ceil(log2(K)), at least 1."""
    return max(1, int(math.ceil(math.log2(K))))


def _deflate(payload: bytes) -> bytes:
    co = zlib.compressobj(_DEFLATE_LEVEL, zlib.DEFLATED, -15)
    return co.compress(payload) + co.flush()


def _inflate(payload: bytes, expect: int) -> bytes:
    try:
        out = zlib.decompressobj(-15).decompress(payload)
    except zlib.error as exc:
        raise InflateError(f"inflate failure: {exc}") from exc
    if len(out) != expect:
        raise InflateError("inflate output length mismatch")
    return out


def _quantize_section(values) -> QuantizedArray:
    v = np.asarray(values).reshape(-1)
    if v.size == 0:
        return QuantizedArray(b"", 1.0, 0.0, 0)
    return quantize_u8(v)


def encode_container(model: VQModel, *, beta_p: float = math.nan,
                     beta_k: float = math.nan) -> bytes:
    """Serialize a model to the container byte stream.

    ``beta_p``/``beta_k`` ride along as provenance metadata only; NaN marks
    them unknown.  Encoding is deterministic: equal models yield equal bytes.
    """
    dims = model.dims
    c = model.feature_dim
    k = model.codebook.K
    n_pruned, n_vq, n_kept = model.mask.counts()

    qd = _quantize_section(model.density)
    qk = _quantize_section(model.kept_features)
    payloads = {
        SECTION_MASK: pack_bits(model.mask.labels, 2),
        SECTION_CODEBOOK: model.codebook.codes.astype("<f2").tobytes(),
        SECTION_INDICES: pack_bits(model.indices, index_bits(k)),
        SECTION_DENSITY: qd.data,
        SECTION_KEPT: qk.data,
        SECTION_META: _META.pack(*dims.aabb_min, *dims.aabb_max),
    }
    header = _HEADER.pack(
        _MAGIC, _VERSION, dims.nx, dims.ny, dims.nz,
        model.sh_degree, c, k, n_pruned, n_vq, n_kept,
        qd.scale, qd.offset, qk.scale, qk.offset,
        float(beta_p), float(beta_k),
    )
    table = []
    blobs = []
    for sid in _SECTION_ORDER:
        raw = payloads[sid]
        blob = _deflate(raw)
        table.append(_SECTION_ENTRY.pack(sid, len(raw), len(blob)))
        blobs.append(blob)
    return header + b"".join(table) + b"".join(blobs)


def header_nbytes() -> int:
    """Size of the uncompressed header plus section table."""
    return _HEADER.size + len(_SECTION_ORDER) * _SECTION_ENTRY.size


def _parse_toc(data: bytes):
    if len(data) < _HEADER.size:
        raise TruncatedError("truncated header")
    fields = _HEADER.unpack_from(data)
    if fields[0] != _MAGIC:
        raise BadMagicError("bad magic")
    if fields[1] != _VERSION:
        raise ContainerError(f"unsupported container version {fields[1]}")
    toc = []
    pos = _HEADER.size
    for _ in _SECTION_ORDER:
        if len(data) < pos + _SECTION_ENTRY.size:
            raise TruncatedError("truncated section table")
        toc.append(_SECTION_ENTRY.unpack_from(data, pos))
        pos += _SECTION_ENTRY.size
    if tuple(e[0] for e in toc) != _SECTION_ORDER:
        raise ContainerError("unexpected section order")
    return fields, toc, pos


def decode_container(data: bytes) -> VQModel:
    """Rebuild a model from container bytes.

    Mask, codebook, and indices come back bit-exact; density and KEPT
    features carry their 8-bit quantization error.  Decoded codebook
    capacities are zero (capacity is a training-time quantity, not stored).
    """
    fields, toc, pos = _parse_toc(data)
    (_, _, nx, ny, nz, sh_degree, c, k, n_pruned, n_vq, n_kept,
     d_scale, d_offset, k_scale, k_offset, _, _) = fields

    raw = {}
    for sid, unc_len, comp_len in toc:
        if len(data) < pos + comp_len:
            raise TruncatedError(f"truncated section {SECTION_NAMES[sid]}")
        raw[sid] = _inflate(data[pos:pos + comp_len], unc_len)
        pos += comp_len

    # Structural inconsistencies (impossible dims, short bit streams, stream
    # length mismatches) surface as ValueError from the model types; report
    # them all as container corruption.
    try:
        if len(raw[SECTION_META]) != _META.size:
            raise ValueError("meta section size mismatch")
        aabb = _META.unpack(raw[SECTION_META])
        dims = GridDims(nx, ny, nz, aabb[:3], aabb[3:])
        n = dims.n

        labels = unpack_bits(raw[SECTION_MASK], 2, n)
        if labels.size and labels.max() > KEPT:
            raise ContainerError("invalid mask label")
        mask = VoxelClassMask(labels.astype(np.uint8))
        if mask.counts() != (n_pruned, n_vq, n_kept):
            raise ContainerError("mask does not match header counts")

        codes = np.frombuffer(raw[SECTION_CODEBOOK], dtype="<f2").astype(np.float32)
        if codes.size != k * c:
            raise ContainerError("codebook size mismatch")
        codebook = Codebook(codes.reshape(k, c), np.zeros(k))

        indices = unpack_bits(raw[SECTION_INDICES], index_bits(k), n_vq)
        if indices.size and int(indices.max()) >= k:
            raise CorruptIndexError("corrupt index stream")

        density = dequantize_u8(QuantizedArray(raw[SECTION_DENSITY], d_scale,
                                               d_offset, n_vq + n_kept))
        kept = dequantize_u8(QuantizedArray(raw[SECTION_KEPT], k_scale, k_offset,
                                            n_kept * c))
        return VQModel(dims=dims, sh_degree=sh_degree, mask=mask, codebook=codebook,
                       indices=indices, kept_features=kept, density=density)
    except ValueError as exc:
        raise ContainerError(str(exc)) from exc


def container_metadata(data: bytes) -> dict:
    """Header fields of a container as a plain dict (no payload decode)."""
    fields, toc, _ = _parse_toc(data)
    (_, version, nx, ny, nz, sh_degree, c, k, n_pruned, n_vq, n_kept,
     d_scale, d_offset, k_scale, k_offset, beta_p, beta_k) = fields
    return {
        "version": version, "dims": (nx, ny, nz), "sh_degree": sh_degree,
        "feature_dim": c, "K": k,
        "counts": {"pruned": n_pruned, "vq": n_vq, "kept": n_kept},
        "density_scale": d_scale, "density_offset": d_offset,
        "kept_scale": k_scale, "kept_offset": k_offset,
        "beta_p": beta_p, "beta_k": beta_k,
        "sections": {SECTION_NAMES[sid]: {"uncompressed": u, "compressed": comp}
                     for sid, u, comp in toc},
    }


def reported_size_breakdown(data: bytes) -> dict:
    """Compressed byte count per section, in on-disk order."""
    _, toc, _ = _parse_toc(data)
    return {SECTION_NAMES[sid]: comp for sid, _, comp in toc}


def write_size_breakdown(path, data: bytes) -> None:
    """CSV of the per-section compressed sizes plus the header overhead."""
    sizes = reported_size_breakdown(data)
    with open(path, "w") as fh:
        fh.write("section,bytes\n")
        fh.write(f"header,{header_nbytes()}\n")
        for name, nbytes in sizes.items():
            fh.write(f"{name},{nbytes}\n")
