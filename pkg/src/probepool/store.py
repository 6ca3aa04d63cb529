"""Bit-exact on-disk embedding cache plus a synthetic planted-event generator.

File layout (little-endian throughout)::

    header : magic "PEMB" | version u32 | D u32 | S_t u32 | S_f u32 | C u32
             | record_count u64 | dtype_code u8
    record : id u64 | labels ceil(C/8) bytes (bit c -> byte c//8, bit c%8)
             | cls D f32 | tokens D*S_t*S_f f32 (row-major D, S_t, S_f)

Records have a fixed stride, so random access is a single seek. Stores are
immutable once written; concurrent readers are safe.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, EmptyStoreError, NonFiniteError, StoreFormatError
from .numerics import STREAM_CLIPS, STREAM_SIGNATURES, rng_stream

MAGIC = b"PEMB"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIIIIIQB")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class StoreHeader:
    embed_dim: int
    time_bins: int
    freq_bins: int
    num_classes: int
    record_count: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "time_bins", "freq_bins", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.record_count < 0:
            raise ValueError("record_count must be >= 0")

    @property
    def tokens_per_clip(self) -> int:
        return self.time_bins * self.freq_bins

    @property
    def label_bytes(self) -> int:
        return (self.num_classes + 7) // 8

    @property
    def record_size(self) -> int:
        d = self.embed_dim
        return 8 + self.label_bytes + 4 * d + 4 * d * self.tokens_per_clip


@dataclass
class EmbeddingRecord:
    clip_id: int
    labels: np.ndarray  # (C,) uint8 multi-hot
    cls_vec: np.ndarray  # (D,) float32
    tokens: np.ndarray  # (D, S_t, S_f) float32


def _record_dtype(header: StoreHeader) -> np.dtype:
    return np.dtype(
        [
            ("id", "<u8"),
            ("labels", "u1", (header.label_bytes,)),
            ("cls", "<f4", (header.embed_dim,)),
            ("tokens", "<f4", (header.embed_dim, header.time_bins, header.freq_bins)),
        ]
    )


def _validate_record(header: StoreHeader, rec: EmbeddingRecord, index: int, allow_empty: bool):
    d, st, sf, c = header.embed_dim, header.time_bins, header.freq_bins, header.num_classes
    if rec.labels.shape != (c,):
        raise DimensionError(f"record {index}: labels shape {rec.labels.shape}, expected ({c},)")
    if rec.cls_vec.shape != (d,):
        raise DimensionError(f"record {index}: cls shape {rec.cls_vec.shape}, expected ({d},)")
    if rec.tokens.shape != (d, st, sf):
        raise DimensionError(
            f"record {index}: tokens shape {rec.tokens.shape}, expected ({d}, {st}, {sf})"
        )
    if not allow_empty and rec.labels.sum() == 0:
        raise StoreFormatError(f"record {index}: all-zero label vector (allow_empty not set)")
    if not (np.all(np.isfinite(rec.cls_vec)) and np.all(np.isfinite(rec.tokens))):
        raise NonFiniteError(f"record {index}: non-finite embedding values")


def write_store(path, header: StoreHeader, records, allow_empty: bool = False) -> int:
    """Write header + records; returns the byte count. Rereading the file
    yields bit-identical records."""
    records = list(records)
    header = replace(header, record_count=len(records))
    dt = _record_dtype(header)
    buf = np.zeros(len(records), dtype=dt)
    for i, rec in enumerate(records):
        _validate_record(header, rec, i, allow_empty)
        buf[i]["id"] = rec.clip_id
        buf[i]["labels"] = np.packbits(rec.labels.astype(np.uint8), bitorder="little")
        buf[i]["cls"] = rec.cls_vec
        buf[i]["tokens"] = rec.tokens
    blob = _HEADER.pack(
        MAGIC,
        VERSION,
        header.embed_dim,
        header.time_bins,
        header.freq_bins,
        header.num_classes,
        header.record_count,
        DTYPE_F32,
    )
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(buf.tobytes())
    return HEADER_SIZE + buf.nbytes


def read_header(path) -> StoreHeader:
    with open(path, "rb") as fh:
        blob = fh.read(HEADER_SIZE)
    if len(blob) < HEADER_SIZE:
        raise StoreFormatError(f"{path}: truncated header")
    magic, version, d, st, sf, c, count, dtype_code = _HEADER.unpack(blob)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F32:
        raise StoreFormatError(f"{path}: unsupported dtype code {dtype_code}")
    header = StoreHeader(d, st, sf, c, count)
    expected = HEADER_SIZE + count * header.record_size
    actual = os.path.getsize(path)
    if actual != expected:
        raise StoreFormatError(f"{path}: file size {actual} != expected {expected}")
    return header


def _decode(header: StoreHeader, raw: np.ndarray, index: int) -> EmbeddingRecord:
    labels = np.unpackbits(raw["labels"], bitorder="little", count=header.num_classes)
    return EmbeddingRecord(
        clip_id=int(raw["id"]),
        labels=labels.astype(np.uint8),
        cls_vec=np.array(raw["cls"], dtype=np.float32),
        tokens=np.array(raw["tokens"], dtype=np.float32),
    )


def read_record(path, index: int) -> EmbeddingRecord:
    """O(1) random access: record k sits at HEADER_SIZE + k * record_size."""
    header = read_header(path)
    if not 0 <= index < header.record_count:
        raise IndexError(f"record index {index} out of range [0, {header.record_count})")
    dt = _record_dtype(header)
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE + index * header.record_size)
        raw = np.frombuffer(fh.read(header.record_size), dtype=dt)[0]
    return _decode(header, raw, index)


def read_all(path) -> tuple[StoreHeader, list[EmbeddingRecord]]:
    header = read_header(path)
    dt = _record_dtype(header)
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        raw = np.frombuffer(fh.read(), dtype=dt)
    return header, [_decode(header, raw[i], i) for i in range(header.record_count)]


# -- manifest ---------------------------------------------------------------


def write_manifest(path, entries: dict) -> None:
    """Sidecar 'key = value' lines; values are str()-ed."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


# -- in-memory dataset view ---------------------------------------------------


@dataclass
class EmbeddingDataset:
    """Bulk arrays for training: tokens as (N, S_t*S_f, D) plus per-token
    norms and unit tokens, precomputed once because the backbone is frozen."""

    ids: np.ndarray  # (N,)
    labels: np.ndarray  # (N, C) float32
    cls_vec: np.ndarray  # (N, D)
    tokens: np.ndarray  # (N, T, D) with T = S_t * S_f, row-major over (t, f)
    time_bins: int
    freq_bins: int
    token_norms: np.ndarray = field(init=False)
    unit_tokens: np.ndarray = field(init=False)

    def __post_init__(self):
        norms = np.linalg.norm(self.tokens.astype(np.float64), axis=2)
        self.token_norms = norms.astype(np.float32)
        safe = np.where(norms == 0.0, 1.0, norms)
        self.unit_tokens = (self.tokens / safe[:, :, None].astype(np.float32)).astype(
            np.float32
        )

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "EmbeddingDataset":
        return EmbeddingDataset(
            ids=self.ids[idx],
            labels=self.labels[idx],
            cls_vec=self.cls_vec[idx],
            tokens=self.tokens[idx],
            time_bins=self.time_bins,
            freq_bins=self.freq_bins,
        )


def load_dataset(path) -> EmbeddingDataset:
    header = read_header(path)
    if header.record_count == 0:
        raise EmptyStoreError(f"{path}: store has no records")
    dt = _record_dtype(header)
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        raw = np.frombuffer(fh.read(), dtype=dt)
    labels = np.unpackbits(
        raw["labels"], axis=1, bitorder="little", count=header.num_classes
    )
    n = header.record_count
    # (N, D, S_t, S_f) -> (N, S_t*S_f, D): token index runs row-major over (t, f)
    tokens = (
        np.array(raw["tokens"], dtype=np.float32)
        .reshape(n, header.embed_dim, header.tokens_per_clip)
        .transpose(0, 2, 1)
        .copy()
    )
    return EmbeddingDataset(
        ids=np.array(raw["id"], dtype=np.uint64),
        labels=labels.astype(np.float32),
        cls_vec=np.array(raw["cls"], dtype=np.float32),
        tokens=tokens,
        time_bins=header.time_bins,
        freq_bins=header.freq_bins,
    )


# -- synthetic planted-event generator ---------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Generator for token maps with sparse, localized class evidence.

    Each class owns a fixed unit signature direction. For every clip, a
    label-set size is drawn from uniform{min_labels..max_labels}; each active
    class deposits its signature (plus isotropic noise of scale
    ``noise_sigma``) into ``event_footprint`` random token positions. All
    remaining tokens carry background noise with pairwise correlation
    ``correlation_rho`` across tokens. The cls vector is the token mean.
    """

    num_classes: int = 10
    embed_dim: int = 64
    time_bins: int = 16
    freq_bins: int = 4
    min_labels: int = 2
    max_labels: int = 4
    event_footprint: int = 1
    noise_sigma: float = 0.1
    correlation_rho: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.event_footprint < 1 or self.event_footprint > self.time_bins * self.freq_bins:
            raise ValueError("event_footprint must be in [1, S_t*S_f]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.correlation_rho < 1.0:
            raise ValueError("correlation_rho must be in [0, 1)")
        if not 1 <= self.min_labels <= self.max_labels <= self.num_classes:
            raise ValueError("need 1 <= min_labels <= max_labels <= num_classes")
        if self.max_labels * self.event_footprint > self.time_bins * self.freq_bins:
            # otherwise one event would have to overwrite another class's
            # only evidence
            raise ValueError("max_labels * event_footprint must fit in the token grid")

    def header(self) -> StoreHeader:
        return StoreHeader(self.embed_dim, self.time_bins, self.freq_bins, self.num_classes)


def class_signatures(spec: SynthSpec) -> np.ndarray:
    """Unit signature direction per class, fixed by the spec seed."""
    rng = rng_stream(spec.seed, STREAM_SIGNATURES)
    u = rng.standard_normal((spec.num_classes, spec.embed_dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u.astype(np.float32)


def generate_synthetic(spec: SynthSpec, num_records: int, start_id: int = 0):
    """Deterministic list of records; equal specs produce bit-identical
    stores."""
    d = spec.embed_dim
    n_tok = spec.time_bins * spec.freq_bins
    sigs = class_signatures(spec).astype(np.float64)
    rng = rng_stream(spec.seed, STREAM_CLIPS)
    sqrt_d = np.sqrt(d)
    rho = spec.correlation_rho
    records = []
    for i in range(num_records):
        k = int(rng.integers(spec.min_labels, spec.max_labels + 1))
        active = rng.choice(spec.num_classes, size=k, replace=False)
        shared = rng.standard_normal(d) / sqrt_d
        indep = rng.standard_normal((n_tok, d)) / sqrt_d
        tokens = np.sqrt(rho) * shared[None, :] + np.sqrt(1.0 - rho) * indep
        # one draw without replacement across all events so no class
        # overwrites another's evidence
        positions_all = rng.choice(n_tok, size=k * spec.event_footprint, replace=False)
        for j, c in enumerate(active):
            positions = positions_all[
                j * spec.event_footprint : (j + 1) * spec.event_footprint
            ]
            noise = spec.noise_sigma * rng.standard_normal((spec.event_footprint, d)) / sqrt_d
            tokens[positions] = sigs[c][None, :] + noise
        labels = np.zeros(spec.num_classes, dtype=np.uint8)
        labels[active] = 1
        tokens32 = tokens.astype(np.float32)
        records.append(
            EmbeddingRecord(
                clip_id=start_id + i,
                labels=labels,
                cls_vec=tokens32.mean(axis=0),
                # store layout is (D, S_t, S_f)
                tokens=np.ascontiguousarray(
                    tokens32.T.reshape(d, spec.time_bins, spec.freq_bins)
                ),
            )
        )
    return records


def write_synthetic_store(path, spec: SynthSpec, num_records: int, split: str = "train") -> int:
    """Generate, write store + sidecar manifest, return byte count."""
    records = generate_synthetic(spec, num_records)
    n = write_store(path, spec.header(), records)
    write_manifest(
        str(path) + ".manifest",
        {
            "store": str(path),
            "provenance": (
                f"synthetic(classes={spec.num_classes}, embed_dim={spec.embed_dim}, "
                f"grid={spec.time_bins}x{spec.freq_bins}, "
                f"labels_per_clip={spec.min_labels}..{spec.max_labels}, "
                f"footprint={spec.event_footprint}, noise_sigma={spec.noise_sigma}, "
                f"correlation_rho={spec.correlation_rho}, seed={spec.seed})"
            ),
            "classes": ",".join(f"class_{c}" for c in range(spec.num_classes)),
            "split": split,
        },
    )
    return n
