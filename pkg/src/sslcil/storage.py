"""Binary containers for audio batches, feature matrices, phase datasets and
checkpoints.  All numeric payloads are little-endian.

Audio batch (``SSLAUDIO``)::

    magic[8] version:u16 M:u32 N:u32 L:u32 sample_rate:f64 snr_db:f64 (NaN = clean)
    samples: N*M*L float32
    labels:  N int32 (DoA degrees)

Feature matrix (``SSLFEATS``)::

    magic[8] version:u16 N:u32 d:u32 tau_range:u32 n_pairs:u32
    pairs:   n_pairs * 2 uint32
    values:  N*d float32
    labels:  N int32 (DoA degrees)

Phase dataset (``SSLPHASE``)::

    magic[8] version:u16 phase:u32 n_classes:u32 classes:int32[n_classes]
    train_len:u64 <audio batch>  test_len:u64 <audio batch>

Checkpoint (``SSLCKPT0``)::

    magic[8] version:u32 header_len:u64 header(JSON, utf-8, sorted keys)
    tensor payload (offsets in header, dtype tag f32/f64/i64, shape)
    sha256 digest[32] of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acoustic import AudioSegmentBatch, PhaseDataset
from .errors import ChecksumError, FormatError
from .gcc import GccFeatureMatrix

AUDIO_MAGIC = b"SSLAUDIO"
FEATURE_MAGIC = b"SSLFEATS"
PHASE_MAGIC = b"SSLPHASE"
CKPT_MAGIC = b"SSLCKPT0"
VERSION = 1

_AUDIO_HEAD = struct.Struct("<8sHIIIdd")
_FEAT_HEAD = struct.Struct("<8sHIIII")
_PHASE_HEAD = struct.Struct("<8sHII")
_CKPT_HEAD = struct.Struct("<8sIQ")
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}


def _read_exact(buf, offset, n, what):
    if offset + n > len(buf):
        raise FormatError(f"truncated {what}")
    return buf[offset : offset + n], offset + n


def _check_magic(magic, expected, version):
    if magic != expected:
        raise FormatError(f"bad magic {magic!r}, expected {expected!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")


# audio --------------------------------------------------------------------


def audio_to_bytes(batch: AudioSegmentBatch) -> bytes:
    n, m, length = batch.samples.shape
    snr = np.nan if batch.snr_db is None else float(batch.snr_db)
    head = _AUDIO_HEAD.pack(AUDIO_MAGIC, VERSION, m, n, length, float(batch.sample_rate), snr)
    return (
        head
        + np.ascontiguousarray(batch.samples, dtype="<f4").tobytes()
        + np.ascontiguousarray(batch.doa_deg, dtype="<i4").tobytes()
    )


def audio_from_bytes(buf: bytes) -> AudioSegmentBatch:
    head, off = _read_exact(buf, 0, _AUDIO_HEAD.size, "audio header")
    magic, version, m, n, length, rate, snr = _AUDIO_HEAD.unpack(head)
    _check_magic(magic, AUDIO_MAGIC, version)
    raw, off = _read_exact(buf, off, 4 * n * m * length, "audio samples")
    labels, off = _read_exact(buf, off, 4 * n, "audio labels")
    if off != len(buf):
        raise FormatError("trailing bytes after audio container")
    samples = np.frombuffer(raw, dtype="<f4").reshape(n, m, length).astype(np.float32)
    doa = np.frombuffer(labels, dtype="<i4").astype(np.int64)
    return AudioSegmentBatch(samples, doa, None if np.isnan(snr) else snr, rate)


def save_audio(path, batch):
    Path(path).write_bytes(audio_to_bytes(batch))


def load_audio(path):
    return audio_from_bytes(Path(path).read_bytes())


# features -----------------------------------------------------------------


def features_to_bytes(features: GccFeatureMatrix, doa_deg) -> bytes:
    n, d = features.values.shape
    pairs = np.asarray(features.pair_order, dtype="<u4").reshape(-1, 2)
    head = _FEAT_HEAD.pack(FEATURE_MAGIC, VERSION, n, d, features.tau_range, pairs.shape[0])
    return (
        head
        + pairs.tobytes()
        + np.ascontiguousarray(features.values, dtype="<f4").tobytes()
        + np.ascontiguousarray(doa_deg, dtype="<i4").tobytes()
    )


def features_from_bytes(buf: bytes):
    """Returns (GccFeatureMatrix, doa_deg)."""
    head, off = _read_exact(buf, 0, _FEAT_HEAD.size, "feature header")
    magic, version, n, d, tau, n_pairs = _FEAT_HEAD.unpack(head)
    _check_magic(magic, FEATURE_MAGIC, version)
    pairs, off = _read_exact(buf, off, 8 * n_pairs, "pair list")
    raw, off = _read_exact(buf, off, 4 * n * d, "feature values")
    labels, off = _read_exact(buf, off, 4 * n, "feature labels")
    if off != len(buf):
        raise FormatError("trailing bytes after feature container")
    pair_order = tuple(tuple(int(v) for v in p) for p in np.frombuffer(pairs, "<u4").reshape(-1, 2))
    values = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    return GccFeatureMatrix(values, tau, pair_order), np.frombuffer(labels, "<i4").astype(np.int64)


def feature_cache_key(batch: AudioSegmentBatch, tau_range, pair_order) -> str:
    h = hashlib.sha256(audio_to_bytes(batch))
    h.update(f"tau={tau_range};pairs={list(pair_order)}".encode())
    return h.hexdigest()


# phase datasets -----------------------------------------------------------


def phase_to_bytes(phase: PhaseDataset) -> bytes:
    classes = np.asarray(phase.class_set, dtype="<i4")
    out = [_PHASE_HEAD.pack(PHASE_MAGIC, VERSION, phase.phase_index, classes.size), classes.tobytes()]
    for batch in (phase.train, phase.test):
        blob = audio_to_bytes(batch)
        out += [struct.pack("<Q", len(blob)), blob]
    return b"".join(out)


def phase_from_bytes(buf: bytes) -> PhaseDataset:
    head, off = _read_exact(buf, 0, _PHASE_HEAD.size, "phase header")
    magic, version, index, n_classes = _PHASE_HEAD.unpack(head)
    _check_magic(magic, PHASE_MAGIC, version)
    classes, off = _read_exact(buf, off, 4 * n_classes, "class list")
    batches = []
    for what in ("train", "test"):
        size, off = _read_exact(buf, off, 8, f"{what} length")
        blob, off = _read_exact(buf, off, struct.unpack("<Q", size)[0], f"{what} batch")
        batches.append(audio_from_bytes(blob))
    if off != len(buf):
        raise FormatError("trailing bytes after phase container")
    class_set = tuple(int(c) for c in np.frombuffer(classes, "<i4"))
    return PhaseDataset(index, class_set, batches[0], batches[1])


def save_phase(path, phase):
    Path(path).write_bytes(phase_to_bytes(phase))


def load_phase(path):
    return phase_from_bytes(Path(path).read_bytes())


# checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    meta: dict  # JSON-serialisable: config, expansion seed, d_fe, eta, phase, classes ...
    tensors: dict  # name -> ndarray (float32/float64/int64)


def _dtype_tag(arr):
    for tag, dt in _DTYPES.items():
        if arr.dtype == np.dtype(dt).newbyteorder("="):
            return tag
    raise FormatError(f"unsupported tensor dtype {arr.dtype}")


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    entries, payload, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": ckpt.meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    body = _CKPT_HEAD.pack(CKPT_MAGIC, VERSION, len(header)) + header + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _CKPT_HEAD.size + 32:
        raise FormatError("checkpoint is truncated")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    magic, version, header_len = _CKPT_HEAD.unpack(body[: _CKPT_HEAD.size])
    _check_magic(magic, CKPT_MAGIC, version)
    start = _CKPT_HEAD.size + header_len
    try:
        header = json.loads(body[_CKPT_HEAD.size : start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("checkpoint header is not valid JSON") from exc
    tensors = {}
    for e in header["tensors"]:
        raw, _ = _read_exact(body, start + e["offset"], e["nbytes"], f"tensor {e['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(header["meta"], tensors)


def save_checkpoint(path, ckpt):
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
