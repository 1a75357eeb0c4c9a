"""Packing learner state into checkpoints and back.

The expansion matrix is never stored; only its seed and size, from which it
is regenerated bit-identically.
"""

from __future__ import annotations

import struct

import numpy as np

from .analytic import AnalyticState, ExpansionMap, check_spd, init_expansion
from .backbone import BackboneWeights
from .errors import FormatError
from .labels import N_CLASSES
from .storage import Checkpoint, load_checkpoint, save_checkpoint

STATE_MAGIC = b"SSLSTATE"
_STATE_HEAD = struct.Struct("<8sIIIId")


def state_to_bytes(state: AnalyticState) -> bytes:
    """Fixed-layout blob: header, a 360-slot int32 table of column class ids
    (0-padded), then W and R as float64.

    Its length is ``32 + 1440 + 8 * d_fe * (C + d_fe)``: it grows only by the
    new weight columns and never with the number of samples seen.
    """
    d, c = state.w_fcn.shape
    head = _STATE_HEAD.pack(STATE_MAGIC, 1, d, c, state.phase, state.eta)
    table = np.zeros(N_CLASSES, dtype="<i4")
    table[:c] = state.seen_classes
    return (
        head
        + table.tobytes()
        + np.ascontiguousarray(state.w_fcn, dtype="<f8").tobytes()
        + np.ascontiguousarray(state.r, dtype="<f8").tobytes()
    )


def state_from_bytes(buf: bytes) -> AnalyticState:
    if len(buf) < _STATE_HEAD.size:
        raise FormatError("truncated analytic state")
    magic, version, d, c, phase, eta = _STATE_HEAD.unpack(buf[: _STATE_HEAD.size])
    if magic != STATE_MAGIC or version != 1:
        raise FormatError("not an analytic state blob")
    expected = _STATE_HEAD.size + 4 * N_CLASSES + 8 * d * c + 8 * d * d
    if c > N_CLASSES or len(buf) != expected:
        raise FormatError(f"analytic state has {len(buf)} bytes, expected {expected}")
    off = _STATE_HEAD.size
    classes = tuple(int(v) for v in np.frombuffer(buf, "<i4", c, off))
    off += 4 * N_CLASSES
    w = np.frombuffer(buf, "<f8", d * c, off).reshape(d, c).copy()
    off += 8 * d * c
    r = np.frombuffer(buf, "<f8", d * d, off).reshape(d, d).copy()
    return AnalyticState(w, r, eta, classes, phase)


def make_checkpoint(config: dict, seed, backbone: BackboneWeights, fe_map: ExpansionMap,
                    state: AnalyticState) -> Checkpoint:
    meta = {
        "format": "sslcil",
        "config": config,
        "seed": int(seed),
        "backbone_dims": list(backbone.dims),
        "expansion_seed": int(fe_map.seed),
        "d_fe": int(fe_map.d_fe),
        "eta": float(state.eta),
        "phase": int(state.phase),
        "seen_classes": [int(c) for c in state.seen_classes],
    }
    tensors = {f"backbone/{k}": v for k, v in backbone.params.items()}
    tensors["state/w_fcn"] = state.w_fcn
    tensors["state/r"] = state.r
    return Checkpoint(meta, tensors)


def restore(ckpt: Checkpoint):
    """Returns (backbone, fe_map, state, meta); re-checks that R is SPD."""
    meta = ckpt.meta
    try:
        params = {
            k.split("/", 1)[1]: np.array(v) for k, v in ckpt.tensors.items() if k.startswith("backbone/")
        }
        backbone = BackboneWeights(tuple(meta["backbone_dims"]), params, frozen=True)
        state = AnalyticState(
            np.array(ckpt.tensors["state/w_fcn"]),
            np.array(ckpt.tensors["state/r"]),
            float(meta["eta"]),
            tuple(meta["seen_classes"]),
            int(meta["phase"]),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing {exc}") from exc
    if state.w_fcn.shape != (meta["d_fe"], len(state.seen_classes)):
        raise FormatError("checkpoint weight shape disagrees with its metadata")
    check_spd(state.r, " in checkpoint")
    fe_map = init_expansion(backbone.d_out, meta["d_fe"], meta["expansion_seed"])
    return backbone, fe_map, state, meta


def save(path, config, seed, backbone, fe_map, state):
    save_checkpoint(path, make_checkpoint(config, seed, backbone, fe_map, state))


def load(path):
    return restore(load_checkpoint(path))
