"""Closed-form, exemplar-free classifier head.

Embeddings are lifted by a frozen random projection + ReLU, a ridge
regression head is fitted in closed form on the base phase, and every later
phase updates the head and the inverse regularised Gram matrix ("feature
correlation matrix", R) from the current phase's data alone.  After any
sequence of updates the head equals the ridge solution on all data seen so
far, which ``joint_solve`` computes directly for verification.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .backbone import BackboneWeights, embed
from .errors import NotTrainedError, NumericalError, ParameterError, ProtocolError, ShapeError
from .labels import N_CLASSES

logger = logging.getLogger(__name__)

PAPER_EXPANSION_SIZE = 20000
# 64-bit R above this size needs > 0.5 GB
_LARGE_EXPANSION = 8192


@dataclass(frozen=True)
class ExpansionMap:
    w_fe: np.ndarray  # (d_mlp, d_fe)
    seed: int

    @property
    def d_mlp(self):
        return self.w_fe.shape[0]

    @property
    def d_fe(self):
        return self.w_fe.shape[1]


def init_expansion(d_mlp, d_fe=PAPER_EXPANSION_SIZE, seed=0) -> ExpansionMap:
    """Standard-normal projection matrix, regenerated bit-identically from ``seed``."""
    if d_mlp < 1 or d_fe <= d_mlp:
        raise ParameterError(f"expansion size {d_fe} must exceed embedding size {d_mlp}")
    if d_fe > _LARGE_EXPANSION:
        warnings.warn(
            f"d_fe={d_fe}: the correlation matrix alone takes {d_fe * d_fe * 8 / 1e9:.1f} GB",
            ResourceWarning,
            stacklevel=2,
        )
    w = np.random.default_rng(seed).standard_normal((d_mlp, d_fe))
    w.setflags(write=False)
    return ExpansionMap(w, int(seed))


def expand(x_mlp, fe_map: ExpansionMap) -> np.ndarray:
    x = np.asarray(x_mlp, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != fe_map.d_mlp:
        raise ShapeError(f"embedding has shape {x.shape}, expected (N, {fe_map.d_mlp})")
    return np.maximum(x @ fe_map.w_fe, 0.0)


@dataclass(frozen=True)
class AnalyticState:
    w_fcn: np.ndarray  # (d_fe, C); column c belongs to class seen_classes[c]
    r: np.ndarray  # (d_fe, d_fe)
    eta: float
    seen_classes: tuple
    phase: int

    @property
    def d_fe(self):
        return self.r.shape[0]

    @property
    def n_classes(self):
        return len(self.seen_classes)


def _check_eta(eta):
    if not (np.isfinite(eta) and eta > 0):
        raise ParameterError(f"eta must be a positive finite number, got {eta}")


def _as_2d(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _symmetrize(m):
    return 0.5 * (m + m.T)


def check_spd(r, context=""):
    """Raise NumericalError unless ``r`` is symmetric positive definite."""
    scale = max(np.abs(r).max(), np.finfo(float).tiny)
    if np.abs(r - r.T).max() > 1e-8 * scale:
        raise NumericalError(f"correlation matrix is not symmetric{context}")
    try:
        chol = linalg.cholesky(r, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"correlation matrix is not positive definite{context}") from exc
    if not np.all(np.diag(chol) > 0):
        raise NumericalError(f"correlation matrix is not positive definite{context}")


def realign(x_fe, y, eta, classes=None) -> AnalyticState:
    """Ridge-regression head for the base phase.

    ``y`` has one column per entry of ``classes`` (default: 1..C).
    """
    _check_eta(eta)
    x = _as_2d(x_fe, "x_fe")
    y = _as_2d(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows vs {y.shape[0]} label rows")
    classes = tuple(range(1, y.shape[1] + 1)) if classes is None else tuple(int(c) for c in classes)
    if len(classes) != y.shape[1] or len(set(classes)) != len(classes):
        raise ShapeError("classes must name each label column exactly once")
    gram = x.T @ x
    gram[np.diag_indices_from(gram)] += eta
    try:
        factor = linalg.cho_factor(gram, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("regularised Gram matrix is not positive definite") from exc
    r = _symmetrize(linalg.cho_solve(factor, np.eye(gram.shape[0])))
    w = r @ (x.T @ y)
    return AnalyticState(w, r, float(eta), classes, 0)


def _woodbury_small(r, x):
    """R - R X^T (I + X R X^T)^{-1} X R through an N x N Cholesky solve."""
    rxt = r @ x.T
    inner = x @ rxt
    inner[np.diag_indices_from(inner)] += 1.0
    gain = linalg.cho_solve(linalg.cho_factor(inner, lower=True), rxt.T)
    return r - rxt @ gain


def _woodbury_large(r, x):
    """Same update for N >= d_fe: with R = L L^T, R' = L (I + L^T X^T X L)^{-1} L^T."""
    low = linalg.cholesky(r, lower=True)
    xl = x @ low
    inner = xl.T @ xl
    inner[np.diag_indices_from(inner)] += 1.0
    return low @ linalg.cho_solve(linalg.cho_factor(inner, lower=True), low.T)


def update_fcm(r, x):
    if x.shape[0] == 0:
        return r
    step = _woodbury_small if x.shape[0] < r.shape[0] else _woodbury_large
    try:
        return _symmetrize(step(r, x))
    except linalg.LinAlgError as exc:
        raise NumericalError("Woodbury inner system is not positive definite") from exc


def incremental_update(state: AnalyticState, x_fe, y, new_classes, verify=True) -> AnalyticState:
    """Absorb one phase of data without touching any earlier sample.

    R_k = R_{k-1} - R_{k-1} X^T (I + X R_{k-1} X^T)^{-1} X R_{k-1}
    W_k = [W_{k-1} - R_k X^T X W_{k-1} | R_k X^T Y]
    """
    x = _as_2d(x_fe, "x_fe")
    y = _as_2d(y, "y")
    new_classes = tuple(int(c) for c in new_classes)
    if x.shape[1] != state.d_fe:
        raise ShapeError(f"features have {x.shape[1]} columns, state expects {state.d_fe}")
    if x.shape[0] != y.shape[0] or y.shape[1] != len(new_classes):
        raise ShapeError(
            f"labels {y.shape} do not match {x.shape[0]} rows x {len(new_classes)} new classes"
        )
    overlap = set(new_classes) & set(state.seen_classes)
    if overlap or len(set(new_classes)) != len(new_classes):
        raise ProtocolError(f"classes already seen or repeated: {sorted(overlap) or new_classes}")

    phase = state.phase + 1
    try:
        r = update_fcm(state.r, x)
    except NumericalError as exc:
        raise NumericalError(f"{exc} at phase {phase}") from exc
    if verify:
        check_spd(r, f" after phase {phase}")
    w_old = state.w_fcn - r @ (x.T @ (x @ state.w_fcn))
    w_new = r @ (x.T @ y)
    return replace(
        state,
        w_fcn=np.hstack([w_old, w_new]),
        r=r,
        seen_classes=state.seen_classes + new_classes,
        phase=phase,
    )


def joint_solve(blocks, eta) -> np.ndarray:
    """(sum_i X_i^T X_i + eta I)^{-1} [X_0^T Y_0 | ... | X_k^T Y_k] in one shot."""
    _check_eta(eta)
    blocks = [(_as_2d(x, "x_fe"), _as_2d(y, "y")) for x, y in blocks]
    if not blocks:
        raise ParameterError("joint_solve needs at least one block")
    d = blocks[0][0].shape[1]
    gram = eta * np.eye(d)
    rhs = []
    for x, y in blocks:
        if x.shape[1] != d:
            raise ShapeError(f"block has {x.shape[1]} feature columns, expected {d}")
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape[0]} feature rows vs {y.shape[0]} label rows")
        gram += x.T @ x
        rhs.append(x.T @ y)
    return linalg.cho_solve(linalg.cho_factor(gram, lower=True), np.hstack(rhs))


def direct_fcm(blocks, eta) -> np.ndarray:
    """(sum_i X_i^T X_i + eta I)^{-1}, computed from scratch."""
    d = np.asarray(blocks[0]).shape[1]
    gram = eta * np.eye(d)
    for x in blocks:
        x = _as_2d(x, "x_fe")
        gram += x.T @ x
    return linalg.cho_solve(linalg.cho_factor(gram, lower=True), np.eye(d))


class Prediction(NamedTuple):
    posterior: np.ndarray  # (N, 360); -inf on unseen classes unless softmaxed
    angles: np.ndarray  # (N,) int degrees


def scatter_scores(head_out, seen_classes):
    """Place per-seen-class scores into a 360-wide matrix, -inf elsewhere."""
    full = np.full((head_out.shape[0], N_CLASSES), -np.inf)
    full[:, np.asarray(seen_classes, dtype=np.int64) - 1] = head_out
    return full


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_expanded(x_fe, state: AnalyticState, apply_softmax=False) -> Prediction:
    if state is None or state.n_classes == 0:
        raise NotTrainedError("analytic state has no classes yet")
    scores = scatter_scores(_as_2d(x_fe, "x_fe") @ state.w_fcn, state.seen_classes)
    angles = np.argmax(scores, axis=1) + 1
    return Prediction(softmax(scores) if apply_softmax else scores, angles)


def predict(x_raw, backbone: BackboneWeights, fe_map: ExpansionMap, state: AnalyticState,
            apply_softmax=False) -> Prediction:
    """GCC features -> embedding -> expansion -> head -> 360-way posterior and angle."""
    if state is None or state.n_classes == 0:
        raise NotTrainedError("analytic state has no classes yet")
    x = getattr(x_raw, "values", x_raw)
    return predict_expanded(expand(embed(x, backbone), fe_map), state, apply_softmax)
