"""Gaussian-like DoA posterior targets, argmax decoding and circular metrics.

Column c (0-based) of a label matrix stands for azimuth c + 1 degrees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, ParameterError

N_CLASSES = 360
SIGMA_DEG = 8.0
_ANGLES = np.arange(1, N_CLASSES + 1)


def _check_angles(*angles):
    for a in angles:
        arr = np.asarray(a)
        if np.any(arr < 1) or np.any(arr > N_CLASSES):
            raise ParameterError(f"angle out of [1, 360]: {a}")


def circular_error(a_deg, b_deg):
    """Shortest distance on the 360-point circle, in [0, 180]. Vectorised."""
    _check_angles(a_deg, b_deg)
    diff = np.abs(np.asarray(a_deg, dtype=np.float64) - np.asarray(b_deg, dtype=np.float64))
    out = np.minimum(diff, N_CLASSES - diff)
    return float(out) if out.ndim == 0 else out


def encode_gaussian(theta_true_deg, sigma_deg=SIGMA_DEG, wrap=True) -> np.ndarray:
    """exp(-dist^2 / sigma^2) over the 360 classes (no normalising prefix).

    With ``wrap`` the distance is circular, so classes 1 and 360 are neighbours.
    """
    _check_angles(theta_true_deg)
    if not sigma_deg > 0:
        raise ParameterError(f"sigma must be positive, got {sigma_deg}")
    diff = np.abs(_ANGLES - float(theta_true_deg))
    if wrap:
        diff = np.minimum(diff, N_CLASSES - diff)
    return np.exp(-(diff**2) / sigma_deg**2)


@dataclass
class DoaLabelMatrix:
    values: np.ndarray  # (N, 360)
    sigma_deg: float
    class_mask: np.ndarray | None = None  # (360,) bool

    def __len__(self):
        return self.values.shape[0]


def encode_batch(doa_deg, sigma_deg=SIGMA_DEG, wrap=True) -> DoaLabelMatrix:
    doa = np.asarray(doa_deg, dtype=np.float64).reshape(-1)
    _check_angles(doa)
    if not sigma_deg > 0:
        raise ParameterError(f"sigma must be positive, got {sigma_deg}")
    diff = np.abs(_ANGLES[None, :] - doa[:, None])
    if wrap:
        diff = np.minimum(diff, N_CLASSES - diff)
    return DoaLabelMatrix(np.exp(-(diff**2) / sigma_deg**2), sigma_deg)


def class_mask(class_set) -> np.ndarray:
    classes = np.asarray(sorted(class_set), dtype=np.int64)
    _check_angles(classes)
    mask = np.zeros(N_CLASSES, dtype=bool)
    mask[classes - 1] = True
    return mask


def restrict_to_phase(labels: DoaLabelMatrix, class_set) -> DoaLabelMatrix:
    """Zero every column outside ``class_set`` (truncation, no renormalisation)."""
    mask = class_mask(class_set)
    if labels.class_mask is not None:
        mask &= labels.class_mask
    return DoaLabelMatrix(np.where(mask[None, :], labels.values, 0.0), labels.sigma_deg, mask)


def decode_argmax(posterior) -> int:
    """1-based index of the largest entry; ties go to the smallest index."""
    p = np.asarray(posterior, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DecodeError("posterior must be a non-empty vector")
    if np.isnan(p).any():
        raise DecodeError("posterior contains NaN")
    return int(np.argmax(p)) + 1


def decode_batch(posteriors) -> np.ndarray:
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] == 0:
        raise DecodeError("posteriors must be a non-empty (N, C) matrix")
    if np.isnan(p).any():
        raise DecodeError("posterior contains NaN")
    return np.argmax(p, axis=1) + 1
