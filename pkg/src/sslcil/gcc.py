"""GCC-PHAT lag vectors and the stacked feature matrix fed to the network.

Lag convention: a positive lag means the second signal lags the first, i.e.
if ``x2[n] = x1[n - k]`` the correlation peaks at lag ``+k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .acoustic import AudioSegmentBatch, MicArrayGeometry
from .errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)

TAU_RANGE = 51
SPECTRAL_FLOOR = 1e-12
_CHUNK = 256


@dataclass
class GccFeatureMatrix:
    values: np.ndarray  # (N, n_pairs * tau_range)
    tau_range: int
    pair_order: tuple

    def __post_init__(self):
        d = len(self.pair_order) * self.tau_range
        if self.values.ndim != 2 or self.values.shape[1] != d:
            raise ShapeError(f"feature matrix {self.values.shape} does not have {d} columns")

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def fft_length(n_samples: int) -> int:
    """Smallest power of two >= 2 * n_samples."""
    return 1 << int(np.ceil(np.log2(max(2 * n_samples, 2))))


def _check_tau(tau_range, n_samples):
    if tau_range < 1 or tau_range % 2 == 0:
        raise ParameterError(f"tau_range must be a positive odd integer, got {tau_range}")
    if n_samples < tau_range:
        raise ShapeError(f"signals of length {n_samples} are shorter than tau_range {tau_range}")


def _phat(spec1, spec2, nfft, half):
    cross = spec2 * np.conj(spec1)
    mag = np.abs(cross)
    keep = mag >= SPECTRAL_FLOOR
    cross = np.where(keep, cross / np.where(keep, mag, 1.0), 0.0)
    cc = np.fft.irfft(cross, n=nfft, axis=-1)
    return np.concatenate([cc[..., nfft - half :], cc[..., : half + 1]], axis=-1)


def gcc_phat_pair(x1, x2, tau_range=TAU_RANGE) -> np.ndarray:
    """Phase-transform weighted cross-correlation at lags -h..+h, h = (tau_range-1)//2."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape or x1.ndim != 1:
        raise ShapeError(f"signals must be 1-D with equal length, got {x1.shape} and {x2.shape}")
    _check_tau(tau_range, x1.shape[0])
    nfft = fft_length(x1.shape[0])
    out = _phat(np.fft.rfft(x1, nfft), np.fft.rfft(x2, nfft), nfft, tau_range // 2)
    if not np.any(out):
        logger.warning("gcc_phat_pair: silent input, returning all-zero coefficients")
    return out


def extract_features(
    batch: AudioSegmentBatch, geometry: MicArrayGeometry, tau_range=TAU_RANGE
) -> GccFeatureMatrix:
    """Concatenate GCC-PHAT vectors over ``geometry.pairs`` for every segment."""
    samples = batch.samples
    n, m, length = samples.shape
    if m != geometry.n_mics:
        raise ShapeError(f"batch has {m} channels, geometry has {geometry.n_mics} microphones")
    _check_tau(tau_range, length)
    nfft = fft_length(length)
    half = tau_range // 2
    ii = [i for i, _ in geometry.pairs]
    jj = [j for _, j in geometry.pairs]
    out = np.empty((n, len(geometry.pairs), tau_range))
    for start in range(0, n, _CHUNK):
        spec = np.fft.rfft(samples[start : start + _CHUNK].astype(np.float64), nfft, axis=-1)
        out[start : start + _CHUNK] = _phat(spec[:, ii], spec[:, jj], nfft, half)
    return GccFeatureMatrix(out.reshape(n, len(geometry.pairs) * tau_range), tau_range, geometry.pairs)


def peak_lags(features: GccFeatureMatrix) -> np.ndarray:
    """Argmax lag per (segment, pair), shape (N, n_pairs)."""
    blocks = features.values.reshape(len(features), len(features.pair_order), features.tau_range)
    return blocks.argmax(axis=-1) - features.tau_range // 2
