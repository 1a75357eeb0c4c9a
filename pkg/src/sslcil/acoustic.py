"""Synthetic far-field microphone-array recordings with known DoA.

Azimuth convention: theta is measured counterclockwise from the positive
x-axis of the array frame, in integer degrees 1..360.  A plane wave arriving
from theta reaches microphone m with delay ``-(p_m . u(theta)) / c`` relative
to the array origin, so microphones closer to the source hear it first.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ProtocolError

SOUND_SPEED = 343.0
SEGMENT_SECONDS = 0.170
# Extra samples generated on each side before cropping, on top of the
# largest geometric delay, so fractional shifts never wrap into the segment.
_GUARD_SAMPLES = 32


@dataclass(frozen=True)
class MicArrayGeometry:
    """Planar microphone array.

    ``positions`` is an (M, 2) array in meters.  ``pairs`` lists every
    (i, j) with i < j in lexicographic order; feature extraction concatenates
    pair outputs in this order.
    """

    positions: np.ndarray
    sample_rate: float
    sound_speed: float = SOUND_SPEED
    pairs: tuple = field(init=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 2:
            raise ParameterError(f"positions must be (M>=2, 2), got {pos.shape}")
        if not self.sound_speed > 0 or not self.sample_rate > 0:
            raise ParameterError("sound_speed and sample_rate must be positive")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(
            self, "pairs", tuple(itertools.combinations(range(pos.shape[0]), 2))
        )

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def make_array_geometry(width_m, height_m, sample_rate=48000.0, sound_speed=SOUND_SPEED):
    """Four microphones on the corners of a width x height rectangle centred
    at the origin, numbered counterclockwise from the (+x, +y) corner."""
    if not (width_m > 0 and height_m > 0):
        raise ParameterError(f"invalid geometry: {width_m} x {height_m} m")
    w, h = width_m / 2.0, height_m / 2.0
    positions = np.array([[w, h], [-w, h], [-w, -h], [w, -h]])
    return MicArrayGeometry(positions, float(sample_rate), float(sound_speed))


def _check_doa(doa_deg):
    doa = np.asarray(doa_deg)
    if np.any(doa < 1) or np.any(doa > 360):
        raise ParameterError(f"DoA must lie in [1, 360], got {doa_deg}")
    return doa


def unit_vector(doa_deg):
    rad = np.deg2rad(np.asarray(doa_deg, dtype=np.float64))
    return np.stack([np.cos(rad), np.sin(rad)], axis=-1)


def far_field_delays(geometry: MicArrayGeometry, doa_deg) -> np.ndarray:
    """Per-microphone arrival delays in seconds for a plane wave from ``doa_deg``."""
    _check_doa(doa_deg)
    return -(geometry.positions @ unit_vector(doa_deg)) / geometry.sound_speed


def pair_delays(geometry: MicArrayGeometry, doa_deg) -> np.ndarray:
    """delay_j - delay_i in seconds for every pair (i, j), in pair order."""
    d = far_field_delays(geometry, doa_deg)
    return np.array([d[j] - d[i] for i, j in geometry.pairs])


@dataclass
class AudioSegmentBatch:
    samples: np.ndarray  # (N, M, L)
    doa_deg: np.ndarray  # (N,) int
    snr_db: float | None  # None means clean
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.doa_deg = np.asarray(self.doa_deg, dtype=np.int64)
        if self.samples.ndim != 3 or self.samples.shape[0] != self.doa_deg.shape[0]:
            raise ParameterError(
                f"samples {self.samples.shape} do not match {self.doa_deg.shape[0]} labels"
            )
        _check_doa(self.doa_deg)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def n_channels(self):
        return self.samples.shape[1]

    @property
    def n_samples(self):
        return self.samples.shape[2]


@dataclass
class PhaseDataset:
    phase_index: int
    class_set: tuple
    train: AudioSegmentBatch
    test: AudioSegmentBatch

    def __post_init__(self):
        allowed = set(self.class_set)
        for part in (self.train, self.test):
            if not set(part.doa_deg.tolist()) <= allowed:
                raise ProtocolError(
                    f"phase {self.phase_index}: labels outside its class set"
                )


def segment_length(sample_rate, duration_s=SEGMENT_SECONDS) -> int:
    return int(round(duration_s * sample_rate))


def parse_snr(snr_db):
    """Normalise an SNR argument: ``"clean"``/None -> None, else a finite float."""
    if snr_db is None or (isinstance(snr_db, str) and snr_db.lower() == "clean"):
        return None
    try:
        snr = float(snr_db)
    except (TypeError, ValueError):
        raise ParameterError(f"bad SNR value {snr_db!r}") from None
    if not np.isfinite(snr):
        raise ParameterError(f"SNR must be finite or 'clean', got {snr_db!r}")
    return snr


def _source_spectrum(rng, length, kind):
    spec = np.fft.rfft(rng.standard_normal(length))
    if kind == "speech":
        # pink (1/f power) shaping, DC removed
        k = np.arange(spec.shape[0], dtype=np.float64)
        k[0] = np.inf
        spec = spec / np.sqrt(k)
    elif kind != "white":
        raise ParameterError(f"unknown source kind {kind!r}")
    if length % 2 == 0:
        # a fractional phase ramp cannot be represented on the real Nyquist bin
        spec[-1] = 0.0
    return spec


def delay_spectrum(spec, length, delays_samples):
    """Apply per-channel fractional delays (in samples) as linear phase ramps.

    Returns real signals of shape (channels, length); the shift is circular in
    ``length``.
    """
    k = np.arange(spec.shape[0])
    ramp = np.exp(-2j * np.pi * np.outer(delays_samples, k) / length)
    return np.fft.irfft(spec[None, :] * ramp, n=length, axis=-1)


def synthesize_segment(rng, geometry, doa_deg, n_samples, snr_db, source="white"):
    delays = far_field_delays(geometry, doa_deg) * geometry.sample_rate
    pad = int(np.ceil(np.abs(delays).max())) + _GUARD_SAMPLES
    total = n_samples + 2 * pad
    spec = _source_spectrum(rng, total, source)
    clean = delay_spectrum(spec, total, delays)[:, pad : pad + n_samples]
    clean /= np.sqrt(np.mean(clean**2)) + 1e-300
    if snr_db is None:
        return clean
    noise = rng.standard_normal(clean.shape)
    target_power = np.mean(clean**2) / 10.0 ** (snr_db / 10.0)
    noise *= np.sqrt(target_power / np.mean(noise**2))
    return clean + noise


def synthesize_segment_batch(
    n,
    geometry: MicArrayGeometry,
    doa_list,
    snr_db,
    seed,
    duration_s=SEGMENT_SECONDS,
    source="white",
) -> AudioSegmentBatch:
    """Generate ``n`` noisy array recordings, one per entry of ``doa_list``.

    Each segment is unit-power broadband noise (or pink "speech-like" noise)
    delayed per channel in the frequency domain, plus independent white
    noise per channel scaled so that total signal power / total noise power
    equals ``snr_db`` exactly.  Segment i draws from its own child of
    ``SeedSequence(seed)``, so output does not depend on evaluation order.
    """
    snr = parse_snr(snr_db)
    doa = np.asarray(doa_list, dtype=np.int64).reshape(-1)
    if doa.shape[0] != n:
        raise ParameterError(f"need {n} DoA labels, got {doa.shape[0]}")
    _check_doa(doa)
    length = segment_length(geometry.sample_rate, duration_s)
    # float32 matches the on-disk container, so regenerated and loaded data agree
    out = np.empty((n, geometry.n_mics, length), dtype=np.float32)
    children = np.random.SeedSequence(seed).spawn(n)
    for i, (theta, ss) in enumerate(zip(doa, children)):
        out[i] = synthesize_segment(
            np.random.default_rng(ss), geometry, theta, length, snr, source
        )
    return AudioSegmentBatch(out, doa, snr, geometry.sample_rate)


def generate_phase_splits(num_phases, classes_per_phase, assignment="contiguous", seed=0):
    """Partition DoA classes 1..360 into ``num_phases`` disjoint, equal-size sets."""
    if num_phases < 1 or classes_per_phase < 1:
        raise ParameterError("num_phases and classes_per_phase must be >= 1")
    if num_phases * classes_per_phase > 360:
        raise ParameterError(
            f"{num_phases} x {classes_per_phase} classes exceeds the 360 available"
        )
    if assignment == "contiguous":
        order = np.arange(1, 361)
    elif assignment == "random":
        order = np.random.default_rng(seed).permutation(np.arange(1, 361))
    else:
        raise ParameterError(f"unknown assignment {assignment!r}")
    return [
        tuple(sorted(int(c) for c in order[k * classes_per_phase : (k + 1) * classes_per_phase]))
        for k in range(num_phases)
    ]
