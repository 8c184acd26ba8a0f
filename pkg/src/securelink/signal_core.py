"""Domain types and preprocessing for both fingerprint modalities.

RF side: per-subcarrier CSI phases are unwrapped, frames with steep phase
gradients are filtered out, and the linear-in-index component (detection /
sampling offsets plus center-frequency offset) is removed by least squares,
leaving the nonlinear phase error that fingerprints the transmitter chain.

MEMS side: eight telemetry fields are projected out of raw records and frames
containing saturated or out-of-range values are dropped.

The two streams are aligned by resampling phase-error frames at telemetry
timestamps with linear interpolation, then cut into fixed-length windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateFitError,
    InvalidInputError,
    SchemaError,
)

TELEMETRY_FIELDS = ("pitch", "roll", "yaw", "acc_x", "acc_y", "acc_z", "baro", "tof")

_TWO_PI = 2.0 * np.pi


def default_subcarrier_indices(k: int) -> np.ndarray:
    """Symmetric subcarrier index grid with the DC bin removed (k must be even)."""
    if k < 2 or k % 2 != 0:
        raise ConfigError(f"subcarrier count must be even and >= 2, got {k}")
    half = k // 2
    return np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])


@dataclass(frozen=True)
class CsiMeasurement:
    """One timestamped vector of per-subcarrier phases from the receiver."""

    timestamp: float
    phases: np.ndarray
    subcarrier_indices: np.ndarray
    rssi_dbm: float | None = None
    noise_dbm: float | None = None

    def __post_init__(self):
        phases = np.asarray(self.phases, dtype=np.float64)
        indices = np.asarray(self.subcarrier_indices, dtype=np.int64)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "subcarrier_indices", indices)
        if phases.ndim != 1 or indices.shape != phases.shape:
            raise InvalidInputError("phases and subcarrier_indices must be 1-D and equal length")
        if phases.size < 2:
            raise InvalidInputError("a CSI measurement needs at least 2 subcarriers")
        if not np.all(np.isfinite(phases)):
            raise InvalidInputError("CSI phases must be finite")
        if not np.all(np.diff(indices) > 0):
            raise InvalidInputError("subcarrier indices must be strictly increasing")
        if not (np.isfinite(self.timestamp) and self.timestamp >= 0):
            raise InvalidInputError("timestamp must be finite and >= 0")


@dataclass(frozen=True)
class PhaseErrorFrame:
    """Nonlinear phase-error residual of one CSI measurement."""

    timestamp: float
    errors: np.ndarray

    def __post_init__(self):
        errors = np.asarray(self.errors, dtype=np.float64)
        object.__setattr__(self, "errors", errors)
        if not np.all(np.isfinite(errors)):
            raise InvalidInputError("phase errors must be finite")


@dataclass(frozen=True)
class TelemetryFrame:
    """One timestamped 8-field MEMS telemetry reading."""

    timestamp: float
    pitch: float
    roll: float
    yaw: float
    acc_x: float
    acc_y: float
    acc_z: float
    baro: float
    tof: float

    def values(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in TELEMETRY_FIELDS], dtype=np.float64)


@dataclass(frozen=True)
class AlignedSample:
    """An M-frame window pairing interpolated phase errors with telemetry."""

    rf: np.ndarray  # (M, K)
    mems: np.ndarray  # (M, 8)
    device_id: str | None = None

    def __post_init__(self):
        rf = np.asarray(self.rf, dtype=np.float64)
        mems = np.asarray(self.mems, dtype=np.float64)
        object.__setattr__(self, "rf", rf)
        object.__setattr__(self, "mems", mems)
        if rf.ndim != 2 or mems.ndim != 2:
            raise InvalidInputError("rf and mems must be 2-D matrices")
        if rf.shape[0] != mems.shape[0]:
            raise InvalidInputError("rf and mems must have the same number of rows")
        if rf.shape[0] < 2 or rf.shape[0] % 2 != 0:
            raise InvalidInputError("window length must be even and >= 2")
        if mems.shape[1] != len(TELEMETRY_FIELDS):
            raise InvalidInputError("mems matrix must have 8 columns")


@dataclass(frozen=True)
class PreprocessConfig:
    """Thresholds and valid ranges for preprocessing.

    ``eta`` is the gradient-variance filter threshold (eta == 0 drops every
    frame, useful as a CLI edge case). Field ranges default to unbounded and
    sentinels to none; the ToF register maximum is platform-specific and is
    supplied by the scenario or config file.
    """

    eta: float = 4.0
    sample_len: int = 6
    field_ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    saturation_sentinels: Mapping[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta >= 0):
            raise ConfigError("eta must be finite and >= 0")
        if self.sample_len < 2 or self.sample_len % 2 != 0:
            raise ConfigError("sample_len must be even and >= 2")
        for name in list(self.field_ranges) + list(self.saturation_sentinels):
            if name not in TELEMETRY_FIELDS:
                raise ConfigError(f"unknown telemetry field in config: {name!r}")
        for name, (lo, hi) in self.field_ranges.items():
            if not lo < hi:
                raise ConfigError(f"empty valid range for {name!r}")


def unwrap_phases(raw: Sequence[float] | np.ndarray) -> np.ndarray:
    """Undo 2-pi jumps so successive differences all lie in (-pi, pi]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size == 0 or not np.all(np.isfinite(raw)):
        raise InvalidInputError("unwrap_phases needs a finite 1-D vector")
    d = np.diff(raw)
    wrapped = d - _TWO_PI * np.ceil((d - np.pi) / _TWO_PI)
    return np.concatenate([raw[:1], raw[0] + np.cumsum(wrapped)])


def phase_gradient_variance(phi: Sequence[float] | np.ndarray) -> float:
    """Population variance of the successive phase differences."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 1 or phi.size < 2:
        raise InvalidInputError("phase gradient needs at least 2 subcarriers")
    return float(np.var(np.diff(phi)))


def filter_csi(
    frames: Sequence[CsiMeasurement], cfg: PreprocessConfig
) -> list[CsiMeasurement]:
    """Keep only frames whose phase-gradient variance is below the threshold."""
    return [m for m in frames if phase_gradient_variance(m.phases) < cfg.eta]


def estimate_linear_component(
    phi: Sequence[float] | np.ndarray, indices: Sequence[int] | np.ndarray
) -> tuple[float, float]:
    """Least-squares (slope, intercept) of phase over subcarrier index."""
    phi = np.asarray(phi, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.float64)
    if phi.ndim != 1 or idx.shape != phi.shape or phi.size < 2:
        raise InvalidInputError("need matching 1-D vectors of length >= 2")
    di = idx - idx.mean()
    denom = float(di @ di)
    if denom == 0.0:
        raise DegenerateFitError("all subcarrier indices are equal")
    slope = float(di @ (phi - phi.mean())) / denom
    intercept = float(phi.mean() - slope * idx.mean())
    return slope, intercept


def extract_phase_error(m: CsiMeasurement) -> PhaseErrorFrame:
    """Remove the fitted linear-in-index component, leaving the nonlinear error.

    The transmitter's true phase and the detection/sampling/ToF offsets are all
    linear in subcarrier index, so they are absorbed by the fitted line; the
    residual is slope- and intercept-invariant by construction.
    """
    slope, intercept = estimate_linear_component(m.phases, m.subcarrier_indices)
    errors = m.phases - slope * m.subcarrier_indices - intercept
    return PhaseErrorFrame(m.timestamp, errors)


def select_telemetry_fields(
    raw: Mapping[str, float], field_map: Mapping[str, str] | None = None
) -> TelemetryFrame:
    """Project the 8 canonical MEMS fields (plus timestamp) out of a record.

    ``field_map`` renames source keys per canonical field; extra record keys
    are ignored.
    """
    field_map = field_map or {}

    def pick(name: str) -> float:
        key = field_map.get(name, name)
        if key not in raw:
            raise SchemaError(key)
        return float(raw[key])

    values = {name: pick(name) for name in TELEMETRY_FIELDS}
    return TelemetryFrame(timestamp=pick("timestamp"), **values)


def remove_telemetry_outliers(
    frames: Sequence[TelemetryFrame], cfg: PreprocessConfig
) -> list[TelemetryFrame]:
    """Drop frames with any saturated or out-of-range field value."""
    kept = []
    for frame in frames:
        ok = True
        for name in TELEMETRY_FIELDS:
            v = getattr(frame, name)
            if v in cfg.saturation_sentinels.get(name, ()):
                ok = False
                break
            lo, hi = cfg.field_ranges.get(name, (-np.inf, np.inf))
            if not lo <= v <= hi:
                ok = False
                break
        if ok:
            kept.append(frame)
    return kept


def align_interpolate(
    E: Sequence[PhaseErrorFrame], S: Sequence[TelemetryFrame]
) -> list[tuple[PhaseErrorFrame, TelemetryFrame]]:
    """Resample phase-error frames at every telemetry timestamp.

    Each telemetry timestamp gets the linear interpolation of its two
    bracketing phase-error frames (per subcarrier); timestamps outside the RF
    span clamp to the nearest endpoint frame. Output length equals len(S).
    """
    if not E or not S:
        raise InvalidInputError("both streams must be nonempty for alignment")
    te = np.array([f.timestamp for f in E])
    ts = np.array([f.timestamp for f in S])
    if np.any(np.diff(te) < 0) or np.any(np.diff(ts) < 0):
        raise InvalidInputError("timestamps must be sorted ascending")
    em = np.stack([f.errors for f in E])
    if em.ndim != 2:
        raise InvalidInputError("phase-error frames must share one subcarrier count")
    if len(E) == 1:
        rows = np.repeat(em, len(S), axis=0)
    else:
        j = np.searchsorted(te, ts, side="right") - 1
        j = np.clip(j, 0, len(E) - 2)
        span = te[j + 1] - te[j]
        span = np.where(span == 0, 1.0, span)
        w = np.clip((ts - te[j]) / span, 0.0, 1.0)
        rows = (1.0 - w)[:, None] * em[j] + w[:, None] * em[j + 1]
    return [
        (PhaseErrorFrame(t, row), s_frame)
        for t, row, s_frame in zip(ts, rows, S)
    ]


def window_samples(
    aligned: Sequence[tuple[PhaseErrorFrame, TelemetryFrame]],
    M: int,
    device_id: str | None = None,
) -> list[AlignedSample]:
    """Cut aligned rows into consecutive non-overlapping windows of M rows."""
    if M < 2 or M % 2 != 0:
        raise InvalidInputError("window length M must be even and >= 2")
    samples = []
    for start in range(0, len(aligned) - M + 1, M):
        chunk = aligned[start : start + M]
        rf = np.stack([e.errors for e, _ in chunk])
        mems = np.stack([s.values() for _, s in chunk])
        samples.append(AlignedSample(rf=rf, mems=mems, device_id=device_id))
    return samples


@dataclass(frozen=True)
class PreprocessStats:
    """Counters reported by the end-to-end preprocessing pipeline."""

    csi_read: int
    csi_kept: int
    telemetry_read: int
    telemetry_kept: int
    samples: int


def preprocess_csi(
    frames: Sequence[CsiMeasurement], cfg: PreprocessConfig
) -> list[PhaseErrorFrame]:
    """Unwrap, variance-filter, and detrend a raw CSI stream."""
    unwrapped = [replace(m, phases=unwrap_phases(m.phases)) for m in frames]
    return [extract_phase_error(m) for m in filter_csi(unwrapped, cfg)]


def build_samples(
    csi_frames: Sequence[CsiMeasurement],
    telemetry_frames: Sequence[TelemetryFrame],
    cfg: PreprocessConfig,
    device_id: str | None = None,
) -> tuple[list[AlignedSample], PreprocessStats]:
    """Full preprocessing pipeline from raw streams to aligned windows."""
    errors = preprocess_csi(csi_frames, cfg)
    telemetry = remove_telemetry_outliers(telemetry_frames, cfg)
    if errors and telemetry:
        aligned = align_interpolate(errors, telemetry)
        samples = window_samples(aligned, cfg.sample_len, device_id)
    else:
        samples = []
    stats = PreprocessStats(
        csi_read=len(csi_frames),
        csi_kept=len(errors),
        telemetry_read=len(telemetry_frames),
        telemetry_kept=len(telemetry),
        samples=len(samples),
    )
    return samples, stats
