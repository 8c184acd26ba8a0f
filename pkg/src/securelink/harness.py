"""Synthetic fingerprint generation, dataset splits, metrics, and evaluation.

The generator produces both modalities from explicit hardware-imperfection
models. Accelerometer outputs follow the triaxial distortion model

    o = diag(c) @ D @ (a + b)

with per-axis scale c, cross-axis coupling D (unit diagonal), and bias b
applied to the ideal ADC signal a (gravity plus maneuver-dependent templates
plus turbulence). CSI phases are a fresh random line over subcarrier index
per frame (detection/sampling/center-frequency offsets vary per packet) plus
a frozen per-device nonlinear signature and Gaussian noise, emitted wrapped
to (-pi, pi]. CSI timestamps are jittered and thinned so the RF stream is
sparser than telemetry and alignment has to interpolate.

Evaluation: closed world identifies each test sample (argmax over per-device
one-class scores) and replays each sample once with a wrong claimed ID to
measure rejection; open world retrains per round with the round's impostors
excluded and measures authentication accept/reject outcomes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ocsvm
from .errors import ConfigError, DataError, InvalidInputError
from .fusion_net import FusionModel, ModelConfig
from .metric_learning import (
    MsLossConfig,
    SampleArrays,
    TrainConfig,
    train,
)
from .ocsvm import UavRegistry, register_uav, score_many
from .signal_core import (
    AlignedSample,
    CsiMeasurement,
    PreprocessConfig,
    TelemetryFrame,
    build_samples,
    default_subcarrier_indices,
    estimate_linear_component,
)

MANEUVERS = ("stationary", "hover", "up", "down", "left", "right", "rotate")

GRAVITY_ADC = 1000.0  # ideal z-axis accelerometer reading at rest
BARO_BASE = 100000.0
BARO_PER_M = 12.0
TOF_BASE = 120.0
TOF_PER_M = 1000.0
TURBULENCE_STD = 15.0
ATTITUDE_NOISE = 0.3  # degrees
CLIMB_RATE = 0.5  # m/s for up/down maneuvers


@dataclass(frozen=True)
class DeviceImperfection:
    """Hardware constants that make one device's streams identifiable."""

    scale: np.ndarray  # (3,) positive per-axis scale factors
    cross_axis: np.ndarray  # (3,3), unit diagonal
    bias: np.ndarray  # (3,)
    baro_offset: float
    tof_offset: float
    phase_signature: np.ndarray  # (K,), zero mean and zero linear component
    phase_noise_std: float
    sensor_noise_std: float

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        cross = np.asarray(self.cross_axis, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        sig = np.asarray(self.phase_signature, dtype=np.float64)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "cross_axis", cross)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "phase_signature", sig)
        if scale.shape != (3,) or np.any(scale <= 0):
            raise InvalidInputError("scale must be 3 positive factors")
        if cross.shape != (3, 3) or not np.allclose(np.diag(cross), 1.0, atol=1e-12):
            raise InvalidInputError("cross_axis must be 3x3 with unit diagonal")
        if bias.shape != (3,):
            raise InvalidInputError("bias must be a 3-vector")
        idx = default_subcarrier_indices(sig.size)
        if abs(sig.mean()) > 1e-9:
            raise InvalidInputError("phase signature must have zero mean")
        slope, _ = estimate_linear_component(sig, idx)
        if abs(slope) > 1e-9:
            raise InvalidInputError("phase signature must have zero linear component")
        if self.phase_noise_std < 0 or self.sensor_noise_std < 0:
            raise InvalidInputError("noise stds must be nonnegative")


@dataclass(frozen=True)
class MotionProfile:
    """Scripted flight: (duration_s, maneuver) segments plus stream rates."""

    schedule: tuple[tuple[float, str], ...]
    telemetry_rate: float = 10.0
    csi_rate: float = 9.0
    csi_jitter: float = 0.3  # fraction of the mean CSI interval
    csi_drop_prob: float = 0.1

    def __post_init__(self):
        object.__setattr__(
            self, "schedule", tuple((float(d), str(m)) for d, m in self.schedule)
        )
        if not self.schedule:
            raise ConfigError("schedule must be nonempty")
        for d, m in self.schedule:
            if d <= 0:
                raise ConfigError("segment durations must be positive")
            if m not in MANEUVERS:
                raise ConfigError(f"unknown maneuver {m!r}")
        if self.telemetry_rate <= 0 or self.csi_rate <= 0:
            raise ConfigError("rates must be positive")
        if not 0.0 <= self.csi_drop_prob < 1.0:
            raise ConfigError("csi_drop_prob must lie in [0, 1)")

    @property
    def duration(self) -> float:
        return sum(d for d, _ in self.schedule)


def make_phase_signature(rng: np.random.Generator, k: int, rms: float) -> np.ndarray:
    """Smooth random subcarrier curve, projected to zero mean / zero slope."""
    idx = default_subcarrier_indices(k)
    u = idx / idx.max()
    sig = np.zeros(k)
    for h in range(2, 7):
        sig += rng.normal(0, 1.0 / h) * np.sin(np.pi * h * u + rng.uniform(0, 2 * np.pi))
    slope, intercept = estimate_linear_component(sig, idx)
    sig = sig - slope * idx - intercept
    scale = np.sqrt(np.mean(sig**2))
    if scale > 0 and rms > 0:
        sig *= rms / scale
    return sig


@dataclass(frozen=True)
class FleetConfig:
    """Knobs controlling how distinct the generated devices are."""

    n_devices: int = 10
    k_subcarriers: int = 52
    seed: int = 1
    signature_rms: float = 0.2
    phase_noise_std: float = 0.3
    sensor_noise_std: float = 5.0
    scale_spread: float = 0.03
    cross_axis_spread: float = 0.02
    bias_spread: float = 8.0
    baro_offset_spread: float = 30.0
    tof_offset_spread: float = 15.0


def make_fleet(cfg: FleetConfig) -> dict[str, DeviceImperfection]:
    """Draw one frozen imperfection set per device, keyed dev01..devNN."""
    rng = np.random.default_rng(cfg.seed)
    fleet = {}
    for i in range(cfg.n_devices):
        device = DeviceImperfection(
            scale=1.0 + rng.normal(0, cfg.scale_spread, 3),
            cross_axis=np.eye(3)
            + rng.normal(0, cfg.cross_axis_spread, (3, 3)) * (1 - np.eye(3)),
            bias=rng.normal(0, cfg.bias_spread, 3),
            baro_offset=float(rng.normal(0, cfg.baro_offset_spread)),
            tof_offset=float(rng.normal(0, cfg.tof_offset_spread)),
            phase_signature=make_phase_signature(rng, cfg.k_subcarriers, cfg.signature_rms),
            phase_noise_std=cfg.phase_noise_std,
            sensor_noise_std=cfg.sensor_noise_std,
        )
        fleet[f"dev{i + 1:02d}"] = device
    return fleet


def default_profile(duration: float, **overrides) -> MotionProfile:
    """Cycle through flight maneuvers until the requested duration is covered."""
    block = [
        (3.0, "stationary"),
        (4.0, "hover"),
        (4.0, "up"),
        (4.0, "left"),
        (4.0, "rotate"),
        (4.0, "right"),
        (4.0, "down"),
    ]
    schedule: list[tuple[float, str]] = []
    total = 0.0
    i = 0
    while total < duration:
        d, m = block[i % len(block)]
        d = min(d, duration - total)
        schedule.append((d, m))
        total += d
        i += 1
    return MotionProfile(schedule=tuple(schedule), **overrides)


def profile_for_samples(
    n_samples: int, sample_len: int = 6, telemetry_rate: float = 10.0, **overrides
) -> MotionProfile:
    duration = (n_samples * sample_len + 2) / telemetry_rate
    return MotionProfile(
        schedule=default_profile(duration).schedule,
        telemetry_rate=telemetry_rate,
        **overrides,
    )


def _segment_attitude(maneuver: str, tau: np.ndarray) -> np.ndarray:
    n = tau.size
    att = np.zeros((n, 3))  # pitch, roll, yaw
    if maneuver == "hover":
        att[:, 0] = 2.0 * np.sin(2 * np.pi * 0.3 * tau)
        att[:, 1] = 2.0 * np.cos(2 * np.pi * 0.23 * tau)
    elif maneuver == "left":
        att[:, 1] = -8.0 + np.sin(2 * np.pi * 0.4 * tau)
    elif maneuver == "right":
        att[:, 1] = 8.0 + np.sin(2 * np.pi * 0.4 * tau)
    elif maneuver == "rotate":
        yaw = 40.0 * tau
        att[:, 2] = (yaw + 180.0) % 360.0 - 180.0
    return att


def _segment_accel(maneuver: str, tau: np.ndarray) -> np.ndarray:
    n = tau.size
    acc = np.zeros((n, 3))
    acc[:, 2] = GRAVITY_ADC
    if maneuver == "up":
        acc[:, 2] += 90.0 * np.sin(2 * np.pi * 0.25 * tau)
    elif maneuver == "down":
        acc[:, 2] -= 90.0 * np.sin(2 * np.pi * 0.25 * tau)
    elif maneuver == "left":
        acc[:, 1] = -110.0 * np.sin(2 * np.pi * 0.3 * tau)
    elif maneuver == "right":
        acc[:, 1] = 110.0 * np.sin(2 * np.pi * 0.3 * tau)
    elif maneuver == "rotate":
        acc[:, 0] = 30.0 * np.sin(2 * np.pi * 0.5 * tau)
        acc[:, 1] = 30.0 * np.cos(2 * np.pi * 0.5 * tau)
    return acc


def _ideal_streams(profile: MotionProfile, times: np.ndarray):
    """Per-frame attitude, ideal accel ADC signal, altitude, flying mask."""
    bounds = np.cumsum([0.0] + [d for d, _ in profile.schedule])
    seg = np.clip(np.searchsorted(bounds, times, side="right") - 1,
                  0, len(profile.schedule) - 1)
    att = np.zeros((times.size, 3))
    acc = np.zeros((times.size, 3))
    climb = np.zeros(times.size)
    flying = np.zeros(times.size, dtype=bool)
    for si, (dur, maneuver) in enumerate(profile.schedule):
        mask = seg == si
        if not mask.any():
            continue
        tau = times[mask] - bounds[si]
        att[mask] = _segment_attitude(maneuver, tau)
        acc[mask] = _segment_accel(maneuver, tau)
        climb[mask] = {"up": CLIMB_RATE, "down": -CLIMB_RATE}.get(maneuver, 0.0)
        flying[mask] = maneuver != "stationary"
    dt = np.diff(times, prepend=times[:1])
    altitude = np.maximum(np.cumsum(climb * dt), 0.0)
    return att, acc, altitude, flying


def _generate_telemetry(
    device: DeviceImperfection, profile: MotionProfile, rng: np.random.Generator
) -> list[TelemetryFrame]:
    n = int(np.floor(profile.duration * profile.telemetry_rate))
    times = np.arange(n) / profile.telemetry_rate
    att, acc_ideal, altitude, flying = _ideal_streams(profile, times)
    turbulence = rng.normal(0, TURBULENCE_STD, (n, 3)) * flying[:, None]
    a = acc_ideal + turbulence
    # o = diag(c) @ D @ (a + b), then measurement noise
    distorted = ((a + device.bias) @ device.cross_axis.T) * device.scale
    acc_out = distorted + rng.normal(0, device.sensor_noise_std, (n, 3))
    att_out = att + rng.normal(0, ATTITUDE_NOISE, (n, 3))
    baro = (
        BARO_BASE
        - BARO_PER_M * altitude
        + device.baro_offset
        + rng.normal(0, 0.5 * device.sensor_noise_std, n)
    )
    tof = (
        TOF_BASE
        + TOF_PER_M * altitude
        + device.tof_offset
        + rng.normal(0, 0.5 * device.sensor_noise_std, n)
    )
    return [
        TelemetryFrame(
            timestamp=float(times[i]),
            pitch=float(att_out[i, 0]),
            roll=float(att_out[i, 1]),
            yaw=float(att_out[i, 2]),
            acc_x=float(acc_out[i, 0]),
            acc_y=float(acc_out[i, 1]),
            acc_z=float(acc_out[i, 2]),
            baro=float(baro[i]),
            tof=float(tof[i]),
        )
        for i in range(n)
    ]


def _wrap_to_pi(phases: np.ndarray) -> np.ndarray:
    return phases - 2 * np.pi * np.floor((phases + np.pi) / (2 * np.pi))


def _generate_csi(
    device: DeviceImperfection, profile: MotionProfile, rng: np.random.Generator
) -> list[CsiMeasurement]:
    k = device.phase_signature.size
    idx = default_subcarrier_indices(k)
    n = int(np.floor(profile.duration * profile.csi_rate))
    base = np.arange(n) / profile.csi_rate
    jitter = rng.uniform(-profile.csi_jitter, profile.csi_jitter, n) / profile.csi_rate
    times = np.sort(np.clip(base + jitter, 0.0, profile.duration))
    keep = rng.random(n) >= profile.csi_drop_prob
    if keep.sum() < 2:
        keep[:2] = True
    times = times[keep]
    frames = []
    for t in times:
        slope = rng.uniform(-0.04, 0.04)
        intercept = rng.uniform(-np.pi, np.pi)
        phases = (
            slope * idx
            + intercept
            + device.phase_signature
            + rng.normal(0, device.phase_noise_std, k)
        )
        frames.append(
            CsiMeasurement(
                timestamp=float(t),
                phases=_wrap_to_pi(phases),
                subcarrier_indices=idx,
                rssi_dbm=float(-40.0 + rng.normal(0, 2.0)),
                noise_dbm=float(-92.0 + rng.normal(0, 1.0)),
            )
        )
    return frames


def synth_generate(
    devices: Sequence[DeviceImperfection],
    profile: MotionProfile,
    seed: int,
) -> list[tuple[list[CsiMeasurement], list[TelemetryFrame]]]:
    """Generate one (CSI stream, telemetry stream) pair per device."""
    ks = {d.phase_signature.size for d in devices}
    if len(ks) > 1:
        raise InvalidInputError("all devices must share one subcarrier count")
    streams = []
    for child in np.random.SeedSequence(seed).spawn(len(devices)):
        rng = np.random.default_rng(child)
        streams.append(rng)
    out = []
    for device, rng in zip(devices, streams):
        csi = _generate_csi(device, profile, rng)
        telemetry = _generate_telemetry(device, profile, rng)
        out.append((csi, telemetry))
    return out


def generate_samples(
    fleet: Mapping[str, DeviceImperfection],
    profile: MotionProfile,
    preprocess: PreprocessConfig,
    seed: int,
) -> list[AlignedSample]:
    """Generate, preprocess, and window every device's streams."""
    ids = sorted(fleet)
    streams = synth_generate([fleet[i] for i in ids], profile, seed)
    samples: list[AlignedSample] = []
    for device_id, (csi, telemetry) in zip(ids, streams):
        built, _ = build_samples(csi, telemetry, preprocess, device_id)
        samples.extend(built)
    return samples


# -- dataset splits -----------------------------------------------------------


@dataclass(frozen=True)
class ClosedSplit:
    train: list[AlignedSample]
    val: list[AlignedSample]
    test: list[AlignedSample]


@dataclass(frozen=True)
class OpenSplit:
    train: list[AlignedSample]
    val: list[AlignedSample]
    test_genuine: list[AlignedSample]
    test_impostor: list[tuple[AlignedSample, str]]  # (sample, claimed id)
    registered_ids: tuple[str, ...]


def _group_by_device(samples: Sequence[AlignedSample]) -> dict[str, list[AlignedSample]]:
    groups: dict[str, list[AlignedSample]] = {}
    for s in samples:
        if s.device_id is None:
            raise DataError("splitting requires labeled samples")
        groups.setdefault(s.device_id, []).append(s)
    return groups


def _split_device(samples, rng) -> tuple[list, list, list]:
    order = rng.permutation(len(samples))
    n_train = int(np.floor(0.6 * len(samples)))
    n_val = int(np.floor(0.2 * len(samples)))
    shuffled = [samples[i] for i in order]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


def split_closed(samples: Sequence[AlignedSample], seed: int = 0) -> ClosedSplit:
    """Per-device shuffled 60/20/20 train/val/test partition."""
    groups = _group_by_device(samples)
    rng = np.random.default_rng(seed)
    train_s: list[AlignedSample] = []
    val_s: list[AlignedSample] = []
    test_s: list[AlignedSample] = []
    for device_id in sorted(groups):
        pool = groups[device_id]
        if len(pool) < 5:
            raise DataError(f"device {device_id!r} has {len(pool)} samples; need >= 5")
        tr, va, te = _split_device(pool, rng)
        train_s.extend(tr)
        val_s.extend(va)
        test_s.extend(te)
    return ClosedSplit(train=train_s, val=val_s, test=test_s)


def split_open(
    samples: Sequence[AlignedSample],
    impostor_ids: Sequence[str],
    seed: int = 0,
) -> OpenSplit:
    """Registered devices keep a 60/20/20 split (80% train+val); impostors are
    test-only and each of their samples claims a random registered ID."""
    groups = _group_by_device(samples)
    impostors = sorted(set(impostor_ids))
    unknown = [i for i in impostors if i not in groups]
    if unknown:
        raise ConfigError(f"unknown impostor ids: {unknown}")
    registered = sorted(set(groups) - set(impostors))
    if not registered:
        raise DataError("impostors cover every device; nothing left to register")
    rng = np.random.default_rng(seed)
    train_s: list[AlignedSample] = []
    val_s: list[AlignedSample] = []
    test_genuine: list[AlignedSample] = []
    for device_id in registered:
        pool = groups[device_id]
        if len(pool) < 5:
            raise DataError(f"device {device_id!r} has {len(pool)} samples; need >= 5")
        tr, va, te = _split_device(pool, rng)
        train_s.extend(tr)
        val_s.extend(va)
        test_genuine.extend(te)
    test_impostor = []
    for device_id in impostors:
        for sample in groups[device_id]:
            claimed = registered[rng.integers(0, len(registered))]
            test_impostor.append((sample, claimed))
    return OpenSplit(
        train=train_s,
        val=val_s,
        test_genuine=test_genuine,
        test_impostor=test_impostor,
        registered_ids=tuple(registered),
    )


# -- metrics ------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    tnr: float | None
    recall: float
    precision: float | None
    confusion: np.ndarray  # rows true class, columns prediction
    labels: tuple[str, ...]
    counts: dict[str, int]
    per_round: list["EvalReport"] | None = None

    def to_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "tnr": self.tnr,
            "recall": self.recall,
            "precision": self.precision,
            "confusion": self.confusion.tolist(),
            "labels": list(self.labels),
            "counts": dict(self.counts),
        }
        if self.per_round is not None:
            d["per_round"] = [r.to_dict() for r in self.per_round]
        return d


def validate_report(report: EvalReport, class_counts: Mapping[str, int]) -> None:
    """Internal consistency: confusion row sums and confusion-derived accuracy."""
    for i, label in enumerate(report.labels):
        if report.confusion[i].sum() != class_counts[label]:
            raise DataError(f"confusion row {label!r} does not match its sample count")
    total = report.confusion.sum()
    if total:
        acc = np.trace(report.confusion) / total
        if abs(acc - report.accuracy) > 1e-9:
            raise DataError("accuracy is inconsistent with the confusion matrix")


def _scores_for(model, embeddings: np.ndarray) -> np.ndarray:
    if callable(model):
        return np.array([model(g) for g in embeddings])
    return score_many(model, embeddings)


def embed_samples(model, samples: Sequence[AlignedSample], chunk: int = 512) -> np.ndarray:
    """Eval-mode embeddings for a list of samples (models or plain callables)."""
    if isinstance(model, FusionModel):
        rf = np.stack([s.rf for s in samples])
        mems = np.stack([s.mems for s in samples])
        outs = []
        for start in range(0, len(samples), chunk):
            outs.append(model.forward_batch(rf[start : start + chunk],
                                            mems[start : start + chunk]).data)
        return np.concatenate(outs)
    return np.stack([model(s) for s in samples])


def evaluate_closed(
    registry: UavRegistry,
    model,
    test_samples: Sequence[AlignedSample],
    seed: int = 0,
) -> EvalReport:
    """Closed-world identification plus wrong-claim rejection replays."""
    if not test_samples:
        raise DataError("no test samples")
    labels = tuple(sorted({s.device_id for s in test_samples}))
    if any(l is None for l in labels):
        raise DataError("test samples must be labeled")
    missing = [l for l in labels if l not in registry.models]
    if missing:
        raise DataError(f"registry does not cover test labels: {missing}")
    registry_ids = registry.ids()
    embeddings = embed_samples(model, test_samples)
    score_matrix = np.stack(
        [_scores_for(registry.models[uid], embeddings) for uid in registry_ids]
    )  # (n_ids, n_samples)

    label_index = {l: i for i, l in enumerate(labels)}
    id_index = {uid: i for i, uid in enumerate(registry_ids)}
    confusion = np.zeros((len(labels), len(labels)), dtype=np.int64)
    rng = np.random.default_rng(seed)
    genuine_accepted = 0
    impostor_rejected = 0
    impostor_accepted = 0
    for si, sample in enumerate(test_samples):
        true_id = sample.device_id
        # identify: argmax over sorted ids; first max implements the tie rule
        pred = registry_ids[int(np.argmax(score_matrix[:, si]))]
        if pred in label_index:
            confusion[label_index[true_id], label_index[pred]] += 1
        if score_matrix[id_index[true_id], si] >= 0:
            genuine_accepted += 1
        others = [uid for uid in registry_ids if uid != true_id]
        wrong = others[rng.integers(0, len(others))]
        if score_matrix[id_index[wrong], si] >= 0:
            impostor_accepted += 1
        else:
            impostor_rejected += 1
    total = len(test_samples)
    counts = {
        "genuine_total": total,
        "genuine_accepted": genuine_accepted,
        "impostor_total": total,
        "impostor_rejected": impostor_rejected,
    }
    accepted_all = genuine_accepted + impostor_accepted
    report = EvalReport(
        accuracy=float(np.trace(confusion) / confusion.sum()),
        tnr=impostor_rejected / total,
        recall=genuine_accepted / total,
        precision=(genuine_accepted / accepted_all) if accepted_all else None,
        confusion=confusion,
        labels=labels,
        counts=counts,
    )
    validate_report(report, {l: sum(1 for s in test_samples if s.device_id == l)
                             for l in labels})
    return report


def evaluate_authentication(
    registry: UavRegistry,
    model,
    genuine: Sequence[AlignedSample],
    impostor: Sequence[tuple[AlignedSample, str]],
) -> EvalReport:
    """Accept/reject outcomes for genuine (true-ID) and impostor (claimed-ID)
    authentication attempts; confusion rows are (genuine, impostor)."""
    if not genuine:
        raise DataError("no genuine test samples")
    gen_emb = embed_samples(model, [s for s in genuine])
    gen_accept = 0
    for sample, g in zip(genuine, gen_emb):
        if sample.device_id not in registry.models:
            raise DataError(f"registry does not cover {sample.device_id!r}")
        if _scores_for(registry.models[sample.device_id], g[None])[0] >= 0:
            gen_accept += 1
    imp_reject = 0
    if impostor:
        imp_emb = embed_samples(model, [s for s, _ in impostor])
        for (sample, claimed), g in zip(impostor, imp_emb):
            if claimed not in registry.models:
                raise DataError(f"claimed id {claimed!r} is not registered")
            if _scores_for(registry.models[claimed], g[None])[0] < 0:
                imp_reject += 1
    n_gen, n_imp = len(genuine), len(impostor)
    confusion = np.array(
        [
            [gen_accept, n_gen - gen_accept],
            [n_imp - imp_reject, imp_reject],
        ],
        dtype=np.int64,
    )
    accepted_all = gen_accept + (n_imp - imp_reject)
    report = EvalReport(
        accuracy=float((gen_accept + imp_reject) / (n_gen + n_imp)),
        tnr=(imp_reject / n_imp) if n_imp else None,
        recall=gen_accept / n_gen,
        precision=(gen_accept / accepted_all) if accepted_all else None,
        confusion=confusion,
        labels=("genuine", "impostor"),
        counts={
            "genuine_total": n_gen,
            "genuine_accepted": gen_accept,
            "impostor_total": n_imp,
            "impostor_rejected": imp_reject,
        },
    )
    return report


# -- orchestration ------------------------------------------------------------


@dataclass(frozen=True)
class PipelineSettings:
    """Everything needed to train and register from labeled samples."""

    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    loss: MsLossConfig = field(default_factory=MsLossConfig)
    tau: float = ocsvm.DEFAULT_TAU
    gamma: float = ocsvm.DEFAULT_GAMMA
    b_min: int = ocsvm.DEFAULT_B_MIN


def train_and_register(
    train_samples: Sequence[AlignedSample],
    val_samples: Sequence[AlignedSample],
    settings: PipelineSettings,
) -> tuple[FusionModel, UavRegistry, list[dict]]:
    """Train the fusion model, then fit one one-class model per device on the
    embeddings of its train+val samples."""
    label_names = tuple(sorted({s.device_id for s in train_samples}))
    train_arrays = SampleArrays.from_samples(train_samples, label_names)
    val_arrays = SampleArrays.from_samples(val_samples, label_names)
    model = FusionModel(settings.model)
    model, history = train(model, train_arrays, val_arrays, settings.training, settings.loss)
    registry = UavRegistry(tau=settings.tau, gamma=settings.gamma, b_min=settings.b_min)
    by_device: dict[str, list[AlignedSample]] = {}
    for s in list(train_samples) + list(val_samples):
        by_device.setdefault(s.device_id, []).append(s)
    for device_id in sorted(by_device):
        embeddings = embed_samples(model, by_device[device_id])
        register_uav(registry, device_id, embeddings)
    return model, registry, history


def evaluate_open(
    samples: Sequence[AlignedSample],
    rounds: Sequence[Sequence[str]],
    settings: PipelineSettings,
    seed: int = 0,
) -> EvalReport:
    """Per-round open-world evaluation with retraining; averages across rounds."""
    if not rounds:
        raise ConfigError("round spec must contain at least one round")
    known = {s.device_id for s in samples}
    for r, impostors in enumerate(rounds):
        if not impostors or len(set(impostors)) != len(impostors):
            raise ConfigError(f"round {r}: impostor list must be nonempty and unique")
        bad = [i for i in impostors if i not in known]
        if bad:
            raise ConfigError(f"round {r}: unknown device ids {bad}")
    per_round = []
    for r, impostors in enumerate(rounds):
        round_seed = int(np.random.SeedSequence((seed, r)).generate_state(1)[0])
        split = split_open(samples, impostors, seed=round_seed)
        round_settings = replace(
            settings,
            model=replace(settings.model, seed=round_seed % (2**31)),
            training=replace(settings.training, seed=round_seed % (2**31)),
        )
        model, registry, _ = train_and_register(split.train, split.val, round_settings)
        per_round.append(
            evaluate_authentication(registry, model, split.test_genuine, split.test_impostor)
        )
    tnrs = [r.tnr for r in per_round if r.tnr is not None]
    precisions = [r.precision for r in per_round if r.precision is not None]
    total_confusion = np.sum([r.confusion for r in per_round], axis=0)
    summary = EvalReport(
        accuracy=float(np.mean([r.accuracy for r in per_round])),
        tnr=float(np.mean(tnrs)) if tnrs else None,
        recall=float(np.mean([r.recall for r in per_round])),
        precision=float(np.mean(precisions)) if precisions else None,
        confusion=total_confusion,
        labels=("genuine", "impostor"),
        counts={
            "genuine_total": int(sum(r.counts["genuine_total"] for r in per_round)),
            "genuine_accepted": int(sum(r.counts["genuine_accepted"] for r in per_round)),
            "impostor_total": int(sum(r.counts["impostor_total"] for r in per_round)),
            "impostor_rejected": int(sum(r.counts["impostor_rejected"] for r in per_round)),
        },
        per_round=per_round,
    )
    return summary


# -- runtime ------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineStages:
    """Chained per-sample callables timed by :func:`measure_runtime`."""

    preprocessing: Callable
    fusion: Callable
    identification: Callable


def measure_runtime(
    stages: PipelineStages, inputs: Sequence, min_count: int = 1000
) -> dict[str, float]:
    """Mean per-stage wall-clock milliseconds over at least ``min_count`` runs."""
    if not inputs:
        raise InvalidInputError("runtime measurement needs at least one input")
    totals = {"preprocessing": 0.0, "fusion": 0.0, "identification": 0.0}
    count = max(min_count, len(inputs))
    for i in range(count):
        x = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        s = stages.preprocessing(x)
        t1 = time.perf_counter()
        e = stages.fusion(s)
        t2 = time.perf_counter()
        stages.identification(e)
        t3 = time.perf_counter()
        totals["preprocessing"] += t1 - t0
        totals["fusion"] += t2 - t1
        totals["identification"] += t3 - t2
    means = {f"{k}_ms": 1000.0 * v / count for k, v in totals.items()}
    means["total_ms"] = sum(means.values())
    means["count"] = float(count)
    return means


# -- reference baseline -------------------------------------------------------


def nearest_centroid_baseline(
    train_samples: Sequence[AlignedSample], test_samples: Sequence[AlignedSample]
) -> float:
    """Closed-world accuracy of cosine nearest-centroid on standardized raw
    features; the trained pipeline is expected to beat this."""
    def features(samples):
        return np.stack(
            [np.concatenate([s.rf.ravel(), s.mems.ravel()]) for s in samples]
        )

    x_train = features(train_samples)
    mean = x_train.mean(axis=0)
    std = np.maximum(x_train.std(axis=0), 1e-9)
    x_train = (x_train - mean) / std
    labels = sorted({s.device_id for s in train_samples})
    centroids = []
    y_train = np.array([s.device_id for s in train_samples])
    for label in labels:
        c = x_train[y_train == label].mean(axis=0)
        centroids.append(c / np.linalg.norm(c))
    centroids = np.stack(centroids)
    x_test = (features(test_samples) - mean) / std
    x_test /= np.linalg.norm(x_test, axis=1, keepdims=True)
    pred = np.argmax(x_test @ centroids.T, axis=1)
    truth = np.array([labels.index(s.device_id) for s in test_samples])
    return float((pred == truth).mean())
