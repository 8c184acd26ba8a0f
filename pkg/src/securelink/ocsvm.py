"""Per-device one-class SVM with a Gaussian kernel, plus the device registry.

The solver works on the dual problem

    minimize   1/2 a^T K a
    subject to 0 <= a_i <= 1/(tau*B),  sum(a) = 1

using sequential two-coordinate updates: the working pair is the most
KKT-violating (i from the "can grow" set with minimal gradient, j from the
"can shrink" set with maximal gradient), iterated until the violation gap
drops below tolerance. The offset rho is the mean decision value over margin
support vectors (strictly inside the box), falling back to the maximal-dual
point if every coefficient sits on a bound.

Authentication runs exactly one model: the one registered under the claimed
ID. Identification takes the argmax of all scores, breaking ties toward the
lexicographically smallest ID.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ConflictError,
    ConvergenceError,
    DataError,
    StateError,
    UnknownIdError,
)
from .fusion_net import FusionModel
from .signal_core import AlignedSample

REGISTRY_FORMAT = "securelink-registry"
REGISTRY_VERSION = 1

DEFAULT_GAMMA = 1.0 / 256.0  # 1 / embedding dimension
DEFAULT_TAU = 0.05
DEFAULT_B_MIN = 50


def gaussian_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> float:
    """exp(-gamma * ||a - b||^2); equals 1 iff the points coincide."""
    if not gamma > 0:
        raise ConfigError("gamma must be positive")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.exp(-gamma * (d @ d)))


def _kernel_matrix(x: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    sq = (
        (x * x).sum(axis=1)[:, None]
        + (y * y).sum(axis=1)[None, :]
        - 2.0 * (x @ y.T)
    )
    return np.exp(-gamma * np.maximum(sq, 0.0))


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray  # (S, E)
    dual_coeffs: np.ndarray  # (S,) positive
    rho: float
    gamma: float
    tau: float


@dataclass
class FitDiagnostics:
    """Solver internals kept for verification, not part of the model."""

    alpha: np.ndarray  # duals over all B training points
    kkt_gap: float
    iterations: int
    objective: float


def fit_ocsvm(
    embeddings: np.ndarray,
    tau: float = DEFAULT_TAU,
    gamma: float = DEFAULT_GAMMA,
    tol: float = 1e-5,
    max_iter: int = 100_000,
    return_diagnostics: bool = False,
):
    """Solve the one-class dual to KKT tolerance and package the model."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("one-class fit needs at least 2 embeddings")
    if not 0.0 < tau <= 1.0:
        raise ConfigError("tau must lie in (0, 1]")
    if not gamma > 0:
        raise ConfigError("gamma must be positive")
    b = x.shape[0]
    cbox = 1.0 / (tau * b)
    kmat = _kernel_matrix(x, x, gamma)

    # feasible start: first floor(tau*b) coefficients at the box bound,
    # one partial coefficient carrying the remainder of the simplex mass
    alpha = np.zeros(b)
    n_full = int(np.floor(tau * b))
    alpha[:n_full] = cbox
    if n_full < b:
        alpha[n_full] = 1.0 - n_full * cbox
    grad = kmat @ alpha

    bound_eps = 1e-12 * cbox
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        if it % 256 == 0:
            grad = kmat @ alpha  # periodic refresh against incremental drift
        up = alpha < cbox - bound_eps
        low = alpha > bound_eps
        if not up.any() or not low.any():
            gap = 0.0  # box and simplex intersect in a single point (tau*B <= 1 slack)
            break
        i = np.flatnonzero(up)[np.argmin(grad[up])]
        j = np.flatnonzero(low)[np.argmax(grad[low])]
        gap = grad[j] - grad[i]
        if gap <= tol:
            break
        quad = kmat[i, i] + kmat[j, j] - 2.0 * kmat[i, j]
        if quad <= 0:
            quad = 1e-12
        delta = min(gap / quad, cbox - alpha[i], alpha[j])
        pair_sum = alpha[i] + alpha[j]
        alpha[i] += delta
        alpha[j] = pair_sum - alpha[i]
        grad += delta * (kmat[:, i] - kmat[:, j])
    else:
        raise ConvergenceError(
            f"one-class dual did not reach tol={tol} within {max_iter} iterations"
        )

    grad = kmat @ alpha
    decision = grad  # value of sum_j a_j K(x_j, x_i) at each training point
    margin = (alpha > bound_eps) & (alpha < cbox - bound_eps)
    if margin.any():
        rho = float(decision[margin].mean())
    else:
        rho = float(decision[np.argmax(alpha)])

    keep = alpha > bound_eps
    model = OcSvmModel(
        support_vectors=x[keep].copy(),
        dual_coeffs=alpha[keep].copy(),
        rho=rho,
        gamma=gamma,
        tau=tau,
    )
    if return_diagnostics:
        objective = 0.5 * float(alpha @ kmat @ alpha)
        return model, FitDiagnostics(alpha=alpha, kkt_gap=float(gap), iterations=it,
                                     objective=objective)
    return model


def score(model: OcSvmModel, g: np.ndarray) -> float:
    """Signed decision value: sum_i a_i K(s_i, g) - rho (accept when >= 0)."""
    g = np.asarray(g, dtype=np.float64)
    k = _kernel_matrix(model.support_vectors, g[None], model.gamma)[:, 0]
    return float(model.dual_coeffs @ k - model.rho)


def score_many(model: OcSvmModel, gs: np.ndarray) -> np.ndarray:
    gs = np.asarray(gs, dtype=np.float64)
    k = _kernel_matrix(gs, model.support_vectors, model.gamma)
    return k @ model.dual_coeffs - model.rho


def decide(model: OcSvmModel, g: np.ndarray) -> bool:
    """True to accept (score >= 0), False to reject."""
    return score(model, g) >= 0.0


def pick_best(scores: Mapping[str, float]) -> str:
    """Argmax over per-ID scores; ties go to the lexicographically smallest ID."""
    if not scores:
        raise StateError("no registered devices to identify against")
    best = max(scores.values())
    return min(uid for uid, s in scores.items() if s == best)


@dataclass
class UavRegistry:
    """Claimed-ID -> one-class model map sharing one embedding checkpoint."""

    model_version: str = "unversioned"
    gamma: float = DEFAULT_GAMMA
    tau: float = DEFAULT_TAU
    b_min: int = DEFAULT_B_MIN
    checkpoint_ref: str = ""
    models: dict[str, OcSvmModel] = field(default_factory=dict)

    def ids(self) -> list[str]:
        return sorted(self.models)


def register_uav(
    registry: UavRegistry,
    uav_id: str,
    embeddings: np.ndarray,
    tau: float | None = None,
    gamma: float | None = None,
    overwrite: bool = False,
) -> UavRegistry:
    """Fit and store the one-class model for one device."""
    if uav_id in registry.models and not overwrite:
        raise ConflictError(f"device {uav_id!r} is already registered")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < registry.b_min:
        raise DataError(
            f"registration needs at least {registry.b_min} embeddings, "
            f"got {embeddings.shape[0] if embeddings.ndim == 2 else 'non-matrix'}"
        )
    registry.models[uav_id] = fit_ocsvm(
        embeddings,
        tau=registry.tau if tau is None else tau,
        gamma=registry.gamma if gamma is None else gamma,
    )
    return registry


def _embedder(model) -> Callable[[AlignedSample], np.ndarray]:
    if isinstance(model, FusionModel):
        return model.embed_sample
    if callable(model):
        return model
    raise ConfigError("model must be a FusionModel or a sample -> embedding callable")


def authenticate(
    registry: UavRegistry,
    claimed_id: str,
    sample: AlignedSample,
    model,
) -> tuple[bool, float]:
    """Embed the sample and run exactly the claimed device's one-class model."""
    if claimed_id not in registry.models:
        raise UnknownIdError(f"no registered device with id {claimed_id!r}")
    g = _embedder(model)(sample)
    s = score(registry.models[claimed_id], g)
    return s >= 0.0, s


def identify(registry: UavRegistry, sample: AlignedSample, model) -> str:
    """Best-matching registered ID for a sample (closed-world prediction)."""
    if not registry.models:
        raise StateError("registry is empty")
    g = _embedder(model)(sample)
    return pick_best({uid: score(m, g) for uid, m in registry.models.items()})


# -- persistence --------------------------------------------------------------


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "dtype": "<f8",
        "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).copy()


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def save_registry(registry: UavRegistry, path: str | Path) -> None:
    payload = {
        "format": REGISTRY_FORMAT,
        "format_version": REGISTRY_VERSION,
        "model_version": registry.model_version,
        "gamma": registry.gamma,
        "tau": registry.tau,
        "b_min": registry.b_min,
        "checkpoint_ref": registry.checkpoint_ref,
        "models": {
            uid: {
                "support_vectors": _encode(m.support_vectors),
                "dual_coeffs": _encode(m.dual_coeffs),
                "rho": m.rho,
                "gamma": m.gamma,
                "tau": m.tau,
            }
            for uid, m in registry.models.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_registry(path: str | Path) -> UavRegistry:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != REGISTRY_FORMAT:
        raise ConfigError(f"{path} is not a registry file")
    if payload.get("format_version") != REGISTRY_VERSION:
        raise ConfigError(f"unsupported registry version {payload.get('format_version')}")
    registry = UavRegistry(
        model_version=payload["model_version"],
        gamma=payload["gamma"],
        tau=payload["tau"],
        b_min=payload["b_min"],
        checkpoint_ref=payload["checkpoint_ref"],
    )
    for uid, m in payload["models"].items():
        registry.models[uid] = OcSvmModel(
            support_vectors=_decode(m["support_vectors"]),
            dual_coeffs=_decode(m["dual_coeffs"]),
            rho=m["rho"],
            gamma=m["gamma"],
            tau=m["tau"],
        )
    return registry
