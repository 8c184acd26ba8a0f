"""Multi-similarity loss, pair mining, and the embedding training loop.

The loss treats every same-label pair as positive and every different-label
pair as negative (no hard mining): for each anchor i,

    (1/alpha) * log(1 + sum_j exp(-alpha * (C_ij - margin)))
  + (1/beta)  * log(1 + sum_r exp( beta  * (C_ir - margin)))

averaged over anchors, where C is cosine similarity of unit embeddings.
Batches are drawn class-balanced (P labels x Q samples) so positives always
exist; the trained snapshot returned is the one with best validation loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError, InvalidInputError
from .fusion_net import TRAIN, FusionModel
from .signal_core import AlignedSample


@dataclass(frozen=True)
class MsLossConfig:
    alpha: float = 1.0
    beta: float = 10.0
    margin: float = 0.5

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ConfigError("alpha and beta must be positive")
        if not -1.0 < self.margin < 1.0:
            raise ConfigError("margin must lie in (-1, 1)")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("learning_rate and batch_size must be positive, epochs >= 0")


@dataclass(frozen=True)
class Batch:
    """Unit-norm embeddings with integer device labels."""

    embeddings: np.ndarray  # (A, E)
    labels: np.ndarray  # (A,)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)
        if emb.ndim != 2 or labels.shape != (emb.shape[0],):
            raise InvalidInputError("embeddings must be (A, E) with one label per row")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidInputError("embedding rows must be unit-norm within 1e-6")


def cosine_similarity(g1: np.ndarray, g2: np.ndarray) -> float:
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 == 0.0 or n2 == 0.0:
        raise InvalidInputError("cosine similarity is undefined for the zero vector")
    return float(np.clip(g1 @ g2 / (n1 * n2), -1.0, 1.0))


def mine_pairs(batch: Batch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-anchor positive/negative index sets based on label equality only."""
    labels = batch.labels
    if labels.size < 2:
        raise InvalidInputError("a batch needs at least 2 samples")
    out = []
    idx = np.arange(labels.size)
    for i in range(labels.size):
        same = labels == labels[i]
        out.append((idx[same & (idx != i)], idx[~same]))
    return out


def _pair_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(labels.size, dtype=bool)
    return pos, ~same


def ms_loss(batch: Batch, cfg: MsLossConfig) -> float:
    """Multi-similarity loss of a batch (plain numpy evaluation)."""
    if batch.labels.size < 2:
        raise InvalidInputError("a batch needs at least 2 samples")
    c = batch.embeddings @ batch.embeddings.T
    pos_mask, neg_mask = _pair_masks(batch.labels)
    pos = (np.exp(-cfg.alpha * (c - cfg.margin)) * pos_mask).sum(axis=1)
    neg = (np.exp(cfg.beta * (c - cfg.margin)) * neg_mask).sum(axis=1)
    per_anchor = np.log1p(pos) / cfg.alpha + np.log1p(neg) / cfg.beta
    return float(per_anchor.mean())


def ms_loss_graph(embeddings: Tensor, labels: np.ndarray, cfg: MsLossConfig) -> Tensor:
    """Differentiable multi-similarity loss over embedding Tensors."""
    labels = np.asarray(labels, dtype=np.int64)
    c = ag.matmul(embeddings, ag.swapaxes(embeddings, 0, 1))
    pos_mask, neg_mask = _pair_masks(labels)
    pos = ag.tsum(ag.mul(ag.exp(ag.mul(ag.sub(c, cfg.margin), -cfg.alpha)), pos_mask), axis=1)
    neg = ag.tsum(ag.mul(ag.exp(ag.mul(ag.sub(c, cfg.margin), cfg.beta)), neg_mask), axis=1)
    per_anchor = ag.add(
        ag.mul(ag.log(ag.add(pos, 1.0)), 1.0 / cfg.alpha),
        ag.mul(ag.log(ag.add(neg, 1.0)), 1.0 / cfg.beta),
    )
    return ag.tmean(per_anchor)


class Adam:
    """Adaptive-moment optimizer with standard decay constants."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = list(params)
        self.lr = cfg.learning_rate
        self.b1, self.b2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * p.grad
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * p.grad**2
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class SampleArrays:
    """Aligned samples packed into contiguous arrays for batched forwards."""

    rf: np.ndarray  # (N, M, K)
    mems: np.ndarray  # (N, M, 8)
    labels: np.ndarray  # (N,) ints
    label_names: tuple[str, ...]

    @classmethod
    def from_samples(
        cls, samples: Sequence[AlignedSample], label_names: Sequence[str] | None = None
    ) -> "SampleArrays":
        if not samples:
            raise DataError("no samples")
        if label_names is None:
            label_names = sorted({s.device_id for s in samples if s.device_id is not None})
        index = {name: i for i, name in enumerate(label_names)}
        try:
            labels = np.array([index[s.device_id] for s in samples], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"sample with unknown device id {e.args[0]!r}") from e
        return cls(
            rf=np.stack([s.rf for s in samples]),
            mems=np.stack([s.mems for s in samples]),
            labels=labels,
            label_names=tuple(label_names),
        )

    def __len__(self) -> int:
        return self.labels.size


def _balanced_batch_plan(labels: np.ndarray, batch_size: int) -> tuple[list[np.ndarray], int, int]:
    """Class pools plus the (P, Q) layout used for every batch."""
    classes = np.unique(labels)
    pools = [np.flatnonzero(labels == c) for c in classes]
    pools = [p for p in pools if p.size >= 2]
    if len(pools) < 2 or batch_size < 4:
        raise DataError(
            "batch sampler needs >= 2 labels with >= 2 samples each and batch_size >= 4"
        )
    p_count = min(len(pools), max(2, batch_size // 2))
    q_count = max(2, batch_size // p_count)
    return pools, p_count, q_count


def _draw_batch(pools, p_count, q_count, rng) -> np.ndarray:
    chosen = rng.choice(len(pools), size=p_count, replace=False)
    parts = []
    for ci in chosen:
        pool = pools[ci]
        take = min(q_count, pool.size)
        parts.append(rng.choice(pool, size=take, replace=False))
    return np.concatenate(parts)


def evaluate_loss(
    model: FusionModel, data: SampleArrays, ms: MsLossConfig, max_chunk: int = 2048
) -> float:
    """Eval-mode multi-similarity loss over a whole sample set."""
    embs = []
    for start in range(0, len(data), max_chunk):
        sl = slice(start, start + max_chunk)
        embs.append(model.forward_batch(data.rf[sl], data.mems[sl]).data)
    return ms_loss(Batch(np.concatenate(embs), data.labels), ms)


def train(
    model: FusionModel,
    train_set: SampleArrays,
    val_set: SampleArrays,
    cfg: TrainConfig,
    ms: MsLossConfig,
) -> tuple[FusionModel, list[dict]]:
    """Optimize the fusion model; returns the best-validation snapshot + history."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.named_parameters(), cfg)
    history: list[dict] = []
    if cfg.epochs == 0:
        return model, history
    pools, p_count, q_count = _balanced_batch_plan(train_set.labels, cfg.batch_size)
    steps = max(1, len(train_set) // (p_count * q_count))
    best_val = np.inf
    best_state = model.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(steps):
            idx = _draw_batch(pools, p_count, q_count, rng)
            emb = model.forward_batch(train_set.rf[idx], train_set.mems[idx], mode=TRAIN)
            loss = ms_loss_graph(emb, train_set.labels[idx], ms)
            if not np.isfinite(loss.data):
                raise DataError("training loss became non-finite")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.data))
        val_loss = evaluate_loss(model, val_set, ms)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return model, history
