"""Two-branch fusion network producing unit-norm metric embeddings.

Each modality runs through the same branch architecture: input batch norm,
a width-3 1D convolution (64 kernels), max pooling (window 2, stride 2,
which halves the time axis), a width-2 convolution, and a bidirectional
LSTM whose combined forward+backward output is 128 wide. The two branch
outputs are concatenated along the feature axis, passed through two
multi-head attention layers (4 heads, no residual or layer norm), flattened,
and mapped by a fully connected layer to a 256-dim embedding that is
L2-normalized so cosine similarity is a plain dot product.

Training gradients come from the package's own reverse-mode tape
(:mod:`securelink.autograd`); eval-mode forwards run off-tape with frozen
batch-norm statistics.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NormalizationError, ShapeError
from .signal_core import AlignedSample

CHECKPOINT_FORMAT = "securelink-checkpoint"
CHECKPOINT_VERSION = 1

TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; widths here fix every tensor shape."""

    k_subcarriers: int = 52
    sample_len: int = 6
    mems_fields: int = 8
    conv_channels: int = 64
    lstm_width: int = 128  # combined forward+backward output width
    attention_heads: int = 4
    attention_layers: int = 2
    embed_dim: int = 256
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("k_subcarriers", "mems_fields", "conv_channels",
                     "attention_layers", "embed_dim", "attention_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.sample_len < 2 or self.sample_len % 2 != 0:
            raise ConfigError("sample_len must be even and >= 2")
        if self.lstm_width % 2 != 0:
            raise ConfigError("lstm_width must be even (two directions)")
        if self.attn_width % self.attention_heads != 0:
            raise ConfigError(
                f"attention width {self.attn_width} not divisible by "
                f"{self.attention_heads} heads"
            )

    @property
    def attn_width(self) -> int:
        return 2 * self.lstm_width

    @property
    def head_width(self) -> int:
        return self.attn_width // self.attention_heads

    @property
    def flat_width(self) -> int:
        return (self.sample_len // 2) * self.attn_width


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float
    eps: float

    @classmethod
    def create(cls, width: int, momentum: float, eps: float) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(width), requires_grad=True),
            beta=Tensor(np.zeros(width), requires_grad=True),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            eps=eps,
        )


@dataclass
class ConvParams:
    w: Tensor  # (kernel, in_channels, out_channels)
    b: Tensor  # (out_channels,)

    @classmethod
    def create(cls, rng, kernel: int, cin: int, cout: int) -> "ConvParams":
        fan_in = kernel * cin
        return cls(w=_uniform(rng, (kernel, cin, cout), fan_in),
                   b=_uniform(rng, (cout,), fan_in))


@dataclass
class LstmParams:
    wx: Tensor  # (in, 4*hidden), gate order i|f|g|o
    wh: Tensor  # (hidden, 4*hidden)
    b: Tensor  # (4*hidden,)

    @classmethod
    def create(cls, rng, cin: int, hidden: int) -> "LstmParams":
        return cls(
            wx=_uniform(rng, (cin, 4 * hidden), cin),
            wh=_uniform(rng, (hidden, 4 * hidden), hidden),
            b=_uniform(rng, (4 * hidden,), hidden),
        )


@dataclass
class BranchParams:
    """One unimodal feature extractor (conv + pooling + conv + BiLSTM)."""

    input_width: int
    bn_in: BatchNormParams
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams
    lstm_fwd: LstmParams
    lstm_bwd: LstmParams

    @classmethod
    def create(cls, rng, cfg: ModelConfig, input_width: int) -> "BranchParams":
        c = cfg.conv_channels
        hidden = cfg.lstm_width // 2
        return cls(
            input_width=input_width,
            bn_in=BatchNormParams.create(input_width, cfg.bn_momentum, cfg.bn_eps),
            conv1=ConvParams.create(rng, 3, input_width, c),
            bn1=BatchNormParams.create(c, cfg.bn_momentum, cfg.bn_eps),
            conv2=ConvParams.create(rng, 2, c, c),
            bn2=BatchNormParams.create(c, cfg.bn_momentum, cfg.bn_eps),
            lstm_fwd=LstmParams.create(rng, c, hidden),
            lstm_bwd=LstmParams.create(rng, c, hidden),
        )


@dataclass
class AttentionLayerParams:
    """Head projections packed into (d, d) matrices; head i owns the column
    block [i*dh, (i+1)*dh) of wq/wk/wv."""

    heads: int
    wq: Tensor  # (d, d)
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (d, d)

    @classmethod
    def create(cls, rng, d: int, heads: int) -> "AttentionLayerParams":
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        mk = lambda: _uniform(rng, (d, d), d)
        return cls(heads=heads, wq=mk(), wk=mk(), wv=mk(), wo=_uniform(rng, (d, d), d))

    def head_matrices(self, which: str) -> list[np.ndarray]:
        w = getattr(self, which).data
        dh = w.shape[0] // self.heads
        return [w[:, i * dh : (i + 1) * dh] for i in range(self.heads)]


@dataclass
class AttentionParams:
    layers: list[AttentionLayerParams]

    @classmethod
    def create(cls, rng, cfg: ModelConfig) -> "AttentionParams":
        return cls(layers=[
            AttentionLayerParams.create(rng, cfg.attn_width, cfg.attention_heads)
            for _ in range(cfg.attention_layers)
        ])


@dataclass
class EmbeddingParams:
    w: Tensor  # (flat_width, embed_dim)
    b: Tensor  # (embed_dim,)

    @classmethod
    def create(cls, rng, cfg: ModelConfig) -> "EmbeddingParams":
        return cls(
            w=_uniform(rng, (cfg.flat_width, cfg.embed_dim), cfg.flat_width),
            b=_uniform(rng, (cfg.embed_dim,), cfg.flat_width),
        )


def _batchnorm(x: Tensor, p: BatchNormParams, mode: str, frozen_stats: bool) -> Tensor:
    # x is (B, T, C); statistics per channel over batch and time
    if mode == TRAIN and not frozen_stats:
        mu = ag.tmean(x, axis=(0, 1), keepdims=True)
        xc = ag.sub(x, mu)
        var = ag.tmean(ag.mul(xc, xc), axis=(0, 1), keepdims=True)
        m = p.momentum
        p.running_mean = m * p.running_mean + (1 - m) * mu.data.reshape(-1)
        p.running_var = m * p.running_var + (1 - m) * var.data.reshape(-1)
        xhat = ag.div(xc, ag.sqrt(ag.add(var, p.eps)))
    else:
        scale = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = ag.mul(ag.sub(x, p.running_mean), scale)
    return ag.add(ag.mul(xhat, p.gamma), p.beta)


def _conv1d_same(x: Tensor, p: ConvParams) -> Tensor:
    # x (B, T, Cin) -> (B, T, Cout); even kernels pad one extra on the left
    k = p.w.shape[0]
    t = x.shape[1]
    xp = ag.pad_axis(x, 1, k // 2, (k - 1) // 2)
    out = None
    for j in range(k):
        term = ag.matmul(xp[:, j : j + t, :], p.w[j])
        out = term if out is None else ag.add(out, term)
    return ag.add(out, p.b)


def _lstm_direction(x: Tensor, p: LstmParams, reverse: bool) -> list[Tensor]:
    hidden = p.wh.shape[0]
    batch, t_len = x.shape[0], x.shape[1]
    xw = ag.add(ag.matmul(x, p.wx), p.b)  # input transform for all steps at once
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    outs = []
    for t in order:
        z = ag.add(xw[:, t, :], ag.matmul(h, p.wh))
        i = ag.sigmoid(z[:, 0:hidden])
        f = ag.sigmoid(z[:, hidden : 2 * hidden])
        g = ag.tanh(z[:, 2 * hidden : 3 * hidden])
        o = ag.sigmoid(z[:, 3 * hidden : 4 * hidden])
        c = ag.add(ag.mul(f, c), ag.mul(i, g))
        h = ag.mul(o, ag.tanh(c))
        outs.append(h)
    if reverse:
        outs.reverse()
    return outs


def _branch(x: Tensor, p: BranchParams, mode: str, frozen_stats: bool) -> Tensor:
    x = _batchnorm(x, p.bn_in, mode, frozen_stats)
    x = ag.relu(_batchnorm(_conv1d_same(x, p.conv1), p.bn1, mode, frozen_stats))
    x = ag.maxpool_time(x, 2)
    x = ag.relu(_batchnorm(_conv1d_same(x, p.conv2), p.bn2, mode, frozen_stats))
    steps = [x[:, t, :] for t in range(x.shape[1])]
    fwd = _lstm_direction(steps, p.lstm_fwd, reverse=False)
    bwd = _lstm_direction(steps, p.lstm_bwd, reverse=True)
    rows = [ag.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
    return ag.stack_time(rows)


def _attention_layer(
    u: Tensor,
    p: AttentionLayerParams,
    collect: list[np.ndarray] | None = None,
) -> Tensor:
    dh = p.wq[0].shape[1]
    scale = 1.0 / np.sqrt(dh)
    heads = []
    for wq, wk, wv in zip(p.wq, p.wk, p.wv):
        q = ag.matmul(u, wq)
        k = ag.matmul(u, wk)
        v = ag.matmul(u, wv)
        scores = ag.mul(ag.matmul(q, ag.swapaxes(k, -1, -2)), scale)
        weights = ag.softmax(scores, axis=-1)
        if collect is not None:
            collect.append(weights.data.copy())
        heads.append(ag.matmul(weights, v))
    return ag.matmul(ag.concat(heads, axis=-1), p.wo)


def _embed(flat: Tensor, p: EmbeddingParams) -> Tensor:
    g = ag.add(ag.matmul(flat, p.w), p.b)
    sq = ag.tsum(ag.mul(g, g), axis=-1, keepdims=True)
    if np.any(sq.data <= 1e-24):
        raise NormalizationError("embedding collapsed to the zero vector")
    return ag.div(g, ag.sqrt(sq))


class FusionModel:
    """Parameter container plus forward passes for both modalities."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.rf_branch = BranchParams.create(rng, cfg, cfg.k_subcarriers)
        self.mems_branch = BranchParams.create(rng, cfg, cfg.mems_fields)
        self.attention = AttentionParams.create(rng, cfg)
        self.embedding = EmbeddingParams.create(rng, cfg)

    # -- parameter bookkeeping -------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for side in ("rf_branch", "mems_branch"):
            b: BranchParams = getattr(self, side)
            for bn_name in ("bn_in", "bn1", "bn2"):
                bn: BatchNormParams = getattr(b, bn_name)
                out.append((f"{side}.{bn_name}.gamma", bn.gamma))
                out.append((f"{side}.{bn_name}.beta", bn.beta))
            for conv_name in ("conv1", "conv2"):
                conv: ConvParams = getattr(b, conv_name)
                out.append((f"{side}.{conv_name}.w", conv.w))
                out.append((f"{side}.{conv_name}.b", conv.b))
            for lstm_name in ("lstm_fwd", "lstm_bwd"):
                lstm: LstmParams = getattr(b, lstm_name)
                out.append((f"{side}.{lstm_name}.wx", lstm.wx))
                out.append((f"{side}.{lstm_name}.wh", lstm.wh))
                out.append((f"{side}.{lstm_name}.b", lstm.b))
        for li, layer in enumerate(self.attention.layers):
            for hi in range(self.cfg.attention_heads):
                out.append((f"attention.{li}.wq{hi}", layer.wq[hi]))
                out.append((f"attention.{li}.wk{hi}", layer.wk[hi]))
                out.append((f"attention.{li}.wv{hi}", layer.wv[hi]))
            out.append((f"attention.{li}.wo", layer.wo))
        out.append(("embedding.w", self.embedding.w))
        out.append(("embedding.b", self.embedding.b))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for side in ("rf_branch", "mems_branch"):
            b: BranchParams = getattr(self, side)
            for bn_name in ("bn_in", "bn1", "bn2"):
                bn: BatchNormParams = getattr(b, bn_name)
                out.append((f"{side}.{bn_name}.running_mean", bn.running_mean))
                out.append((f"{side}.{bn_name}.running_var", bn.running_var))
        return out

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        side, bn_name, stat = name.split(".")
        setattr(getattr(getattr(self, side), bn_name), stat, value.copy())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name in params:
                if params[name].data.shape != value.shape:
                    raise ShapeError(f"checkpoint shape mismatch for {name}")
                params[name].data = value.copy()
            else:
                self._set_buffer(name, value)

    # -- forward passes ---------------------------------------------------
    def forward_batch(
        self,
        rf: np.ndarray,
        mems: np.ndarray,
        mode: str = EVAL,
        frozen_stats: bool = False,
        collect_attention: list[np.ndarray] | None = None,
    ) -> Tensor:
        rf = np.asarray(rf, dtype=np.float64)
        mems = np.asarray(mems, dtype=np.float64)
        expect_rf = (self.cfg.sample_len, self.cfg.k_subcarriers)
        expect_me = (self.cfg.sample_len, self.cfg.mems_fields)
        if rf.ndim != 3 or rf.shape[1:] != expect_rf:
            raise ShapeError(f"rf batch must be (B, {expect_rf[0]}, {expect_rf[1]})")
        if mems.ndim != 3 or mems.shape[1:] != expect_me or mems.shape[0] != rf.shape[0]:
            raise ShapeError(f"mems batch must be (B, {expect_me[0]}, {expect_me[1]})")
        if mode not in (TRAIN, EVAL):
            raise ConfigError(f"unknown mode {mode!r}")

        def run():
            x = _branch(Tensor(rf), self.rf_branch, mode, frozen_stats)
            y = _branch(Tensor(mems), self.mems_branch, mode, frozen_stats)
            u = ag.concat([x, y], axis=-1)
            for layer in self.attention.layers:
                u = _attention_layer(u, layer, collect_attention)
            flat = u.reshape(u.shape[0], self.cfg.flat_width)
            return _embed(flat, self.embedding)

        if mode == EVAL:
            with ag.no_grad():
                return run()
        return run()

    def embed_sample(self, sample: AlignedSample) -> np.ndarray:
        """Eval-mode embedding of one aligned sample."""
        out = self.forward_batch(sample.rf[None], sample.mems[None], mode=EVAL)
        return out.data[0]

    # -- persistence --------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path) -> "FusionModel":
        return load_checkpoint(path)


# -- public single-sample operation surface ---------------------------------


def branch_forward(params: BranchParams, seq: np.ndarray, mode: str = EVAL) -> np.ndarray:
    """Run one unimodal branch over an (M, F) sequence -> (M/2, width) features."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != params.input_width:
        raise ShapeError(f"sequence must be (M, {params.input_width})")
    if seq.shape[0] < 2 or seq.shape[0] % 2 != 0:
        raise ShapeError("sequence length M must be even and >= 2")
    with ag.no_grad():
        out = _branch(Tensor(seq[None]), params, mode, frozen_stats=(mode == EVAL))
    return out.data[0]


def concat_features(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Concatenate two (T, C) unimodal feature maps along the feature axis."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError("feature maps must be 2-D with equal time length")
    return np.concatenate([x, y], axis=1)


def multi_head_attention(params: AttentionLayerParams, u: np.ndarray) -> np.ndarray:
    """Apply one multi-head attention layer to a (T, d) feature map."""
    u = np.asarray(u, dtype=np.float64)
    d = params.wo.shape[0]
    if u.ndim != 2 or u.shape[1] != d:
        raise ShapeError(f"feature map must be (T, {d})")
    if d % len(params.wq) != 0:
        raise ConfigError("width not divisible by head count")
    with ag.no_grad():
        out = _attention_layer(Tensor(u[None]), params)
    return out.data[0]


def embed(params: EmbeddingParams, flat: np.ndarray) -> np.ndarray:
    """Affine map plus L2 normalization of a flattened attention output."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (params.w.shape[0],):
        raise ShapeError(f"input must be a vector of length {params.w.shape[0]}")
    with ag.no_grad():
        out = _embed(Tensor(flat[None]), params)
    return out.data[0]


def forward_full(model: FusionModel, sample: AlignedSample, mode: str = EVAL) -> np.ndarray:
    """Embed one aligned sample (eval by default); output has unit L2 norm."""
    out = model.forward_batch(sample.rf[None], sample.mems[None], mode=mode)
    return out.data[0]


# -- checkpoint format -------------------------------------------------------


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


def save_checkpoint(model: FusionModel, path: str | Path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "params": {name: _encode(p.data) for name, p in model.named_parameters()},
        "buffers": {name: _encode(b) for name, b in model.named_buffers()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_checkpoint(path: str | Path) -> FusionModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a model checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')}")
    model = FusionModel(ModelConfig(**payload["config"]))
    state = {name: _decode(d) for name, d in payload["params"].items()}
    state.update({name: _decode(d) for name, d in payload["buffers"].items()})
    model.load_state_dict(state)
    return model
