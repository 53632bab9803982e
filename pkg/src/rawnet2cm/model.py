"""RawNet2-style countermeasure: fixed sinc front-end, FMS residual blocks, GRU, two-way output.

Layer stack for the ``paper`` preset on 64000 input samples::

    sinc conv(129, 128) -> maxpool(3) -> BN -> LeakyReLU       (128, 21290)
    2 x res block(128) [BN, LReLU, conv3, BN, LReLU, conv3, +skip, maxpool(3), FMS]
                                                                (128, 2365)
    4 x res block(512)                                          (512, 29)
    GRU(1024) over the 29 frames, last state                    (1024,)
    FC(1024)                                                    (1024,)
    output                                                      (2,)

Class index 0 is bona fide, 1 is spoof.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, GruParams, ShapeError, Tensor
from .sinc import ScaleKind, SincFilterbank, build_filterbank, frontend_forward

BONAFIDE = 0
SPOOF = 1


@dataclass(frozen=True)
class ModelConfig:
    n_filters: int = 128
    kernel_len: int = 129
    sample_rate: int = 16000
    n_samples: int = 64000
    scale: str = "mel"
    f_min: float = 30.0
    f_max: float | None = None
    block1_channels: int = 128
    block1_count: int = 2
    block2_channels: int = 512
    block2_count: int = 4
    gru_hidden: int = 1024
    fc_dim: int = 1024
    n_classes: int = 2
    leaky_slope: float = 0.3

    def __post_init__(self):
        ScaleKind(self.scale)
        if self.block1_channels != self.n_filters:
            raise ValueError("first residual group must keep the front-end channel count")
        if min(self.n_filters, self.block1_count, self.block2_count, self.gru_hidden, self.fc_dim) < 1:
            raise ValueError("model sizes must be positive")

    @classmethod
    def paper(cls, **overrides) -> ModelConfig:
        return replace(cls(), **overrides)

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        base = cls(n_filters=8, n_samples=4000, block1_channels=8, block1_count=2,
                   block2_channels=8, block2_count=2, gru_hidden=16, fc_dim=16)
        return replace(base, **overrides)

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        if name == "paper":
            return cls.paper(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ValueError(f"unknown preset {name!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def shape_trace(self) -> list[tuple[int, ...]]:
        """Expected per-stage output shapes in (channels, time) / (features,) form."""
        t = (self.n_samples - self.kernel_len + 1) // 3
        shapes = [(self.n_filters, t)]
        for _ in range(self.block1_count):
            t //= 3
        shapes.append((self.block1_channels, t))
        for _ in range(self.block2_count):
            t //= 3
        shapes.append((self.block2_channels, t))
        shapes += [(self.gru_hidden,), (self.fc_dim,), (self.n_classes,)]
        return shapes


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


@dataclass
class FmsParams:
    weight: Tensor  # (C, C)
    bias: Tensor  # (C,)


@dataclass
class ResBlockParams:
    bn1: BatchNormParams
    conv1: Tensor  # (C_out, C_in, 3)
    bn2: BatchNormParams
    conv2: Tensor  # (C_out, C_out, 3)
    proj: Tensor | None  # (C_out, C_in, 1) iff C_in != C_out
    fms: FmsParams


@dataclass
class ModelParams:
    config: ModelConfig
    filterbank: SincFilterbank
    frontend_bn: BatchNormParams
    blocks: list[ResBlockParams]
    gru: GruParams
    fc_w: Tensor
    fc_b: Tensor
    out_w: Tensor
    out_b: Tensor
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "frontend_bn.gamma", self.frontend_bn.gamma
        yield "frontend_bn.beta", self.frontend_bn.beta
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            yield p + "bn1.gamma", b.bn1.gamma
            yield p + "bn1.beta", b.bn1.beta
            yield p + "conv1", b.conv1
            yield p + "bn2.gamma", b.bn2.gamma
            yield p + "bn2.beta", b.bn2.beta
            yield p + "conv2", b.conv2
            if b.proj is not None:
                yield p + "proj", b.proj
            yield p + "fms.weight", b.fms.weight
            yield p + "fms.bias", b.fms.bias
        yield "gru.w_ih", self.gru.w_ih
        yield "gru.w_hh", self.gru.w_hh
        yield "gru.b_ih", self.gru.b_ih
        yield "gru.b_hh", self.gru.b_hh
        yield "fc.weight", self.fc_w
        yield "fc.bias", self.fc_b
        yield "out.weight", self.out_w
        yield "out.bias", self.out_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_bn_states(self) -> Iterator[tuple[str, BatchNormState]]:
        yield "frontend_bn", self.frontend_bn.state
        for i, b in enumerate(self.blocks):
            yield f"blocks.{i}.bn1", b.bn1.state
            yield f"blocks.{i}.bn2", b.bn2.state

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def grads(self) -> list[np.ndarray]:
        """Current gradients; parameters the last backward did not reach get zeros."""
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every trainable tensor and BN running statistic, keyed by name."""
        out = {name: t.data for name, t in self.named_parameters()}
        for name, st in self.named_bn_states():
            out[name + ".running_mean"] = st.running_mean
            out[name + ".running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        if missing:
            raise KeyError(f"missing arrays: {sorted(missing)}")
        for name, t in self.named_parameters():
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise ShapeError(f"{name}: stored shape {src.shape}, expected {t.shape}")
            t.data = src.astype(self.dtype, copy=True)
        for name, st in self.named_bn_states():
            st.running_mean = np.asarray(arrays[name + ".running_mean"]).astype(self.dtype, copy=True)
            st.running_var = np.asarray(arrays[name + ".running_var"]).astype(self.dtype, copy=True)

    def copy(self) -> ModelParams:
        other = model_init(0, self.config, dtype=self.dtype, filterbank=self.filterbank)
        other.load_state_arrays(self.state_arrays())
        return other


def _uniform(rng: np.random.Generator, shape, bound: float, dtype, name: str) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, name=name)


def _bn(channels: int, dtype) -> BatchNormParams:
    return BatchNormParams(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                           Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                           BatchNormState.create(channels, dtype))


def model_init(seed: int, config: ModelConfig | None = None, dtype=np.float32,
               filterbank: SincFilterbank | None = None) -> ModelParams:
    """Seeded initialization.

    Convolutions use a LeakyReLU-gain Kaiming uniform bound; dense, FMS and
    GRU weights use ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; biases of the
    dense layers share that bound, FMS biases start at zero.
    """
    cfg = config or ModelConfig.paper()
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    if filterbank is None:
        filterbank = build_filterbank(cfg.scale, cfg.n_filters, cfg.kernel_len, cfg.sample_rate,
                                      cfg.f_min, cfg.f_max)
    gain = np.sqrt(6.0 / (1.0 + cfg.leaky_slope ** 2))

    def conv(c_out, c_in, k, name):
        return _uniform(rng, (c_out, c_in, k), gain / np.sqrt(c_in * k), dtype, name)

    blocks = []
    c_in = cfg.n_filters
    plan = [cfg.block1_channels] * cfg.block1_count + [cfg.block2_channels] * cfg.block2_count
    for i, c_out in enumerate(plan):
        blocks.append(ResBlockParams(
            bn1=_bn(c_in, dtype),
            conv1=conv(c_out, c_in, 3, f"blocks.{i}.conv1"),
            bn2=_bn(c_out, dtype),
            conv2=conv(c_out, c_out, 3, f"blocks.{i}.conv2"),
            proj=conv(c_out, c_in, 1, f"blocks.{i}.proj") if c_in != c_out else None,
            fms=FmsParams(_uniform(rng, (c_out, c_out), 1 / np.sqrt(c_out), dtype, f"blocks.{i}.fms.weight"),
                          Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)),
        ))
        c_in = c_out

    h = cfg.gru_hidden
    gb = 1 / np.sqrt(h)
    gru = GruParams(_uniform(rng, (3 * h, c_in), gb, dtype, "gru.w_ih"),
                    _uniform(rng, (3 * h, h), gb, dtype, "gru.w_hh"),
                    _uniform(rng, (3 * h,), gb, dtype, "gru.b_ih"),
                    _uniform(rng, (3 * h,), gb, dtype, "gru.b_hh"))
    fb = 1 / np.sqrt(h)
    ob = 1 / np.sqrt(cfg.fc_dim)
    return ModelParams(
        config=cfg,
        filterbank=filterbank,
        frontend_bn=_bn(cfg.n_filters, dtype),
        blocks=blocks,
        gru=gru,
        fc_w=_uniform(rng, (cfg.fc_dim, h), fb, dtype, "fc.weight"),
        fc_b=_uniform(rng, (cfg.fc_dim,), fb, dtype, "fc.bias"),
        out_w=_uniform(rng, (cfg.n_classes, cfg.fc_dim), ob, dtype, "out.weight"),
        out_b=_uniform(rng, (cfg.n_classes,), ob, dtype, "out.bias"),
        dtype=dtype,
    )


def fms(x: Tensor, p: FmsParams) -> Tensor:
    """Filter-wise feature map scaling: ``x * s + s`` with a sigmoid gate per channel."""
    if p.weight.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"fms: weight {p.weight.shape} for {x.shape[1]} channels")
    s = ag.sigmoid(ag.linear(ag.mean_time(x), p.weight, p.bias))
    return ag.add_channel(ag.mul_channel(x, s), s)


def res_block_forward(x: Tensor, p: ResBlockParams, training: bool, slope: float = 0.3) -> Tensor:
    if x.shape[2] < 3:
        raise ShapeError(f"res block needs at least 3 frames, got {x.shape[2]}")
    h = ag.leaky_relu(ag.batch_norm(x, p.bn1.gamma, p.bn1.beta, p.bn1.state, training), slope)
    h = ag.conv1d(h, p.conv1, padding=1)
    h = ag.leaky_relu(ag.batch_norm(h, p.bn2.gamma, p.bn2.beta, p.bn2.state, training), slope)
    h = ag.conv1d(h, p.conv2, padding=1)
    skip = ag.conv1d(x, p.proj) if p.proj is not None else x
    y = ag.maxpool1d(ag.add(h, skip), 3)
    return fms(y, p.fms)


def _as_batch(waveform, dtype) -> tuple[Tensor, bool]:
    x = waveform if isinstance(waveform, Tensor) else Tensor(np.asarray(waveform, dtype=dtype))
    if x.data.ndim == 1:
        return Tensor(x.data[None, None, :]), True
    if x.data.ndim == 2 and x.shape[0] == 1:
        return Tensor(x.data[None]), True
    if x.data.ndim == 3 and x.shape[1] == 1:
        return x, False
    raise ShapeError(f"waveform must be (T,), (1, T) or (B, 1, T); got {x.shape}")


def model_forward(waveform, params: ModelParams, training: bool = False,
                  trace: list | None = None) -> Tensor:
    """Logits for one utterance ((T,) or (1, T) -> (2,)) or a batch ((B, 1, T) -> (B, 2)).

    When ``trace`` is a list, the per-stage output shapes (batch axis dropped)
    are appended to it.
    """
    cfg = params.config
    x, single = _as_batch(waveform, params.dtype)
    if x.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype))
    if x.shape[2] != cfg.n_samples:
        raise ShapeError(f"expected {cfg.n_samples} samples, got {x.shape[2]}")

    def note(t: Tensor):
        if trace is not None:
            trace.append(tuple(t.shape[1:]))

    slope = cfg.leaky_slope
    h = frontend_forward(x, params.filterbank, params.frontend_bn.gamma, params.frontend_bn.beta,
                         params.frontend_bn.state, training, slope)
    note(h)
    for i, block in enumerate(params.blocks):
        h = res_block_forward(h, block, training, slope)
        if i in (cfg.block1_count - 1, len(params.blocks) - 1):
            note(h)
    h = ag.gru_sequence(ag.swap_time_channel(h), params.gru)
    note(h)
    h = ag.linear(h, params.fc_w, params.fc_b)
    note(h)
    logits = ag.linear(h, params.out_w, params.out_b)
    note(logits)
    if single:
        logits = _squeeze_batch(logits)
    return logits


def _squeeze_batch(t: Tensor) -> Tensor:
    return ag._make(t.data[0], (t,), lambda g: (g[None],))


def scores_from_logits(logits: np.ndarray) -> np.ndarray:
    """Bona fide vs spoof log-posterior ratio; equals the logit difference."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return logp[..., BONAFIDE] - logp[..., SPOOF]


def predict_score(waveform, params: ModelParams):
    """Countermeasure score(s); higher means more likely bona fide."""
    with ag.no_grad():
        logits = model_forward(waveform, params, training=False)
    s = scores_from_logits(logits.data)
    return float(s) if np.ndim(s) == 0 else s
