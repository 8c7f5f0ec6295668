"""Encoder + projection head, shared by the teacher and student networks.

Parameters live in plain ``dict[str, np.ndarray]`` so the teacher can be
updated in place by EMA and checkpoints can be written block by block. The
forward functions accept either arrays (no graph is recorded) or
:class:`~rdino.numerics.Tensor` leaves when gradients are wanted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, ParameterError, Tensor


@dataclass
class EncoderConfig:
    n_mels: int = 80
    channels: tuple[int, ...] = (64, 64, 64)
    dilations: tuple[int, ...] = (1, 2, 3)
    kernel: int = 3
    attention_dim: int = 32
    embed_dim: int = 64

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.channels) < 1 or len(self.channels) != len(self.dilations):
            raise ValueError("encoder needs >= 1 conv layer and one dilation per layer")
        if self.embed_dim < 8:
            raise ValueError(f"embedding dim must be >= 8, got {self.embed_dim}")

    @property
    def receptive_field(self) -> int:
        return 1 + sum(d * (self.kernel - 1) for d in self.dilations)


@dataclass
class HeadConfig:
    hidden: tuple[int, int] = (256, 256)
    tap_dim: int = 512
    bottleneck: int = 64
    out_dim: int = 1024
    # "linear": tap the raw third FC output; "relu": ReLU after the third FC, tap post-activation
    tap: str = "linear"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) != 2:
            raise ValueError("head takes exactly two hidden widths before the tap layer")
        if self.tap not in ("linear", "relu"):
            raise ValueError(f"tap must be 'linear' or 'relu', got {self.tap!r}")

    @classmethod
    def published(cls) -> "HeadConfig":
        return cls(hidden=(2048, 2048), tap_dim=8192, bottleneck=256, out_dim=65536)


@dataclass
class ForwardOutput:
    embedding: Tensor
    reg_activations: Tensor
    logits: Tensor
    attention: np.ndarray | None = None


def param_shapes(enc: EncoderConfig, head: HeadConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = enc.n_mels
    for i, c in enumerate(enc.channels):
        shapes[f"enc.conv{i}.w"] = (enc.kernel, c_in, c)
        shapes[f"enc.conv{i}.b"] = (c,)
        c_in = c
    shapes["enc.att.w"] = (c_in, enc.attention_dim)
    shapes["enc.att.b"] = (enc.attention_dim,)
    shapes["enc.att.v"] = (enc.attention_dim, 1)
    shapes["enc.fc.w"] = (c_in, enc.embed_dim)
    shapes["enc.fc.b"] = (enc.embed_dim,)
    dims = [enc.embed_dim, *head.hidden, head.tap_dim, head.bottleneck]
    for i in range(4):
        shapes[f"head.fc{i}.w"] = (dims[i], dims[i + 1])
        shapes[f"head.fc{i}.b"] = (dims[i + 1],)
    shapes["head.last.v"] = (head.bottleneck, head.out_dim)
    shapes["head.last.g"] = (head.out_dim,)
    return shapes


def init_params(enc: EncoderConfig, head: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform weights with bound 1/sqrt(fan_in); zero biases; unit weight-norm magnitudes."""
    params = {}
    for name, shape in param_shapes(enc, head).items():
        if name == "head.last.g":
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(np.prod(shape[:-1]))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _wrap(params) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def encode(feats, params, enc: EncoderConfig, return_attention: bool = False):
    """Embed a batch of normalized feature matrices.

    ``feats`` is (B, T, F) (or a single (T, F) matrix). Returns the (B, E)
    embedding, and the (B, T') attention weights when ``return_attention``.
    """
    p = _wrap(params)
    x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=p["enc.fc.w"].dtype))
    if x.ndim == 2:
        x = nx.reshape(x, (1,) + x.shape)
    if x.shape[2] != enc.n_mels:
        raise DimensionError(f"expected {enc.n_mels} feature bins, got {x.shape[2]}")
    if x.shape[1] < enc.receptive_field:
        raise DimensionError(f"{x.shape[1]} frames is below the encoder receptive field of {enc.receptive_field}")
    h = x
    for i, d in enumerate(enc.dilations):
        h = nx.relu(nx.conv1d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], dilation=d))
    b, t, c = h.shape
    # self-attentive pooling: frame scores -> softmax over time -> weighted mean
    scores = nx.relu(h @ p["enc.att.w"] + p["enc.att.b"]) @ p["enc.att.v"]
    alpha = nx.softmax_temp(nx.reshape(scores, (b, t)), 1.0)
    pooled = nx.tsum(h * nx.reshape(alpha, (b, t, 1)), axis=1)
    emb = pooled @ p["enc.fc.w"] + p["enc.fc.b"]
    if return_attention:
        return emb, alpha.data
    return emb


def project(embedding, params, head: HeadConfig) -> tuple[Tensor, Tensor]:
    """Projection head; returns ``(reg_activations, logits)``.

    FC -> ReLU -> FC -> ReLU -> FC (tap) -> FC (bottleneck) -> L2 norm ->
    weight-normalized FC.
    """
    p = _wrap(params)
    z = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
    h = nx.relu(z @ p["head.fc0.w"] + p["head.fc0.b"])
    h = nx.relu(h @ p["head.fc1.w"] + p["head.fc1.b"])
    tap = h @ p["head.fc2.w"] + p["head.fc2.b"]
    if head.tap == "relu":
        tap = nx.relu(tap)
    bott = nx.l2_normalize(tap @ p["head.fc3.w"] + p["head.fc3.b"])
    logits = nx.weight_norm_linear(bott, p["head.last.v"], p["head.last.g"])
    return tap, logits


def forward(feats, params, enc: EncoderConfig, head: HeadConfig) -> ForwardOutput:
    emb, att = encode(feats, params, enc, return_attention=True)
    tap, logits = project(emb, params, head)
    return ForwardOutput(emb, tap, logits, att)


@dataclass
class NetworkPair:
    """Student and teacher parameters plus the running teacher-logit center."""

    encoder: EncoderConfig
    head: HeadConfig
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    center: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.center is None:
            dtype = next(iter(self.student.values())).dtype
            self.center = np.zeros(self.head.out_dim, dtype=dtype)
        for k, v in self.student.items():
            if self.teacher[k].shape != v.shape:
                raise DimensionError(f"teacher/student shape mismatch for {k}: {self.teacher[k].shape} vs {v.shape}")

    @classmethod
    def create(cls, enc: EncoderConfig, head: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> "NetworkPair":
        student = init_params(enc, head, rng, dtype)
        teacher = {k: v.copy() for k, v in student.items()}
        return cls(enc, head, student, teacher)


def ema_update(pair: NetworkPair, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place."""
    if not 0.0 <= m <= 1.0:
        raise ParameterError(f"EMA momentum must lie in [0, 1], got {m}")
    for k, s in pair.student.items():
        t = pair.teacher[k]
        if t.shape != s.shape:
            raise DimensionError(f"EMA shape mismatch for {k}: {t.shape} vs {s.shape}")
        if m == 0.0:
            t[...] = s
        elif m != 1.0:
            t *= t.dtype.type(m)
            t += t.dtype.type(1.0 - m) * s


def update_center(center: np.ndarray, teacher_logits: np.ndarray, m_c: float) -> np.ndarray:
    """Running mean of teacher logits: ``m_c * c + (1 - m_c) * batch_mean``."""
    teacher_logits = np.asarray(teacher_logits)
    if teacher_logits.ndim != 2 or teacher_logits.shape[0] < 1:
        raise DimensionError(f"teacher logits must be a non-empty (n, K) batch, got {teacher_logits.shape}")
    batch_mean = teacher_logits.mean(axis=0)
    return (m_c * center + (1.0 - m_c) * batch_mean).astype(center.dtype)
