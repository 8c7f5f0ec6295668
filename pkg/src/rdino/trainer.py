"""Training loop, optimizer, learning-rate schedule, run configuration and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy, NoiseBank, multicrop
from .features import Waveform, read_wav, synth_corpus
from .model import EncoderConfig, HeadConfig, NetworkPair, as_tensors, ema_update, param_shapes, update_center
from .objective import total_loss

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


class CheckpointError(ValueError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    warmup_epochs: int = 2
    peak_lr: float = 0.05
    momentum: float = 0.9
    clip_grad: float = 3.0  # global gradient-norm cap; 0 disables
    batch_size: int = 64
    lam: float = 0.3
    tau_t: float = 0.04
    tau_s: float = 0.1
    eps: float = 1e-4
    ema_m: float = 0.996
    center_m: float = 0.9
    centering: bool = True
    centered_xcorr: bool = False
    seed: int = 0
    global_seconds: float = 4.0
    local_seconds: float = 2.0
    dtype: str = "float32"
    # training data: a directory of 16-bit mono WAVs, or a synthetic corpus when empty
    corpus_dir: str = ""
    synth_speakers: int = 20
    synth_utts: int = 10
    synth_seconds: float = 4.0
    synth_seed: int = 7
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if not (self.peak_lr > 0 and self.momentum >= 0 and self.batch_size >= 1 and self.clip_grad >= 0):
            raise ConfigError("peak_lr must be positive, momentum non-negative, batch_size >= 1")
        if not (0 < self.tau_t < self.tau_s):
            raise ConfigError(f"need 0 < tau_t < tau_s for sharpening, got {self.tau_t}, {self.tau_s}")
        if self.lam < 0 or self.eps < 0:
            raise ConfigError("lam and eps must be non-negative")
        if not (0 <= self.ema_m <= 1 and 0 <= self.center_m <= 1):
            raise ConfigError("momenta must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.encoder.n_mels <= 0:
            raise ConfigError("n_mels must be positive")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# -- config file ---------------------------------------------------------

_NESTED = {"augment": AugmentPolicy, "encoder": EncoderConfig, "head": HeadConfig}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _NESTED:
            for g in dataclasses.fields(value):
                lines.append(f"{f.name}.{g.name} = {_format_value(getattr(value, g.name))}")
        else:
            lines.append(f"{f.name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parse flat ``key = value`` lines; nested fields use dotted keys (``head.tap_dim``)."""
    flat: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {k: {} for k in _NESTED}
    defaults = {f.name: f for f in dataclasses.fields(TrainConfig)}
    nested_defaults = {k: {g.name: g for g in dataclasses.fields(cls)} for k, cls in _NESTED.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            group, sub = key.split(".", 1)
            if group not in nested or sub not in nested_defaults[group]:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            nested[group][sub] = _parse_value(value, _field_default(nested_defaults[group][sub]), key)
        else:
            if key not in defaults or key in _NESTED:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            flat[key] = _parse_value(value, _field_default(defaults[key]), key)
    flat.update(overrides)
    try:
        for group, cls in _NESTED.items():
            if group not in flat:
                flat[group] = cls(**nested[group])
        return TrainConfig(**flat)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _field_default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# -- schedule & optimizer ------------------------------------------------


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay reaching 0 at the final step."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.peak_lr * step / warmup
    span = max(total - 1 - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float, momentum: float = 0.9) -> None:
    """Heavy-ball SGD in place: ``v = momentum * v + g``; ``p -= lr * v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = state.velocity[name]
        if v.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= v.dtype.type(momentum)
        v += g
        p -= p.dtype.type(lr) * v
    state.step += 1


# -- checkpoints ---------------------------------------------------------

_CKPT_MAGIC = b"RDINO-CKPT v1\n"


def save_checkpoint(pair: NetworkPair, opt: OptimizerState, cfg: TrainConfig, path) -> None:
    blocks = [(f"student/{k}", v) for k, v in pair.student.items()]
    blocks += [(f"teacher/{k}", v) for k, v in pair.teacher.items()]
    blocks.append(("center", pair.center))
    blocks += [(f"velocity/{k}", v) for k, v in opt.velocity.items()]
    config = config_to_text(cfg).encode("utf-8")
    parts = [_CKPT_MAGIC, f"config {len(config)}\n".encode(), config, f"step {opt.step}\n".encode(), f"blocks {len(blocks)}\n".encode()]
    for name, arr in blocks:
        shape = " ".join(str(s) for s in arr.shape)
        parts.append(f"{name} {arr.ndim} {shape}\n".encode())
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(b"END\n")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def line(self) -> str:
        end = self.raw.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointTruncatedError(f"{self.path}: truncated (unterminated header line at byte {self.pos})")
        out = self.raw[self.pos:end].decode("utf-8")
        self.pos = end + 1
        return out

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"{self.path}: truncated (need {n} bytes at offset {self.pos})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[NetworkPair, OptimizerState, TrainConfig]:
    """Inverse of :func:`save_checkpoint`.

    Shapes are validated against ``cfg`` when given, else against the
    configuration stored in the file.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(b"RDINO-CKPT"):
        raise CheckpointVersionError(f"{path}: not an RDINO checkpoint")
    if not raw.startswith(_CKPT_MAGIC):
        header = raw.split(b"\n", 1)[0]
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {header!r}")
    r = _Reader(raw, path)
    r.pos = len(_CKPT_MAGIC)
    tag, n = r.line().split()
    config_text = r.take(int(n)).decode("utf-8")
    stored_cfg = parse_config(config_text)
    cfg = cfg or stored_cfg
    step = int(r.line().split()[1])
    n_blocks = int(r.line().split()[1])
    expected = param_shapes(cfg.encoder, cfg.head)
    dtype = cfg.np_dtype
    student, teacher, velocity = {}, {}, {}
    center = None
    for _ in range(n_blocks):
        fields_ = r.line().split()
        name, ndim = fields_[0], int(fields_[1])
        shape = tuple(int(s) for s in fields_[2:2 + ndim])
        data = r.take(4 * int(np.prod(shape, dtype=np.int64)))
        kind, _, pname = name.partition("/")
        want = (cfg.head.out_dim,) if name == "center" else expected.get(pname)
        if want is None:
            raise CheckpointShapeError(f"{path}: unexpected block {name!r}")
        if tuple(want) != shape:
            raise CheckpointShapeError(f"{path}: block {name!r} has shape {shape}, config expects {tuple(want)}")
        arr = np.frombuffer(data, dtype="<f4").reshape(shape).astype(dtype)
        if name == "center":
            center = arr
        else:
            {"student": student, "teacher": teacher, "velocity": velocity}[kind][pname] = arr
    if r.line() != "END" or r.pos != len(raw):
        raise CheckpointTruncatedError(f"{path}: missing end marker or trailing bytes")
    for group, label in ((student, "student"), (teacher, "teacher"), (velocity, "velocity")):
        missing = set(expected) - set(group)
        if missing:
            raise CheckpointShapeError(f"{path}: missing {label} blocks {sorted(missing)}")
    pair = NetworkPair(cfg.encoder, cfg.head, student, teacher, center)
    return pair, OptimizerState(velocity, step), cfg


# -- training ------------------------------------------------------------


def load_corpus(cfg: TrainConfig) -> list[tuple[str, Waveform]]:
    """Training utterances as ``(utt_id, Waveform)``; speaker labels are never used."""
    if cfg.corpus_dir:
        files = sorted(Path(cfg.corpus_dir).glob("*.wav"))
        if not files:
            raise ConfigError(f"no .wav files in {cfg.corpus_dir}")
        return [(f.stem, read_wav(f)) for f in files]
    corpus = synth_corpus(cfg.synth_speakers, cfg.synth_utts, cfg.synth_seconds, cfg.synth_seed)
    return [(f"utt{i:05d}", w) for i, (_, w) in enumerate(corpus)]


def item_seed(run_seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, epoch, index])


def epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, epoch, 0xBA7C]).permutation(n)


def steps_per_epoch(cfg: TrainConfig, n_utts: int) -> int:
    return max(n_utts // cfg.batch_size, 1)


@dataclass
class TrainResult:
    pair: NetworkPair
    opt: OptimizerState
    history: list
    checkpoint: Path | None


def train(
    cfg: TrainConfig,
    corpus: list | None = None,
    out_dir=None,
    resume_from=None,
    progress=None,
) -> TrainResult:
    """Run DINO training with the regularized objective.

    Per step: draw a batch, build multi-crop views with per-item seeds derived
    from (seed, epoch, item index), evaluate the loss, back-propagate into the
    student, take an SGD step, then EMA the teacher and update the center.
    Epochs are fully determined by the seed, so a resumed run reproduces an
    uninterrupted one bit for bit.
    """
    corpus = load_corpus(cfg) if corpus is None else corpus
    if not corpus:
        raise ConfigError("corpus is empty")
    corpus = [(uid, w) for uid, w in corpus]
    dtype = cfg.np_dtype
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        pair, opt, _ = load_checkpoint(resume_from, cfg)
    else:
        pair = NetworkPair.create(cfg.encoder, cfg.head, np.random.default_rng([cfg.seed, 0x1A17]), dtype)
        opt = OptimizerState.zeros_like(pair.student)

    spe = steps_per_epoch(cfg, len(corpus))
    if opt.step % spe:
        raise ConfigError(f"checkpoint step {opt.step} is not on an epoch boundary ({spe} steps per epoch)")
    start_epoch = opt.step // spe
    noise_bank = NoiseBank(cfg.augment.seed, sample_rate=corpus[0][1].sample_rate) if cfg.augment.strategy == "wav" else None
    history = []
    log_fh = open(out / "train.log", "a" if resume_from is not None else "w") if out is not None else None
    ckpt_path = None
    try:
        if out is not None and resume_from is None:
            ckpt_path = out / "epoch000.ckpt"
            save_checkpoint(pair, opt, cfg, ckpt_path)
        for epoch in range(start_epoch, cfg.epochs):
            order = epoch_order(cfg, epoch, len(corpus))
            for b in range(spe):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                seeds = [item_seed(cfg.seed, epoch, b * cfg.batch_size + k) for k in range(len(idx))]
                views = [
                    multicrop(
                        corpus[i][1],
                        cfg.augment,
                        np.random.default_rng(s),
                        noise_bank,
                        cfg.global_seconds,
                        cfg.local_seconds,
                        cfg.encoder.n_mels,
                        utt_id=corpus[i][0],
                    )
                    for i, s in zip(idx, seeds)
                ]
                step = opt.step
                params = as_tensors(pair.student, requires_grad=True)
                res = total_loss(
                    views,
                    pair,
                    lam=cfg.lam,
                    tau_t=cfg.tau_t,
                    tau_s=cfg.tau_s,
                    eps=cfg.eps,
                    centering=cfg.centering,
                    centered_xcorr=cfg.centered_xcorr,
                    student_params=params,
                    dtype=dtype,
                )
                if not math.isfinite(res.total):
                    _abort(out, pair, opt, cfg, epoch, b, seeds)
                    raise NonFiniteError(f"non-finite loss at step {step} (epoch {epoch}, batch {b})")
                res.root.backward()
                res.root = None
                grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
                for name, g in grads.items():
                    if not np.all(np.isfinite(g)):
                        _abort(out, pair, opt, cfg, epoch, b, seeds)
                        raise NonFiniteError(f"non-finite gradient in parameter {name!r} at step {step}")
                clip_gradients(grads, cfg.clip_grad)
                sgd_step(pair.student, grads, opt, lr_at(step, spe, cfg), cfg.momentum)
                ema_update(pair, cfg.ema_m)
                if cfg.centering:
                    pair.center = update_center(pair.center, res.teacher_logits, cfg.center_m)
                res.teacher_logits = None
                history.append((epoch, res))
                line = res.log_line(step)
                if log_fh is not None:
                    log_fh.write(line + "\n")
                    log_fh.flush()
                if progress is not None:
                    progress(line)
                log.debug(line)
            if out is not None:
                ckpt_path = out / f"epoch{epoch + 1:03d}.ckpt"
                save_checkpoint(pair, opt, cfg, ckpt_path)
        if out is not None:
            ckpt_path = out / "final.ckpt"
            save_checkpoint(pair, opt, cfg, ckpt_path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(pair, opt, history, ckpt_path)


def _abort(out, pair, opt, cfg, epoch, batch, seeds) -> None:
    if out is None:
        return
    save_checkpoint(pair, opt, cfg, out / "abort.ckpt")
    with open(out / "abort_seeds.txt", "w") as fh:
        fh.write(f"epoch {epoch} batch {batch} step {opt.step}\n")
        for s in seeds:
            # item seed = SeedSequence([run seed, epoch, item index])
            fh.write(" ".join(str(e) for e in s.entropy) + "\n")
