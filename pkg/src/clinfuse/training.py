"""Parameter initialization, Adam, the epoch loop, and checkpointing.

Training is deterministic given (seed, config, data): parameter draws come
from one seeded generator in a fixed construction order, batch shuffling
from another, and checkpoints capture parameters, optimizer moments,
running normalization statistics, and the shuffle generator state, so a
resumed run reproduces the uninterrupted one exactly.
"""

from __future__ import annotations

import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor_io
from .model import (
    AttentionParams,
    BlockParams,
    ClinicalEncoderParams,
    ConvParams,
    LinearParams,
    ModelConfig,
    ModelParams,
    NormParams,
    Variant,
    copy_running_stats,
    map_parameters,
    model_forward,
    named_parameters,
    named_running_stats,
)
from .tensor import (
    NonFiniteError,
    RunningStats,
    Tensor,
    backward,
    cross_entropy_loss,
)

# The decision head is followed by softmax, not a rectifier, so plain He
# initialization leaves the initial predictions far from uniform. Scaling it
# down keeps the starting loss at the uniform-predictor level.
HEAD_INIT_SCALE = 0.1

CKPT_MAGIC = b"CKPT1\n"


class ConfigError(ValueError):
    """Invalid training configuration."""


class OptimizerError(RuntimeError):
    """Non-finite gradient or mismatched optimizer state."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; the last checkpoint is kept."""


class CheckpointError(RuntimeError):
    """Unreadable checkpoint or one incompatible with the config."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    optimizer: str = "adam"  # "adam" or "sgd"
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1/beta2 must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def he_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Weights drawn i.i.d. from N(0, 2/fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape),
                  requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _init_conv(cout, cin, k, rng, stride=1, pad=0) -> ConvParams:
    w = he_init((cout, cin, k, k), cin * k * k, rng)
    # bias stays zero and untrainable: the batch norm that follows every
    # convolution would cancel it anyway
    return ConvParams(w, Tensor(np.zeros(cout)), stride=stride, pad=pad)


def _init_linear(dout, din, rng, scale=1.0) -> LinearParams:
    w = he_init((dout, din), din, rng)
    if scale != 1.0:
        w = Tensor(w.data * scale, requires_grad=True)
    return LinearParams(w, zeros_param(dout))


def _init_norm(c, config: ModelConfig) -> NormParams:
    return NormParams(Tensor(np.ones(c), requires_grad=True), zeros_param(c),
                      RunningStats.init(c, config.bn_momentum), config.bn_epsilon)


def init_model_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters for ``config``; draw order is fixed, so a seed pins
    every value."""
    config.validate()
    rng = np.random.default_rng(seed)

    stem = _init_conv(config.stem_channels, config.in_channels, 3, rng, pad=1)
    stem_norm = _init_norm(config.stem_channels, config)

    stages = []
    in_ch = config.stem_channels
    for si, (width, n_blocks) in enumerate(
            zip(config.stage_channels, config.stage_blocks)):
        attend = config.variant == Variant.FULL and si in config.attention_stages
        blocks = []
        for bi in range(n_blocks):
            stride = 2 if bi == 0 else 1
            reduced = in_ch // 2
            tail_in = in_ch if attend else reduced
            blk = BlockParams(
                reduce=_init_conv(reduced, in_ch, 1, rng),
                reduce_norm=_init_norm(reduced, config),
                attention=AttentionParams(
                    _init_linear(reduced, config.d_emb, rng)) if attend else None,
                tail1=_init_conv(width, tail_in, 1, rng),
                tail1_norm=_init_norm(width, config),
                tail2=_init_conv(width, width, 3, rng, stride=stride, pad=1),
                tail2_norm=_init_norm(width, config),
                shortcut=None,
                shortcut_norm=None,
            )
            if stride != 1 or in_ch != width:
                blk.shortcut = _init_conv(width, in_ch, 1, rng, stride=stride)
                blk.shortcut_norm = _init_norm(width, config)
            blocks.append(blk)
            in_ch = width
        stages.append(blocks)

    clinical = None
    if config.variant != Variant.IMAGE_ONLY:
        clinical = ClinicalEncoderParams(
            _init_linear(config.clin_hidden, config.d_clin, rng),
            _init_linear(config.d_emb, config.clin_hidden, rng),
        )

    head_in = config.feature_width
    if config.variant != Variant.IMAGE_ONLY:
        head_in += config.d_emb
    head = _init_linear(config.num_classes, head_in, rng, scale=HEAD_INIT_SCALE)

    return ModelParams(stem, stem_norm, stages, clinical, head)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        m = {name: np.zeros_like(t.data) for name, t in named_parameters(params)}
        v = {name: np.zeros_like(t.data) for name, t in named_parameters(params)}
        return cls(m, v, 0)


def adam_step(params: ModelParams, state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update with bias correction; mutates parameter data in place.

    Parameters with no gradient this step are treated as zero-gradient
    (moments still decay). A non-finite gradient aborts before any parameter
    is touched.
    """
    pairs = named_parameters(params)
    for name, t in pairs:
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    b1, b2, eps, lr = cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.learning_rate
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in pairs:
        g = t.grad if t.grad is not None else 0.0
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params: ModelParams, cfg: TrainConfig) -> None:
    for name, t in named_parameters(params):
        if t.grad is None:
            continue
        if not np.isfinite(t.grad).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        t.data -= cfg.learning_rate * t.grad


# ---------------------------------------------------------------------------
# the epoch loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    seconds: float


@dataclass
class TrainResult:
    history: list = field(default_factory=list)

    @property
    def losses(self) -> list:
        return [h.loss for h in self.history]


def _log_line(log_path, stats: EpochStats) -> None:
    if log_path is None:
        return
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(f"epoch={stats.epoch} loss={stats.loss:.10f} "
                 f"acc={stats.accuracy:.6f} secs={stats.seconds:.3f}\n")


def _run_epochs(config: ModelConfig, params: ModelParams, images, clinical,
                labels, cfg: TrainConfig, state: AdamState,
                rng: np.random.Generator, start_epoch: int,
                checkpoint_path=None, log_path=None) -> TrainResult:
    n = len(labels)
    labels = np.asarray(labels, dtype=np.int64)
    result = TrainResult()
    pairs = named_parameters(params)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        try:
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                img_t = Tensor(images[idx])
                clin_t = None if clinical is None else Tensor(clinical[idx])
                probs = model_forward(config, params, img_t, clin_t, train=True)
                loss = cross_entropy_loss(probs, labels[idx])
                backward(loss)
                if cfg.optimizer == "adam":
                    adam_step(params, state, cfg)
                else:
                    sgd_step(params, cfg)
                for _, t in pairs:
                    t.zero_grad()
                loss_sum += float(loss.data) * len(idx)
                correct += int((probs.data.argmax(axis=1) == labels[idx]).sum())
        except (NonFiniteError, OptimizerError) as err:
            raise TrainingAborted(
                f"epoch {epoch}: {err} (last checkpoint retained)") from err

        stats = EpochStats(epoch, loss_sum / n, correct / n,
                           time.perf_counter() - t0)
        result.history.append(stats)
        _log_line(log_path, stats)
        if checkpoint_path is not None and (
                epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            checkpoint_save(checkpoint_path, config, params, state, rng,
                            epoch, cfg)
    return result


def train(config: ModelConfig, params: ModelParams, images, clinical, labels,
          cfg: TrainConfig, checkpoint_path=None, log_path=None) -> TrainResult:
    """Shuffled mini-batch training: forward, cross-entropy, backward, step.

    ``images`` is [N,1,S,S], ``clinical`` [N,D] (or None for the image-only
    variant), ``labels`` [N] ints. Returns per-epoch loss/accuracy history.
    """
    cfg.validate()
    if len(labels) == 0:
        raise ConfigError("training set is empty")
    y = np.asarray(labels)
    if y.min() < 0 or y.max() >= config.num_classes:
        raise ConfigError("labels out of range for num_classes")
    if config.variant != Variant.IMAGE_ONLY and clinical is None:
        raise ConfigError(f"{config.variant.value} variant needs clinical data")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(params)
    return _run_epochs(config, params, images, clinical, labels, cfg, state,
                       rng, 0, checkpoint_path, log_path)


def resume_training(config: ModelConfig, checkpoint_path, images, clinical,
                    labels, cfg: TrainConfig, log_path=None):
    """Continue a checkpointed run up to ``cfg.epochs``.

    Returns (params, TrainResult); the history covers only the new epochs.
    """
    cfg.validate()
    params, state, rng_state, epoch = checkpoint_load(checkpoint_path, config)
    if epoch >= cfg.epochs:
        raise ConfigError(
            f"checkpoint is at epoch {epoch}, nothing to resume for "
            f"epochs={cfg.epochs}")
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    result = _run_epochs(config, params, images, clinical, labels, cfg, state,
                         rng, epoch, checkpoint_path, log_path)
    return params, result


# ---------------------------------------------------------------------------
# checkpoints: text manifest + MMT1 blobs in one file
# ---------------------------------------------------------------------------


def _config_echo(config: ModelConfig, cfg: TrainConfig) -> list:
    lines = []
    for key in ("image_size", "in_channels", "stem_channels", "d_clin",
                "clin_hidden", "d_emb", "num_classes", "attention_squash",
                "bn_momentum", "bn_epsilon"):
        lines.append(f"config.{key} = {getattr(config, key)!r}")
    lines.append(f"config.stage_channels = {','.join(map(str, config.stage_channels))}")
    lines.append(f"config.stage_blocks = {','.join(map(str, config.stage_blocks))}")
    lines.append(f"config.attention_stages = "
                 f"{','.join(map(str, config.attention_stages))}")
    for key in ("learning_rate", "epochs", "batch_size", "seed", "beta1",
                "beta2", "adam_eps", "optimizer", "checkpoint_every"):
        lines.append(f"train.{key} = {getattr(cfg, key)!r}")
    return lines


def _blob_entries(params: ModelParams, state: AdamState) -> list:
    entries = []
    for name, t in named_parameters(params):
        entries.append(("param", name, t.data))
    for name, st in named_running_stats(params):
        entries.append(("stat", f"{name}.mean", st.mean))
        entries.append(("stat", f"{name}.var", st.var))
    for name in state.m:
        entries.append(("opt.m", name, state.m[name]))
    for name in state.v:
        entries.append(("opt.v", name, state.v[name]))
    return entries


def checkpoint_save(path, config: ModelConfig, params: ModelParams,
                    state: AdamState, rng: np.random.Generator, epoch: int,
                    cfg: TrainConfig) -> None:
    """Write atomically: manifest text, then one MMT1 blob per array."""
    entries = _blob_entries(params, state)
    blob_buf = io.BytesIO()
    offsets = []
    for _, _, arr in entries:
        offsets.append(blob_buf.tell())
        tensor_io.write_array(blob_buf, arr)

    lines = [
        f"variant = {config.variant.value}",
        f"epoch = {epoch}",
        f"step = {state.step}",
        f"rng = {json.dumps(rng.bit_generator.state)}",
    ]
    lines.extend(_config_echo(config, cfg))
    for (kind, name, arr), off in zip(entries, offsets):
        shape = "x".join(map(str, arr.shape)) if arr.ndim else "scalar"
        lines.append(f"blob {kind} {name} shape={shape} offset={off}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(f"manifest-bytes = {len(manifest)}\n".encode("ascii"))
        fh.write(manifest)
        fh.write(blob_buf.getvalue())
    os.replace(tmp, path)


def _parse_manifest(path):
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = fh.readline().decode("ascii", errors="replace").strip()
        if not header.startswith("manifest-bytes = "):
            raise CheckpointError(f"{path}: missing manifest size")
        try:
            size = int(header.split("=", 1)[1])
        except ValueError as err:
            raise CheckpointError(f"{path}: bad manifest size") from err
        manifest = fh.read(size).decode("utf-8")
        if len(manifest.encode("utf-8")) != size:
            raise CheckpointError(f"{path}: truncated manifest")
        blob_start = fh.tell()

    meta = {}
    blobs = []  # (kind, name, offset)
    for line in manifest.splitlines():
        if line.startswith("blob "):
            _, kind, name, _shape, off = line.split(" ")
            blobs.append((kind, name, int(off.split("=", 1)[1])))
        elif " = " in line:
            key, value = line.split(" = ", 1)
            meta[key] = value
    return meta, blobs, blob_start


def checkpoint_load(path, config: ModelConfig):
    """Load (params, AdamState, rng_state, epoch), validated against config.

    Rejects a checkpoint written for a different variant and any parameter
    whose shape disagrees with what the config constructs.
    """
    meta, blobs, blob_start = _parse_manifest(path)

    variant = meta.get("variant")
    if variant != config.variant.value:
        raise CheckpointError(
            f"checkpoint was trained with variant {variant!r}, "
            f"config wants {config.variant.value!r}")

    arrays = {}
    with open(path, "rb") as fh:
        for kind, name, off in blobs:
            fh.seek(blob_start + off)
            try:
                arrays[(kind, name)] = tensor_io.read_array(fh)
            except tensor_io.TensorFileError as err:
                raise CheckpointError(f"{path}: blob {kind} {name}: {err}") from err

    template = init_model_params(config, seed=0)
    expected = dict(named_parameters(template))
    got_params = {name: a for (kind, name), a in arrays.items() if kind == "param"}
    if set(got_params) != set(expected):
        missing = sorted(set(expected) - set(got_params))
        extra = sorted(set(got_params) - set(expected))
        raise CheckpointError(
            f"parameter set mismatch (missing={missing}, unexpected={extra})")
    for name, t in expected.items():
        if got_params[name].shape != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint "
                f"{got_params[name].shape}, config {t.data.shape}")

    params = copy_running_stats(map_parameters(
        template, lambda name, _t: Tensor(got_params[name], requires_grad=True)))
    for name, st in named_running_stats(params):
        st.mean = arrays[("stat", f"{name}.mean")].copy()
        st.var = arrays[("stat", f"{name}.var")].copy()

    state = AdamState(
        m={n: arrays[("opt.m", n)] for n in expected},
        v={n: arrays[("opt.v", n)] for n in expected},
        step=int(meta.get("step", "0")),
    )
    try:
        rng_state = json.loads(meta["rng"])
    except (KeyError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: missing or bad rng state") from err
    return params, state, rng_state, int(meta.get("epoch", "0"))


def load_params_for_eval(path, config: ModelConfig) -> ModelParams:
    """Parameters + running stats only; optimizer and rng state ignored."""
    params, _state, _rng, _epoch = checkpoint_load(path, config)
    return params
