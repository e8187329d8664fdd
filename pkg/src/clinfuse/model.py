"""Two-path fusion classifier.

An image path (residual convolutional backbone) and a clinical path (small
fully-connected encoder) run side by side. In the full variant the clinical
embedding additionally steers the image path: inside each gated residual
block the embedding is projected onto the block's channels, multiplied into
the reduced feature map, and pooled to a per-channel statistic that rescales
those channels. Both feature vectors are finally concatenated into a single
linear + softmax decision head.

Three variants of the same configuration support ablation:

* ``image-only``      - backbone + head, no clinical path at all
* ``image-clinical``  - both paths, plain residual blocks, fusion by
                        concatenation at the head only
* ``full``            - both paths plus clinical channel attention inside
                        the designated backbone stages
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    channel_scale,
    concat_channels,
    conv2d,
    fully_connected,
    global_avg_pool,
    relu,
    sigmoid,
    softmax,
)


class Variant(str, Enum):
    IMAGE_ONLY = "image-only"
    IMAGE_CLINICAL = "image-clinical"
    FULL = "full"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults give the 256-feature backbone.

    Spatial sizes must be odd: stage entries downsample with stride-2 3x3
    convolutions whose output extent only divides exactly on odd inputs
    (33 -> 17 -> 9 -> 5 -> 3 for the default).
    """

    image_size: int = 33
    in_channels: int = 1
    stem_channels: int = 16
    stage_channels: tuple = (32, 64, 128, 256)
    stage_blocks: tuple = (2, 2, 2, 2)
    attention_stages: tuple = (1, 2, 3)  # stage 0 stays plain
    d_clin: int = 237
    clin_hidden: int = 128
    d_emb: int = 256
    num_classes: int = 2
    attention_squash: bool = True  # sigmoid on the attention statistic
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    variant: Variant = Variant.FULL

    @property
    def feature_width(self) -> int:
        return self.stage_channels[-1]

    def spatial_sizes(self) -> list:
        """Feature-map extent after the stem and after each stage."""
        s = self.image_size  # stem is 3x3 stride 1 pad 1
        sizes = [s]
        for _ in self.stage_channels:
            if s % 2 == 0 or s < 3:
                raise ValueError(
                    f"cannot downsample extent {s}: stage entries need an odd "
                    f"size >= 3 for the stride-2 convolution to divide exactly"
                )
            s = (s - 1) // 2 + 1
            sizes.append(s)
        return sizes

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.stage_channels) != len(self.stage_blocks):
            raise ValueError("stage_channels and stage_blocks must align")
        if not self.stage_channels or any(b < 1 for b in self.stage_blocks):
            raise ValueError("need at least one stage and one block per stage")
        if 0 in self.attention_stages:
            raise ValueError("the first stage must stay plain (no attention)")
        for s in self.attention_stages:
            if not 0 <= s < len(self.stage_channels):
                raise ValueError(f"attention stage {s} out of range")
        if any(c < 2 or c % 2 for c in self.stage_channels) or self.stem_channels % 2:
            raise ValueError("stage/stem channel counts must be even (halving conv)")
        self.spatial_sizes()
        if self.variant != Variant.IMAGE_ONLY:
            f = self.feature_width
            if not f / 2 <= self.d_emb <= 2 * f:
                raise ValueError(
                    f"d_emb={self.d_emb} must be within a factor 2 of the "
                    f"final image feature width {f}"
                )


def tiny_config(variant: Variant = Variant.FULL) -> ModelConfig:
    """Smallest config that exercises every mechanism; used by gradient checks."""
    return ModelConfig(
        image_size=17,
        stem_channels=4,
        stage_channels=(4, 8, 8),
        stage_blocks=(1, 1, 1),
        attention_stages=(1, 2),
        d_clin=6,
        clin_hidden=8,
        d_emb=8,
        variant=variant,
    )


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor


@dataclass
class ConvParams:
    """Every convolution here is followed by batch norm, which cancels any
    additive bias; the bias tensor is therefore fixed at zero and not
    trainable (the norm's beta plays that role)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    stats: RunningStats
    eps: float = 1e-5


@dataclass
class ClinicalEncoderParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class AttentionParams:
    """1x1 projection aligning the clinical embedding with block channels."""

    proj: LinearParams  # d_emb -> reduced channel count


@dataclass
class BlockParams:
    reduce: ConvParams          # 1x1, C -> C/2
    reduce_norm: NormParams
    attention: Optional[AttentionParams]
    tail1: ConvParams           # 1x1 into the block's output width
    tail1_norm: NormParams
    tail2: ConvParams           # 3x3, carries the block stride
    tail2_norm: NormParams
    shortcut: Optional[ConvParams]
    shortcut_norm: Optional[NormParams]


@dataclass
class ModelParams:
    stem: ConvParams
    stem_norm: NormParams
    stages: list  # list of stages, each a list of BlockParams
    clinical: Optional[ClinicalEncoderParams]
    head: LinearParams


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _norm(x: Tensor, p: NormParams, train: bool, update_stats: bool) -> Tensor:
    return batch_norm(x, p.gamma, p.beta, p.stats, train=train, eps=p.eps,
                      update_running=update_stats)


def _conv(x: Tensor, p: ConvParams) -> Tensor:
    return conv2d(x, p.weight, p.bias, stride=p.stride, pad=p.pad)


def clinical_encoder_forward(params: ClinicalEncoderParams,
                             clinical: Tensor) -> Tensor:
    """Two fully connected layers with a ReLU between: [B,D_clin] -> [B,D_emb]."""
    h = relu(fully_connected(clinical, params.fc1.weight, params.fc1.bias))
    return fully_connected(h, params.fc2.weight, params.fc2.bias)


def clinical_attention_forward(params: AttentionParams, image_feats: Tensor,
                               clinical_emb: Tensor) -> Tensor:
    """Per-channel similarity statistic between clinical and image features.

    The embedding is projected onto the map's channel count, multiplied into
    every spatial position of the matching channel, and the result is
    globally average-pooled back to one value per channel.
    """
    aligned = fully_connected(clinical_emb, params.proj.weight, params.proj.bias)
    weighted = channel_scale(image_feats, aligned)
    return global_avg_pool(weighted)


def residual_block_forward(params: BlockParams, x: Tensor,
                           clinical_emb: Optional[Tensor] = None,
                           train: bool = False, update_stats: bool = False,
                           squash: bool = True) -> Tensor:
    """One residual block, optionally gated by clinical attention.

    The input is halved channel-wise by a 1x1 convolution. With attention,
    the halved map is rescaled by the (optionally sigmoid-squashed) attention
    statistic and concatenated back onto itself, restoring the input width
    before the two-convolution tail. Without attention the halved map feeds
    the tail directly.
    """
    if x.shape[1] % 2:
        raise ShapeError(f"residual block needs an even channel count, got {x.shape[1]}")
    r = relu(_norm(_conv(x, params.reduce), params.reduce_norm, train, update_stats))

    if params.attention is not None:
        if clinical_emb is None:
            raise ShapeError("attention block requires a clinical embedding")
        stat = clinical_attention_forward(params.attention, r, clinical_emb)
        gate = sigmoid(stat) if squash else stat
        attended = channel_scale(r, gate)
        y = concat_channels(attended, r)
    else:
        y = r

    t = relu(_norm(_conv(y, params.tail1), params.tail1_norm, train, update_stats))
    t = _norm(_conv(t, params.tail2), params.tail2_norm, train, update_stats)

    if params.shortcut is not None:
        sc = _norm(_conv(x, params.shortcut), params.shortcut_norm, train, update_stats)
    else:
        sc = x
    return relu(add(t, sc))


def backbone_forward(config: ModelConfig, params: ModelParams, image: Tensor,
                     clinical_emb: Optional[Tensor] = None, train: bool = False,
                     update_stats: bool = False) -> Tensor:
    """Stem + residual stages + global pooling: image -> [B, feature_width]."""
    if config.variant == Variant.FULL and clinical_emb is None:
        raise ShapeError("full variant backbone requires a clinical embedding")
    if config.variant != Variant.FULL and clinical_emb is not None:
        raise ShapeError(f"{config.variant.value} backbone takes no clinical embedding")

    x = relu(_norm(_conv(image, params.stem), params.stem_norm, train, update_stats))
    for stage in params.stages:
        for block in stage:
            x = residual_block_forward(
                block, x,
                clinical_emb=clinical_emb if block.attention is not None else None,
                train=train, update_stats=update_stats,
                squash=config.attention_squash,
            )
    return global_avg_pool(x)


def decision_head_forward(params: LinearParams, image_feats: Tensor,
                          clinical_emb: Optional[Tensor] = None) -> Tensor:
    """Concatenate both feature vectors (when present) -> linear -> softmax."""
    merged = image_feats if clinical_emb is None else concat_channels(
        image_feats, clinical_emb)
    return softmax(fully_connected(merged, params.weight, params.bias))


def model_forward(config: ModelConfig, params: ModelParams, image: Tensor,
                  clinical: Optional[Tensor] = None, train: bool = False,
                  update_stats: Optional[bool] = None) -> Tensor:
    """Class probabilities [B, K] for a batch of images + clinical vectors.

    ``clinical`` is ignored for the image-only variant and required
    otherwise. ``update_stats`` defaults to ``train``.
    """
    if update_stats is None:
        update_stats = train
    if config.variant == Variant.IMAGE_ONLY:
        emb = None
    else:
        if clinical is None:
            raise ShapeError(f"{config.variant.value} variant requires clinical input")
        emb = clinical_encoder_forward(params.clinical, clinical)
    feats = backbone_forward(
        config, params, image,
        clinical_emb=emb if config.variant == Variant.FULL else None,
        train=train, update_stats=update_stats,
    )
    return decision_head_forward(params.head, feats, emb)


# ---------------------------------------------------------------------------
# parameter traversal
# ---------------------------------------------------------------------------


def _walk_named(params: ModelParams):
    """Yield (name, tensor) in a fixed construction order.

    Conv biases are fixed at zero (inert under the following norm) and are
    not trainable parameters, so they do not appear here.
    """
    yield "stem.weight", params.stem.weight
    yield "stem_norm.gamma", params.stem_norm.gamma
    yield "stem_norm.beta", params.stem_norm.beta
    for si, stage in enumerate(params.stages):
        for bi, blk in enumerate(stage):
            p = f"stage{si}.block{bi}"
            yield f"{p}.reduce.weight", blk.reduce.weight
            yield f"{p}.reduce_norm.gamma", blk.reduce_norm.gamma
            yield f"{p}.reduce_norm.beta", blk.reduce_norm.beta
            if blk.attention is not None:
                yield f"{p}.attention.proj.weight", blk.attention.proj.weight
                yield f"{p}.attention.proj.bias", blk.attention.proj.bias
            yield f"{p}.tail1.weight", blk.tail1.weight
            yield f"{p}.tail1_norm.gamma", blk.tail1_norm.gamma
            yield f"{p}.tail1_norm.beta", blk.tail1_norm.beta
            yield f"{p}.tail2.weight", blk.tail2.weight
            yield f"{p}.tail2_norm.gamma", blk.tail2_norm.gamma
            yield f"{p}.tail2_norm.beta", blk.tail2_norm.beta
            if blk.shortcut is not None:
                yield f"{p}.shortcut.weight", blk.shortcut.weight
                yield f"{p}.shortcut_norm.gamma", blk.shortcut_norm.gamma
                yield f"{p}.shortcut_norm.beta", blk.shortcut_norm.beta
    if params.clinical is not None:
        yield "clinical.fc1.weight", params.clinical.fc1.weight
        yield "clinical.fc1.bias", params.clinical.fc1.bias
        yield "clinical.fc2.weight", params.clinical.fc2.weight
        yield "clinical.fc2.bias", params.clinical.fc2.bias
    yield "head.weight", params.head.weight
    yield "head.bias", params.head.bias


def named_parameters(params: ModelParams) -> list:
    return list(_walk_named(params))


def count_parameters(params: ModelParams) -> int:
    return sum(t.size for _, t in _walk_named(params))


def named_running_stats(params: ModelParams) -> list:
    """(name, RunningStats) pairs in fixed order."""
    out = [("stem_norm", params.stem_norm.stats)]
    for si, stage in enumerate(params.stages):
        for bi, blk in enumerate(stage):
            p = f"stage{si}.block{bi}"
            out.append((f"{p}.reduce_norm", blk.reduce_norm.stats))
            out.append((f"{p}.tail1_norm", blk.tail1_norm.stats))
            out.append((f"{p}.tail2_norm", blk.tail2_norm.stats))
            if blk.shortcut_norm is not None:
                out.append((f"{p}.shortcut_norm", blk.shortcut_norm.stats))
    return out


def map_parameters(params: ModelParams, fn) -> ModelParams:
    """Structural copy with each parameter tensor replaced by fn(name, tensor).

    Running statistics objects are shared with the source tree, so the copy
    sees the same eval-mode normalization; pass fresh stats via
    ``copy_running_stats`` if isolation is needed.
    """

    def lin(name, p: LinearParams) -> LinearParams:
        return LinearParams(fn(f"{name}.weight", p.weight), fn(f"{name}.bias", p.bias))

    def conv(name, p: ConvParams) -> ConvParams:
        # conv bias is structurally zero and shared, not remapped
        return ConvParams(fn(f"{name}.weight", p.weight), p.bias, p.stride, p.pad)

    def norm(name, p: NormParams) -> NormParams:
        return NormParams(fn(f"{name}.gamma", p.gamma), fn(f"{name}.beta", p.beta),
                          p.stats, p.eps)

    stages = []
    for si, stage in enumerate(params.stages):
        blocks = []
        for bi, blk in enumerate(stage):
            p = f"stage{si}.block{bi}"
            blocks.append(BlockParams(
                reduce=conv(f"{p}.reduce", blk.reduce),
                reduce_norm=norm(f"{p}.reduce_norm", blk.reduce_norm),
                attention=None if blk.attention is None else AttentionParams(
                    lin(f"{p}.attention.proj", blk.attention.proj)),
                tail1=conv(f"{p}.tail1", blk.tail1),
                tail1_norm=norm(f"{p}.tail1_norm", blk.tail1_norm),
                tail2=conv(f"{p}.tail2", blk.tail2),
                tail2_norm=norm(f"{p}.tail2_norm", blk.tail2_norm),
                shortcut=None if blk.shortcut is None else conv(
                    f"{p}.shortcut", blk.shortcut),
                shortcut_norm=None if blk.shortcut_norm is None else norm(
                    f"{p}.shortcut_norm", blk.shortcut_norm),
            ))
        stages.append(blocks)

    return ModelParams(
        stem=conv("stem", params.stem),
        stem_norm=norm("stem_norm", params.stem_norm),
        stages=stages,
        clinical=None if params.clinical is None else ClinicalEncoderParams(
            lin("clinical.fc1", params.clinical.fc1),
            lin("clinical.fc2", params.clinical.fc2)),
        head=lin("head", params.head),
    )


def copy_running_stats(params: ModelParams) -> ModelParams:
    """Same parameter tensors, fresh copies of every RunningStats."""
    out = map_parameters(params, lambda _n, t: t)
    for holder in _norm_holders(out):
        holder.stats = holder.stats.copy()
    return out


def _norm_holders(params: ModelParams):
    yield params.stem_norm
    for stage in params.stages:
        for blk in stage:
            yield blk.reduce_norm
            yield blk.tail1_norm
            yield blk.tail2_norm
            if blk.shortcut_norm is not None:
                yield blk.shortcut_norm
