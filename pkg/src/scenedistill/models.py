"""Student architectures mapping an RGB image to a per-pixel 3D pointmap.

Three architectures share the same contract (N, 3, H, W) -> (N, 3, H, W):

* ``vanilla-cnn``: six 3x3 conv stages with ReLU, then per-pixel 1x1 convs.
* ``backbone-head``: a strided conv feature extractor (optionally frozen
  and/or loaded from a weight file) with an upsampling conv head.
* ``vit``: patch tokens + class token + learned positional embeddings,
  pre-norm encoder and decoder blocks, and a convolutional head that
  expands tokens back to full resolution via pixel shuffle.

Everything is built from the ops in :mod:`scenedistill.tensor`, so each
forward is differentiable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, parameter

ARCH_VIT = "vit"
ARCH_VANILLA_CNN = "vanilla-cnn"
ARCH_BACKBONE_HEAD = "backbone-head"

# Widths of the shared convolutional head family: in -> 64 -> 32 -> 3 with
# leaky ReLU between layers and no activation after the last.
HEAD_FAMILY_WIDTHS = (64, 32)
OUTPUT_CHANNELS = 3


@dataclass
class ViTConfig:
    image_h: int = 128
    image_w: int = 128
    patch_size: int = 32
    latent_dim: int = 256
    num_blocks: int = 6
    num_heads: int = 4
    mlp_ratio: float = 4.0
    dropout_p: float = 0.1
    head_channels: int = 16

    @property
    def token_count(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.latent_dim))

    def validate(self) -> None:
        if self.patch_size <= 0 or self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} must divide image {self.image_h}x{self.image_w}"
            )
        if self.num_heads <= 0 or self.latent_dim % self.num_heads:
            raise ConfigError(
                f"latent dim {self.latent_dim} must be divisible by {self.num_heads} heads"
            )
        if self.token_count < 1:
            raise ConfigError("token count must be >= 1")
        if self.num_blocks < 1:
            raise ConfigError("need at least one encoder/decoder block")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.head_channels < 1 or self.mlp_hidden < 1:
            raise ConfigError("head_channels and mlp hidden width must be positive")


@dataclass
class VanillaCNNConfig:
    image_h: int = 128
    image_w: int = 128
    channels: tuple[int, ...] = (32, 64, 128, 256, 512, 512)
    head_widths: tuple[int, ...] = (128,)

    def validate(self) -> None:
        if len(self.channels) != 6:
            raise ConfigError(f"vanilla CNN needs exactly six conv stages, got {len(self.channels)}")
        if any(c < 1 for c in self.channels) or any(w < 1 for w in self.head_widths):
            raise ConfigError("channel counts must be positive")


@dataclass
class BackboneHeadConfig:
    image_h: int = 128
    image_w: int = 128
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    frozen: bool = False
    head_channels: int = 16

    @property
    def downsample(self) -> int:
        return 2 ** len(self.backbone_channels)

    def validate(self) -> None:
        if len(self.backbone_channels) < 1 or any(c < 1 for c in self.backbone_channels):
            raise ConfigError("backbone needs at least one positive channel count")
        if self.head_channels < 1:
            raise ConfigError("head_channels must be positive")
        ds = self.downsample
        if self.image_h % ds or self.image_w % ds:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} must be divisible by downsample factor {ds}"
            )


ModelConfig = Union[ViTConfig, VanillaCNNConfig, BackboneHeadConfig]

_CONFIG_CLASSES = {
    ARCH_VIT: ViTConfig,
    ARCH_VANILLA_CNN: VanillaCNNConfig,
    ARCH_BACKBONE_HEAD: BackboneHeadConfig,
}


def config_from_dict(arch: str, d: dict) -> ModelConfig:
    """Rebuild a config dataclass from its JSON dict form."""
    cls = _CONFIG_CLASSES.get(arch)
    if cls is None:
        raise ConfigError(f"unknown architecture {arch!r}")
    kwargs = dict(d)
    for key in ("channels", "head_widths", "backbone_channels"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        cfg = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config for {arch}: {exc}") from exc
    cfg.validate()
    return cfg


@dataclass
class StudentModel:
    """A built architecture: tag, config, and named parameter tensors.

    ``output_scale`` records the label scale the model was trained against,
    so evaluation can convert predictions back to original teacher units.
    """

    arch: str
    config: ModelConfig
    params: dict[str, Tensor]
    output_scale: float = 1.0

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.arch == ARCH_VIT:
            return vit_forward(self, x, training=training, rng=rng)
        if self.arch == ARCH_VANILLA_CNN:
            return cnn_forward(self, x, training=training, rng=rng)
        if self.arch == ARCH_BACKBONE_HEAD:
            return backbone_head_forward(self, x, training=training, rng=rng)
        raise ConfigError(f"unknown architecture {self.arch!r}")

    def trainable_params(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return parameter((rng.standard_normal(shape) * std).astype(dtype))


def _xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, shape).astype(dtype))


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    """Normal(0, std) re-drawn until within two standard deviations."""
    flat = np.empty(int(np.prod(shape)), dtype=np.float64)
    filled = 0
    while filled < flat.size:
        draw = rng.standard_normal(flat.size - filled)
        keep = draw[np.abs(draw) <= 2.0]
        flat[filled : filled + keep.size] = keep
        filled += keep.size
    return parameter((flat.reshape(shape) * std).astype(dtype))


def _conv_bias(rng: np.random.Generator, n: int, fan_in: int, dtype) -> Tensor:
    # uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), the usual conv default;
    # also keeps pre-activations off the exact relu/leaky kink at init
    limit = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-limit, limit, n).astype(dtype))


def _zeros(shape, dtype) -> Tensor:
    return parameter(np.zeros(shape, dtype=dtype))


def _ones(shape, dtype) -> Tensor:
    return parameter(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# shared building blocks
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: x @ w + b."""
    shp = x.shape
    flat = T.reshape(x, (-1, shp[-1]))
    out = T.add(T.matmul(flat, w), b)
    return T.reshape(out, shp[:-1] + (w.shape[1],))


def _add_head_family(params: dict[str, Tensor], prefix: str, in_channels: int,
                     rng: np.random.Generator, dtype) -> None:
    w1, w2 = HEAD_FAMILY_WIDTHS
    params[f"{prefix}conv1.w"] = _he_normal(rng, (w1, in_channels, 3, 3), in_channels * 9, dtype)
    params[f"{prefix}conv1.b"] = _conv_bias(rng, w1, in_channels * 9, dtype)
    params[f"{prefix}conv2.w"] = _he_normal(rng, (w2, w1, 3, 3), w1 * 9, dtype)
    params[f"{prefix}conv2.b"] = _conv_bias(rng, w2, w1 * 9, dtype)
    params[f"{prefix}conv3.w"] = _xavier_uniform(
        rng, (OUTPUT_CHANNELS, w2, 3, 3), w2 * 9, OUTPUT_CHANNELS * 9, dtype
    )
    params[f"{prefix}conv3.b"] = _conv_bias(rng, OUTPUT_CHANNELS, w2 * 9, dtype)


def _run_head_family(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    x = T.conv2d(x, params[f"{prefix}conv1.w"], params[f"{prefix}conv1.b"], padding=1)
    x = T.leaky_relu(x)
    x = T.conv2d(x, params[f"{prefix}conv2.w"], params[f"{prefix}conv2.b"], padding=1)
    x = T.leaky_relu(x)
    return T.conv2d(x, params[f"{prefix}conv3.w"], params[f"{prefix}conv3.b"], padding=1)


# ---------------------------------------------------------------------------
# vision transformer
# ---------------------------------------------------------------------------

def build_vit(cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> StudentModel:
    """Create a ViT student with freshly initialized parameters."""
    cfg.validate()
    d = cfg.latent_dim
    patch_dim = 3 * cfg.patch_size * cfg.patch_size
    hidden = cfg.mlp_hidden
    params: dict[str, Tensor] = {}

    params["embed.w"] = _xavier_uniform(rng, (patch_dim, d), patch_dim, d, dtype)
    params["embed.b"] = _zeros((d,), dtype)
    params["cls_token"] = _trunc_normal(rng, (1, 1, d), 0.02, dtype)
    params["pos_embed"] = _trunc_normal(rng, (cfg.token_count + 1, d), 0.02, dtype)

    for kind in ("enc", "dec"):
        for i in range(cfg.num_blocks):
            pre = f"{kind}{i}."
            params[f"{pre}ln1.gamma"] = _ones((d,), dtype)
            params[f"{pre}ln1.beta"] = _zeros((d,), dtype)
            for proj in ("wq", "wk", "wv", "wo"):
                params[f"{pre}attn.{proj}"] = _xavier_uniform(rng, (d, d), d, d, dtype)
            for bias in ("bq", "bk", "bv", "bo"):
                params[f"{pre}attn.{bias}"] = _zeros((d,), dtype)
            params[f"{pre}ln2.gamma"] = _ones((d,), dtype)
            params[f"{pre}ln2.beta"] = _zeros((d,), dtype)
            params[f"{pre}mlp.w1"] = _xavier_uniform(rng, (d, hidden), d, hidden, dtype)
            params[f"{pre}mlp.b1"] = _zeros((hidden,), dtype)
            params[f"{pre}mlp.w2"] = _xavier_uniform(rng, (hidden, d), hidden, d, dtype)
            params[f"{pre}mlp.b2"] = _zeros((d,), dtype)

    expand = cfg.patch_size * cfg.patch_size * cfg.head_channels
    params["head.expand.w"] = _he_normal(rng, (expand, d, 1, 1), d, dtype)
    params["head.expand.b"] = _conv_bias(rng, expand, d, dtype)
    _add_head_family(params, "head.", cfg.head_channels, rng, dtype)

    return StudentModel(arch=ARCH_VIT, config=cfg, params=params)


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, num_heads: int,
               return_attn: bool = False):
    n, s, d = x.shape
    dh = d // num_heads

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (n, s, num_heads, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(x, params[f"{prefix}attn.wq"], params[f"{prefix}attn.bq"]))
    k = split_heads(_linear(x, params[f"{prefix}attn.wk"], params[f"{prefix}attn.bk"]))
    v = split_heads(_linear(x, params[f"{prefix}attn.wv"], params[f"{prefix}attn.bv"]))

    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(logits)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, s, d))
    out = _linear(ctx, params[f"{prefix}attn.wo"], params[f"{prefix}attn.bo"])
    if return_attn:
        return out, attn
    return out


def _transformer_block(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: ViTConfig,
                       training: bool, rng: Optional[np.random.Generator],
                       return_attn: bool = False):
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.))."""
    if x.data.ndim != 3 or x.shape[-1] != cfg.latent_dim:
        raise DimensionError(f"block expects (N, S, {cfg.latent_dim}) tokens, got {x.shape}")
    normed = T.layer_norm(x, params[f"{prefix}ln1.gamma"], params[f"{prefix}ln1.beta"])
    if return_attn:
        att_out, attn = _attention(normed, params, prefix, cfg.num_heads, return_attn=True)
    else:
        att_out = _attention(normed, params, prefix, cfg.num_heads)
        attn = None
    x = T.add(x, att_out)

    normed = T.layer_norm(x, params[f"{prefix}ln2.gamma"], params[f"{prefix}ln2.beta"])
    h = _linear(normed, params[f"{prefix}mlp.w1"], params[f"{prefix}mlp.b1"])
    h = T.gelu(h)
    h = T.dropout(h, cfg.dropout_p, training, rng)
    h = _linear(h, params[f"{prefix}mlp.w2"], params[f"{prefix}mlp.b2"])
    x = T.add(x, h)
    if return_attn:
        return x, attn
    return x


def encoder_block(x: Tensor, params: dict[str, Tensor], cfg: ViTConfig, training: bool = False,
                  rng: Optional[np.random.Generator] = None, prefix: str = "enc0.",
                  return_attn: bool = False):
    return _transformer_block(x, params, prefix, cfg, training, rng, return_attn)


def decoder_block(x: Tensor, params: dict[str, Tensor], cfg: ViTConfig, training: bool = False,
                  rng: Optional[np.random.Generator] = None, prefix: str = "dec0.",
                  return_attn: bool = False):
    """Same contract as :func:`encoder_block` (self-attention only)."""
    return _transformer_block(x, params, prefix, cfg, training, rng, return_attn)


def conv_head(grid: Tensor, params: dict[str, Tensor], p: int, prefix: str = "head.") -> Tensor:
    """Expand a token grid (N, d, H/p, W/p) to full-resolution 3D points."""
    x = T.conv2d(grid, params[f"{prefix}expand.w"], params[f"{prefix}expand.b"])
    x = T.pixel_shuffle(x, p)
    return _run_head_family(x, params, prefix)


def vit_forward(model: StudentModel, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    cfg = model.config
    n = x.shape[0]
    if x.data.ndim != 4 or x.shape[1:] != (3, cfg.image_h, cfg.image_w):
        raise ConfigError(
            f"vit_forward expects (N, 3, {cfg.image_h}, {cfg.image_w}) input, got {x.shape}"
        )
    params = model.params
    t = cfg.token_count

    tokens = T.unfold_patches(x, cfg.patch_size)
    emb = _linear(tokens, params["embed.w"], params["embed.b"])
    cls = T.broadcast_to(params["cls_token"], (n, 1, cfg.latent_dim))
    seq = T.concat([cls, emb], axis=1)
    seq = T.add(seq, params["pos_embed"])

    for i in range(cfg.num_blocks):
        seq = encoder_block(seq, params, cfg, training, rng, prefix=f"enc{i}.")
    for i in range(cfg.num_blocks):
        seq = decoder_block(seq, params, cfg, training, rng, prefix=f"dec{i}.")

    spatial = T.narrow(seq, 1, 1, t)  # drop the class token
    grid = T.reshape(
        T.transpose(spatial, (0, 2, 1)),
        (n, cfg.latent_dim, cfg.image_h // cfg.patch_size, cfg.image_w // cfg.patch_size),
    )
    return conv_head(grid, params, cfg.patch_size)


# ---------------------------------------------------------------------------
# vanilla CNN
# ---------------------------------------------------------------------------

def build_vanilla_cnn(cfg: VanillaCNNConfig, rng: np.random.Generator,
                      dtype=np.float32) -> StudentModel:
    cfg.validate()
    params: dict[str, Tensor] = {}
    c_in = 3
    for i, c_out in enumerate(cfg.channels):
        params[f"conv{i}.w"] = _he_normal(rng, (c_out, c_in, 3, 3), c_in * 9, dtype)
        params[f"conv{i}.b"] = _conv_bias(rng, c_out, c_in * 9, dtype)
        c_in = c_out
    for j, width in enumerate(cfg.head_widths):
        params[f"head.fc{j}.w"] = _he_normal(rng, (width, c_in, 1, 1), c_in, dtype)
        params[f"head.fc{j}.b"] = _conv_bias(rng, width, c_in, dtype)
        c_in = width
    params["head.out.w"] = _xavier_uniform(
        rng, (OUTPUT_CHANNELS, c_in, 1, 1), c_in, OUTPUT_CHANNELS, dtype
    )
    params["head.out.b"] = _conv_bias(rng, OUTPUT_CHANNELS, c_in, dtype)
    return StudentModel(arch=ARCH_VANILLA_CNN, config=cfg, params=params)


def cnn_forward(model: StudentModel, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ConfigError(f"cnn_forward expects (N, 3, H, W) input, got {x.shape}")
    cfg = model.config
    params = model.params
    for i in range(len(cfg.channels)):
        x = T.conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=1)
        x = T.relu(x)
    for j in range(len(cfg.head_widths)):
        x = T.conv2d(x, params[f"head.fc{j}.w"], params[f"head.fc{j}.b"])
        x = T.relu(x)
    return T.conv2d(x, params["head.out.w"], params["head.out.b"])


# ---------------------------------------------------------------------------
# backbone + head
# ---------------------------------------------------------------------------

def build_backbone_head(cfg: BackboneHeadConfig, weights_file=None,
                        rng: Optional[np.random.Generator] = None,
                        dtype=np.float32) -> StudentModel:
    """Strided conv backbone plus upsampling head.

    ``weights_file`` optionally points at a checkpoint whose ``backbone.*``
    tensors are copied in by name (shapes must match exactly). With
    ``cfg.frozen`` the backbone is excluded from gradient updates.
    """
    cfg.validate()
    if rng is None:
        raise ContractError("build_backbone_head needs a seeded generator")
    params: dict[str, Tensor] = {}
    c_in = 3
    for i, c_out in enumerate(cfg.backbone_channels):
        # 4x4 stride-2 pad-1 halves even extents exactly.
        params[f"backbone.conv{i}.w"] = _he_normal(rng, (c_out, c_in, 4, 4), c_in * 16, dtype)
        params[f"backbone.conv{i}.b"] = _conv_bias(rng, c_out, c_in * 16, dtype)
        c_in = c_out
    ds = cfg.downsample
    expand = ds * ds * cfg.head_channels
    params["head.expand.w"] = _he_normal(rng, (expand, c_in, 1, 1), c_in, dtype)
    params["head.expand.b"] = _conv_bias(rng, expand, c_in, dtype)
    _add_head_family(params, "head.", cfg.head_channels, rng, dtype)

    model = StudentModel(arch=ARCH_BACKBONE_HEAD, config=cfg, params=params)
    if weights_file is not None:
        from .checkpoint import load_backbone_weights

        load_backbone_weights(model, weights_file)
    if cfg.frozen:
        set_frozen(model, "backbone.", True)
    return model


def backbone_head_forward(model: StudentModel, x: Tensor, training: bool = False,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ConfigError(f"backbone_head_forward expects (N, 3, H, W) input, got {x.shape}")
    ds = cfg.downsample
    if x.shape[2] % ds or x.shape[3] % ds:
        raise ConfigError(f"input extents {x.shape[2]}x{x.shape[3]} must be divisible by {ds}")
    params = model.params
    h = x
    for i in range(len(cfg.backbone_channels)):
        h = T.conv2d(h, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"],
                     stride=2, padding=1)
        h = T.relu(h)
    h = T.conv2d(h, params["head.expand.w"], params["head.expand.b"])
    h = T.pixel_shuffle(h, ds)
    return _run_head_family(h, params, "head.")


# ---------------------------------------------------------------------------
# introspection
# ---------------------------------------------------------------------------

def param_count(model: StudentModel) -> int:
    """Exact number of scalar parameters."""
    return sum(t.data.size for t in model.params.values())


def set_frozen(model: StudentModel, prefix: str, flag: bool) -> None:
    """Toggle requires_grad for every parameter whose name starts with prefix."""
    matched = [name for name in model.params if name.startswith(prefix)]
    if not matched:
        raise ContractError(f"no parameters match prefix {prefix!r}")
    for name in matched:
        model.params[name].requires_grad = not flag


def build_model(arch: str, cfg: ModelConfig, rng: np.random.Generator,
                weights_file=None, dtype=np.float32) -> StudentModel:
    """Builder dispatch used by training and the CLI."""
    if arch == ARCH_VIT:
        return build_vit(cfg, rng, dtype=dtype)
    if arch == ARCH_VANILLA_CNN:
        return build_vanilla_cnn(cfg, rng, dtype=dtype)
    if arch == ARCH_BACKBONE_HEAD:
        return build_backbone_head(cfg, weights_file=weights_file, rng=rng, dtype=dtype)
    raise ConfigError(f"unknown architecture {arch!r}")
