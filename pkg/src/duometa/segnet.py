"""Desk-scale encoder-decoder segmentation network.

The network is split into two parameter sets: the extractor (every encoder
block) and the head (decoder blocks, skip-fusion convs, per-scale
classifiers). The bi-level engine meta-learns the extractor and the head
initialization separately, and one-shot adaptation touches only a configured
slice of the head, so the split and the head partition are part of the
module's contract, not an implementation detail.

Scale convention: k = 1 is the finest scale (full resolution); scale k has
spatial extent image_size / 2^(k-1) and base_width * 2^(k-1) channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import ParamSet, Tensor


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 4  # background + CSF + GM + WM
    K: int = 3
    base_width: int = 8
    image_size: int = 32
    use_norm: bool = True

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("NetConfig: K must be >= 2")
        if self.num_classes < 2:
            raise ValueError("NetConfig: num_classes must be >= 2")
        if self.image_size % (2 ** (self.K - 1)) != 0:
            raise ValueError(f"NetConfig: image_size {self.image_size} not divisible by 2^{self.K - 1}")

    def width(self, k: int) -> int:
        return self.base_width * (2 ** (k - 1))

    def extent(self, k: int) -> int:
        return self.image_size // (2 ** (k - 1))


@dataclass
class FeaturePyramid:
    features: list  # K tensors, index i holds scale k=i+1 (finest first)
    meta: dict = field(default_factory=dict)

    def scale(self, k: int) -> Tensor:
        return self.features[k - 1]


@dataclass(frozen=True)
class HeadPartition:
    trainable: frozenset
    frozen: frozenset
    n_upsample_layers: int


NORM_EPS = 1e-5


def _he_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    fan_in = in_c * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))


def _add_conv(ps: ParamSet, rng, name: str, out_c: int, in_c: int, k: int,
              bias: bool = True) -> None:
    ps.add(f"{name}.w", Tensor(_he_conv(rng, out_c, in_c, k)))
    if bias:
        ps.add(f"{name}.b", Tensor(np.zeros(out_c)))


def _add_norm(ps: ParamSet, name: str, c: int) -> None:
    ps.add(f"{name}.g", Tensor(np.ones(c)))
    ps.add(f"{name}.b", Tensor(np.zeros(c)))


def build_network(config: NetConfig, seed: int) -> tuple[ParamSet, ParamSet]:
    """He-initialized (extractor, head) parameter sets, deterministic in seed."""
    rng = np.random.default_rng(seed)
    # a conv feeding a norm layer gets no bias: the norm would subtract it
    # exactly, leaving a permanently-zero-gradient parameter
    conv_bias = not config.use_norm
    theta = ParamSet("extractor")
    for k in range(1, config.K + 1):
        cin = config.in_channels if k == 1 else config.width(k - 1)
        w = config.width(k)
        _add_conv(theta, rng, f"enc{k}.conv1", w, cin, 3, bias=conv_bias)
        if config.use_norm:
            _add_norm(theta, f"enc{k}.norm1", w)
        _add_conv(theta, rng, f"enc{k}.conv2", w, w, 3, bias=conv_bias)
        if config.use_norm:
            _add_norm(theta, f"enc{k}.norm2", w)

    omega = ParamSet("head")
    for k in range(config.K - 1, 0, -1):
        w = config.width(k)
        _add_conv(omega, rng, f"dec{k}.fuse", w, config.width(k + 1) + w, 3, bias=conv_bias)
        if config.use_norm:
            _add_norm(omega, f"dec{k}.fnorm", w)
        _add_conv(omega, rng, f"dec{k}.conv", w, w, 3, bias=conv_bias)
        if config.use_norm:
            _add_norm(omega, f"dec{k}.cnorm", w)
    for k in range(1, config.K + 1):
        _add_conv(omega, rng, f"cls{k}", config.num_classes, config.width(k), 1)
    return theta, omega


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes."""
    B, C, H, W = x.shape
    m = tc.reduce_mean(x, axes=(2, 3), keepdims=True)
    xc = tc.sub(x, tc.expand(m, x.shape))
    var = tc.reduce_mean(tc.mul(xc, xc), axes=(2, 3), keepdims=True)
    inv = tc.power(tc.add_const(var, eps), -0.5)
    y = tc.mul(xc, tc.expand(inv, x.shape))
    g4 = tc.expand(tc.reshape(gain, (1, C, 1, 1)), x.shape)
    b4 = tc.expand(tc.reshape(bias, (1, C, 1, 1)), x.shape)
    return tc.add(tc.mul(y, g4), b4)


def _conv_block(ps: ParamSet, name: str, x: Tensor, use_norm: bool,
                conv_names=("conv1", "conv2"), norm_names=("norm1", "norm2")) -> Tensor:
    for conv_n, norm_n in zip(conv_names, norm_names):
        bias = ps[f"{name}.{conv_n}.b"] if f"{name}.{conv_n}.b" in ps else None
        x = tc.conv2d(x, ps[f"{name}.{conv_n}.w"], bias, stride=1, pad=1)
        if use_norm:
            x = instance_norm(x, ps[f"{name}.{norm_n}.g"], ps[f"{name}.{norm_n}.b"])
        x = tc.relu(x)
    return x


def extract_features(config: NetConfig, theta: ParamSet, images: Tensor) -> FeaturePyramid:
    """Run the encoder; returns one feature map per scale, finest first."""
    B, C, H, W = images.shape
    if C != config.in_channels or H != config.image_size or W != config.image_size:
        raise ValueError(f"extract_features: input {images.shape} does not match config "
                         f"({config.in_channels} x {config.image_size} x {config.image_size})")
    feats = []
    x = images
    for k in range(1, config.K + 1):
        f = _conv_block(theta, f"enc{k}", x, config.use_norm)
        feats.append(f)
        if k < config.K:
            x = tc.avg_down(f, 2)
    return FeaturePyramid(feats, meta={"scales": [2 ** (k - 1) for k in range(1, config.K + 1)]})


def decode(config: NetConfig, omega: ParamSet, pyramid: FeaturePyramid) -> list[Tensor]:
    """Coarse-to-fine decoding with skip concatenation.

    Returns one logit tensor per scale, coarsest first and finest last
    (B x num_classes x H_k x W_k each).
    """
    if len(pyramid.features) != config.K:
        raise ValueError(f"decode: pyramid has {len(pyramid.features)} scales, config wants {config.K}")
    logits = [tc.conv2d(pyramid.scale(config.K), omega[f"cls{config.K}.w"], omega[f"cls{config.K}.b"])]
    cur = pyramid.scale(config.K)
    for k in range(config.K - 1, 0, -1):
        up = tc.nearest_up(cur, 2)
        cat = tc.concat([up, pyramid.scale(k)], axis=1)
        cur = _conv_block(omega, f"dec{k}", cat, config.use_norm,
                          conv_names=("fuse", "conv"), norm_names=("fnorm", "cnorm"))
        logits.append(tc.conv2d(cur, omega[f"cls{k}.w"], omega[f"cls{k}.b"]))
    return logits


def forward_logits(config: NetConfig, theta: ParamSet, omega: ParamSet, images: Tensor) -> list[Tensor]:
    return decode(config, omega, extract_features(config, theta, images))


def decoder_block_names(config: NetConfig, omega: ParamSet, k: int) -> list[str]:
    return [n for n in omega.names() if n.startswith(f"dec{k}.")]


def partition_head(config: NetConfig, omega: ParamSet, n_upsample_layers: int) -> HeadPartition:
    """Split the head for fine-tuning: the last n decoder blocks (finest
    first: dec1 is the last block the forward pass runs) plus every
    classifier are trainable; the rest stays frozen.
    """
    n = n_upsample_layers
    if n < 0 or n > config.K - 1:
        raise ValueError(f"partition_head: n_upsample_layers must be in [0, {config.K - 1}], got {n}")
    trainable = {name for name in omega.names() if name.startswith("cls")}
    for k in range(1, n + 1):
        trainable.update(decoder_block_names(config, omega, k))
    frozen = set(omega.names()) - trainable
    return HeadPartition(frozenset(trainable), frozenset(frozen), n)
