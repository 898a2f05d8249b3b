"""Learned proximal networks and the history combiner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

IO_CHANNELS = 2


@dataclass(frozen=True)
class ResNetConfig:
    n_blocks: int = 5
    channels: int = 32
    residual_scale: float = 0.1
    io_channels: int = IO_CHANNELS

    def __post_init__(self) -> None:
        if self.n_blocks < 1 or self.channels < 1 or self.residual_scale <= 0:
            raise ContractError(f"invalid ResNet config {self}")


# full-size reference network (15 blocks x 64 channels)
REFERENCE_RESNET = ResNetConfig(n_blocks=15, channels=64, residual_scale=0.1)


@dataclass(frozen=True)
class UNetConfig:
    channels: int = 16
    io_channels: int = IO_CHANNELS

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ContractError(f"invalid U-Net config {self}")


@dataclass
class ProxParams:
    """Weights of one proximal network, shared by every unrolled iteration."""

    kind: str  # "resnet" | "unet"
    config: ResNetConfig | UNetConfig
    weights: dict[str, Tensor] = field(default_factory=dict)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "resnet":
            return resnet_forward(x, self)
        return unet_forward(x, self)


def _conv_shapes(kind: str, config) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of a proximal network (bias shapes are 1-D)."""
    io = config.io_channels
    c = config.channels
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cout, cin, k):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    if kind == "resnet":
        conv("in", c, io, 3)
        for b in range(config.n_blocks):
            conv(f"block{b}.conv1", c, c, 3)
            conv(f"block{b}.conv2", c, c, 3)
        conv("out", io, c, 3)
    elif kind == "unet":
        conv("enc1", c, io, 3)
        conv("enc2", c, c, 3)
        conv("mid1", 2 * c, c, 3)
        conv("mid2", 2 * c, 2 * c, 3)
        conv("dec1", c, 3 * c, 3)
        conv("dec2", c, c, 3)
        conv("out", io, c, 1)
    else:
        raise ContractError(f"unknown proximal network kind {kind!r}")
    return shapes


def init_prox(kind: str, config, seed: int, zero_output: bool = False) -> ProxParams:
    """He-style uniform kernels in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``, zero biases.

    With ``zero_output`` the final conv starts at zero, so the network starts
    as the identity (through the global residual) while its inner layers are
    still random.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _conv_shapes(kind, config).items():
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
            if zero_output and name == "out.w":
                data[...] = 0.0
        else:
            data = np.zeros(shape)
        weights[f"prox.{name}"] = Tensor(data, requires_grad=True)
    return ProxParams(kind, config, weights)


def zero_prox(kind: str, config) -> ProxParams:
    """All-zero weights; with the global residual this is the identity map."""
    weights = {
        f"prox.{name}": Tensor(np.zeros(shape), requires_grad=True)
        for name, shape in _conv_shapes(kind, config).items()
    }
    return ProxParams(kind, config, weights)


def _conv(x: Tensor, p: ProxParams, name: str) -> Tensor:
    w = p.weights
    return ad.conv2d(x, w[f"prox.{name}.w"], w[f"prox.{name}.b"])


def _check_input(x: Tensor, io: int) -> None:
    if x.data.ndim != 3 or x.shape[0] != io:
        raise ShapeError(f"proximal input must be {io} x H x W, got {x.shape}")


def resnet_forward(x: Tensor, p: ProxParams) -> Tensor:
    if p.kind != "resnet":
        raise ContractError(f"resnet_forward got {p.kind} parameters")
    cfg: ResNetConfig = p.config
    _check_input(x, cfg.io_channels)
    h = _conv(x, p, "in")
    for b in range(cfg.n_blocks):
        r = ad.relu(_conv(h, p, f"block{b}.conv1"))
        r = _conv(r, p, f"block{b}.conv2")
        h = h + r * cfg.residual_scale
    return x + _conv(h, p, "out")


def unet_forward(x: Tensor, p: ProxParams) -> Tensor:
    if p.kind != "unet":
        raise ContractError(f"unet_forward got {p.kind} parameters")
    _check_input(x, p.config.io_channels)
    _, height, width = x.shape
    if height % 4 or width % 4:
        raise ContractError(f"U-Net needs H, W divisible by 4, got {height}x{width}")
    e = ad.relu(_conv(x, p, "enc1"))
    e = ad.relu(_conv(e, p, "enc2"))
    m = ad.avg_pool2(e)
    m = ad.relu(_conv(m, p, "mid1"))
    m = ad.relu(_conv(m, p, "mid2"))
    d = ad.concat_channels([ad.upsample2(m), e])
    d = ad.relu(_conv(d, p, "dec1"))
    d = ad.relu(_conv(d, p, "dec2"))
    return x + _conv(d, p, "out")


# -- history combiner ----------------------------------------------------------


def one_hot_combiner(i: int, io: int = IO_CHANNELS) -> np.ndarray:
    """Kernel for iteration ``i`` (1-based) that selects the newest output."""
    k = np.zeros((io, io * i, 1, 1))
    for c in range(io):
        k[c, io * (i - 1) + c, 0, 0] = 1.0
    return k


def init_combiner(T: int, io: int = IO_CHANNELS) -> list[Tensor]:
    return [Tensor(one_hot_combiner(i, io), requires_grad=True) for i in range(1, T + 1)]


def combine_history(history: list[Tensor], weights: list[Tensor], i: int) -> Tensor:
    """1x1 convolution over the channel-concatenated outputs ``z(1)..z(i)``."""
    if len(history) != i:
        raise ContractError(f"iteration {i} needs {i} history entries, got {len(history)}")
    if i < 1 or i > len(weights):
        raise ContractError(f"no combiner kernel for iteration {i}")
    return ad.conv2d(ad.concat_channels(history), weights[i - 1])


# -- parameter counting --------------------------------------------------------


def count_prox_params(kind: str, config) -> int:
    return sum(int(np.prod(s)) for s in _conv_shapes(kind, config).values())


def count_combiner_params(T: int, io: int = IO_CHANNELS) -> int:
    return sum(io * io * i for i in range(1, T + 1))
