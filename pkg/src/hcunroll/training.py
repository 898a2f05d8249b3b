"""Synthetic datasets, the normalized l1-l2 loss, Adam, and end-to-end training."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .errors import ContractError, NumericalError, ShapeError
from .mri import (
    CoilMaps,
    Encoder,
    SamplingMask,
    make_coil_maps,
    make_phantom,
    make_random_mask,
    make_uniform_mask,
    simulate_acquisition,
    to_channels,
    to_complex,
)
from .nets import ResNetConfig, UNetConfig, init_prox
from .unroll import UnrollConfig, UnrolledNet, UnrollParams

log = logging.getLogger(__name__)


# -- loss ----------------------------------------------------------------------


def normalized_l1l2_loss(ref, out) -> Tensor:
    """``||ref - out||_2 / ||ref||_2 + ||ref - out||_1 / ||ref||_1``."""
    ref = ad.as_tensor(ref)
    out = ad.as_tensor(out)
    if ref.shape != out.shape:
        raise ShapeError(f"loss: reference {ref.shape} vs output {out.shape}")
    ref_l2 = ad.norm2(ref).item()
    ref_l1 = ad.sum_(ad.abs_(ref)).item()
    if ref_l2 == 0.0:
        raise ContractError("reference image is identically zero")
    diff = out - ref
    return ad.norm2(diff) / ref_l2 + ad.sum_(ad.abs_(diff)) / ref_l1


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], **hyper) -> AdamState:
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, applied to the parameter arrays in place.

    ``lr`` overrides ``state.lr`` for this step (used by the schedule).
    """
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- data ----------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 40
    n_test: int = 20
    height: int = 64
    width: int = 64
    coils: int = 4
    mask: str = "uniform"
    acceleration: int = 4
    center_lines: int = 8
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise ContractError("dataset needs at least one train and one test item")
        if self.mask not in ("uniform", "random"):
            raise ContractError(f"mask must be 'uniform' or 'random', got {self.mask!r}")


@dataclass
class Item:
    x_ref: np.ndarray  # complex (H, W)
    y: np.ndarray  # complex (n_coils, H, W)
    enc: Encoder

    def y_tensor(self) -> Tensor:
        return Tensor(to_channels(self.y))

    def ref_tensor(self) -> Tensor:
        return Tensor(to_channels(self.x_ref))

    def zero_filled(self) -> np.ndarray:
        return self.enc.adjoint(self.y)


@dataclass
class Dataset:
    config: DataConfig
    coils: CoilMaps
    train: list[Item]
    test: list[Item]


_TAGS = {"phantom": 1, "noise": 2, "mask": 3}
_SPLITS = {"train": 0, "test": 1}


def child_seed(seed: int, tag: str, split: str, index: int) -> int:
    """Independent stream per (root seed, purpose, split, item)."""
    ss = np.random.SeedSequence([seed, _TAGS[tag], _SPLITS[split], index])
    return int(ss.generate_state(1)[0])


def _make_mask(cfg: DataConfig, split: str, k: int) -> SamplingMask:
    if cfg.mask == "uniform":
        return make_uniform_mask(cfg.width, cfg.acceleration, cfg.center_lines)
    return make_random_mask(
        cfg.width, cfg.acceleration, cfg.center_lines, child_seed(cfg.seed, "mask", split, k)
    )


def make_dataset(cfg: DataConfig) -> Dataset:
    """Phantoms, coil maps, masks and noisy acquisitions, all derived from ``cfg.seed``.

    Phantom seeds do not depend on the mask kind, so a random-mask dataset with
    the same seed holds the same images as its uniform twin.
    """
    coils = make_coil_maps(cfg.coils, cfg.height, cfg.width)
    splits = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        items = []
        for k in range(n):
            x = make_phantom(cfg.height, cfg.width, child_seed(cfg.seed, "phantom", split, k))
            enc = Encoder(coils, _make_mask(cfg, split, k))
            y = simulate_acquisition(x, enc, cfg.noise_sigma, child_seed(cfg.seed, "noise", split, k))
            items.append(Item(x, y, enc))
        splits[split] = items
    return Dataset(cfg, coils, splits["train"], splits["test"])


def _header_from(prefix: str, obj) -> dict[str, str]:
    return {f"{prefix}.{k}": str(v) for k, v in asdict(obj).items()}


def _config_from(prefix: str, header: dict[str, str], cls):
    kwargs = {}
    for name, f in cls.__dataclass_fields__.items():
        raw = header[f"{prefix}.{name}"]
        kwargs[name] = type(f.default)(raw) if not isinstance(f.default, str) else raw
    return cls(**kwargs)


def dataset_tensors(ds: Dataset) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    header = {"kind": "dataset", **_header_from("data", ds.config)}
    tensors = {"coils": to_channels(ds.coils.maps)}
    for split, items in (("train", ds.train), ("test", ds.test)):
        for k, it in enumerate(items):
            tensors[f"{split}.{k}.x_ref"] = to_channels(it.x_ref)
            tensors[f"{split}.{k}.y"] = to_channels(it.y)
            tensors[f"{split}.{k}.mask"] = it.enc.mask.sampled.astype(np.float64)
    return header, tensors


def save_dataset(ds: Dataset, path: str | Path) -> None:
    container.save(path, *dataset_tensors(ds))


def load_dataset(path: str | Path) -> Dataset:
    header, tensors = container.load(path)
    if header.get("kind") != "dataset":
        raise container.FormatError(f"{path} is not a dataset file")
    cfg = _config_from("data", header, DataConfig)
    coils = CoilMaps(to_complex(tensors["coils"]))
    splits = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        items = []
        for k in range(n):
            mask = SamplingMask(tensors[f"{split}.{k}.mask"] > 0.5)
            items.append(Item(
                to_complex(tensors[f"{split}.{k}.x_ref"]),
                to_complex(tensors[f"{split}.{k}.y"]),
                Encoder(coils, mask),
            ))
        splits[split] = items
    return Dataset(cfg, coils, splits["train"], splits["test"])


# -- model ---------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    prox: str = "resnet"
    blocks: int = 5
    channels: int = 32
    residual_scale: float = 0.1
    algorithm: str = "pgd"
    unrolls: int = 10
    cg_iters: int = 10

    def __post_init__(self) -> None:
        if self.prox not in ("resnet", "unet", "identity"):
            raise ContractError(f"unknown prox {self.prox!r}")
        self.unroll_config()
        self.prox_config()

    def unroll_config(self) -> UnrollConfig:
        return UnrollConfig(self.algorithm, self.unrolls, self.cg_iters)

    def prox_config(self):
        if self.prox == "resnet":
            return ResNetConfig(self.blocks, self.channels, self.residual_scale)
        if self.prox == "unet":
            return UNetConfig(self.channels)
        return None


def build_model(cfg: ModelConfig, seed: int = 0) -> UnrolledNet:
    """Fresh network; the prox weights depend only on ``seed`` and the prox config."""
    ucfg = cfg.unroll_config()
    prox = None
    if cfg.prox != "identity":
        prox = init_prox(cfg.prox, cfg.prox_config(), seed, zero_output=True)
    return UnrolledNet(ucfg, prox, UnrollParams.init(ucfg))


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError(f"invalid training config {self}")


@dataclass
class Checkpoint:
    model: ModelConfig
    train: TrainConfig
    tensors: dict[str, np.ndarray]
    adam: AdamState
    loss_history: list[float]

    def network(self) -> UnrolledNet:
        net = build_model(self.model)
        for name, p in net.named_parameters().items():
            p.data[...] = self.tensors[name]
        return net

    def to_container(self) -> tuple[dict[str, str], dict[str, np.ndarray]]:
        header = {
            "kind": "checkpoint",
            **_header_from("model", self.model),
            **_header_from("train", self.train),
            "adam.lr": repr(self.adam.lr),
            "adam.beta1": repr(self.adam.beta1),
            "adam.beta2": repr(self.adam.beta2),
            "adam.eps": repr(self.adam.eps),
        }
        tensors = dict(self.tensors)
        for name in self.tensors:
            tensors[f"adam.m/{name}"] = self.adam.m[name]
            tensors[f"adam.v/{name}"] = self.adam.v[name]
        tensors["adam.t"] = np.asarray(float(self.adam.t))
        tensors["train.loss_history"] = np.asarray(self.loss_history, dtype=np.float64)
        return header, tensors

    def save(self, path: str | Path) -> None:
        container.save(path, *self.to_container())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        header, tensors = container.load(path)
        if header.get("kind") != "checkpoint":
            raise container.FormatError(f"{path} is not a checkpoint file")
        model = _config_from("model", header, ModelConfig)
        train_cfg = _config_from("train", header, TrainConfig)
        names = list(build_model(model).named_parameters())
        adam = AdamState(
            lr=float(header["adam.lr"]), beta1=float(header["adam.beta1"]),
            beta2=float(header["adam.beta2"]), eps=float(header["adam.eps"]),
            t=int(tensors["adam.t"]),
            m={n: tensors[f"adam.m/{n}"] for n in names},
            v={n: tensors[f"adam.v/{n}"] for n in names},
        )
        return cls(model, train_cfg, {n: tensors[n] for n in names}, adam,
                   list(tensors["train.loss_history"]))


def loss_and_grads(net: UnrolledNet, item: Item,
                   params: dict[str, Tensor] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    params = params if params is not None else net.named_parameters()
    with ad.Graph() as g:
        out = net(item.y_tensor(), item.enc)
        loss = normalized_l1l2_loss(item.ref_tensor(), out)
    leaves = ad.backward(g, loss)
    grads = {n: g.gradient(p, leaves) for n, p in params.items()}
    g.release()
    return loss.item(), grads


def train(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Minimize the mean normalized l1-l2 loss over the training split with Adam.

    Shuffles once per epoch; the recorded epoch loss is the mean of the
    per-item losses seen during that epoch. The learning rate follows a
    cosine from ``train_cfg.lr`` at the first step towards zero at the last.
    """
    items = dataset.train
    if not items:
        raise ContractError("training set is empty")
    init_seed, shuffle_seed = np.random.SeedSequence(train_cfg.seed).generate_state(2)
    net = build_model(model_cfg, int(init_seed))
    params = net.named_parameters()
    state = AdamState.create(params, lr=train_cfg.lr)
    rng = np.random.default_rng(int(shuffle_seed))
    history: list[float] = []
    total_steps = train_cfg.epochs * math.ceil(len(items) / train_cfg.batch_size)
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            total = {n: np.zeros_like(p.data) for n, p in params.items()}
            for k in batch:
                try:
                    loss, grads = loss_and_grads(net, items[k], params)
                except NumericalError as exc:
                    raise NumericalError(f"epoch {epoch + 1}, item {k}: {exc}") from exc
                losses.append(loss)
                for n in total:
                    total[n] += grads[n]
            if len(batch) > 1:
                for n in total:
                    total[n] /= len(batch)
            lr = 0.5 * train_cfg.lr * (1.0 + math.cos(math.pi * state.t / total_steps))
            adam_step(params, total, state, lr)
        epoch_loss = float(np.mean(losses))
        if not np.isfinite(epoch_loss):
            raise NumericalError(f"epoch {epoch + 1}: training loss is {epoch_loss}")
        history.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch + 1, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_loss)
    tensors = {n: p.data.copy() for n, p in params.items()}
    return Checkpoint(model_cfg, train_cfg, tensors, state, history)


def reconstruct(net: UnrolledNet, item: Item) -> np.ndarray:
    """Network output for one item as a complex image (no graph is recorded)."""
    return to_complex(net(item.y_tensor(), item.enc).data)
