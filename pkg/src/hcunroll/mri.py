"""Multi-coil Cartesian MRI encoding and synthetic acquisition.

Images are ``H x W`` complex arrays in numpy land and ``2 x H x W`` real
tensors (real, imaginary) inside networks.  k-space is centered: the DC
sample sits at ``(H // 2, W // 2)``.  Undersampling acts on phase-encode
columns only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError


def to_channels(z: np.ndarray) -> np.ndarray:
    """Complex ``(..., H, W)`` -> real ``(..., 2, H, W)``."""
    return np.stack([z.real, z.imag], axis=-3).astype(np.float64)


def to_complex(a: np.ndarray) -> np.ndarray:
    """Real ``(..., 2, H, W)`` -> complex ``(..., H, W)``."""
    if a.shape[-3] != 2:
        raise ShapeError(f"expected 2 channels on axis -3, got shape {a.shape}")
    out = np.empty(a.shape[:-3] + a.shape[-2:], dtype=np.complex128)
    out.real = a[..., 0, :, :]
    out.imag = a[..., 1, :, :]  # assigning parts keeps signed zeros intact
    return out


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D DFT over the last two axes."""
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes
    )


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c` (also its adjoint)."""
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes
    )


@dataclass(frozen=True)
class SamplingMask:
    """Which phase-encode columns are acquired; readout is fully sampled."""

    sampled: np.ndarray  # bool, shape (W,)

    def __post_init__(self) -> None:
        if self.sampled.ndim != 1 or not self.sampled.any():
            raise ContractError("mask must be 1-D with at least one sampled column")

    @property
    def width(self) -> int:
        return self.sampled.size

    @property
    def count(self) -> int:
        return int(self.sampled.sum())

    def grid(self, height: int) -> np.ndarray:
        return np.broadcast_to(self.sampled.astype(np.float64), (height, self.width))

    def apply(self, k: np.ndarray) -> np.ndarray:
        return k * self.sampled


def _central_columns(width: int, center: int) -> np.ndarray:
    start = width // 2 - center // 2
    return np.arange(start, start + center)


def make_uniform_mask(width: int, accel: int, center: int) -> SamplingMask:
    """Every ``accel``-th column plus a fully sampled central block."""
    if accel < 1:
        raise ContractError("acceleration must be >= 1")
    if not 0 <= center <= width:
        raise ContractError(f"center lines {center} outside [0, {width}]")
    sampled = np.zeros(width, dtype=bool)
    sampled[::accel] = True
    sampled[_central_columns(width, center)] = True
    return SamplingMask(sampled)


def make_random_mask(width: int, accel: int, center: int, seed: int) -> SamplingMask:
    """Central block plus uniformly drawn columns, ``round(width / accel)`` in total."""
    if accel < 1:
        raise ContractError("acceleration must be >= 1")
    if not 0 <= center <= width:
        raise ContractError(f"center lines {center} outside [0, {width}]")
    total = int(round(width / accel))
    if total < center:
        raise ContractError(f"width/R = {width / accel:g} is below the {center} center lines")
    sampled = np.zeros(width, dtype=bool)
    sampled[_central_columns(width, center)] = True
    rest = np.flatnonzero(~sampled)
    rng = np.random.default_rng(seed)
    sampled[rng.choice(rest, size=total - center, replace=False)] = True
    return SamplingMask(sampled)


@dataclass(frozen=True)
class CoilMaps:
    maps: np.ndarray  # complex, (n_coils, H, W)

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]


def make_coil_maps(n_coils: int, height: int, width: int) -> CoilMaps:
    """Smooth Gaussian sensitivities around the border, SENSE-1 normalized."""
    if n_coils < 1:
        raise ContractError("need at least one coil")
    yy, xx = np.meshgrid(
        np.linspace(-1.0, 1.0, height), np.linspace(-1.0, 1.0, width), indexing="ij"
    )
    maps = np.empty((n_coils, height, width), dtype=np.complex128)
    for c in range(n_coils):
        theta = 2 * np.pi * c / n_coils
        cy, cx = np.sin(theta), np.cos(theta)
        profile = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.8**2))
        phase = 0.5 * np.pi * (np.cos(theta + 1.0) * yy + np.sin(theta + 1.0) * xx)
        maps[c] = profile * np.exp(1j * phase)
    maps /= np.sqrt((np.abs(maps) ** 2).sum(axis=0))
    return CoilMaps(maps)


@dataclass(frozen=True)
class Encoder:
    """The SENSE forward operator ``y_c = M * F(S_c * x)``."""

    coils: CoilMaps
    mask: SamplingMask

    def __post_init__(self) -> None:
        if self.coils.maps.shape[2] != self.mask.width:
            raise ShapeError(
                f"coil maps width {self.coils.maps.shape[2]} != mask width {self.mask.width}"
            )

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.coils.maps.shape[1:]

    @property
    def n_coils(self) -> int:
        return self.coils.n_coils

    def _check_image(self, x: np.ndarray) -> None:
        if x.shape != self.image_shape:
            raise ShapeError(f"image shape {x.shape} != encoder shape {self.image_shape}")

    def _check_kspace(self, y: np.ndarray) -> None:
        if y.shape != (self.n_coils, *self.image_shape):
            raise ShapeError(
                f"k-space shape {y.shape} != {(self.n_coils, *self.image_shape)}"
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_image(x)
        return self.mask.apply(fft2c(self.coils.maps * x))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        self._check_kspace(y)
        return (np.conj(self.coils.maps) * ifft2c(self.mask.apply(y))).sum(axis=0)

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))

    # Tensor versions on the 2-channel layout; backward uses the adjoint.

    def forward_t(self, x: ad.Tensor) -> ad.Tensor:
        return ad.linear(
            x,
            lambda a: to_channels(self.forward(to_complex(a))),
            lambda g: to_channels(self.adjoint(to_complex(g))),
            op="encode",
        )

    def adjoint_t(self, y: ad.Tensor) -> ad.Tensor:
        return ad.linear(
            y,
            lambda a: to_channels(self.adjoint(to_complex(a))),
            lambda g: to_channels(self.forward(to_complex(g))),
            op="encode_adjoint",
        )

    def normal_t(self, x: ad.Tensor) -> ad.Tensor:
        def op(a):
            return to_channels(self.normal(to_complex(a)))

        return ad.linear(x, op, op, op="encode_normal")


def make_phantom(height: int, width: int, seed: int) -> np.ndarray:
    """Random ellipse phantom with magnitude in [0, 1] and a smooth phase."""
    if height < 16 or width < 16:
        raise ContractError("phantom needs H, W >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.linspace(-1.0, 1.0, height), np.linspace(-1.0, 1.0, width), indexing="ij"
    )
    n = int(rng.integers(8, 16))
    mag = np.zeros((height, width))
    for k in range(n):
        if k == 0:
            # a large body ellipse keeps the content non-degenerate
            cy, cx = rng.uniform(-0.1, 0.1, size=2)
            ay, ax = rng.uniform(0.6, 0.9, size=2)
        else:
            cy, cx = rng.uniform(-0.6, 0.6, size=2)
            ay, ax = rng.uniform(0.08, 0.45, size=2)
        rot = rng.uniform(0, np.pi)
        amp = rng.uniform(0.1, 1.0)
        u = (yy - cy) * np.cos(rot) + (xx - cx) * np.sin(rot)
        v = -(yy - cy) * np.sin(rot) + (xx - cx) * np.cos(rot)
        mag += amp * ((u / ay) ** 2 + (v / ax) ** 2 <= 1.0)
    mag = np.clip(mag, 0.0, 1.0)
    c = rng.uniform(-1.0, 1.0, size=6) * (np.pi / 4)
    phase = c[0] + c[1] * yy + c[2] * xx + c[3] * yy**2 + c[4] * yy * xx + c[5] * xx**2
    return mag * np.exp(1j * phase)


def simulate_acquisition(x: np.ndarray, enc: Encoder, sigma: float, seed: int) -> np.ndarray:
    """``A x + n`` with complex Gaussian noise of total std ``sigma`` on sampled entries."""
    if sigma < 0:
        raise ContractError("noise sigma must be >= 0")
    y = enc.forward(x)
    if sigma == 0:
        return y
    rng = np.random.default_rng(seed)
    shape = y.shape
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * (sigma / np.sqrt(2))
    return y + enc.mask.apply(noise)
