"""Non-learned baselines: l1-wavelet regularized PGD and ADMM.

Both minimize ``||y - A x||^2 + lam * ||W x||_1`` with an orthonormal Haar
transform ``W`` whose coarsest approximation band is left unpenalized.
Images are complex ``H x W`` arrays throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .mri import Encoder, to_channels, to_complex
from .unroll import cg_solve, dc_gradient_step

_S = 1.0 / np.sqrt(2.0)


@dataclass
class WaveletCoeffs:
    """Haar subbands; ``details[k]`` holds (LH, HL, HH) of level k+1 (finest first)."""

    approx: np.ndarray
    details: list[tuple[np.ndarray, np.ndarray, np.ndarray]]

    @property
    def levels(self) -> int:
        return len(self.details)

    def flat(self) -> np.ndarray:
        parts = [self.approx.ravel()]
        for bands in self.details:
            parts.extend(b.ravel() for b in bands)
        return np.concatenate(parts)

    def detail_flat(self) -> np.ndarray:
        return np.concatenate([b.ravel() for bands in self.details for b in bands])


def _split(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    odd = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    return (even + odd) * _S, (even - odd) * _S


def _merge(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    shape = list(lo.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=np.result_type(lo, hi))
    idx = [slice(None)] * lo.ndim
    idx[axis] = slice(0, None, 2)
    out[tuple(idx)] = (lo + hi) * _S
    idx[axis] = slice(1, None, 2)
    out[tuple(idx)] = (lo - hi) * _S
    return out


def haar_dwt2(x: np.ndarray, levels: int) -> WaveletCoeffs:
    h, w = x.shape
    if levels < 1 or h % 2**levels or w % 2**levels:
        raise ContractError(f"{h}x{w} image is not divisible by 2^{levels}")
    details = []
    a = x
    for _ in range(levels):
        lo, hi = _split(a, 0)
        ll, lh = _split(lo, 1)
        hl, hh = _split(hi, 1)
        details.append((lh, hl, hh))
        a = ll
    return WaveletCoeffs(a, details)


def haar_idwt2(c: WaveletCoeffs) -> np.ndarray:
    a = c.approx
    for lh, hl, hh in reversed(c.details):
        lo = _merge(a, lh, 1)
        hi = _merge(hl, hh, 1)
        a = _merge(lo, hi, 0)
    return a


def _shrink(v: np.ndarray, lam: float) -> np.ndarray:
    mag = np.abs(v)
    scale = np.maximum(mag - lam, 0.0) / np.where(mag > 0, mag, 1.0)
    return v * scale


def soft_threshold(c: WaveletCoeffs, lam: float) -> WaveletCoeffs:
    """Complex soft-thresholding of the detail bands; the approximation passes through."""
    if lam < 0:
        raise ContractError("threshold must be >= 0")
    if lam == 0:
        return WaveletCoeffs(c.approx.copy(), [tuple(b.copy() for b in d) for d in c.details])
    return WaveletCoeffs(
        c.approx.copy(), [tuple(_shrink(b, lam) for b in d) for d in c.details]
    )


def wavelet_prox(x: np.ndarray, lam: float, levels: int) -> np.ndarray:
    return haar_idwt2(soft_threshold(haar_dwt2(x, levels), lam))


def l1w_objective(x: np.ndarray, enc: Encoder, y: np.ndarray, lam: float, levels: int) -> float:
    r = y - enc.forward(x)
    return float(np.vdot(r, r).real + lam * np.abs(haar_dwt2(x, levels).detail_flat()).sum())


def default_levels(shape: tuple[int, int], max_levels: int = 3) -> int:
    levels = 0
    h, w = shape
    while levels < max_levels and h % 2 == 0 and w % 2 == 0 and min(h, w) > 8:
        h, w, levels = h // 2, w // 2, levels + 1
    return max(levels, 1)


def l1w_pgd(y: np.ndarray, enc: Encoder, lam: float, mu: float = 1.0, iters: int = 100,
            levels: int | None = None, history: list[float] | None = None) -> np.ndarray:
    """Proximal gradient: wavelet shrinkage then a gradient data-consistency step.

    Starting from ``A^H y``; the gradient step ``z + mu A^H (y - A z)`` is the
    same one used in the unrolled networks.  The data term here carries no
    factor 1/2, so the matching threshold is ``lam * mu / 2``.
    """
    if not 0 < mu <= 1:
        raise ContractError("step size must lie in (0, 1]")
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    levels = levels or default_levels(enc.image_shape)
    yt = ad.Tensor(to_channels(y))
    aty = enc.adjoint_t(yt)
    x = to_complex(aty.data)
    for _ in range(iters):
        z = wavelet_prox(x, lam * mu / 2, levels)
        if history is not None:
            # the shrinkage outputs form the monotone ISTA sequence
            history.append(l1w_objective(z, enc, y, lam, levels))
        x = to_complex(dc_gradient_step(ad.Tensor(to_channels(z)), enc, yt, mu, aty=aty).data)
    return x


def l1w_admm(y: np.ndarray, enc: Encoder, lam: float, beta: float = 0.05, iters: int = 50,
             cg_iters: int = 10, levels: int | None = None,
             residuals: list[float] | None = None) -> np.ndarray:
    """Scaled-dual ADMM with a wavelet-shrinkage z-step and a CG x-step.

    Solves the same objective as :func:`l1w_pgd`; returns the data-consistent
    iterate ``x``.
    """
    if beta <= 0:
        raise ContractError("ADMM penalty beta must be positive")
    levels = levels or default_levels(enc.image_shape)
    aty = enc.adjoint(y)
    x = aty
    u = np.zeros_like(x)
    for _ in range(iters):
        z = wavelet_prox(x + u, lam / (2 * beta), levels)
        rhs = ad.Tensor(to_channels(aty + beta * (z - u)))
        x = to_complex(cg_solve(enc, beta, rhs, cg_iters).data)
        u = u + (x - z)
        if residuals is not None:
            residuals.append(float(np.linalg.norm(x - z)))
    return x


LAMBDA_GRID = tuple(float(v) for v in np.logspace(-4, -1, 7))


def reconstruct_classical(kind: str, item, lam: float, **kwargs) -> np.ndarray:
    if kind == "pgd":
        return l1w_pgd(item.y, item.enc, lam, **kwargs)
    if kind == "admm":
        return l1w_admm(item.y, item.enc, lam, **kwargs)
    raise ContractError(f"unknown classical method {kind!r}")


def tune_lambda(kind: str, items, grid=LAMBDA_GRID, **kwargs) -> tuple[float, float]:
    """Grid-search the threshold weight for best mean PSNR over ``items``.

    Returns ``(best_lambda, best_mean_psnr)``.
    """
    from .metrics import psnr

    best = (grid[0], -np.inf)
    for lam in grid:
        score = float(np.mean([
            psnr(it.x_ref, reconstruct_classical(kind, it, lam, **kwargs)) for it in items
        ]))
        if score > best[1]:
            best = (lam, score)
    return best
