"""Image quality metrics, the Wilcoxon signed-rank test and the evaluation harness.

PSNR and SSIM are computed on magnitude images over the full field of view.
"""

from __future__ import annotations

import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

PERFECT = "perfect"


def _magnitudes(ref: np.ndarray, rec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if ref.shape != rec.shape:
        raise ShapeError(f"reference {ref.shape} vs reconstruction {rec.shape}")
    return np.abs(ref).astype(np.float64), np.abs(rec).astype(np.float64)


def psnr(ref: np.ndarray, rec: np.ndarray) -> float:
    """``20 log10(max|ref| / RMSE)``; identical magnitudes give ``inf``."""
    a, b = _magnitudes(ref, rec)
    peak = a.max()
    if peak == 0:
        raise ContractError("reference image is zero")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def ssim(ref: np.ndarray, rec: np.ndarray, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         data_range: float | None = None) -> float:
    """Mean SSIM over all fully contained ``window x window`` uniform windows."""
    a, b = _magnitudes(ref, rec)
    if min(a.shape) < window:
        raise ContractError(f"image {a.shape} smaller than the {window}x{window} window")
    L = float(a.max()) if data_range is None else float(data_range)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2

    def local_mean(img):
        return sliding_window_view(img, (window, window)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- statistics ----------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_upper_tail(ranks: np.ndarray, w_plus: float) -> tuple[float, float]:
    """P(W+ <= w) and P(W+ >= w) under random signs, by DP on doubled ranks."""
    doubled = np.rint(2 * ranks).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    probs = counts / counts.sum()
    w2 = int(round(2 * w_plus))
    return float(probs[:w2 + 1].sum()), float(probs[w2:].sum())


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired test; returns ``(min(W+, W-), p)``.

    Zero differences are dropped, ties get mid-ranks.  Exact null
    distribution below 10 non-zero pairs, otherwise the normal approximation
    with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("wilcoxon needs two 1-D samples of equal length")
    if len(a) < 6:
        raise ContractError("wilcoxon needs at least 6 pairs")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n < 10:
        lower, upper = _exact_upper_tail(ranks, w_plus)
        return stat, min(1.0, 2.0 * min(lower, upper))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return stat, min(1.0, math.erfc(z / math.sqrt(2)))


# -- evaluation ----------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    item: int
    method: str
    psnr: float
    ssim: float

    def csv(self) -> str:
        p = PERFECT if math.isinf(self.psnr) else f"{self.psnr:.6f}"
        return f"{self.item},{self.method},{p},{self.ssim:.6f}"


CSV_HEADER = "item,method,psnr_db,ssim"


def rows_to_csv(rows: Sequence[MetricsRow]) -> str:
    return "\n".join([CSV_HEADER, *(r.csv() for r in rows)]) + "\n"


def _describe(values: list[float]) -> dict[str, float]:
    v = np.asarray(values)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"mean": float(v.mean()), "median": float(med), "q1": float(q1), "q3": float(q3)}


def summarize(rows: Sequence[MetricsRow]) -> dict[str, dict[str, float]]:
    """Per-method mean/median/IQR; infinite PSNR values are counted, not averaged."""
    out: dict[str, dict[str, float]] = {}
    for method in dict.fromkeys(r.method for r in rows):
        mine = [r for r in rows if r.method == method]
        finite = [r.psnr for r in mine if not math.isinf(r.psnr)]
        stats = {"n": float(len(mine)), "psnr_perfect": float(len(mine) - len(finite))}
        if finite:
            stats.update({f"psnr_{k}": v for k, v in _describe(finite).items()})
        stats.update({f"ssim_{k}": v for k, v in _describe([r.ssim for r in mine]).items()})
        out[method] = stats
    return out


def summary_text(summary: dict[str, dict[str, float]]) -> str:
    lines = []
    for method, stats in summary.items():
        for key, value in stats.items():
            lines.append(f"{method}.{key}={value:.6f}")
    return "\n".join(lines) + "\n"


def worker_count() -> int:
    env = os.environ.get("THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def score_methods(items: Sequence, methods: dict[str, Callable]) -> list[MetricsRow]:
    """Rows for every (item, method); methods map an item to a complex image.

    Items are processed in parallel (``THREADS`` caps the pool) but rows come
    back in item-major, method-minor order regardless.
    """
    def one(k: int) -> list[MetricsRow]:
        it = items[k]
        rows = []
        for name, fn in methods.items():
            rec = fn(it)
            rows.append(MetricsRow(k, name, psnr(it.x_ref, rec), ssim(it.x_ref, rec)))
        return rows

    workers = min(worker_count(), len(items))
    if workers <= 1:
        chunks = [one(k) for k in range(len(items))]
    else:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(one, range(len(items))))
    return [r for chunk in chunks for r in chunk]


def evaluate(net, items: Sequence, name: str = "network") -> tuple[list[MetricsRow], dict]:
    """Reconstruct every item with ``net`` and score it next to zero-filled."""
    from .training import reconstruct

    h, w = items[0].x_ref.shape
    for it in items:
        if it.x_ref.shape != (h, w):
            raise ShapeError("test items have differing image shapes")
    rows = score_methods(items, {
        "zero_filled": lambda it: it.zero_filled(),
        name: lambda it: reconstruct(net, it),
    })
    return rows, summarize(rows)


def pairwise_wilcoxon(rows: Sequence[MetricsRow], metric: str = "psnr") -> list[tuple[str, str, float, float]]:
    """(method_a, method_b, statistic, p) for every unordered pair of methods."""
    methods = list(dict.fromkeys(r.method for r in rows))
    by_method = {m: {r.item: getattr(r, metric) for r in rows if r.method == m} for m in methods}
    out = []
    for i, j in product(range(len(methods)), repeat=2):
        if i >= j:
            continue
        ma, mb = methods[i], methods[j]
        common = sorted(set(by_method[ma]) & set(by_method[mb]))
        xa = [by_method[ma][k] for k in common]
        xb = [by_method[mb][k] for k in common]
        # perfect scores compare equal to each other and above everything else
        xa = [1e300 if math.isinf(v) else v for v in xa]
        xb = [1e300 if math.isinf(v) else v for v in xb]
        stat, p = wilcoxon_signed_rank(xa, xb)
        out.append((ma, mb, stat, p))
    return out
