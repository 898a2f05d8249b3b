"""Unrolled reconstruction networks: PGD, VSQP and ADMM, plain and history-cognizant.

Every variant starts from the zero-filled image ``x0 = A^H y`` and runs T
iterations of proximal step -> (history combination) -> data consistency.
History-cognizant (HC) variants feed the data-consistency unit a learned 1x1
combination of all proximal outputs so far instead of only the newest.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .mri import Encoder
from .nets import (
    IO_CHANNELS,
    ProxParams,
    combine_history,
    count_combiner_params,
    count_prox_params,
    init_combiner,
)


class Algorithm(str, enum.Enum):
    PGD = "pgd"
    HC_PGD = "hc_pgd"
    NESTEROV_PGD = "nesterov_pgd"
    VSQP = "vsqp"
    HC_VSQP = "hc_vsqp"
    ADMM = "admm"
    HC_ADMM = "hc_admm"

    @property
    def history_cognizant(self) -> bool:
        return self.value.startswith("hc_")

    @property
    def uses_cg(self) -> bool:
        return self in (Algorithm.VSQP, Algorithm.HC_VSQP, Algorithm.ADMM, Algorithm.HC_ADMM)

    @property
    def is_admm(self) -> bool:
        return self in (Algorithm.ADMM, Algorithm.HC_ADMM)


@dataclass(frozen=True)
class UnrollConfig:
    algorithm: Algorithm = Algorithm.PGD
    T: int = 10
    cg_iters: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.T < 1:
            raise ContractError("need at least one unrolled iteration")
        if self.algorithm.uses_cg and self.cg_iters < 1:
            raise ContractError("CG-based variants need cg_iters >= 1")


MU_INIT = 1.0
BETA_INIT = 0.05
ETA_INIT = 1.0
ALPHA_INIT = 0.0


@dataclass
class UnrollParams:
    """Trainable scalars of the unrolled algorithm.

    Step sizes, penalty and dual rate are stored raw and passed through
    softplus; a raw value of ``-inf`` pins the effective value at zero.
    """

    mu_raw: list[Tensor]
    beta_raw: Tensor | None = None
    eta_raw: Tensor | None = None
    alpha: Tensor | None = None
    combiner: list[Tensor] | None = None

    @classmethod
    def init(cls, cfg: UnrollConfig, *, mu=MU_INIT, beta=BETA_INIT, eta=ETA_INIT,
             alpha=ALPHA_INIT) -> UnrollParams:
        alg = cfg.algorithm

        def raw(v):
            return Tensor(ad.inverse_softplus(v), requires_grad=True)

        n_mu = 0 if alg.uses_cg else cfg.T
        mus = list(mu) if np.ndim(mu) else [mu] * n_mu
        if len(mus) != n_mu:
            raise ContractError(f"expected {n_mu} step sizes, got {len(mus)}")
        return cls(
            mu_raw=[raw(m) for m in mus],
            beta_raw=raw(beta) if alg.uses_cg else None,
            eta_raw=raw(eta) if alg.is_admm else None,
            alpha=Tensor(alpha, requires_grad=True) if alg is Algorithm.NESTEROV_PGD else None,
            combiner=init_combiner(cfg.T) if alg.history_cognizant else None,
        )

    def mu(self, i: int) -> Tensor:
        return ad.softplus(self.mu_raw[i - 1])

    def beta(self) -> Tensor:
        return ad.softplus(self.beta_raw)

    def eta(self) -> Tensor:
        return ad.softplus(self.eta_raw)

    def named(self) -> dict[str, Tensor]:
        out = {f"unroll.mu.{i}": t for i, t in enumerate(self.mu_raw)}
        if self.beta_raw is not None:
            out["unroll.beta"] = self.beta_raw
        if self.eta_raw is not None:
            out["unroll.eta"] = self.eta_raw
        if self.alpha is not None:
            out["unroll.alpha"] = self.alpha
        if self.combiner is not None:
            out.update({f"unroll.combiner.{i}": t for i, t in enumerate(self.combiner)})
        return out


# -- data consistency ----------------------------------------------------------


def dc_gradient_step(z: Tensor, enc: Encoder, y: Tensor, mu, aty: Tensor | None = None) -> Tensor:
    """``z + mu * A^H (y - A z)``; ``aty`` may carry a precomputed ``A^H y``."""
    if aty is None:
        aty = enc.adjoint_t(y)
    return z + mu * (aty - enc.normal_t(z))


def _value(t) -> float:
    return t.item() if isinstance(t, Tensor) else float(t)


def cg_solve(enc: Encoder, beta, rhs: Tensor, iters: int) -> Tensor:
    """Approximately solve ``(A^H A + beta I) x = rhs`` by CG from ``x = 0``.

    All iterations are recorded, so the result is differentiable in ``rhs``
    and ``beta``.  Stops early only if the residual becomes exactly zero.
    """
    if _value(beta) <= 0:
        raise ContractError("CG penalty beta must be positive")
    if iters < 1:
        raise ContractError("CG needs at least one iteration")
    x = Tensor(np.zeros(rhs.shape))
    r = rhs
    p = r
    rs = ad.vdot(r, r)
    for _ in range(iters):
        if rs.item() == 0.0:
            break
        ap = enc.normal_t(p) + beta * p
        alpha = rs / ad.vdot(p, ap)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = ad.vdot(r, r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def vsqp_dc(z: Tensor, enc: Encoder, y: Tensor, beta, iters: int,
            aty: Tensor | None = None) -> Tensor:
    """Minimizer of ``||y - A x||^2 + beta ||x - z||^2`` via CG."""
    if aty is None:
        aty = enc.adjoint_t(y)
    return cg_solve(enc, beta, aty + beta * z, iters)


@dataclass
class AlgorithmState:
    x: Tensor
    prox_history: list[Tensor] = field(default_factory=list)
    u: Tensor | None = None
    v: Tensor | None = None


def admm_iterate(state: AlgorithmState, enc: Encoder, y: Tensor, prox, params: UnrollParams,
                 cg_iters: int, aty: Tensor | None = None) -> AlgorithmState:
    """One scaled-dual ADMM iteration; uses the combiner when ``params`` has one."""
    if aty is None:
        aty = enc.adjoint_t(y)
    u = state.u if state.u is not None else Tensor(np.zeros(state.x.shape))
    z = prox(state.x + u)
    history = [*state.prox_history, z]
    i = len(history)
    v = combine_history(history, params.combiner, i) if params.combiner is not None else z
    beta = params.beta()
    x = cg_solve(enc, beta, aty + beta * (v - u), cg_iters)
    u = u + params.eta() * (x - v)
    return AlgorithmState(x=x, prox_history=history, u=u, v=v)


# -- the unrolled network ------------------------------------------------------


def _identity(x: Tensor) -> Tensor:
    return x


def _check_params(cfg: UnrollConfig, params: UnrollParams) -> None:
    alg = cfg.algorithm
    problems = []
    n_mu = 0 if alg.uses_cg else cfg.T
    if len(params.mu_raw) != n_mu:
        problems.append(f"{len(params.mu_raw)} step sizes, expected {n_mu}")
    if alg.history_cognizant != (params.combiner is not None):
        problems.append("combiner presence does not match algorithm")
    if params.combiner is not None and len(params.combiner) != cfg.T:
        problems.append(f"{len(params.combiner)} combiner kernels for T={cfg.T}")
    if (alg is Algorithm.NESTEROV_PGD) != (params.alpha is not None):
        problems.append("alpha presence does not match algorithm")
    if alg.uses_cg and params.beta_raw is None:
        problems.append("missing beta")
    if alg.is_admm and params.eta_raw is None:
        problems.append("missing eta")
    if problems:
        raise ContractError(f"{alg.value}: " + "; ".join(problems))


def unroll(y: Tensor, enc: Encoder, prox, params: UnrollParams, cfg: UnrollConfig) -> Tensor:
    """Run ``cfg.T`` unrolled iterations and return ``x(T)``.

    ``y`` is the 2-channel k-space tensor (n_coils x 2 x H x W); ``prox`` is a
    :class:`ProxParams` (or any callable, ``None`` meaning identity).
    """
    _check_params(cfg, params)
    prox = _identity if prox is None else prox
    alg = cfg.algorithm
    aty = enc.adjoint_t(y)
    x = aty
    if alg.is_admm:
        state = AlgorithmState(x=x)
        for _ in range(cfg.T):
            state = admm_iterate(state, enc, y, prox, params, cfg.cg_iters, aty=aty)
        return state.x

    history: list[Tensor] = []
    for i in range(1, cfg.T + 1):
        z = prox(x)
        history.append(z)
        if alg.history_cognizant:
            v = combine_history(history, params.combiner, i)
        elif alg is Algorithm.NESTEROV_PGD and i > 1:
            v = z + params.alpha * (z - history[-2])
        else:
            v = z
        if alg.uses_cg:
            x = vsqp_dc(v, enc, y, params.beta(), cfg.cg_iters, aty=aty)
        else:
            x = dc_gradient_step(v, enc, y, params.mu(i), aty=aty)
    return x


@dataclass
class UnrolledNet:
    """An unroll configuration together with its proximal network and scalars."""

    cfg: UnrollConfig
    prox: ProxParams | None
    params: UnrollParams

    def __call__(self, y: Tensor, enc: Encoder) -> Tensor:
        return unroll(y, enc, self.prox, self.params, self.cfg)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.prox.weights) if self.prox is not None else {}
        out.update(self.params.named())
        return out


def count_params(cfg: UnrollConfig, prox_kind: str = "resnet", prox_config=None) -> int:
    """Trainable scalars: shared prox weights, step sizes and algorithm extras.

    Gradient-step variants learn one step size per iteration; CG variants
    learn the penalty instead.
    """
    alg = cfg.algorithm
    n = 1 if alg.uses_cg else cfg.T
    if prox_config is not None:
        n += count_prox_params(prox_kind, prox_config)
    if alg.is_admm:
        n += 1
    if alg is Algorithm.NESTEROV_PGD:
        n += 1
    if alg.history_cognizant:
        n += count_combiner_params(cfg.T, IO_CHANNELS)
    return n
