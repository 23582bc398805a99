"""Epoch kernels, ensemble scale laws and the long-interval model families.

Every long-interval distribution is a scale mixture of an epoch kernel f:

    <p>(x) = int_0^inf g(u) u^(-1/2) f(x / sqrt(u)) du

with a mean-one scale density g, so all families keep unit variance. The
family code is the kernel letter followed by the ensemble letter (G or A):
GG, GA, AG, AA.

Kernels:
    Gaussian     standard normal
    Algebraic(l) c(l) (1 + x^2 / (2m))^(-l), m = l - 3/2, a unit-variance
                 Student t with 2l - 1 degrees of freedom

Scale laws:
    Gaussian(N)     chi^2_N / N, a Gamma(N/2, 2/N) law
    Algebraic(N, L) (2m'/N) * BetaPrime(N/2, L - N/2), m' = L - N/2 - 1
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
import pandas as pd
from scipy import integrate, linalg, special, stats

from .epochs import ReturnPanel
from .errors import ParameterError, QuadratureError, RankError
from .runtime import rng_for

QUAD_EPSREL = 1e-8
QUAD_LIMIT = 10_000
_LOG_2PI = math.log(2.0 * math.pi)
_EXP_MAX = 700.0
_TAIL_PROB = 1e-12


def _softplus(t: float) -> float:
    """log(1 + e^t) without overflow."""
    if t > 0:
        return t + math.log1p(math.exp(-t))
    return math.log1p(math.exp(t))


class KernelVariant(str, Enum):
    GAUSSIAN = "gaussian"
    ALGEBRAIC = "algebraic"


class EnsembleVariant(str, Enum):
    GAUSSIAN = "gaussian"
    ALGEBRAIC = "algebraic"


@dataclass(frozen=True)
class EpochKernel:
    variant: KernelVariant
    l: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", KernelVariant(self.variant))
        if self.variant is KernelVariant.ALGEBRAIC:
            if self.l is None or not math.isfinite(self.l) or self.l <= 1.5:
                raise ParameterError(f"algebraic kernel needs l > 3/2, got {self.l}")
            object.__setattr__(self, "l", float(self.l))
        elif self.l is not None:
            raise ParameterError("the Gaussian kernel takes no shape parameter")

    @classmethod
    def gaussian(cls) -> EpochKernel:
        return cls(KernelVariant.GAUSSIAN)

    @classmethod
    def algebraic(cls, l: float) -> EpochKernel:
        return cls(KernelVariant.ALGEBRAIC, l)

    @property
    def letter(self) -> str:
        return "G" if self.variant is KernelVariant.GAUSSIAN else "A"

    @property
    def dof(self) -> float:
        """Student-t degrees of freedom of the algebraic kernel."""
        return 2.0 * self.l - 1.0

    @cached_property
    def distribution(self) -> stats.rv_continuous:
        if self.variant is KernelVariant.GAUSSIAN:
            return stats.norm()
        nu = self.dof
        return stats.t(df=nu, scale=math.sqrt((nu - 2.0) / nu))

    @cached_property
    def _log_norm(self) -> float:
        if self.variant is KernelVariant.GAUSSIAN:
            return -0.5 * _LOG_2PI
        m = self.l - 1.5
        return float(special.gammaln(self.l) - special.gammaln(self.l - 0.5) - 0.5 * math.log(2.0 * math.pi * m))

    def pdf(self, x: np.ndarray | float) -> np.ndarray | float:
        return self.distribution.pdf(x)

    def cdf(self, x: np.ndarray | float) -> np.ndarray | float:
        return self.distribution.cdf(x)

    def log_density_sq(self, log_z2: float) -> float:
        """log f(z) given log(z^2); stays finite for z -> 0 and z -> inf."""
        if self.variant is KernelVariant.GAUSSIAN:
            if log_z2 > _EXP_MAX:
                return -math.inf
            return self._log_norm - 0.5 * math.exp(log_z2)
        return self._log_norm - self.l * _softplus(log_z2 - math.log(2.0 * (self.l - 1.5)))

    def sf_scalar(self, z: float) -> float:
        """Upper tail 1 - F(z), accurate far out."""
        if self.variant is KernelVariant.GAUSSIAN:
            return 0.5 * math.erfc(z / math.sqrt(2.0))
        nu = self.dof
        return float(special.stdtr(nu, -z / math.sqrt((nu - 2.0) / nu)))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.variant is KernelVariant.GAUSSIAN:
            return rng.standard_normal(n)
        nu = self.dof
        return rng.standard_t(nu, n) * math.sqrt((nu - 2.0) / nu)


@dataclass(frozen=True)
class EnsembleScaleLaw:
    variant: EnsembleVariant
    N: float
    L: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", EnsembleVariant(self.variant))
        if not math.isfinite(self.N) or self.N <= 0:
            raise ParameterError(f"ensemble needs N > 0, got {self.N}")
        object.__setattr__(self, "N", float(self.N))
        if self.variant is EnsembleVariant.ALGEBRAIC:
            if self.L is None or not math.isfinite(self.L) or self.L <= self.N / 2.0 + 1.0:
                raise ParameterError(f"algebraic ensemble needs L > N/2 + 1 = {self.N / 2 + 1:g}, got {self.L}")
            object.__setattr__(self, "L", float(self.L))
        elif self.L is not None:
            raise ParameterError("the Gaussian ensemble takes no L parameter")

    @classmethod
    def gaussian(cls, N: float) -> EnsembleScaleLaw:
        return cls(EnsembleVariant.GAUSSIAN, N)

    @classmethod
    def algebraic(cls, N: float, L: float) -> EnsembleScaleLaw:
        return cls(EnsembleVariant.ALGEBRAIC, N, L)

    @property
    def letter(self) -> str:
        return "G" if self.variant is EnsembleVariant.GAUSSIAN else "A"

    @property
    def m_prime(self) -> float:
        return self.L - self.N / 2.0 - 1.0

    @cached_property
    def distribution(self) -> stats.rv_continuous:
        half = self.N / 2.0
        if self.variant is EnsembleVariant.GAUSSIAN:
            return stats.gamma(a=half, scale=1.0 / half)
        return stats.betaprime(a=half, b=self.L - half, scale=2.0 * self.m_prime / self.N)

    @cached_property
    def _log_norm(self) -> float:
        half = self.N / 2.0
        if self.variant is EnsembleVariant.GAUSSIAN:
            return half * math.log(half) - float(special.gammaln(half))
        return half * math.log(self.N / (2.0 * self.m_prime)) - float(special.betaln(half, self.L - half))

    @cached_property
    def support(self) -> tuple[float, float]:
        """log-scale interval holding all but 1e-12 of the mass in each tail."""
        lo = float(self.distribution.ppf(_TAIL_PROB))
        hi = float(self.distribution.isf(_TAIL_PROB))
        return math.log(max(lo, 1e-300)), math.log(min(max(hi, 1e-300), 1e300))

    def pdf(self, u: np.ndarray | float) -> np.ndarray | float:
        return self.distribution.pdf(u)

    def log_density_log(self, s: float) -> float:
        """log g(e^s)."""
        half = self.N / 2.0
        if self.variant is EnsembleVariant.GAUSSIAN:
            if s > _EXP_MAX:
                return -math.inf
            return self._log_norm + (half - 1.0) * s - half * math.exp(s)
        shift = math.log(self.N / (2.0 * self.m_prime))
        return self._log_norm + (half - 1.0) * s - self.L * _softplus(s + shift)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.variant is EnsembleVariant.GAUSSIAN:
            return rng.chisquare(self.N, n) / self.N
        half = self.N / 2.0
        v = stats.betaprime.rvs(half, self.L - half, size=n, random_state=rng)
        return 2.0 * self.m_prime * v / self.N


@dataclass(frozen=True)
class ModelDistribution:
    kernel: EpochKernel
    ensemble: EnsembleScaleLaw | None = None

    @property
    def family(self) -> str:
        return self.kernel.letter + (self.ensemble.letter if self.ensemble else "")

    def parameters(self) -> dict[str, float]:
        params = {}
        if self.kernel.l is not None:
            params["l"] = self.kernel.l
        if self.ensemble is not None:
            params["N"] = self.ensemble.N
            if self.ensemble.L is not None:
                params["L"] = self.ensemble.L
        return params

    def pdf(self, x: np.ndarray | float) -> np.ndarray | float:
        if self.ensemble is None:
            return epoch_pdf(self.kernel, x)
        return interval_pdf(self, x)

    def cdf(self, x: np.ndarray | float) -> np.ndarray | float:
        if self.ensemble is None:
            return self.kernel.cdf(x)
        return _map_even(lambda v: _mixture_cdf(self, v), x, odd=True)

    def sample(self, n: int, seed: int | np.random.SeedSequence | None) -> np.ndarray:
        return sample_interval(self, n, seed)


def build_model(
    kernel: str = "gaussian",
    l: float | None = None,
    ensemble: str = "none",
    N: float | None = None,
    L: float | None = None,
) -> ModelDistribution:
    """Model from the config-style keys kernel/l/ensemble/N/L."""
    kern = EpochKernel.gaussian() if kernel == "gaussian" else EpochKernel.algebraic(l)
    if ensemble in ("none", None):
        return ModelDistribution(kern)
    if N is None:
        raise ParameterError(f"{ensemble} ensemble needs N")
    if ensemble == "gaussian":
        return ModelDistribution(kern, EnsembleScaleLaw.gaussian(N))
    if ensemble == "algebraic":
        return ModelDistribution(kern, EnsembleScaleLaw.algebraic(N, L))
    raise ParameterError(f"unknown ensemble {ensemble!r}")


def epoch_pdf(kernel: EpochKernel, x: np.ndarray | float) -> np.ndarray | float:
    return kernel.pdf(x)


def _map_even(fn, x, odd: bool = False):
    """Evaluate a scalar function of |x| once per distinct |x|."""
    arr = np.asarray(x, dtype=float)
    flat = np.abs(arr).ravel()
    unique, inverse = np.unique(flat, return_inverse=True)
    values = np.array([fn(v) for v in unique])[inverse].reshape(arr.shape)
    if odd:
        values = np.where(arr < 0, 1.0 - values, values)
    return float(values) if arr.ndim == 0 else values


def _gg_pdf(N: float, x: float) -> float:
    """Gaussian kernel mixed over chi^2_N / N: a Bessel-K (variance-gamma) density."""
    half = N / 2.0
    nu = (N - 1.0) / 2.0
    log_front = half * math.log(half) - float(special.gammaln(half)) - 0.5 * _LOG_2PI
    if x == 0.0:
        if N <= 1.0:
            return math.inf
        return math.exp(log_front + float(special.gammaln(nu)) - nu * math.log(half))
    z = math.sqrt(N) * x
    log_k = math.log(float(special.kve(nu, z))) - z
    return math.exp(math.log(2.0) + log_front + nu * math.log(x / math.sqrt(N)) + log_k)


def _quad(integrand, lo: float, hi: float, points: list[float] | None = None) -> tuple[float, float]:
    kwargs = {"epsabs": 0.0, "epsrel": QUAD_EPSREL, "limit": QUAD_LIMIT, "full_output": 1}
    if points:
        kwargs["points"] = points
    result = integrate.quad(integrand, lo, hi, **kwargs)
    value, abserr, info = result[0], result[1], result[2]
    if len(result) > 3 and abserr > 1e-6 * abs(value) + 1e-300:
        raise QuadratureError(
            f"quadrature on ({lo:g}, {hi:g}) did not converge: {result[3]} "
            f"(value {value:.6e}, error {abserr:.2e}, {info['neval']} evaluations)"
        )
    return value, abserr


def _integrate_log_scale(model: ModelDistribution, log_integrand, log_x2: float) -> float:
    """Integrate exp(log_integrand(s)) over s = ln u on the whole real line.

    The line is split at the bulk of the scale law and at the kernel's
    transition s = ln x^2 so each adaptive piece sees a simple shape.
    """
    lo, hi = model.ensemble.support
    if math.isfinite(log_x2):
        lo, hi = min(lo, log_x2 - 8.0), max(hi, log_x2 + 8.0)
    points = sorted({p for p in (0.0, log_x2) if math.isfinite(p) and lo < p < hi})

    def integrand(s: float) -> float:
        return math.exp(log_integrand(s))

    total = 0.0
    for a, b, pts in ((-math.inf, lo, None), (lo, hi, points), (hi, math.inf, None)):
        total += _quad(integrand, a, b, pts)[0]
    return total


def _mixture_pdf(model: ModelDistribution, x: float) -> float:
    kernel, ensemble = model.kernel, model.ensemble
    if x == 0.0 and ensemble.N <= 1.0:
        return math.inf
    log_x2 = 2.0 * math.log(x) if x > 0 else -math.inf

    def log_integrand(s: float) -> float:
        # g(u) u^(-1/2) f(x / sqrt(u)) du with du = u ds
        return ensemble.log_density_log(s) + 0.5 * s + kernel.log_density_sq(log_x2 - s)

    return _integrate_log_scale(model, log_integrand, log_x2)


def _mixture_cdf(model: ModelDistribution, x: float) -> float:
    kernel, ensemble = model.kernel, model.ensemble
    if x == 0.0:
        return 0.5
    log_x2 = 2.0 * math.log(x)

    def log_integrand(s: float) -> float:
        tail = kernel.sf_scalar(x * math.exp(-0.5 * s)) if s > -_EXP_MAX else 0.0
        if tail <= 0.0:
            return -math.inf
        return ensemble.log_density_log(s) + s + math.log(tail)

    # integrate the upper tail mass, which keeps relative accuracy far out
    return 1.0 - _integrate_log_scale(model, log_integrand, log_x2)


def interval_pdf(model: ModelDistribution, x: np.ndarray | float, method: str = "auto") -> np.ndarray | float:
    """Long-interval density by adaptive quadrature over the scale law.

    GG uses its Bessel-K closed form unless ``method="quad"``.
    """
    if model.ensemble is None:
        raise ParameterError("interval density needs an ensemble scale law")
    if method not in ("auto", "quad"):
        raise ParameterError(f"unknown method {method!r}")
    if model.family == "GG" and method == "auto":
        return _map_even(lambda v: _gg_pdf(model.ensemble.N, v), x)
    return _map_even(lambda v: _mixture_pdf(model, v), x)


def sample_interval(
    model: ModelDistribution,
    n: int,
    seed: int | np.random.SeedSequence | None,
) -> np.ndarray:
    """Draws sqrt(u) * eps with u from the scale law and eps from the kernel."""
    if n == 0:
        return np.empty(0)
    rng = np.random.default_rng(seed)
    scale = model.ensemble.sample(rng, n) if model.ensemble is not None else np.ones(n)
    return np.sqrt(scale) * model.kernel.sample(rng, n)


def equicorrelation(k: int, rho: float) -> np.ndarray:
    """K x K correlation matrix with constant off-diagonal rho (a one-factor market)."""
    if not -1.0 / max(k - 1, 1) < rho < 1.0:
        raise ParameterError(f"rho = {rho} does not give a positive definite {k} x {k} matrix")
    c = np.full((k, k), float(rho))
    np.fill_diagonal(c, 1.0)
    return c


def synthesize_panel(
    cbar: np.ndarray,
    kernel: EpochKernel,
    ensemble: EnsembleScaleLaw | None,
    epochs: int,
    t_ep: int,
    seed: int,
) -> ReturnPanel:
    """Synthetic non-stationary market: a fresh correlation matrix per epoch.

    Epoch matrices are Wishart-type draws C_ep = A A^T / N around ``cbar``
    (columns of A additionally scaled by sqrt(u) for the algebraic ensemble);
    returns inside an epoch follow the kernel with covariance C_ep, the
    algebraic kernel through a shared per-vector scale (multivariate t).
    """
    cbar = np.asarray(cbar, dtype=float)
    k = cbar.shape[0]
    try:
        root = linalg.cholesky(cbar, lower=True)
    except linalg.LinAlgError:
        raise ParameterError("average correlation matrix is not positive definite") from None
    if ensemble is not None:
        if ensemble.N != round(ensemble.N):
            raise ParameterError(f"matrix-level synthesis needs an integer N, got {ensemble.N}")
        if ensemble.variant is EnsembleVariant.GAUSSIAN and ensemble.N < k:
            raise RankError(f"N = {ensemble.N:g} < K = {k} gives rank-deficient epoch matrices")

    blocks = []
    for epoch in range(epochs):
        rng = rng_for(seed, "synthesize", epoch)
        if ensemble is None:
            epoch_root = root
        else:
            n = int(ensemble.N)
            a = root @ rng.standard_normal((k, n))
            if ensemble.variant is EnsembleVariant.ALGEBRAIC:
                a = a * np.sqrt(ensemble.sample(rng, n))[None, :]
            c_ep = a @ a.T / n
            try:
                epoch_root = linalg.cholesky(c_ep, lower=True)
            except linalg.LinAlgError:
                raise RankError(f"epoch {epoch} correlation matrix is singular (N = {n}, K = {k})") from None
        z = epoch_root @ rng.standard_normal((k, t_ep))
        if kernel.variant is KernelVariant.ALGEBRAIC:
            nu = kernel.dof
            w = rng.chisquare(nu, t_ep) / nu
            z = z * (math.sqrt((nu - 2.0) / nu) / np.sqrt(w))[None, :]
        blocks.append(z)

    return ReturnPanel(
        tickers=tuple(f"S{i:03d}" for i in range(k)),
        returns=np.hstack(blocks),
        dt=1.0,
        dt_unit="step",
        epoch_ranges=tuple((e * t_ep, (e + 1) * t_ep) for e in range(epochs)),
        slice_id="synthetic",
    )


def model_curve_frame(model: ModelDistribution, x: np.ndarray) -> pd.DataFrame:
    """``x,pdf`` table for overlay plots."""
    x = np.asarray(x, dtype=float)
    return pd.DataFrame({"x": x, "pdf": np.asarray(model.pdf(x), dtype=float)})
