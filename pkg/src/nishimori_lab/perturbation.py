"""Gaussian and exponential side channels that perturb the posterior.

Binary spins use one Gaussian channel with strength lambda0 in [1/2, 1] and
exponential channels k = 1..K_max with lambda_k in [2^-k-1, 2^-k].  Soft spins
use Gaussian channels on the powers sigma^k and exponential channels indexed
by dyadic polynomials P_I.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

MODES = ("binary", "soft")
SOFT_MAX_DEGREE = 3
SOFT_COEFF_EXPONENTS = (1, 2, 3)  # a_p = 2^-e


class PerturbationError(ValueError):
    pass


@dataclass(frozen=True)
class Schedules:
    eps_N: float
    s_N: float
    c_eps: float = 1.0
    c_s: float = 1.0
    gamma_eps: float = 0.5
    gamma_s: float = 0.75

    def __post_init__(self) -> None:
        if not (self.eps_N > 0 and self.s_N > 0):
            raise PerturbationError("schedules must be positive")
        if self.eps_N > 1:
            raise PerturbationError("eps_N must not exceed 1")


def make_schedules(
    N: int,
    eps_exponent: float = 0.5,
    s_exponent: float = 0.75,
    eps_scale: float = 1.0,
    s_scale: float = 1.0,
) -> Schedules:
    """eps_N = c_eps N^-gamma_eps and s_N = c_s N^gamma_s."""
    if not 0 < eps_exponent < 1:
        raise PerturbationError("eps_exponent must lie in (0, 1)")
    if not 0.5 < s_exponent < 1:
        raise PerturbationError("s_exponent must lie in (1/2, 1)")
    if eps_scale <= 0 or s_scale <= 0:
        raise PerturbationError("schedule constants must be positive")
    return Schedules(
        eps_N=eps_scale * N ** (-eps_exponent),
        s_N=s_scale * N**s_exponent,
        c_eps=eps_scale,
        c_s=s_scale,
        gamma_eps=eps_exponent,
        gamma_s=s_exponent,
    )


@dataclass(frozen=True)
class PolynomialIndex:
    m: int
    coeffs: tuple[float, ...]
    iota: int

    def __post_init__(self) -> None:
        if self.m < 1 or len(self.coeffs) != self.m:
            raise PerturbationError("a polynomial index needs m >= 1 coefficients")
        for a in self.coeffs:
            e = -np.log2(a)
            if a <= 0 or e < 1 or e != round(e):
                raise PerturbationError("coefficients must be 2^-k with k >= 1")

    @property
    def scale(self) -> float:
        return 2.0 ** (-self.iota - self.m)

    @property
    def sup_bound(self) -> float:
        return self.m * self.scale


@functools.lru_cache(maxsize=None)
def multi_index_list(
    max_degree: int = SOFT_MAX_DEGREE, exponents: tuple[int, ...] = SOFT_COEFF_EXPONENTS
) -> tuple[PolynomialIndex, ...]:
    """All indices with m <= max_degree, ranked lexicographically by (m, k_0, ...)."""
    out = []
    for m in range(1, max_degree + 1):
        for ks in itertools.product(sorted(exponents), repeat=m):
            out.append(PolynomialIndex(m, tuple(2.0**-k for k in ks), len(out)))
    return tuple(out)


def polynomial_basis(index: PolynomialIndex):
    """Return x -> 2^(-iota-m) * sum_p a_p x^p."""
    coeffs = np.asarray(index.coeffs, dtype=float)
    scale = index.scale

    def P(x):
        x = np.asarray(x, dtype=float)
        return scale * np.polynomial.polynomial.polyval(x, coeffs)

    return P


@dataclass(frozen=True, eq=False)
class LambdaVector:
    mode: str
    K_max: int
    lambda0: np.ndarray  # scalar array (binary) or (K_max,) (soft)
    lambda_k: np.ndarray  # (K_max,) binary; empty for soft
    lambda_I: np.ndarray  # (n_indices,) soft; empty for binary

    @property
    def channel_lambdas(self) -> np.ndarray:
        return self.lambda_k if self.mode == "binary" else self.lambda_I

    @property
    def gauss_lambdas(self) -> np.ndarray:
        return np.atleast_1d(self.lambda0).astype(float)

    def with_lambda0(self, lambda0) -> "LambdaVector":
        return LambdaVector(self.mode, self.K_max, np.asarray(lambda0, dtype=float), self.lambda_k, self.lambda_I)

    def with_channels(self, lams) -> "LambdaVector":
        lams = np.asarray(lams, dtype=float)
        if self.mode == "binary":
            return LambdaVector(self.mode, self.K_max, self.lambda0, lams, self.lambda_I)
        return LambdaVector(self.mode, self.K_max, self.lambda0, self.lambda_k, lams)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "K_max": self.K_max,
            "lambda0": np.atleast_1d(self.lambda0).tolist(),
            "lambda_k": self.lambda_k.tolist(),
            "lambda_I": self.lambda_I.tolist(),
        }


def lambda_intervals(K_max: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper ends of every lambda component, in storage order.

    Order: Gaussian strengths, then exponential channel strengths.
    """
    k = np.arange(1, K_max + 1, dtype=float)
    dyadic_lo, dyadic_hi = 2.0 ** (-k - 1), 2.0**-k
    if mode == "binary":
        lo = np.concatenate([[0.5], dyadic_lo])
        hi = np.concatenate([[1.0], dyadic_hi])
    else:
        nI = len(multi_index_list())
        lo = np.concatenate([dyadic_lo, np.full(nI, 0.5)])
        hi = np.concatenate([dyadic_hi, np.full(nI, 1.0)])
    return lo, hi


def lambda_from_unit(u: np.ndarray, K_max: int, mode: str) -> LambdaVector:
    """Map a point of the unit cube onto the lambda box."""
    lo, hi = lambda_intervals(K_max, mode)
    v = lo + np.asarray(u, dtype=float) * (hi - lo)
    if mode == "binary":
        return LambdaVector(mode, K_max, np.asarray(v[0]), v[1:], np.zeros(0))
    return LambdaVector(mode, K_max, v[:K_max], np.zeros(0), v[K_max:])


def draw_lambda(K_max: int, mode: str, seed: int) -> LambdaVector:
    """Each component uniform on its dyadic interval."""
    if K_max < 1:
        raise PerturbationError("K_max must be at least 1")
    if mode not in MODES:
        raise PerturbationError(f"unknown perturbation mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A]))
    dim = len(lambda_intervals(K_max, mode)[0])
    return lambda_from_unit(rng.random(dim), K_max, mode)


def stratified_lambdas(K_max: int, mode: str, n: int, seed: int) -> list[LambdaVector]:
    """n Latin-hypercube draws: every coordinate hits each of n strata once."""
    if n < 1:
        raise PerturbationError("need at least one lambda draw")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1B]))
    dim = len(lambda_intervals(K_max, mode)[0])
    u = np.empty((n, dim))
    for j in range(dim):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return [lambda_from_unit(row, K_max, mode) for row in u]


@dataclass(frozen=True, eq=False)
class PerturbationRealization:
    """All side-channel randomness for one quenched draw.

    Exponential observations are stored flat: observation j belongs to
    channel ``obs_channel[j]`` and site ``obs_site[j]`` and has noise ``xi[j]``.
    """

    Z: np.ndarray
    pi: np.ndarray
    obs_site: np.ndarray
    obs_channel: np.ndarray
    xi: np.ndarray
    lam: LambdaVector
    schedules: Schedules
    seed: int = 0

    @property
    def mode(self) -> str:
        return self.lam.mode

    @property
    def site_indices(self) -> list[np.ndarray]:
        return [self.obs_site[self.obs_channel == c] for c in range(len(self.pi))]

    @property
    def amplitudes(self) -> np.ndarray:
        return np.sqrt(self.lam.gauss_lambdas * self.schedules.eps_N)


def channel_transform(mode: str, values: np.ndarray, channel: np.ndarray) -> np.ndarray:
    """u_c(x): x for binary channels, P_I(x) for soft channels (broadcasting)."""
    values = np.asarray(values, dtype=float)
    if mode == "binary":
        return values
    table, scales = _soft_tables()
    c = np.asarray(channel)
    x = values
    out = table[c, 0] + x * (table[c, 1] + x * table[c, 2])
    return scales[c] * out


@functools.lru_cache(maxsize=1)
def _soft_tables() -> tuple[np.ndarray, np.ndarray]:
    idx = multi_index_list()
    table = np.zeros((len(idx), SOFT_MAX_DEGREE))
    for r, I in enumerate(idx):
        table[r, : I.m] = I.coeffs
    scales = np.array([I.scale for I in idx])
    return table, scales


def n_exp_channels(mode: str, K_max: int) -> int:
    return K_max if mode == "binary" else len(multi_index_list())


def sample_perturbation(
    signal: np.ndarray, lam: LambdaVector, schedules: Schedules, seed: int
) -> PerturbationRealization:
    """Draw Z, Poisson counts, site indices and exponential noises."""
    signal = np.asarray(signal, dtype=float)
    N = signal.shape[0]
    ss = np.random.SeedSequence([int(seed), 0x9E])
    rz, rp, ri, rx = (np.random.default_rng(c) for c in ss.spawn(4))
    Kg = lam.gauss_lambdas.size
    Z = rz.standard_normal(N) if lam.mode == "binary" else rz.standard_normal((N, Kg))
    n_ch = n_exp_channels(lam.mode, lam.K_max)
    pi = rp.poisson(schedules.s_N, size=n_ch)
    obs_channel = np.repeat(np.arange(n_ch), pi)
    obs_site = ri.integers(0, N, size=obs_channel.size)
    xi = rx.exponential(1.0, size=obs_channel.size)
    rate = 1.0 + lam.channel_lambdas[obs_channel] * channel_transform(lam.mode, signal[obs_site], obs_channel)
    if np.any(rate <= 0):
        raise PerturbationError("exponential rate 1 + lambda u(sigma*) must be positive")
    return PerturbationRealization(Z, pi, obs_site, obs_channel, xi, lam, schedules, int(seed))


def gaussian_observations(real: PerturbationRealization, signal: np.ndarray) -> np.ndarray:
    """Y = sqrt(lambda0 eps_N) sigma*^k + Z, shape (N,) or (N, K)."""
    signal = np.asarray(signal, dtype=float)
    a = real.amplitudes
    if real.mode == "binary":
        return a[0] * signal + real.Z
    powers = signal[:, None] ** np.arange(1, a.size + 1)[None, :]
    return a[None, :] * powers + real.Z


def exponential_observations(real: PerturbationRealization, signal: np.ndarray) -> np.ndarray:
    """Y_j = xi_j / (1 + lambda_c u_c(sigma*_i))."""
    signal = np.asarray(signal, dtype=float)
    lam = real.lam.channel_lambdas[real.obs_channel]
    u = channel_transform(real.mode, signal[real.obs_site], real.obs_channel)
    return real.xi / (1.0 + lam * u)


def gaussian_hamiltonian(sigma, signal, Z, lambda0, eps_N) -> np.ndarray:
    """lambda eps sigma*.sigma + sqrt(lambda eps) Z.sigma - lambda eps |sigma|^2 / 2.

    A vector ``lambda0`` selects the soft form, summing the same expression
    over spin powers k = 1..K with ``Z`` of shape (N, K).
    """
    if eps_N < 0:
        raise PerturbationError("eps_N must be nonnegative")
    sigma = np.asarray(sigma, dtype=float)
    signal = np.asarray(signal, dtype=float)
    Z = np.asarray(Z, dtype=float)
    lam0 = np.asarray(lambda0, dtype=float)
    if lam0.ndim == 0:
        t = lam0 * eps_N
        return t * (sigma @ signal) + np.sqrt(t) * (sigma @ Z) - 0.5 * t * np.sum(sigma**2, axis=-1)
    out = 0.0
    for k in range(1, lam0.size + 1):
        t = lam0[k - 1] * eps_N
        sk = sigma**k
        out = out + t * (sk @ signal**k) + np.sqrt(t) * (sk @ Z[:, k - 1]) - 0.5 * t * np.sum(sk * sk, axis=-1)
    return out


def exponential_hamiltonian(sigma, signal, realization: PerturbationRealization) -> np.ndarray:
    """sum_j ln(1 + lam u(sigma_i)) - lam xi u(sigma_i) / (1 + lam u(sigma*_i))."""
    sigma = np.asarray(sigma, dtype=float)
    signal = np.asarray(signal, dtype=float)
    r = realization
    if r.xi.size == 0:
        return np.zeros(sigma.shape[:-1])
    lam = r.lam.channel_lambdas[r.obs_channel]
    u = channel_transform(r.mode, sigma[..., r.obs_site], r.obs_channel)
    u_star = channel_transform(r.mode, signal[r.obs_site], r.obs_channel)
    arg = 1.0 + lam * u
    if np.any(arg <= 0):
        raise PerturbationError("log argument 1 + lambda u(sigma) must be positive")
    return np.sum(np.log(arg) - lam * r.xi * u / (1.0 + lam * u_star), axis=-1)


def exponential_hamiltonian_bound(realization: PerturbationRealization) -> float:
    """sum_k pi_k (|ln(1 - lambda_k)| + 2 lambda_k xi_max) for binary channels."""
    r = realization
    if r.xi.size == 0:
        return 0.0
    lam = r.lam.channel_lambdas
    xmax = r.xi.max()
    return float(np.sum(r.pi * (np.abs(np.log(1 - lam)) + 2 * lam * xmax)))


# Forms in terms of observations rather than noises.  Used by the posterior
# engine, which only sees data.


def gaussian_hamiltonian_obs(sigma, y, amplitudes) -> np.ndarray:
    """sum_k a_k y_k.sigma^k - a_k^2 |sigma^k|^2 / 2, with y of shape (N,) or (N, K)."""
    sigma = np.asarray(sigma, dtype=float)
    a = np.atleast_1d(np.asarray(amplitudes, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    out = 0.0
    for k in range(a.size):
        sk = sigma ** (k + 1)
        out = out + a[k] * (sk @ y[:, k]) - 0.5 * a[k] ** 2 * np.sum(sk * sk, axis=-1)
    return out


def pair_hamiltonian_obs(values, mode, channel, lam, count, total) -> np.ndarray:
    """Exponential Hamiltonian of a group of observations sharing (site, channel).

    ``values`` are the spin values at the group's site, ``count`` the number of
    observations and ``total`` the sum of their values.  Broadcasts.
    """
    u = channel_transform(mode, values, channel)
    return count * np.log1p(lam * u) - lam * u * total
