"""Priors, output channels and planted-instance generation.

A planted instance is a signal drawn from a factorized prior together with
data produced by one of the output channels conditionally on that signal.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np

PRIOR_KINDS = ("rademacher", "field_rademacher", "grid_soft")
CHANNEL_KINDS = ("spiked_tensor", "glm_gaussian", "perceptron_sign", "null")

# Stand-in for ln 0 in the sign channel: exp() of it underflows to exactly 0
# without producing NaN in differences of log-weights.
SIGN_MISMATCH_LOGLIK = -1e30


class ModelError(ValueError):
    """Raised for invalid priors, channels or inconsistent shapes."""


@dataclass(frozen=True)
class Prior:
    """Factorized prior over N spins in [-1, 1].

    ``theta_star`` holds the per-site external field of ``field_rademacher``;
    an infinite field is a point mass on +1 (or -1).  ``grid_points`` and
    ``grid_weights`` describe ``grid_soft``.
    """

    kind: str
    N: int
    theta_star: tuple[float, ...] = ()
    grid_points: tuple[float, ...] = ()
    grid_weights: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in PRIOR_KINDS:
            raise ModelError(f"unknown prior kind {self.kind!r}")
        if int(self.N) < 1:
            raise ModelError("N must be a positive integer")
        if self.kind == "field_rademacher":
            th = np.asarray(self.theta_star, dtype=float)
            if th.shape != (self.N,):
                raise ModelError("theta_star must have one entry per site")
            if np.any(np.isnan(th)):
                raise ModelError("theta_star contains NaN")
            if np.any(th != th[0]):
                raise ModelError("per-site fields must be identical (exchangeable prior)")
        if self.kind == "grid_soft":
            pts = np.asarray(self.grid_points, dtype=float)
            w = np.asarray(self.grid_weights, dtype=float)
            if pts.size == 0:
                raise ModelError("grid_soft prior has empty support")
            if pts.shape != w.shape:
                raise ModelError("grid_points and grid_weights differ in length")
            if np.any(w < 0):
                raise ModelError("negative prior weight")
            if np.any(np.diff(pts) <= 0):
                raise ModelError("grid_points must be strictly increasing")
            if np.any(np.abs(pts) > 1):
                raise ModelError("grid_points must lie in [-1, 1]")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ModelError("grid_weights must sum to 1")

    @property
    def support(self) -> np.ndarray:
        if self.kind == "grid_soft":
            return np.asarray(self.grid_points, dtype=float)
        return np.array([-1.0, 1.0])

    @property
    def is_binary(self) -> bool:
        return self.kind != "grid_soft"

    def site_log_weights(self) -> np.ndarray:
        """Log prior weight of each support point, shape (N, V)."""
        if self.kind == "rademacher":
            return np.full((self.N, 2), np.log(0.5))
        if self.kind == "field_rademacher":
            th = np.asarray(self.theta_star, dtype=float)[:, None]
            s = self.support[None, :]
            with np.errstate(invalid="ignore"):
                out = th * s - np.logaddexp(th, -th)
            # infinite fields: all mass on the sign of the field
            inf = np.isinf(th[:, 0])
            if np.any(inf):
                sgn = np.sign(th[inf, 0])[:, None]
                out[inf] = np.where(s == sgn, 0.0, -np.inf)
            return out
        with np.errstate(divide="ignore"):
            lw = np.log(np.asarray(self.grid_weights, dtype=float))
        return np.tile(lw, (self.N, 1))

    def log_prob(self, sigma: np.ndarray) -> np.ndarray:
        """Log prior probability of configurations ``sigma`` of shape (..., N)."""
        sigma = np.asarray(sigma, dtype=float)
        idx = support_index(self.support, sigma)
        lw = self.site_log_weights()
        return np.take_along_axis(
            np.broadcast_to(lw, idx.shape[:-1] + lw.shape), idx[..., None], axis=-1
        )[..., 0].sum(axis=-1)

    def site_variance(self) -> float:
        s = self.support
        p = np.exp(self.site_log_weights()[0])
        m = float(p @ s)
        return float(p @ s**2 - m * m)


def support_index(support: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Map spin values onto indices of ``support``; raises if a value is off-support."""
    idx = np.searchsorted(support, sigma)
    idx = np.clip(idx, 0, len(support) - 1)
    if not np.all(np.isclose(support[idx], sigma, rtol=0, atol=1e-12)):
        raise ModelError("spin value outside the prior support")
    return idx


@dataclass(frozen=True)
class ChannelSpec:
    kind: str
    p: int = 2
    snr: float = 1.0
    M: int = 0
    design_seed: int = 0
    # explicit design rows; overrides the seeded Gaussian design when given
    design: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in CHANNEL_KINDS:
            raise ModelError(f"unknown channel kind {self.kind!r}")
        if self.kind == "spiked_tensor" and int(self.p) < 2:
            raise ModelError("tensor order p must be at least 2")
        if int(self.M) < 0:
            raise ModelError("number of observations M must be nonnegative")
        if not self.snr >= 0:
            raise ModelError("snr must be nonnegative")

    def n_observations(self, N: int) -> int:
        if self.kind == "spiked_tensor":
            return len(tensor_entries(N, self.p))
        if self.kind in ("glm_gaussian", "perceptron_sign"):
            return int(self.M)
        return 0

    @property
    def is_gaussian(self) -> bool:
        return self.kind in ("spiked_tensor", "glm_gaussian")

    def design_for(self, N: int) -> np.ndarray:
        if self.design is not None:
            a = np.asarray(self.design, dtype=float)
            if a.shape != (self.M, N):
                raise ModelError("explicit design must have shape (M, N)")
            return a
        return design_matrix(int(self.M), int(N), int(self.design_seed))


@functools.lru_cache(maxsize=64)
def tensor_entries(N: int, p: int) -> np.ndarray:
    """Ordered index tuples i1 <= ... <= ip, shape (E, p)."""
    tuples = list(itertools.combinations_with_replacement(range(N), p))
    return np.array(tuples, dtype=np.int64).reshape(len(tuples), p)


@functools.lru_cache(maxsize=64)
def design_matrix(M: int, N: int, seed: int) -> np.ndarray:
    """GLM design with i.i.d. N(0,1)/sqrt(N) entries."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D]))
    a = rng.standard_normal((M, N)) / np.sqrt(N)
    a.setflags(write=False)
    return a


def channel_mean(sigma: np.ndarray, channel: ChannelSpec) -> np.ndarray:
    """Noise-free channel output for spins of shape (..., N); returns (..., n_obs)."""
    sigma = np.asarray(sigma, dtype=float)
    N = sigma.shape[-1]
    if channel.kind == "spiked_tensor":
        ent = tensor_entries(N, channel.p)
        scale = channel.snr * N ** ((1 - channel.p) / 2)
        return scale * np.prod(sigma[..., ent], axis=-1)
    if channel.kind in ("glm_gaussian", "perceptron_sign"):
        pre = sigma @ channel.design_for(N).T
        return pre if channel.kind == "glm_gaussian" else np.sign(pre)
    return np.zeros(sigma.shape[:-1] + (0,))


@dataclass(frozen=True, eq=False)
class PlantedInstance:
    signal: np.ndarray
    data: np.ndarray
    shape: tuple[int, ...]
    theta_star: np.ndarray
    theta_out: Any
    seed: int
    prior: Prior = field(repr=False, compare=False, default=None)
    channel: ChannelSpec = field(repr=False, compare=False, default=None)


def sample_signal(prior: Prior, seed: int) -> np.ndarray:
    """Draw each site independently from its prior marginal."""
    lw = prior.site_log_weights()
    w = np.exp(lw)
    if w.shape[1] == 0:
        raise ModelError("empty support")
    if np.any(w < 0):
        raise ModelError("negative prior weight")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x51]))
    u = rng.random(prior.N)
    cdf = np.cumsum(w, axis=1)
    cdf[:, -1] = 1.0
    idx = (u[:, None] >= cdf).sum(axis=1)
    return prior.support[idx]


def generate_data(
    instance_signal: np.ndarray, channel: ChannelSpec, seed: int, zero_noise: bool = False
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Channel observations for a given signal.

    Returns the flat data vector and its shape metadata.  ``zero_noise`` drops
    the additive Gaussian noise, which is useful for debugging.
    """
    sig = np.asarray(instance_signal, dtype=float)
    if sig.ndim != 1:
        raise ModelError("signal must be a vector")
    mean = channel_mean(sig, channel)
    if channel.is_gaussian and not zero_noise:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA]))
        mean = mean + rng.standard_normal(mean.shape)
    if channel.kind == "spiked_tensor":
        shape = (len(mean), channel.p)
    else:
        shape = (len(mean),)
    return mean, shape


def base_log_likelihood(sigma: np.ndarray, data: np.ndarray, channel: ChannelSpec) -> np.ndarray:
    """ln P_out(Y | sigma) up to a sigma-independent constant.

    Gaussian channels drop the -0.5 ln(2 pi) per observation; the sign channel
    returns 0 for consistent labels and ``SIGN_MISMATCH_LOGLIK`` otherwise; the
    null channel returns 0.  ``sigma`` may carry leading batch axes.
    """
    sigma = np.asarray(sigma, dtype=float)
    data = np.asarray(data, dtype=float)
    if np.any(np.isnan(sigma)) or np.any(np.isnan(data)):
        raise ModelError("NaN in base_log_likelihood inputs")
    if channel.kind == "null":
        return np.zeros(sigma.shape[:-1])
    mean = channel_mean(sigma, channel)
    if mean.shape[-1] != data.shape[-1]:
        raise ModelError("data length does not match the channel")
    if channel.is_gaussian:
        return -0.5 * np.sum((data - mean) ** 2, axis=-1)
    ok = np.all(mean == data, axis=-1)
    return np.where(ok, 0.0, SIGN_MISMATCH_LOGLIK)


def plant(prior: Prior, channel: ChannelSpec, seed: int) -> PlantedInstance:
    """Sample a signal and its data from one 64-bit seed."""
    ss = np.random.SeedSequence(int(seed))
    s_sig, s_dat = (int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(2))
    signal = sample_signal(prior, s_sig)
    data, shape = generate_data(signal, channel, s_dat)
    theta_out = None
    if channel.kind in ("glm_gaussian", "perceptron_sign"):
        theta_out = channel.design_for(prior.N)
    th = np.asarray(prior.theta_star, dtype=float) if prior.theta_star else np.zeros(prior.N)
    return PlantedInstance(signal, data, shape, th, theta_out, int(seed), prior, channel)


def prior_from_config(cfg: dict, N: int) -> Prior:
    kind = cfg.get("kind", "rademacher")
    if kind == "field_rademacher":
        th = cfg.get("theta_star", 0.0)
        if np.isscalar(th):
            th = [float(th)] * N
        return Prior(kind, N, theta_star=tuple(float(t) for t in th))
    if kind == "grid_soft":
        pts = cfg.get("grid_points", [-1.0, 0.0, 1.0])
        w = cfg.get("grid_weights", [0.25, 0.5, 0.25])
        return Prior(kind, N, grid_points=tuple(map(float, pts)), grid_weights=tuple(map(float, w)))
    return Prior(kind, N)


def channel_from_config(cfg: dict) -> ChannelSpec:
    return ChannelSpec(
        kind=cfg.get("kind", "null"),
        p=int(cfg.get("p", 2)),
        snr=float(cfg.get("snr", 1.0)),
        M=int(cfg.get("M", 0)),
        design_seed=int(cfg.get("design_seed", 0)),
        design=tuple(tuple(float(v) for v in row) for row in cfg["design"]) if "design" in cfg else None,
    )
