"""Order parameters and fluctuation quantities.

The first half holds pure functions of replica arrays.  The second half
builds Gibbs-bracket observables over a ``DisorderBatch``: each returns the
first and second Gibbs moments ``(<X>, <X^2>)`` for every disorder point.
Replica observables are computed from one- and two-site moments of the
posterior, which is exact because replicas are conditionally independent.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import perturbation as pt


class ObservableError(ValueError):
    pass


KINDS = (
    "magnetisation",
    "overlap",
    "multioverlap",
    "generalized_multioverlap",
    "L_gauss",
    "L_exp",
    "L_exp_tilde",
    "fds_terms",
)


@dataclass(frozen=True)
class ObservableSpec:
    kind: str
    replica_arity: int = 1
    powers: tuple[int, ...] = ()
    star: bool = False  # last replica replaced by the signal
    channel: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ObservableError(f"unknown observable kind {self.kind!r}")
        if self.replica_arity < 1:
            raise ObservableError("replica arity must be at least 1")
        if self.powers and len(self.powers) != self.replica_arity:
            raise ObservableError("one power per replica is required")
        if any(k < 1 for k in self.powers):
            raise ObservableError("powers must be >= 1")
        expected = {"magnetisation": 1, "overlap": 2}.get(self.kind)
        if expected is not None and self.replica_arity != expected:
            raise ObservableError(f"{self.kind} has replica arity {expected}")

    @property
    def effective_powers(self) -> tuple[int, ...]:
        return self.powers or (1,) * self.replica_arity


# --------------------------------------------------------------------------
# Pure functions


def multioverlap(replicas: np.ndarray, powers=None) -> float | np.ndarray:
    """N^-1 sum_i prod_j (sigma_i^j)^k_j over the rows of ``replicas``.

    Leading batch axes are allowed: replicas has shape (..., n, N).
    """
    r = np.asarray(replicas, dtype=float)
    if r.ndim < 2 or r.shape[-2] == 0:
        raise ObservableError("multioverlap needs at least one replica")
    n = r.shape[-2]
    k = np.ones(n) if powers is None else np.asarray(powers, dtype=float)
    if k.shape != (n,):
        raise ObservableError("one power per replica is required")
    return np.mean(np.prod(r ** k[:, None], axis=-2), axis=-1)


def signal_overlap(sigma: np.ndarray, signal: np.ndarray) -> float:
    """R_{1,*}: overlap of one replica with the planted signal."""
    return float(np.mean(np.asarray(sigma) * np.asarray(signal)))


def L_gauss(sigma, signal, Z, lambda0N) -> float:
    """Derivative of the Gaussian side-channel Hamiltonian in lambda0*eps_N, divided by N."""
    if lambda0N <= 0:
        raise ObservableError("lambda0N must be positive")
    sigma, signal, Z = (np.asarray(v, dtype=float) for v in (sigma, signal, Z))
    N = sigma.shape[-1]
    h = (
        np.sum(sigma * signal, axis=-1)
        + np.sum(sigma * Z, axis=-1) / (2 * np.sqrt(lambda0N))
        - 0.5 * np.sum(sigma * sigma, axis=-1)
    )
    return h / N


def _channel_terms(k: int, realization: pt.PerturbationRealization):
    sel = realization.obs_channel == k
    return realization.obs_site[sel], realization.xi[sel]


def exp_derivatives(k: int, sigma, signal, realization: pt.PerturbationRealization) -> tuple[float, float, float]:
    """(H'_k, H''_k, sum sigma xi/(1+lam sigma*)^2) for channel k of a stored realization.

    Derivatives are taken in lambda_k at fixed noises xi.  With soft spins the
    channel value P_I(sigma) replaces sigma.
    """
    mode = realization.mode
    lam = realization.lam.channel_lambdas[k]
    sites, xi = _channel_terms(k, realization)
    u = pt.channel_transform(mode, np.asarray(sigma, dtype=float)[sites], k)
    us = pt.channel_transform(mode, np.asarray(signal, dtype=float)[sites], k)
    rate = 1.0 + lam * us
    tilde = np.sum(u * xi / rate**2)
    first = np.sum(u / (1.0 + lam * u)) - tilde
    second = np.sum(-(u**2) / (1.0 + lam * u) ** 2 + 2.0 * u * us * xi / rate**3)
    return float(first), float(second), float(tilde)


def L_exp(k: int, sigma, signal, realization: pt.PerturbationRealization) -> tuple[float, float]:
    """(L_k, L~_k): first lambda_k derivative of the exponential Hamiltonian and its
    noise part, both divided by s_N."""
    first, _, tilde = exp_derivatives(k, sigma, signal, realization)
    s_N = realization.schedules.s_N
    return first / s_N, tilde / s_N


def fds_terms(i: int, k: int, replicas, signal, xi: float, lambda_k: float, mode: str = "binary"):
    """theta per replica, y, and d per replica for one fresh exponential observation at site i."""
    if xi <= 0:
        raise ObservableError("exponential noise must be positive")
    r = np.atleast_2d(np.asarray(replicas, dtype=float))
    u = pt.channel_transform(mode, r[:, i], k)
    us = float(pt.channel_transform(mode, np.asarray([signal[i]], dtype=float), k)[0])
    y = xi / (1.0 + lambda_k * us)
    theta = np.log1p(lambda_k * u) - lambda_k * y * u
    d = y * u / (1.0 + lambda_k * us)
    return theta, y, d


# --------------------------------------------------------------------------
# Bracket observables on disorder batches


def _broadcast(batch, m1, m2):
    return np.broadcast_to(m1, batch.weight.shape), np.broadcast_to(m2, batch.weight.shape)


def replica_overlap(powers=(1, 1), star: bool = False):
    """<R> and <R^2> for distinct replicas with the given powers.

    With ``star`` the last replica is the signal (its power is the last entry).
    """
    powers = tuple(int(k) for k in powers)
    gibbs = powers[:-1] if star else powers

    def obs(batch):
        N = batch.N
        m1 = np.ones((batch.post.shape[0], 1, N))
        m2 = np.ones((batch.post.shape[0], 1, N, N))
        for k in gibbs:
            m1 = m1 * batch.moments(k)[:, None, :]
            m2 = m2 * batch.pair_moments(k)[:, None, :, :]
        if star:
            s = batch.signals ** powers[-1]
            m1 = m1 * s[None, :, :]
            m2 = m2 * (s[:, :, None] * s[:, None, :])[None]
        return _broadcast(batch, m1.sum(-1) / N, m2.sum((-1, -2)) / N**2)

    return obs


def signal_magnetisation(power: int = 1):
    """R_* = N^-1 sum sigma*_i^power, a function of the signal alone."""

    def obs(batch):
        v = np.mean(batch.signals**power, axis=1)[None, :]
        return _broadcast(batch, v, v * v)

    return obs


def magnetisation(power: int = 1):
    """R_1 = N^-1 sum sigma_i^power for one replica."""
    return replica_overlap((power,), star=False)


def spin_product(i: int = 0, j: int = 1, across_replicas: bool = True, star: bool = False):
    """sigma^1_i sigma^2_j (or sigma_i sigma_j in one replica), optionally with the signal
    as the last factor's replica."""

    def obs(batch):
        if not across_replicas:
            if star:
                v = (batch.signals[:, i] * batch.signals[:, j])[None, :]
                return _broadcast(batch, v, v * v)
            pm = batch.pair_moments(1)[:, i, j][:, None]
            # sigma_i^2 sigma_j^2 is 1 for binary spins; general case from configs
            sq = batch.post @ (batch.configs[:, i] ** 2 * batch.configs[:, j] ** 2)
            return _broadcast(batch, pm, sq[:, None])
        m = batch.moments(1)
        m2 = batch.moments(2)
        if star:
            s = batch.signals[:, j][None, :]
            return _broadcast(batch, m[:, i : i + 1] * s, m2[:, i : i + 1] * s * s)
        return _broadcast(batch, (m[:, i] * m[:, j])[:, None], (m2[:, i] * m2[:, j])[:, None])

    return obs


def config_observable(values_fn):
    """Wrap a function batch -> per-configuration values (B, S|1, C)."""

    def obs(batch):
        return _broadcast(batch, *batch.thermal(values_fn(batch)))

    return obs


def L_gauss_values(batch, k: int = 0):
    """L for Gaussian channel k (spin power k+1) at every (node, signal, config)."""
    a = batch.amplitudes[k]
    sp = batch.configs ** (k + 1)
    Z = batch.gauss_noise(k)
    ss = batch.signals ** (k + 1)
    h = (
        np.einsum("sn,cn->sc", ss, sp)[None]
        + np.einsum("bsn,cn->bsc", Z, sp) / (2 * a)
        - 0.5 * np.sum(sp * sp, axis=1)[None, None, :]
    )
    return h / batch.N


def exp_derivative_values(batch, k: int, order: int = 1):
    """H'_k (order 1) or H''_k (order 2) at every (node, signal, config).

    Uses the sufficient statistics of the batch: per active (site, channel)
    pair the count n and the sum S of its observations.
    """
    lam = batch.setup.lam.channel_lambdas[k]
    mode = batch.setup.lam.mode
    B, S, C = batch.post.shape[0], batch.signals.shape[0], batch.configs.shape[0]
    if batch.exp_sites is None or batch.exp_sites.shape[1] == 0:
        return np.zeros((B, S, C))
    active = ((batch.exp_channels == k) & (batch.exp_counts > 0)).astype(float)  # (B, P)
    u = pt.channel_transform(mode, np.moveaxis(batch.configs[:, batch.exp_sites], 0, -1), k)  # (B, P, C)
    us = pt.channel_transform(mode, np.moveaxis(batch.signals[:, batch.exp_sites], 0, 1), k)  # (B, S, P)
    n = (batch.exp_counts * active)[:, None, :, None]
    Ssum = (batch.exp_sums * active)[:, None, :, None]
    u = u[:, None, :, :]
    us = us[:, :, :, None]
    if order == 1:
        terms = u * (n / (1.0 + lam * u) - Ssum / (1.0 + lam * us))
    else:
        terms = -n * u**2 / (1.0 + lam * u) ** 2 + 2.0 * u * us * Ssum / (1.0 + lam * us) ** 2
    return terms.sum(axis=2)


def exp_derivative(k: int, order: int = 1, normalise: bool = False):
    def values(batch):
        v = exp_derivative_values(batch, k, order)
        return v / batch.setup.schedules.s_N if normalise else v

    return config_observable(values)


def L_gauss_observable(k: int = 0):
    return config_observable(lambda b: L_gauss_values(b, k))


def product_observable(fa, fb):
    """<A B> for two per-configuration value functions; second slot is <(AB)^2>."""

    def obs(batch):
        return _broadcast(batch, *batch.thermal(fa(batch) * fb(batch)))

    return obs


def signal_overlap_values(batch, power: int = 1):
    return (np.einsum("sn,cn->sc", batch.signals**power, batch.configs**power) / batch.N)[None]


# --------------------------------------------------------------------------
# String keys


_KEY_R = re.compile(r"^R:(\*|\d+)(?:,(\*|\d+))*$")
_KEY_RK = re.compile(r"^Rk:((?:\(\d+\))+)$")


def parse_key(key: str) -> ObservableSpec:
    """Parse keys such as "R:1,2", "R:1,*", "Rk:(2)(1)", "M", "Lgauss", "Lexp:1"."""
    key = key.strip()
    if key == "M":
        return ObservableSpec("magnetisation", 1)
    if key == "Lgauss":
        return ObservableSpec("L_gauss", 1)
    m = re.fullmatch(r"Lexp(~?):(\d+)", key)
    if m:
        return ObservableSpec("L_exp_tilde" if m.group(1) else "L_exp", 1, channel=int(m.group(2)) - 1)
    if _KEY_R.match(key):
        labels = key[2:].split(",")
        star = labels[-1] == "*"
        if "*" in labels[:-1]:
            raise ObservableError(f"{key}: the signal may only appear last")
        idx = [int(x) for x in labels if x != "*"]
        if len(set(idx)) != len(idx):
            raise ObservableError(f"{key}: replica indices must be distinct")
        n = len(labels)
        kind = "overlap" if n == 2 and not star else ("magnetisation" if n == 1 else "multioverlap")
        return ObservableSpec(kind, n, star=star)
    m = _KEY_RK.match(key)
    if m:
        powers = tuple(int(x) for x in re.findall(r"\((\d+)\)", m.group(1)))
        return ObservableSpec("generalized_multioverlap", len(powers), powers=powers)
    raise ObservableError(f"unknown observable key {key!r}")


def from_spec(spec: ObservableSpec):
    """Bracket observable for a spec."""
    if spec.kind in ("magnetisation", "overlap", "multioverlap", "generalized_multioverlap"):
        return replica_overlap(spec.effective_powers, star=spec.star)
    if spec.kind == "L_gauss":
        return L_gauss_observable(0)
    if spec.kind == "L_exp":
        return exp_derivative(spec.channel, 1, normalise=True)
    if spec.kind == "L_exp_tilde":
        raise ObservableError("L_exp_tilde is only available per realization")
    raise ObservableError(f"{spec.kind} is not a bracket observable")


def from_key(key: str):
    return from_spec(parse_key(key))
