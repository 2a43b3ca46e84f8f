"""Perturbed posterior for one quenched realization.

Exact mode enumerates every configuration in the prior support.  MCMC mode
runs independent single-site chains (Metropolis for +-1 spins, heat-bath on
the grid for soft spins) that share the quenched realization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import model_zoo as mz
from . import perturbation as pt

MAX_CONFIGURATIONS = 20_000_000


class EngineError(RuntimeError):
    pass


def enumerate_configurations(prior: mz.Prior) -> np.ndarray:
    """All |support|^N configurations, shape (C, N), first site slowest."""
    V = len(prior.support)
    count = V**prior.N
    if count > MAX_CONFIGURATIONS:
        raise EngineError(
            f"exact enumeration needs {count} configurations; the limit is {MAX_CONFIGURATIONS}"
        )
    idx = np.array(list(itertools.product(range(V), repeat=prior.N)), dtype=np.int64)
    return prior.support[idx.reshape(count, prior.N)]


def prior_potential(prior: mz.Prior) -> np.ndarray:
    """Per-site log weight entering the Gibbs measure, shape (N, V).

    Ising priors contribute theta*_i sigma_i (unnormalized, so that an
    unperturbed uniform model has partition function 2^N); soft priors
    contribute the log grid weights.
    """
    if prior.kind == "grid_soft":
        return prior.site_log_weights()
    if prior.kind == "rademacher":
        return np.zeros((prior.N, 2))
    th = np.asarray(prior.theta_star, dtype=float)[:, None]
    s = prior.support[None, :]
    fin = np.isfinite(th)
    # an infinite field pins the spin to the field's sign
    pinned = np.where(s == np.sign(th), 0.0, -np.inf)
    return np.where(fin, np.where(fin, th, 0.0) * s, pinned)


def configuration_potential(prior: mz.Prior, configs: np.ndarray) -> np.ndarray:
    pot = prior_potential(prior)
    idx = mz.support_index(prior.support, configs)
    return pot[np.arange(prior.N)[None, :], idx].sum(axis=1)


def perturbed_hamiltonian(
    sigma: np.ndarray, instance: mz.PlantedInstance, perturbation: pt.PerturbationRealization | None
) -> np.ndarray:
    """Base log-likelihood plus Gaussian and exponential side-channel terms."""
    h = mz.base_log_likelihood(sigma, instance.data, instance.channel)
    if perturbation is not None:
        r = perturbation
        lam0 = r.lam.lambda0 if r.mode == "binary" else r.lam.gauss_lambdas
        h = h + pt.gaussian_hamiltonian(sigma, instance.signal, r.Z, lam0, r.schedules.eps_N)
        h = h + pt.exponential_hamiltonian(sigma, instance.signal, r)
    return h


@dataclass(eq=False)
class PosteriorHandle:
    instance: mz.PlantedInstance
    perturbation: pt.PerturbationRealization | None
    mode: str
    configs: np.ndarray | None = None
    log_weights: np.ndarray | None = None
    log_partition: float | None = None
    _local: "LocalModel | None" = field(default=None, repr=False)

    @property
    def prior(self) -> mz.Prior:
        return self.instance.prior

    @property
    def probabilities(self) -> np.ndarray:
        if self.mode != "exact_enum":
            raise EngineError("probabilities are only available in exact mode")
        return np.exp(self.log_weights - self.log_partition)


def build_posterior(
    instance: mz.PlantedInstance,
    perturbation: pt.PerturbationRealization | None = None,
    mode: str = "exact_enum",
) -> PosteriorHandle:
    if mode == "exact_enum":
        configs = enumerate_configurations(instance.prior)
        lw = configuration_potential(instance.prior, configs) + perturbed_hamiltonian(
            configs, instance, perturbation
        )
        return PosteriorHandle(instance, perturbation, mode, configs, lw, float(logsumexp(lw)))
    if mode == "mcmc":
        return PosteriorHandle(instance, perturbation, mode, _local=LocalModel(instance, perturbation))
    raise EngineError(f"unknown posterior mode {mode!r}")


def free_entropy(target, *args, **kwargs):
    """ln Z for a handle in exact mode, or the quenched estimate for a setup."""
    if isinstance(target, PosteriorHandle):
        if target.mode != "exact_enum":
            raise EngineError("per-realization free entropy needs exact mode")
        return target.log_partition
    from .quenched import quenched_free_entropy

    return quenched_free_entropy(target, *args, **kwargs)


def quenched_average(*args, **kwargs):
    from .quenched import quenched_average as qa

    return qa(*args, **kwargs)


def bracket(handle: PosteriorHandle, observable: Callable, L: int, batch: "ReplicaBatch | None" = None):
    """Gibbs average of ``observable`` over L replicas.

    ``observable`` maps an array of shape (..., L, N) to values of shape (...).
    Exact mode sums over the L-fold product measure; MCMC mode averages over
    groups of L distinct chains and returns (mean, standard error).
    """
    if handle.mode == "exact_enum":
        C = handle.configs.shape[0]
        if C**L > MAX_CONFIGURATIONS:
            raise EngineError("replica product space too large for exact brackets")
        p = handle.probabilities
        grids = np.meshgrid(*([np.arange(C)] * L), indexing="ij")
        idx = np.stack([g.ravel() for g in grids], axis=-1)
        vals = np.asarray(observable(handle.configs[idx]), dtype=float)
        if np.any(np.isnan(vals)):
            raise EngineError("observable returned NaN")
        w = np.prod(p[idx], axis=-1)
        return float(np.sum(w * vals))
    if batch is None:
        raise EngineError("MCMC brackets need a ReplicaBatch")
    return mcmc_bracket(batch, observable, L)


@dataclass(eq=False)
class ReplicaBatch:
    """Post-burn-in states: ``replicas[t, l]`` is chain l at recorded step t."""

    replicas: np.ndarray
    mode: str
    acceptance_rate: np.ndarray
    effective_sample_size: np.ndarray
    seed: int = 0


def effective_sample_size(x: np.ndarray) -> float:
    """Geyer initial-positive-sequence ESS of a 1-d trace."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = x @ x / n
    if var == 0:
        return float(n)
    f = np.fft.rfft(x, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = -1.0
    for t in range(0, n - 1, 2):
        pair = acf[t] + acf[t + 1]
        if pair <= 0:
            break
        tau += 2 * pair
    return float(n / max(tau, 1.0))


def mcmc_bracket(batch: ReplicaBatch, observable: Callable, L: int) -> tuple[float, float]:
    T, n_chains, _ = batch.replicas.shape
    if n_chains < L:
        raise EngineError(f"need at least {L} chains for an {L}-replica bracket")
    groups = [list(range(g * L, (g + 1) * L)) for g in range(n_chains // L)]
    per_group = []
    for g in groups:
        v = np.asarray(observable(batch.replicas[:, g, :]), dtype=float)
        if np.any(np.isnan(v)):
            raise EngineError("observable returned NaN")
        per_group.append(v)
    v = np.stack(per_group, axis=1)  # (T, groups)
    mean = float(v.mean())
    ess = sum(effective_sample_size(v[:, j]) for j in range(v.shape[1]))
    se = float(v.std(ddof=1) / np.sqrt(max(ess, 1.0))) if v.size > 1 else 0.0
    return mean, se


class LocalModel:
    """Site-conditional log-weights used by the single-site samplers."""

    def __init__(self, instance: mz.PlantedInstance, perturbation: pt.PerturbationRealization | None):
        self.prior = instance.prior
        self.channel = instance.channel
        self.data = np.asarray(instance.data, dtype=float)
        self.N = instance.prior.N
        self.values = instance.prior.support
        V = len(self.values)
        table = prior_potential(self.prior).copy()
        if perturbation is not None:
            r = perturbation
            a = r.amplitudes
            Y = pt.gaussian_observations(r, instance.signal).reshape(self.N, -1)
            for k in range(a.size):
                vk = self.values ** (k + 1)
                table += a[k] * Y[:, k : k + 1] * vk[None, :] - 0.5 * a[k] ** 2 * vk[None, :] ** 2
            yexp = pt.exponential_observations(r, instance.signal)
            lam = r.lam.channel_lambdas[r.obs_channel]
            for j in range(yexp.size):
                table[r.obs_site[j]] += pt.pair_hamiltonian_obs(
                    self.values, r.mode, r.obs_channel[j], lam[j], 1.0, yexp[j]
                )
        self.site_table = table  # (N, V)
        ch = self.channel
        if ch.kind == "spiked_tensor":
            self.entries = mz.tensor_entries(self.N, ch.p)
            self.scale = ch.snr * self.N ** ((1 - ch.p) / 2)
            self.site_entries = [np.nonzero((self.entries == i).any(axis=1))[0] for i in range(self.N)]
        elif ch.kind in ("glm_gaussian", "perceptron_sign"):
            self.design = ch.design_for(self.N)
        self.V = V

    def init_aux(self, state: np.ndarray):
        if self.channel.kind in ("glm_gaussian", "perceptron_sign"):
            return state @ self.design.T
        return None

    def log_weight(self, state: np.ndarray) -> np.ndarray:
        idx = mz.support_index(self.values, state)
        out = self.site_table[np.arange(self.N)[None, :], idx].sum(axis=1)
        return out + mz.base_log_likelihood(state, self.data, self.channel)

    def local(self, state: np.ndarray, aux, i: int) -> np.ndarray:
        """Log-weight of each candidate value at site i, shape (chains, V)."""
        out = np.broadcast_to(self.site_table[i], (state.shape[0], self.V)).copy()
        ch = self.channel
        if ch.kind == "spiked_tensor":
            e = self.site_entries[i]
            ent = self.entries[e]  # (E_i, p)
            mult = (ent == i).sum(axis=1)  # power of sigma_i in each entry
            prod_others = np.prod(np.where(ent[None] == i, 1.0, state[:, ent]), axis=-1)  # (chains, E_i)
            mean = self.scale * prod_others[:, None, :] * self.values[None, :, None] ** mult[None, None, :]
            out += -0.5 * np.sum((self.data[e][None, None, :] - mean) ** 2, axis=-1)
        elif ch.kind in ("glm_gaussian", "perceptron_sign"):
            delta = self.values[None, :] - state[:, i : i + 1]  # (chains, V)
            u = aux[:, None, :] + delta[:, :, None] * self.design[:, i][None, None, :]
            if ch.kind == "glm_gaussian":
                out += -0.5 * np.sum((self.data[None, None, :] - u) ** 2, axis=-1)
            else:
                ok = np.all(np.sign(u) == self.data[None, None, :], axis=-1)
                out += np.where(ok, 0.0, mz.SIGN_MISMATCH_LOGLIK)
        return out

    def update_aux(self, aux, state_old_i, state_new_i, i):
        if aux is None:
            return None
        return aux + (state_new_i - state_old_i)[:, None] * self.design[:, i][None, :]


def mcmc_sample(
    handle: PosteriorHandle, L: int, sweeps: int, burn_in: int, thin: int, seed: int, record: str = "states"
) -> ReplicaBatch:
    """Run L independent chains and return the thinned post-burn-in states."""
    if handle.mode != "mcmc":
        raise EngineError("mcmc_sample needs a handle built in mcmc mode")
    if L < 1 or sweeps < 1 or thin < 1 or burn_in < 0:
        raise EngineError("invalid chain settings")
    lm: LocalModel = handle._local
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x3C]))
    V, N = lm.V, lm.N
    lw_prior = prior_potential(lm.prior)
    p0 = np.exp(lw_prior - logsumexp(lw_prior, axis=1, keepdims=True))
    cdf = np.cumsum(p0, axis=1)

    def draw_init(n):
        u = rng.random((n, N))
        return lm.values[np.minimum((u[..., None] >= cdf[None]).sum(-1), V - 1)]

    state = draw_init(L)
    for _ in range(100):
        bad = lm.log_weight(state) <= mz.SIGN_MISMATCH_LOGLIK / 2
        if not np.any(bad):
            break
        state[bad] = draw_init(int(bad.sum()))
    aux = lm.init_aux(state)
    binary = V == 2
    accepted = np.zeros(L)
    proposals = 0
    kept = []
    rows = np.arange(L)
    for sweep in range(burn_in + sweeps):
        for i in range(N):
            loc = lm.local(state, aux, i)
            cur = mz.support_index(lm.values, state[:, i])
            if binary:
                prop = 1 - cur
                dlog = loc[rows, prop] - loc[rows, cur]
                acc = np.log(rng.random(L)) < dlog
                new_idx = np.where(acc, prop, cur)
                if sweep >= burn_in:
                    accepted += acc
            else:
                pr = np.exp(loc - logsumexp(loc, axis=1, keepdims=True))
                c = np.cumsum(pr, axis=1)
                new_idx = np.minimum((rng.random(L)[:, None] >= c).sum(axis=1), V - 1)
                if sweep >= burn_in:
                    accepted += new_idx != cur
            new_vals = lm.values[new_idx]
            aux = lm.update_aux(aux, state[:, i], new_vals, i)
            state[:, i] = new_vals
            if sweep >= burn_in:
                proposals += 1
        if sweep >= burn_in and (sweep - burn_in) % thin == 0:
            kept.append(state.copy())
    reps = np.stack(kept, axis=0)
    ess = np.array([effective_sample_size(reps[:, l].mean(axis=1)) for l in range(L)])
    rate = accepted / max(proposals, 1)
    return ReplicaBatch(reps, "mcmc", rate, ess, int(seed))
