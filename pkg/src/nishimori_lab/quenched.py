"""Quenched averages over signal, data and side-channel randomness.

Two strategies share one interface.  ``quadrature`` sums exactly over the
signal and places Gauss-Hermite / Gauss-Laguerre nodes in the space of
observations, weighting each node by the channel density under every signal;
``monte_carlo`` draws R independent disorder realizations and enumerates the
posterior of each.

Observables receive a ``DisorderBatch`` and return the Gibbs first and second
moments for every (node, signal) pair.
"""

from __future__ import annotations

import hashlib
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import special, stats

from . import model_zoo as mz
from . import perturbation as pt
from .aggregation import Moments
from .posterior_engine import configuration_potential, enumerate_configurations, build_posterior


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class Setup:
    """A model plus a fixed lambda; ``lam`` None means no side channels."""

    prior: mz.Prior
    channel: mz.ChannelSpec
    lam: pt.LambdaVector | None
    schedules: pt.Schedules | None
    seed: int = 0
    noise_seed: int = 0

    @property
    def N(self) -> int:
        return self.prior.N

    @property
    def mode(self) -> str:
        return "binary" if self.lam is None else self.lam.mode

    def with_lambda(self, lam: pt.LambdaVector | None) -> "Setup":
        return Setup(self.prior, self.channel, lam, self.schedules, self.seed, self.noise_seed)

    def unperturbed(self) -> "Setup":
        return self.with_lambda(None)


def setup_from_config(model_cfg: Mapping, pert_cfg: Mapping | None) -> Setup:
    N = int(model_cfg["N"])
    prior = mz.prior_from_config(model_cfg.get("prior", {}), N)
    channel = mz.channel_from_config(model_cfg.get("channel", {}))
    seed = int(model_cfg.get("seed", 0))
    if not pert_cfg or not pert_cfg.get("enabled", True):
        return Setup(prior, channel, None, None, seed, seed)
    mode = pert_cfg.get("mode", "binary" if prior.is_binary else "soft")
    K_max = int(pert_cfg.get("K_max", 6))
    sched = pt.make_schedules(
        N,
        float(pert_cfg.get("eps_exponent", 0.5)),
        float(pert_cfg.get("s_exponent", 0.75)),
        float(pert_cfg.get("eps_scale", 1.0)),
        float(pert_cfg.get("s_scale", 1.0)),
    )
    lam = pt.draw_lambda(K_max, mode, int(pert_cfg.get("lambda_seed", 0)))
    # null entries mean "drawn", so a test override can undo a base setting
    if pert_cfg.get("lambda0") is not None:
        lam = lam.with_lambda0(pert_cfg["lambda0"])
    if pert_cfg.get("lambda_channels") is not None:
        lam = lam.with_channels(pert_cfg["lambda_channels"])
    return Setup(prior, channel, lam, sched, seed, int(pert_cfg.get("noise_seed", seed)))


@dataclass(frozen=True)
class QuadratureGrid:
    hermite_order: int = 20
    laguerre_order: int = 20
    tail: float = 1e-12
    max_dimension: int = 12
    max_nodes: int = 50_000_000

    def poisson_cap(self, mean: float) -> int:
        """Smallest P with P(Poisson(mean) > P) below the tail tolerance."""
        if mean <= 0:
            return 0
        P = 0
        while stats.poisson.sf(P, mean) >= self.tail:
            P += 1
        return P

    def orders_for(self, mass: float) -> tuple[int, int]:
        """(Hermite, Laguerre) orders for a count pattern of the given probability.

        Improbable patterns get coarser rules; their integration error is
        scaled by the pattern mass.
        """
        if mass >= 1e-6:
            return self.hermite_order, self.laguerre_order
        if mass >= 1e-9:
            return min(4, self.hermite_order), min(4, self.laguerre_order)
        return 1, 1


@dataclass(frozen=True)
class MonteCarlo:
    R: int
    seed: int = 0
    jobs: int = 1


@dataclass
class EstimateRecord:
    mean: float
    thermal_var: float
    quenched_var: float
    total_var: float
    se: float
    n: int = 0
    strategy: str = "quadrature"
    second_moment: float = float("nan")  # E<X^2>
    mean_square: float = float("nan")  # E[<X>^2]

    def as_dict(self) -> dict:
        return {
            "estimate": self.mean,
            "thermal_var": self.thermal_var,
            "quenched_var": self.quenched_var,
            "total_var": self.total_var,
            "se": self.se,
        }


# --------------------------------------------------------------------------
# Node sets


def _cache_dir() -> str | None:
    d = os.environ.get("NISHIMORI_LAB_CACHE")
    if d:
        os.makedirs(d, exist_ok=True)
    return d


def _cached_rule(kind: str, order: int, alpha: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    d = _cache_dir()
    path = None
    if d:
        key = hashlib.sha1(f"{kind}:{order}:{alpha!r}".encode()).hexdigest()[:16]
        path = os.path.join(d, f"{kind}-{order}-{key}.npy")
        if os.path.exists(path):
            arr = np.load(path)
            return arr[0], arr[1]
    if kind == "hermite":
        x, w = np.polynomial.hermite.hermgauss(order)
        x, w = np.sqrt(2.0) * x, w / np.sqrt(np.pi)
    else:
        x, w = special.roots_genlaguerre(order, alpha)
        w = w / special.gamma(alpha + 1.0)
    if path:
        np.save(path, np.stack([x, w]))
    return x, w


def gauss_hermite_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E f(X), X ~ N(0, 1)."""
    return _cached_rule("hermite", int(order))


def gamma_laguerre_rule(order: int, shape: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E f(X), X ~ Gamma(shape, rate 1)."""
    return _cached_rule("laguerre", int(order), float(shape - 1))


def tensor_grid(x: np.ndarray, w: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    idx = np.array(list(itertools.product(range(len(x)), repeat=dim)), dtype=np.int64)
    return x[idx], np.prod(w[idx], axis=1)


@dataclass
class NodeSet:
    """One factor of the product node set.

    ``ll`` is the Hamiltonian contribution over posterior configurations,
    ``log_ratio`` the log density ratio (true law / reference) over signals.
    """

    values: np.ndarray
    weights: np.ndarray
    ll: np.ndarray
    log_ratio: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.size


def _base_nodes(setup: Setup, configs: np.ndarray, order: int) -> NodeSet:
    ch = setup.channel
    C = configs.shape[0]
    if ch.kind == "null":
        return NodeSet(np.zeros((1, 0)), np.ones(1), np.zeros((1, C)), np.zeros((1, C)))
    means = np.stack([mz.generate_data(s, ch, 0, zero_noise=True)[0] for s in configs])
    if ch.kind == "perceptron_sign":
        M = ch.M
        Y = np.array(list(itertools.product([-1.0, 1.0], repeat=M))).reshape(-1, M)
        w = np.ones(len(Y))
        match = np.all(Y[:, None, :] == means[None, :, :], axis=-1)
        with np.errstate(divide="ignore"):
            ratio = np.log(match.astype(float))
    else:
        x, wq = gauss_hermite_rule(order)
        Y, w = tensor_grid(x, wq, means.shape[1])
        ratio = np.sum(
            stats.norm.logpdf(Y[:, None, :], loc=means[None, :, :]) - stats.norm.logpdf(Y[:, None, :]), axis=-1
        )
    ll = mz.base_log_likelihood(configs[None, :, :], Y[:, None, :], ch)
    return NodeSet(Y, w, ll, ratio)


def _gauss_nodes(setup: Setup, configs: np.ndarray, order: int) -> NodeSet | None:
    lam = setup.lam
    C, N = configs.shape
    if lam is None or np.all(lam.gauss_lambdas == 0):
        return None
    a = np.sqrt(lam.gauss_lambdas * setup.schedules.eps_N)
    K = a.size
    x, wq = gauss_hermite_rule(order)
    flat, w = tensor_grid(x, wq, N * K)
    Y = flat.reshape(-1, N, K)
    ll = np.zeros((len(w), C))
    ratio = np.zeros((len(w), C))
    for k in range(K):
        sk = configs ** (k + 1)
        ll += a[k] * (Y[:, :, k] @ sk.T) - 0.5 * a[k] ** 2 * np.sum(sk * sk, axis=1)[None, :]
        mean = a[k] * sk
        ratio += np.sum(
            stats.norm.logpdf(Y[:, None, :, k], loc=mean[None]) - stats.norm.logpdf(Y[:, None, :, k]), axis=-1
        )
    return NodeSet(Y, w, ll, ratio)


@dataclass
class CountPattern:
    mass: float
    sites: np.ndarray
    channels: np.ndarray
    counts: np.ndarray


def count_patterns(setup: Setup, grid: QuadratureGrid) -> tuple[list[CountPattern], int, float]:
    """Exponential-channel count patterns up to the Poisson cap.

    Splitting a Poisson(s_N) count uniformly over N sites gives independent
    Poisson(s_N/N) counts per (site, channel) pair.  Patterns are enumerated by
    total count up to the cap P_max; returns (patterns, P_max, dropped mass).
    """
    lam = setup.lam
    if lam is None:
        return [CountPattern(1.0, *(np.zeros(0, dtype=np.int64),) * 3)], 0, 0.0
    chans = np.nonzero(lam.channel_lambdas != 0)[0]
    if chans.size == 0:
        return [CountPattern(1.0, *(np.zeros(0, dtype=np.int64),) * 3)], 0, 0.0
    N = setup.N
    mu = setup.schedules.s_N / N
    pairs = [(i, c) for c in chans for i in range(N)]
    n_pairs = len(pairs)
    P_max = grid.poisson_cap(mu * n_pairs)
    out = []
    log_p0 = -mu * n_pairs
    for total in range(P_max + 1):
        for combo in itertools.combinations_with_replacement(range(n_pairs), total):
            active, counts = np.unique(np.array(combo, dtype=np.int64), return_counts=True)
            logm = log_p0 + np.sum(counts * np.log(mu) - special.gammaln(counts + 1))
            out.append(
                CountPattern(
                    float(np.exp(logm)),
                    np.array([pairs[a][0] for a in active], dtype=np.int64),
                    np.array([pairs[a][1] for a in active], dtype=np.int64),
                    counts.astype(np.int64),
                )
            )
    dropped = float(stats.poisson.sf(P_max, mu * n_pairs))
    return out, P_max, dropped


@dataclass
class ExpFactor:
    """Exponential-channel nodes of several count patterns, padded to a common width.

    Per node: the (site, channel, count) of every active pair and the sum of
    that pair's observations; padding pairs have count 0.
    """

    sums: np.ndarray
    sites: np.ndarray
    channels: np.ndarray
    counts: np.ndarray
    weights: np.ndarray
    ll: np.ndarray
    log_ratio: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.size


def _pattern_nodes(setup: Setup, configs, signals, pat: CountPattern, order: int):
    C, S_ = configs.shape[0], signals.shape[0]
    P = pat.counts.size
    if P == 0:
        return np.zeros((1, 0)), np.ones(1) * pat.mass, np.zeros((1, C)), np.zeros((1, S_))
    rules = [gamma_laguerre_rule(order, int(n)) for n in pat.counts]
    idx = np.array(list(itertools.product(range(order), repeat=P)), dtype=np.int64)
    sums = np.stack([rules[p][0][idx[:, p]] for p in range(P)], axis=1)
    w = np.prod(np.stack([rules[p][1][idx[:, p]] for p in range(P)], axis=1), axis=1)
    lam = setup.lam.channel_lambdas[pat.channels]
    mode = setup.lam.mode
    # posterior route: the engine's pair Hamiltonian at every configuration
    ll = pt.pair_hamiltonian_obs(
        configs[None, :, pat.sites], mode, pat.channels[None, None, :], lam[None, None, :],
        pat.counts[None, None, :], sums[:, None, :],
    ).sum(-1)
    # data route: Gamma density of each pair's sum under every signal, against the reference
    rate = 1.0 + lam[None, :] * pt.channel_transform(mode, signals[:, pat.sites], pat.channels[None, :])
    x = sums[:, None, :]
    ratio = (
        stats.gamma.logpdf(x, pat.counts[None, None, :], scale=1.0 / rate[None, :, :])
        - stats.gamma.logpdf(x, pat.counts[None, None, :])
    ).sum(-1)
    return sums, w * pat.mass, ll, ratio


def _exp_factor(setup: Setup, configs, signals, patterns: list[CountPattern], order: int) -> ExpFactor:
    width = max((p.counts.size for p in patterns), default=0)
    parts = {k: [] for k in ("sums", "sites", "channels", "counts", "weights", "ll", "log_ratio")}
    for pat in patterns:
        sums, w, ll, ratio = _pattern_nodes(setup, configs, signals, pat, order)
        n, P = sums.shape
        pad = width - P
        parts["sums"].append(np.pad(sums, ((0, 0), (0, pad))))
        for key, arr in (("sites", pat.sites), ("channels", pat.channels), ("counts", pat.counts)):
            parts[key].append(np.broadcast_to(np.pad(arr, (0, pad)), (n, width)))
        parts["weights"].append(w)
        parts["ll"].append(ll)
        parts["log_ratio"].append(ratio)
    return ExpFactor(**{k: np.concatenate(v) for k, v in parts.items()})


# --------------------------------------------------------------------------
# Batches handed to observables


@dataclass(eq=False)
class DisorderBatch:
    """B disorder points, each paired with S candidate signals.

    In quadrature the posterior at a node does not depend on the signal, so
    ``post`` is (B, C) while ``weight`` is (B, S).  Monte Carlo batches have
    B = S = 1.
    """

    configs: np.ndarray
    post: np.ndarray
    log_Z: np.ndarray
    log_Z_base: np.ndarray
    signals: np.ndarray
    weight: np.ndarray
    setup: Setup
    gauss_y: np.ndarray | None = None  # (B, N, K)
    # active exponential (site, channel) pairs per node, (B, P); count 0 marks padding
    exp_sites: np.ndarray | None = None
    exp_channels: np.ndarray | None = None
    exp_counts: np.ndarray | None = None
    exp_sums: np.ndarray | None = None  # sums of each pair's observations
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return self.configs.shape[1]

    @property
    def amplitudes(self) -> np.ndarray:
        lam = self.setup.lam
        return np.sqrt(lam.gauss_lambdas * self.setup.schedules.eps_N)

    def gauss_noise(self, k: int = 0) -> np.ndarray:
        """Z = y - a sigma*^k for every (node, signal), shape (B, S, N)."""
        key = ("Z", k)
        if key not in self._cache:
            a = self.amplitudes[k]
            self._cache[key] = self.gauss_y[:, None, :, k] - a * self.signals[None, :, :] ** (k + 1)
        return self._cache[key]

    def moments(self, power: int = 1) -> np.ndarray:
        """<sigma_i^power>, shape (B, N)."""
        key = ("m1", power)
        if key not in self._cache:
            self._cache[key] = self.post @ self.configs**power
        return self._cache[key]

    def pair_moments(self, power: int = 1) -> np.ndarray:
        """<sigma_i^power sigma_j^power>, shape (B, N, N)."""
        key = ("m2", power)
        if key not in self._cache:
            sp = self.configs**power
            self._cache[key] = np.einsum("bc,ci,cj->bij", self.post, sp, sp, optimize=True)
        return self._cache[key]

    def thermal(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gibbs mean and second moment of per-configuration values (B, S|1, C)."""
        values = np.broadcast_to(values, (self.post.shape[0],) + values.shape[1:])
        m1 = np.einsum("bc,bsc->bs", self.post, values)
        m2 = np.einsum("bc,bsc->bs", self.post, values * values)
        return m1, m2


Observable = Callable[[DisorderBatch], tuple[np.ndarray, np.ndarray]]


class _Accumulator:
    def __init__(self, names):
        self.sums = {n: np.zeros(3) for n in names}
        self.total = 0.0

    def add(self, weight: np.ndarray, results: dict) -> None:
        self.total += float(weight.sum())
        for name, (m1, m2) in results.items():
            m1 = np.broadcast_to(m1, weight.shape)
            m2 = np.broadcast_to(m2, weight.shape)
            self.sums[name] += [np.sum(weight * m1), np.sum(weight * m2), np.sum(weight * m1 * m1)]

    def records(self) -> dict[str, EstimateRecord]:
        out = {}
        for name, (a1, a2, a11) in self.sums.items():
            mean, ex2, emean2 = a1 / self.total, a2 / self.total, a11 / self.total
            th, qu = ex2 - emean2, emean2 - mean * mean
            out[name] = EstimateRecord(mean, th, qu, th + qu, 0.0, 0, "quadrature", ex2, emean2)
        return out


def quadrature_plan(setup: Setup, grid: QuadratureGrid) -> dict:
    """Dimensions and node counts of the quadrature, without evaluating it."""
    N = setup.N
    ch = setup.channel
    base_dims = ch.n_observations(N) if ch.is_gaussian else 0
    lam = setup.lam
    gauss_dims = 0 if lam is None or np.all(lam.gauss_lambdas == 0) else N * lam.gauss_lambdas.size
    patterns, P_max, dropped = count_patterns(setup, grid)
    n_pairs = 0 if lam is None else int(np.count_nonzero(lam.channel_lambdas)) * N
    exp_dims = min(P_max, n_pairs)
    n_labels = 2**ch.M if ch.kind == "perceptron_sign" else 1
    nodes = 0
    for p in patterns:
        h, l = grid.orders_for(p.mass)
        nodes += (n_labels if not ch.is_gaussian else h**base_dims) * h**gauss_dims * l ** p.counts.size
    return {
        "dimension": base_dims + gauss_dims + exp_dims,
        "base_dims": base_dims,
        "gauss_dims": gauss_dims,
        "exp_dims": exp_dims,
        "poisson_cap": P_max,
        "dropped_mass": dropped,
        "patterns": patterns,
        "nodes": nodes,
    }


def _quadrature(setup: Setup, observables: Mapping[str, Observable], grid: QuadratureGrid, chunk: int) -> dict:
    plan = quadrature_plan(setup, grid)
    if plan["dimension"] > grid.max_dimension:
        raise QuadratureError(
            f"quadrature needs {plan['dimension']} continuous noise dimensions (limit "
            f"{grid.max_dimension}); use the monte_carlo strategy instead"
        )
    if plan["nodes"] > grid.max_nodes:
        raise QuadratureError(
            f"quadrature needs {plan['nodes']} nodes (limit {grid.max_nodes}); lower the "
            "quadrature orders or use the monte_carlo strategy"
        )
    configs = enumerate_configurations(setup.prior)
    signals = configs
    C = configs.shape[0]
    pot = configuration_potential(setup.prior, configs)
    log_prior = setup.prior.log_prob(signals)
    factors: dict[int, tuple] = {}

    def base_gauss(order: int):
        # base x Gaussian node factor, built once per Hermite order
        if order not in factors:
            base = _base_nodes(setup, configs, order)
            gauss = _gauss_nodes(setup, configs, order)
            if gauss is None:
                gauss = NodeSet(None, np.ones(1), np.zeros((1, C)), np.zeros((1, C)))
            factors[order] = (base, gauss)
        return factors[order]

    groups: dict[tuple[int, int], list[CountPattern]] = {}
    for pat in plan["patterns"]:
        groups.setdefault(grid.orders_for(pat.mass), []).append(pat)
    acc = _Accumulator(observables)
    for (h_order, l_order), pats in sorted(groups.items(), reverse=True):
        base, gauss = base_gauss(h_order)
        ex = _exp_factor(setup, configs, signals, pats, l_order)
        nb, ng, ne = base.size, gauss.size, ex.size
        total = nb * ng * ne
        step = max(1, chunk // (C * C * max(ex.sums.shape[1], 1)))
        for start in range(0, total, step):
            flat = np.arange(start, min(total, start + step))
            bg, ei = np.divmod(flat, ne)
            b, g = np.divmod(bg, ng)
            base_ll = pot[None, :] + base.ll[b]
            ll = base_ll + gauss.ll[g] + ex.ll[ei]
            log_Z = special.logsumexp(ll, axis=1)
            post = np.exp(ll - log_Z[:, None])
            with np.errstate(divide="ignore"):
                logw = (
                    log_prior[None, :]
                    + base.log_ratio[b]
                    + gauss.log_ratio[g]
                    + ex.log_ratio[ei]
                    + np.log(base.weights[b] * gauss.weights[g] * ex.weights[ei])[:, None]
                )
            weight = np.exp(logw)
            batch = DisorderBatch(
                configs,
                post,
                log_Z,
                special.logsumexp(base_ll, axis=1),
                signals,
                weight,
                setup,
                gauss_y=None if gauss.values is None else gauss.values[g],
                exp_sites=ex.sites[ei],
                exp_channels=ex.channels[ei],
                exp_counts=ex.counts[ei],
                exp_sums=ex.sums[ei],
            )
            acc.add(weight, {name: fn(batch) for name, fn in observables.items()})
    recs = acc.records()
    for r in recs.values():
        r.n = plan["nodes"]
    return recs


# --------------------------------------------------------------------------
# Monte Carlo over disorder


def realization_seeds(seed: int, R: int) -> list[int]:
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(R)]


def draw_realization(setup: Setup, seed: int):
    """Planted instance and side-channel draw for one disorder seed."""
    s_inst, s_pert = realization_seeds(seed, 2)
    inst = mz.plant(setup.prior, setup.channel, s_inst)
    pert = None
    if setup.lam is not None:
        pert = pt.sample_perturbation(inst.signal, setup.lam, setup.schedules, s_pert)
    return inst, pert


def realization_batch(setup: Setup, inst, pert, weight: float = 1.0) -> DisorderBatch:
    handle = build_posterior(inst, pert, "exact_enum")
    configs = handle.configs
    base_lw = configuration_potential(setup.prior, configs) + mz.base_log_likelihood(configs, inst.data, inst.channel)
    kw = {}
    if pert is not None:
        y = pt.gaussian_observations(pert, inst.signal).reshape(setup.N, -1)
        kw["gauss_y"] = y[None]
        yexp = pt.exponential_observations(pert, inst.signal)
        key = pert.obs_channel * setup.N + pert.obs_site
        uniq, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
        sums = np.bincount(inv, weights=yexp, minlength=uniq.size) if uniq.size else np.zeros(0)
        kw.update(
            exp_sites=(uniq % setup.N).astype(np.int64)[None, :],
            exp_channels=(uniq // setup.N).astype(np.int64)[None, :],
            exp_counts=counts.astype(np.int64)[None, :],
            exp_sums=sums[None, :],
        )
    return DisorderBatch(
        configs,
        handle.probabilities[None, :],
        np.array([handle.log_partition]),
        np.array([special.logsumexp(base_lw)]),
        inst.signal[None, :],
        np.array([[weight]]),
        setup,
        **kw,
    )


_WORKER_TASK: tuple | None = None


def _set_worker_task(setup, observables) -> None:
    global _WORKER_TASK
    _WORKER_TASK = (setup, observables)


def _mc_chunk(seeds):
    setup, observables = _WORKER_TASK
    out = []
    for s in seeds:
        inst, pert = draw_realization(setup, s)
        batch = realization_batch(setup, inst, pert)
        res = {}
        for name, fn in observables.items():
            m1, m2 = fn(batch)
            res[name] = (float(np.ravel(m1)[0]), float(np.ravel(m2)[0]))
        out.append(res)
    return out


def _monte_carlo(setup: Setup, observables: Mapping[str, Observable], mc: MonteCarlo) -> dict:
    seeds = realization_seeds(mc.seed, mc.R)
    if mc.jobs > 1:
        import multiprocessing
        from concurrent.futures import ProcessPoolExecutor

        # fork hands the (possibly closure-valued) observables to the workers
        # without pickling them
        ctx = multiprocessing.get_context("fork")
        parts = [seeds[j :: mc.jobs] for j in range(mc.jobs)]
        with ProcessPoolExecutor(mc.jobs, mp_context=ctx, initializer=_set_worker_task, initargs=(setup, dict(observables))) as ex:
            chunks = list(ex.map(_mc_chunk, parts))
        # restore realization order so the reduction does not depend on scheduling
        per = [None] * mc.R
        for j, ch in enumerate(chunks):
            for t, r in enumerate(ch):
                per[j + t * mc.jobs] = r
    else:
        _set_worker_task(setup, dict(observables))
        per = _mc_chunk(seeds)
    recs = {}
    for name in observables:
        first = Moments.of([r[name][0] for r in per])
        second = Moments.of([r[name][1] for r in per])
        mean = first.mean
        ex2 = second.mean
        emean2 = first.sumsq / first.count
        th, qu = ex2 - emean2, emean2 - mean * mean
        se = float(np.sqrt(first.variance / first.count)) if first.count > 1 else 0.0
        recs[name] = EstimateRecord(mean, th, qu, th + qu, se, mc.R, "monte_carlo", ex2, emean2)
    return recs


def quenched_moments(
    setup: Setup,
    observables: Mapping[str, Observable],
    strategy="quadrature",
    grid: QuadratureGrid | None = None,
    chunk: int = 4_000_000,
) -> dict[str, EstimateRecord]:
    if isinstance(strategy, MonteCarlo):
        return _monte_carlo(setup, observables, strategy)
    if strategy != "quadrature":
        raise QuadratureError(f"unknown strategy {strategy!r}")
    return _quadrature(setup, observables, grid or QuadratureGrid(), chunk)


def quenched_average(setup, pert_cfg=None, observable: Observable = None, strategy="quadrature", seed: int = 0, grid=None) -> EstimateRecord:
    """E<X> with thermal, quenched and total variance.

    ``setup`` may be a Setup or a model config dict (then ``pert_cfg`` is the
    perturbation config).  A Monte Carlo strategy without its own seed uses
    ``seed``.
    """
    if not isinstance(setup, Setup):
        setup = setup_from_config(setup, pert_cfg)
    if isinstance(strategy, MonteCarlo) and strategy.seed == 0 and seed:
        strategy = MonteCarlo(strategy.R, seed, strategy.jobs)
    return quenched_moments(setup, {"x": observable}, strategy, grid)["x"]


def free_entropy_observable(batch: DisorderBatch):
    return batch.log_Z[:, None], batch.log_Z[:, None] ** 2


def quenched_free_entropy(setup: Setup, strategy="quadrature", grid=None) -> EstimateRecord:
    """E ln Z and its quenched variance."""
    return quenched_moments(setup, {"F": free_entropy_observable}, strategy, grid)["F"]
