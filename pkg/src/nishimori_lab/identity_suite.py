"""Residual tests and bound checks for the replica identities and concentration results.

Exact checks run through the quadrature strategy; concentration trends run
independent MCMC chains over many disorder draws.  Every check returns a
``ResidualReport`` whose pass flag is recomputable from its fields:
``|residual| <= bound + 3 se``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from . import observables as ob
from . import perturbation as pt
from .posterior_engine import build_posterior, mcmc_sample
from .quenched import (
    EstimateRecord,
    MonteCarlo,
    Setup,
    draw_realization,
    gamma_laguerre_rule,
    quenched_free_entropy,
    quenched_moments,
    realization_seeds,
)

EXACT_TOL = 1e-10


class IdentityError(ValueError):
    pass


@dataclass
class ResidualReport:
    name: str
    residual: float
    bound: float | None
    se: float = 0.0
    N: int = 0
    observable: str = ""
    record: EstimateRecord | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.se < 0:
            raise IdentityError("standard error must be nonnegative")

    @property
    def passed(self) -> bool:
        if self.bound is None:
            return True
        return bool(abs(self.residual) <= self.bound + 3.0 * self.se)

    def row(self) -> dict:
        rec = self.record
        return {
            "test": self.name,
            "N": self.N,
            "observable": self.observable,
            "estimate": self.residual,
            "thermal_var": rec.thermal_var if rec else "",
            "quenched_var": rec.quenched_var if rec else "",
            "total_var": rec.total_var if rec else "",
            "se": self.se,
            "bound": "" if self.bound is None else self.bound,
            "pass": self.passed,
        }


def _is_exact(strategy) -> bool:
    return not isinstance(strategy, MonteCarlo)


def _tolerance(strategy, tol: float = EXACT_TOL) -> float:
    return tol if _is_exact(strategy) else 0.0


# --------------------------------------------------------------------------
# Nishimori


def _replica_pair(n: int):
    """(signal form, replica form) of R_{1..n}: the last replica is swapped for the signal."""
    return ob.replica_overlap((1,) * n, star=True), ob.replica_overlap((1,) * n)


NISHIMORI_FAMILY: dict[str, Callable[[], tuple]] = {
    "R1": lambda: (ob.signal_magnetisation(), ob.magnetisation()),
    "R12": lambda: _replica_pair(2),
    "R123": lambda: _replica_pair(3),
    "spin_pair": lambda: (ob.spin_product(0, 1, star=True), ob.spin_product(0, 1)),
    "spin_pair_single": lambda: (
        ob.spin_product(0, 1, across_replicas=False, star=True),
        ob.spin_product(0, 1, across_replicas=False),
    ),
}


def _nishimori_pair(setup: Setup, f: str, n: int | None = None):
    if f == "R" and n is not None:
        return _replica_pair(int(n))
    if f not in NISHIMORI_FAMILY:
        raise IdentityError(f"unregistered Nishimori test function {f!r}")
    if f.startswith("spin_pair") and setup.N < 2:
        raise IdentityError("spin-pair tests need N >= 2")
    return NISHIMORI_FAMILY[f]()


def _diff_observable(star, plain):
    def diff(batch):
        d = star(batch)[0] - plain(batch)[0]
        return d, d * d

    return diff


def nishimori_residuals(setup: Setup, fs: Sequence[str] | None = None, strategy="quadrature", grid=None) -> list[ResidualReport]:
    """E<f(sigma*, sigma^2, ...)> - E<f(sigma^1, sigma^2, ...)> for several f in one pass.

    Defaults to the whole registered family (spin pairs only when N >= 2).
    """
    if fs is None:
        fs = [f for f in NISHIMORI_FAMILY if setup.N >= 2 or not f.startswith("spin_pair")]
    obs = {f: _diff_observable(*_nishimori_pair(setup, f)) for f in fs}
    rec = quenched_moments(setup, obs, strategy, grid)
    return [ResidualReport("nishimori", rec[f].mean, _tolerance(strategy), rec[f].se, setup.N, f, rec[f]) for f in fs]


def nishimori_residual(setup: Setup, f: str = "R12", n: int | None = None, strategy="quadrature", grid=None) -> ResidualReport:
    """E<f(sigma*, sigma^2, ...)> - E<f(sigma^1, sigma^2, ...)>; f = "R" with ``n`` picks R_{1..n}."""
    rec = quenched_moments(setup, {"d": _diff_observable(*_nishimori_pair(setup, f, n))}, strategy, grid)["d"]
    name = f"R{n}" if f == "R" and n is not None else f
    return ResidualReport("nishimori", rec.mean, _tolerance(strategy), rec.se, setup.N, name, rec)


# --------------------------------------------------------------------------
# Magnetisation, variance split, Gaussian-channel identities


def magnetisation_bound_check(setup: Setup, strategy="quadrature", grid=None) -> ResidualReport:
    """Var(R_1) against 1/N."""
    rec = quenched_moments(setup, {"R1": ob.magnetisation()}, strategy, grid)["R1"]
    return ResidualReport("magnetisation_bound", rec.total_var, 1.0 / setup.N, rec.se, setup.N, "R:1", rec)


def variance_decomposition(setup: Setup, observable, strategy="quadrature", grid=None, name: str = "X") -> ResidualReport:
    """Thermal and quenched parts against the directly computed total variance."""
    rec = quenched_moments(setup, {"x": observable}, strategy, grid)["x"]
    total_direct = rec.second_moment - rec.mean**2
    resid = rec.thermal_var + rec.quenched_var - total_direct
    rep = ResidualReport("variance_decomposition", resid, _tolerance(strategy), rec.se, setup.N, name, rec)
    rep.details = {"thermal": rec.thermal_var, "quenched": rec.quenched_var, "total": rec.total_var}
    return rep


def _gaussian_required(setup: Setup) -> None:
    if setup.lam is None or np.all(setup.lam.gauss_lambdas == 0):
        raise IdentityError("this check needs an active Gaussian side channel")


def _L(batch):
    return ob.L_gauss_values(batch, 0)


def _R1star(batch):
    return ob.signal_overlap_values(batch)


def gaussian_channel_moments(setup: Setup, grid=None) -> dict[str, EstimateRecord]:
    """One quadrature pass collecting everything the Gaussian-channel identities need."""
    _gaussian_required(setup)
    return quenched_moments(
        setup,
        {
            "L": ob.config_observable(_L),
            "R12": ob.replica_overlap((1, 1)),
            "R1s": ob.config_observable(_R1star),
            "R1sL": ob.product_observable(_R1star, _L),
        },
        "quadrature",
        grid,
    )


def derivative_identity(setup: Setup, grid=None, moments=None, tol: float = 1e-8) -> ResidualReport:
    """N E<L> - (N/2) E<R_12>; L is the lambda0 derivative of the Gaussian Hamiltonian over N."""
    m = moments or gaussian_channel_moments(setup, grid)
    N = setup.N
    resid = N * m["L"].mean - 0.5 * N * m["R12"].mean
    rep = ResidualReport("derivative_identity", resid, tol, 0.0, N, "Lgauss")
    rep.details = {"lhs": N * m["L"].mean, "rhs": 0.5 * N * m["R12"].mean}
    return rep


def signal_overlap_identity(setup: Setup, grid=None, moments=None, tol: float = 1e-8) -> tuple[ResidualReport, ResidualReport]:
    """2 E<R_1*(L - E<L>)> = Var(R_1*) + E<(R_1* - <R_1*>)^2>, and Var(R_1*) = Var(R_12).

    The covariance is taken with a plus sign; with a minus sign the left side
    is the negative of a sum of variances.
    """
    m = moments or gaussian_channel_moments(setup, grid)
    cov = m["R1sL"].mean - m["R1s"].mean * m["L"].mean
    rhs = m["R1s"].total_var + m["R1s"].thermal_var
    a = ResidualReport("signal_overlap_identity", 2 * cov - rhs, tol, 0.0, setup.N, "R:1,*")
    a.details = {"lhs": 2 * cov, "rhs": rhs, "lhs_negated_form": -2 * cov}
    b = ResidualReport(
        "signal_overlap_variance", m["R1s"].total_var - m["R12"].total_var, tol, 0.0, setup.N, "R:1,*", m["R1s"]
    )
    return a, b


def overlap_L_inequality(setup: Setup, grid=None, moments=None) -> ResidualReport:
    """Var(R_12) against 4 Var(L), both total variances."""
    m = moments or gaussian_channel_moments(setup, grid)
    rep = ResidualReport("overlap_L_inequality", m["R12"].total_var, 4 * m["L"].total_var, 0.0, setup.N, "R:1,2", m["R12"])
    return rep


def thermal_L_bound_check(setup: Setup, n_draws: int = 8, seed: int = 0, grid=None) -> ResidualReport:
    """lambda0-averaged thermal variance of L against (4 + ln 2)/(2 N eps_N)."""
    _gaussian_required(setup)
    lam = setup.lam
    los = pt.stratified_lambdas(lam.K_max, lam.mode, n_draws, seed)
    vals = []
    for draw in los:
        s = setup.with_lambda(lam.with_lambda0(draw.lambda0))
        vals.append(quenched_moments(s, {"L": ob.config_observable(_L)}, "quadrature", grid)["L"].thermal_var)
    bound = (4 + np.log(2)) / (2 * setup.N * setup.schedules.eps_N)
    rep = ResidualReport("thermal_L_bound", float(np.mean(vals)), bound, 0.0, setup.N, "Lgauss")
    rep.details = {"per_draw": vals}
    return rep


# --------------------------------------------------------------------------
# Exponential channel


def derivative_bound_checks(setup: Setup, k: int = 1, strategy="quadrature", grid=None) -> list[ResidualReport]:
    """|E<H'_k>| <= 6 s_N, |E<H''_k>| <= 20 s_N and the free-entropy gap bound.

    ``k`` is 1-based.  The gap compares ln Z with and without side channels on
    the same disorder.
    """
    if setup.lam is None:
        raise IdentityError("derivative checks need a perturbation")
    kk = k - 1

    def gap(batch):
        v = (batch.log_Z - batch.log_Z_base)[:, None]
        return v, v * v

    rec = quenched_moments(
        setup,
        {"d1": ob.exp_derivative(kk, 1), "d2": ob.exp_derivative(kk, 2), "gap": gap},
        strategy,
        grid,
    )
    s_N, eps, N = setup.schedules.s_N, setup.schedules.eps_N, setup.N
    return [
        ResidualReport("exp_first_derivative_bound", rec["d1"].mean, 6 * s_N, rec["d1"].se, N, f"Lexp:{k}", rec["d1"]),
        ResidualReport("exp_second_derivative_bound", rec["d2"].mean, 20 * s_N, rec["d2"].se, N, f"Lexp:{k}", rec["d2"]),
        ResidualReport("free_entropy_gap", rec["gap"].mean / N, eps / 2 + 6 * s_N / N, rec["gap"].se / N, N, "F", rec["gap"]),
    ]


def measure_v_N(setup: Setup, n_draws: int = 16, seed: int = 0, grid=None, strategy="quadrature") -> float:
    """Max over Latin-hypercube lambda draws of Var(ln Z), divided by N.

    Components switched off in ``setup`` (set to zero) stay off.
    """
    lam = setup.lam
    draws = pt.stratified_lambdas(lam.K_max, lam.mode, n_draws, seed)
    best = 0.0
    for d in draws:
        g = np.where(lam.gauss_lambdas == 0, 0.0, d.gauss_lambdas)
        c = np.where(lam.channel_lambdas == 0, 0.0, d.channel_lambdas)
        s = setup.with_lambda(lam.with_lambda0(g if lam.mode == "soft" else g[0]).with_channels(c))
        best = max(best, quenched_free_entropy(s, strategy, grid).quenched_var)
    return best / setup.N


def fds_bound(k: int, s_N: float, v_N: float, N: int) -> float:
    return float(np.sqrt((2e3 + 2.0 ** (k + 6)) / s_N + 4e4 * (v_N * N / s_N**2) ** (1.0 / 3.0)))


def fds_observables(k: int, f: str, xi_order: int = 20):
    """Observables for the two FdS terms and <f>, averaged over a uniform site and a fresh Exp(1) noise.

    ``k`` is the 0-based channel index.
    """
    if f not in ("1", "R12"):
        raise IdentityError(f"unsupported FdS test function {f!r}")
    xs, ws = gamma_laguerre_rule(xi_order, 1)

    def terms(batch):
        key = ("fds", k, f, xi_order)
        if key in batch._cache:
            return batch._cache[key]
        if np.max(np.abs(batch.configs)) > 1:
            raise IdentityError("|f_n| <= 1 requires spins in [-1, 1]")
        lam = batch.setup.lam.channel_lambdas[k]
        mode = batch.setup.lam.mode
        values = batch.setup.prior.support
        onehot = (batch.configs[:, :, None] == values[None, None, :]).astype(float)  # (C, N, V)
        P = np.einsum("bc,civ->biv", batch.post, onehot)
        uv = pt.channel_transform(mode, values, k)  # (V,)
        us = pt.channel_transform(mode, batch.signals, k)  # (S, N)
        if f == "R12":
            J = np.einsum("bc,cj,civ->bjiv", batch.post, batch.configs, onehot)
            G = np.einsum("bjiu,bjiv->biuv", J, J)
        scale = 1.0 / (1.0 + lam * us)  # (S, N)
        y = xs[:, None, None] * scale[None]  # (X, S, N)
        E = (1.0 + lam * uv) * np.exp(-lam * y[..., None] * uv)  # (X, S, N, V)
        DE = (y * scale)[..., None] * uv * E
        t1 = np.empty(batch.weight.shape)
        t2 = np.empty(batch.weight.shape)
        step = max(1, 2_000_000 // E[..., 0].size)
        for lo in range(0, P.shape[0], step):
            blk = slice(lo, lo + step)
            Z0 = np.einsum("biv,xsiv->bxsi", P[blk], E, optimize=True)
            second = np.einsum("biv,xsiv->bxsi", P[blk], DE, optimize=True) / Z0
            t2[blk] = np.einsum("x,bxsi->bs", ws, second, optimize=True) / batch.N
            if f == "1":
                t1[blk] = t2[blk]
            else:
                pair = DE[..., :, None] * E[..., None, :]  # (X, S, N, V, V)
                first = np.einsum("biuv,xsiuv->bxsi", G[blk], pair, optimize=True) / (batch.N * Z0**2)
                t1[blk] = np.einsum("x,bxsi->bs", ws, first, optimize=True) / batch.N
        batch._cache[key] = (t1, t2)
        return t1, t2

    def first_term(batch):
        t1 = terms(batch)[0]
        return np.broadcast_to(t1, batch.weight.shape), np.broadcast_to(t1 * t1, batch.weight.shape)

    def second_term(batch):
        t2 = terms(batch)[1]
        return np.broadcast_to(t2, batch.weight.shape), np.broadcast_to(t2 * t2, batch.weight.shape)

    f_obs = (lambda b: (np.ones_like(b.weight), np.ones_like(b.weight))) if f == "1" else ob.replica_overlap((1, 1))
    return {"T1": first_term, "T2": second_term, "f": f_obs}


def fds_residual(
    setup: Setup,
    f: str = "R12",
    k: int = 1,
    lambda_draws: Sequence[pt.LambdaVector] | int = 4,
    seed: int = 0,
    grid=None,
    v_N: float | None = None,
    v_draws: int = 16,
    xi_order: int = 20,
) -> ResidualReport:
    """lambda-average of |E T1 - E<f> E T2| against the explicit bound.

    ``k`` is 1-based.  Components switched off in ``setup`` stay off in every
    lambda draw.
    """
    if setup.lam is None:
        raise IdentityError("FdS residual needs a perturbation")
    lam = setup.lam
    kk = k - 1
    if lam.channel_lambdas[kk] == 0:
        raise IdentityError(f"channel {k} is switched off")
    if isinstance(lambda_draws, int):
        lambda_draws = pt.stratified_lambdas(lam.K_max, lam.mode, lambda_draws, seed)
    per = []
    for d in lambda_draws:
        g = np.where(lam.gauss_lambdas == 0, 0.0, d.gauss_lambdas)
        c = np.where(lam.channel_lambdas == 0, 0.0, d.channel_lambdas)
        s = setup.with_lambda(lam.with_lambda0(g if lam.mode == "soft" else g[0]).with_channels(c))
        r = quenched_moments(s, fds_observables(kk, f, xi_order), "quadrature", grid)
        per.append(r["T1"].mean - r["f"].mean * r["T2"].mean)
    if v_N is None:
        v_N = measure_v_N(setup, v_draws, seed, grid)
    bound = fds_bound(k, setup.schedules.s_N, v_N, setup.N)
    rep = ResidualReport("fds_residual", float(np.mean(np.abs(per))), bound, 0.0, setup.N, f"fds:{f}:{k}")
    rep.details = {"per_draw": per, "v_N": v_N}
    return rep


# --------------------------------------------------------------------------
# Decoupling


def decoupling_residual(setup: Setup, h: Sequence[Callable] | None = None, sites: Sequence[int] = (0, 1), strategy="quadrature", grid=None) -> ResidualReport:
    """|E<prod_j h_j(sigma_{i_j})> - prod_j E<h_j(sigma_{i_j})>|."""
    sites = tuple(int(s) for s in sites)
    if len(set(sites)) != len(sites):
        raise IdentityError("decoupling sites must be distinct")
    h = list(h) if h is not None else [lambda x: x] * len(sites)
    if len(h) != len(sites):
        raise IdentityError("one function per site")
    obs = {"joint": ob.config_observable(lambda b: np.prod([hj(b.configs[:, s]) for hj, s in zip(h, sites)], axis=0)[None, None, :])}
    for j, (hj, s) in enumerate(zip(h, sites)):
        obs[f"m{j}"] = ob.config_observable(lambda b, hj=hj, s=s: hj(b.configs[:, s])[None, None, :])
    rec = quenched_moments(setup, obs, strategy, grid)
    prod = float(np.prod([rec[f"m{j}"].mean for j in range(len(sites))]))
    resid = abs(rec["joint"].mean - prod)
    return ResidualReport("decoupling", resid, _tolerance(strategy), rec["joint"].se, setup.N, "decoupling", rec["joint"])


# --------------------------------------------------------------------------
# Concentration scans


@dataclass
class ScanRow:
    N: int
    observable: str
    total_var: float
    se: float
    v_N: float | None = None
    shape: float | None = None
    oracle: float | None = None
    oracle_se: float | None = None


def overlap_concentration_scan(
    setup_for_N: Callable[[int], Setup],
    N_values: Sequence[int],
    lambda_draws: int = 8,
    seed: int = 0,
    grid=None,
    powers=(1, 1),
    measure_v: bool = False,
) -> list[ScanRow]:
    """Quadrature scan of the lambda0-averaged total variance of an overlap.

    The reference shape (v_N/(N eps_N) + 1/N)^(1/3)/eps_N is reported when
    ``measure_v`` is set; the unknown constant is not.
    """
    rows = []
    for N in N_values:
        base = setup_for_N(N)
        obs = ob.replica_overlap(powers)
        vals = []
        if base.lam is None:
            vals.append(quenched_moments(base, {"x": obs}, "quadrature", grid)["x"].total_var)
        else:
            for d in pt.stratified_lambdas(base.lam.K_max, base.lam.mode, lambda_draws, seed):
                s = base.with_lambda(base.lam.with_lambda0(d.lambda0))
                vals.append(quenched_moments(s, {"x": obs}, "quadrature", grid)["x"].total_var)
        row = ScanRow(N, _overlap_name(powers), float(np.mean(vals)), 0.0)
        if measure_v and base.lam is not None:
            row.v_N = measure_v_N(base, 16, seed, grid)
            eps = base.schedules.eps_N
            row.shape = (row.v_N / (N * eps) + 1.0 / N) ** (1.0 / 3.0) / eps
        rows.append(row)
    return rows


def _overlap_name(powers) -> str:
    if all(k == 1 for k in powers):
        return "R:" + ",".join(str(i + 1) for i in range(len(powers)))
    return "Rk:" + "".join(f"({k})" for k in powers)


def nonincreasing(values: Sequence[float], ses: Sequence[float], n_se: float = 3.0) -> bool | None:
    """Each consecutive value is at most the previous one plus n_se combined SEs; None for one value."""
    if len(values) < 2:
        return None
    return all(
        values[j + 1] <= values[j] + n_se * np.hypot(ses[j], ses[j + 1]) for j in range(len(values) - 1)
    )


def jackknife(stat: Callable[[np.ndarray], float], data: np.ndarray) -> tuple[float, float]:
    """Statistic over realizations (rows of ``data``) and its delete-one jackknife SE."""
    n = data.shape[0]
    full = stat(data)
    if n < 2:
        return full, 0.0
    loo = np.array([stat(np.delete(data, r, axis=0)) for r in range(n)])
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return full, float(se)


def stratified_total_variance(m1: np.ndarray, m2: np.ndarray, strata: np.ndarray) -> float:
    """Average over strata of E<X^2> - (E<X>)^2, with the squared mean debiased."""
    out = []
    for s in np.unique(strata):
        a, b = m1[strata == s], m2[strata == s]
        n = a.size
        sq = a.mean() ** 2 - (a.var(ddof=1) / n if n > 1 else 0.0)
        out.append(b.mean() - sq)
    return float(np.mean(out))


def stratified_decoupling(joint: np.ndarray, marg: np.ndarray, strata: np.ndarray) -> float:
    """Average over strata of |E<prod h> - prod E<h>|.

    The plain |sample difference| is biased upward by the sampling noise of a
    stratum, a bias that grows as per-realization brackets spread out.  Each
    stratum therefore uses sqrt(max(D^2 - Var_jk(D), 0)).
    """
    out = []
    for s in np.unique(strata):
        sel = strata == s
        j, m = joint[sel], marg[sel]
        d = j.mean() - np.prod(m.mean(axis=0))
        n = j.size
        if n > 1:
            loo = np.array(
                [np.delete(j, r).mean() - np.prod(np.delete(m, r, axis=0).mean(axis=0)) for r in range(n)]
            )
            var = (n - 1) / n * np.sum((loo - loo.mean()) ** 2)
            d = np.sqrt(max(d * d - var, 0.0))
        out.append(abs(d))
    return float(np.mean(out))


@dataclass
class ChainSettings:
    L: int = 8
    sweeps: int = 400
    burn_in: int = 200
    thin: int = 2


def _tuple_overlap_moments(reps: np.ndarray, powers) -> tuple[float, float]:
    """Mean of R and R^2 over distinct chain tuples and recorded times; reps is (T, L, N)."""
    n = len(powers)
    T, L, N = reps.shape
    vals = []
    for tup in itertools.combinations(range(L), n):
        r = np.ones((T, N))
        for c, k in zip(tup, powers):
            r = r * reps[:, c, :] ** k
        vals.append(r.mean(-1))
    v = np.concatenate(vals)
    return float(v.mean()), float(np.mean(v * v))


def _exact_overlap_moments(handle, powers) -> tuple[float, float]:
    p, cfg = handle.probabilities, handle.configs
    N = cfg.shape[1]
    m1 = np.ones(N)
    m2 = np.ones((N, N))
    for k in powers:
        sk = cfg**k
        m1 = m1 * (p @ sk)
        m2 = m2 * np.einsum("c,ci,cj->ij", p, sk, sk)
    return float(m1.sum() / N), float(m2.sum() / N**2)


def _realization_work(args):
    """Per-realization chain estimates (and exact ones when requested)."""
    setup, seed, lam, settings, overlaps, sites, exact = args
    s = setup.with_lambda(lam)
    inst, pert = draw_realization(s, seed)
    h = build_posterior(inst, pert, "mcmc")
    batch = mcmc_sample(h, settings.L, settings.sweeps, settings.burn_in, settings.thin, seed)
    reps = batch.replicas
    out = {"acceptance": float(batch.acceptance_rate.mean()), "ess": float(batch.effective_sample_size.mean())}
    for pw in overlaps:
        out[("mc", pw)] = _tuple_overlap_moments(reps, pw)
    flat = reps.reshape(-1, reps.shape[-1])
    out[("mc", "dec")] = (float(np.mean(np.prod(flat[:, list(sites)], axis=1))), *[float(flat[:, i].mean()) for i in sites])
    if exact:
        he = build_posterior(inst, pert, "exact_enum")
        for pw in overlaps:
            out[("exact", pw)] = _exact_overlap_moments(he, pw)
        p, cfg = he.probabilities, he.configs
        out[("exact", "dec")] = (float(p @ np.prod(cfg[:, list(sites)], axis=1)), *[float(p @ cfg[:, i]) for i in sites])
    return out


def mcmc_concentration_sweep(
    setup_for_N: Callable[[int], Setup],
    N_values: Sequence[int],
    R: int = 64,
    lambda_draws: int = 8,
    settings: ChainSettings | None = None,
    overlaps: Sequence[tuple[int, ...]] = ((1, 1), (1, 1, 1)),
    sites: tuple[int, int] = (0, 1),
    seed: int = 0,
    exact_at: Sequence[int] = (),
    jobs: int = 1,
) -> dict:
    """lambda-averaged total variances of overlaps and decoupling residuals over an N grid.

    Realization r uses lambda draw r mod ``lambda_draws``; averages are
    stratified by draw.  For N in ``exact_at`` the same realizations are also
    enumerated exactly and the chain estimate is compared with that oracle.
    """
    settings = settings or ChainSettings()
    if any(len(pw) > settings.L for pw in overlaps):
        raise IdentityError(f"L = {settings.L} chains cannot form the requested replica tuples")
    out = {"rows": [], "oracle": []}
    for N in N_values:
        base = setup_for_N(N)
        lams = pt.stratified_lambdas(base.lam.K_max, base.lam.mode, lambda_draws, seed + N)
        seeds = realization_seeds(seed * 1000 + N, R)
        exact = N in exact_at
        work = [(base, seeds[r], lams[r % lambda_draws], settings, tuple(overlaps), sites, exact) for r in range(R)]
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(jobs) as ex:
                results = list(ex.map(_realization_work, work))
        else:
            results = [_realization_work(w) for w in work]
        strata = np.arange(R) % lambda_draws
        for pw in overlaps:
            name = _overlap_name(pw)
            mc = np.array([r[("mc", pw)] for r in results])
            data = np.column_stack([mc, strata])
            tv, se = jackknife(lambda d: stratified_total_variance(d[:, 0], d[:, 1], d[:, 2]), data)
            row = ScanRow(N, name, tv, se)
            if exact:
                ex_ = np.array([r[("exact", pw)] for r in results])
                d2 = np.column_stack([mc, ex_, strata])
                ev, _ = jackknife(lambda d: stratified_total_variance(d[:, 2], d[:, 3], d[:, 4]), d2)
                diff, dse = jackknife(
                    lambda d: stratified_total_variance(d[:, 0], d[:, 1], d[:, 4])
                    - stratified_total_variance(d[:, 2], d[:, 3], d[:, 4]),
                    d2,
                )
                row.oracle, row.oracle_se = ev, dse
                out["oracle"].append({"N": N, "observable": name, "mcmc": tv, "exact": ev, "diff": diff, "se": dse})
            out["rows"].append(row)
        dec = np.array([r[("mc", "dec")] for r in results])
        data = np.column_stack([dec, strata])
        dv, dse = jackknife(lambda d: stratified_decoupling(d[:, 0], d[:, 1:-1], d[:, -1]), data)
        row = ScanRow(N, "decoupling", dv, dse)
        if exact:
            ed = np.array([r[("exact", "dec")] for r in results])
            d2 = np.column_stack([dec, ed, strata])
            k = dec.shape[1]
            ev, _ = jackknife(lambda d: stratified_decoupling(d[:, k], d[:, k + 1 : 2 * k], d[:, -1]), d2)
            diff, dse2 = jackknife(
                lambda d: stratified_decoupling(d[:, 0], d[:, 1:k], d[:, -1])
                - stratified_decoupling(d[:, k], d[:, k + 1 : 2 * k], d[:, -1]),
                d2,
            )
            row.oracle, row.oracle_se = ev, dse2
            out["oracle"].append({"N": N, "observable": "decoupling", "mcmc": dv, "exact": ev, "diff": diff, "se": dse2})
        out["rows"].append(row)
        out.setdefault("diagnostics", []).append(
            {"N": N, "acceptance": float(np.mean([r["acceptance"] for r in results])), "ess": float(np.mean([r["ess"] for r in results]))}
        )
    return out


def trend_verdicts(rows: Sequence[ScanRow]) -> dict[str, bool | None]:
    by: dict[str, list[ScanRow]] = {}
    for r in rows:
        by.setdefault(r.observable, []).append(r)
    return {
        name: nonincreasing([r.total_var for r in sorted(rs, key=lambda r: r.N)], [r.se for r in sorted(rs, key=lambda r: r.N)])
        for name, rs in by.items()
    }
