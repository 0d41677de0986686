"""Distribution diagnostics: entropy, coverage, chi-square divergence, and
concentrability coefficients of an MDP against a sampling distribution.

The coefficient conventions:
    c1  worst-case single-step density ratio sup_{s,a} max_{s'} p(s'|s,a)/mu(s')
    c(m) worst-case m-step distribution-shift ratio ||rho P_1 ... P_m / mu||
         over sequences of deterministic policies, under a sup norm or the
         mu-weighted 2-norm
    c2/c3 (1-gamma)^2 sum_m m gamma^(m-1) c(m) with the sup norm (c2) or the
         weighted norm (c3), truncated at m_max with a separate tail bound
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .mdp import DistributionSA, TabularMdp

__all__ = [
    "entropy",
    "coverage",
    "chi_square",
    "sup_ratio_norm",
    "weighted_ratio_norm",
    "c1_coefficient",
    "c_of_m",
    "c2_c3_coefficients",
    "ConcentrabilityReport",
    "adversary_payoff",
    "dirichlet_study",
    "DirichletAlphaRow",
    "ENUMERATION_BUDGET",
    "VERTEX_BUDGET",
]

ENUMERATION_BUDGET = 10_000_000
VERTEX_BUDGET = 100_000


def entropy(probs: np.ndarray) -> tuple[float, float]:
    """(raw, normalized) Shannon entropy of a distribution, 0*log0 = 0.

    Normalized by log of the support universe size (the array length), so
    1.0 means uniform over the universe.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    _check_dist(p)
    nz = p[p > 0]
    raw = float(-(nz * np.log(nz)).sum())
    norm = raw / np.log(p.size) if p.size > 1 else 1.0
    return raw, norm


def coverage(counts: np.ndarray) -> float:
    """Fraction of the count array's cells with at least one sample."""
    c = np.asarray(counts)
    if (c < 0).any():
        raise ValueError("counts must be nonnegative")
    return float((c > 0).mean())


def _check_dist(p: np.ndarray, atol: float = 1e-9):
    if (p < 0).any() or abs(p.sum() - 1.0) > atol:
        raise ValueError("expected a probability distribution")


def chi_square(beta: np.ndarray, mu: np.ndarray) -> float:
    """chi^2(beta || mu) = sum_{mu>0} mu * (beta/mu)^2 - 1.

    +inf when beta puts mass where mu has none.
    """
    b = np.asarray(beta, dtype=np.float64).ravel()
    m = np.asarray(mu, dtype=np.float64).ravel()
    if b.shape != m.shape:
        raise ValueError("beta and mu must have the same shape")
    _check_dist(b)
    _check_dist(m)
    if (b[m == 0] > 0).any():
        return float("inf")
    supp = m > 0
    return float((b[supp] ** 2 / m[supp]).sum() - 1.0)


def sup_ratio_norm(beta: np.ndarray, mu: np.ndarray) -> float:
    """max over cells of beta/mu (+inf if beta escapes mu's support)."""
    b, m = np.asarray(beta).ravel(), np.asarray(mu).ravel()
    if (b[m == 0] > 0).any():
        return float("inf")
    supp = m > 0
    return float((b[supp] / m[supp]).max())


def weighted_ratio_norm(beta: np.ndarray, mu: np.ndarray) -> float:
    """||beta/mu||_{2,mu} = sqrt(sum mu * (beta/mu)^2); equals
    sqrt(chi_square(beta||mu) + 1)."""
    b, m = np.asarray(beta).ravel(), np.asarray(mu).ravel()
    if (b[m == 0] > 0).any():
        return float("inf")
    supp = m > 0
    return float(np.sqrt((b[supp] ** 2 / m[supp]).sum()))


def c1_coefficient(mdp: TabularMdp, mu_states: np.ndarray) -> float:
    """sup_{s,a} max_{s'} p(s'|s,a) / mu(s'); +inf when a reachable next
    state has no mu mass."""
    mu = np.asarray(mu_states, dtype=np.float64)
    _check_dist(mu)
    p = mdp.transitions
    reach = p.max(axis=(0, 1))  # max incoming prob per next state
    if (reach[mu == 0] > 0).any():
        return float("inf")
    supp = mu > 0
    return float((p[:, :, supp] / mu[supp]).max())


def _deterministic_children(vertex: np.ndarray, transitions: np.ndarray,
                            n_actions: int):
    """All state-action distributions reachable from `vertex` in one step
    under some deterministic policy.

    The next-state marginal x is policy independent; a deterministic policy
    merely chooses, per state, which action receives x(s'). Only states
    with mass multiply the branching.
    """
    x = np.einsum("sa,sap->p", vertex, transitions)
    support = np.flatnonzero(x > 0)
    base = np.zeros_like(vertex)
    for combo in itertools.product(range(n_actions), repeat=support.size):
        child = base.copy()
        child[support, list(combo)] = x[support]
        yield child


def c_of_m(mdp: TabularMdp, rho: DistributionSA, mu: DistributionSA,
           m: int, norm: str = "sup") -> float:
    """Exact sup over length-m deterministic-policy sequences of
    ||rho P_1 ... P_m / mu|| under the chosen norm ("sup" or "weighted").

    m=0 compares rho to mu directly. Convexity of both norms puts the sup
    at a deterministic sequence, so enumeration (with dedup of reachable
    distributions per level) is exact. Guarded: raises "instance too
    large" once the distinct reachable distributions at any level exceed
    VERTEX_BUDGET.
    """
    if norm not in ("sup", "weighted"):
        raise ValueError(f"unknown norm {norm!r}")
    if m < 0:
        raise ValueError("m must be >= 0")
    norm_fn = sup_ratio_norm if norm == "sup" else weighted_ratio_norm

    # Enumeration cost is the count of distinct reachable distributions,
    # not the raw (n_actions)^(n_states * m) sequence count: absorbing
    # structure collapses the reachable set, so the budget is enforced on
    # actual vertices while levels are expanded.
    vertices = [rho.probs.copy()]
    for _ in range(m):
        seen: dict[bytes, np.ndarray] = {}
        for v in vertices:
            for child in _deterministic_children(v, mdp.transitions,
                                                 mdp.n_actions):
                key = child.round(12).tobytes()
                if key not in seen:
                    seen[key] = child
            if len(seen) > VERTEX_BUDGET:
                raise ValueError(
                    "instance too large for exact c(m): distinct reachable "
                    f"distributions exceed {VERTEX_BUDGET:.0e} "
                    f"(n_states={mdp.n_states}, n_actions={mdp.n_actions}, "
                    f"m={m})"
                )
        vertices = list(seen.values())
    return max(norm_fn(v, mu.probs) for v in vertices)


@dataclass(frozen=True)
class ConcentrabilityReport:
    c1: float
    c2: float
    c3: float
    c2_tail_bound: float
    c3_tail_bound: float
    m_truncation: int
    per_m: tuple  # (m, c_sup(m), c_weighted(m)) triples, m = 1..m_truncation


def _series_tail(gamma: float, m_max: int) -> float:
    """sum_{m > m_max} m gamma^(m-1), closed form."""
    if gamma >= 1.0:
        return float("inf")
    return gamma ** m_max * (m_max * (1.0 - gamma) + 1.0) / (1.0 - gamma) ** 2


def c2_c3_coefficients(mdp: TabularMdp, rho: DistributionSA,
                       mu: DistributionSA, m_max: int = 50
                       ) -> ConcentrabilityReport:
    """Discounted concentrability series under both norms, truncated at
    m_max; the tail is bounded by c(m_max) times the analytic series
    remainder and reported separately. c1 is computed against mu's state
    marginal."""
    if not (0 < mdp.gamma < 1):
        raise ValueError("c2/c3 series requires gamma in (0, 1)")
    g = mdp.gamma
    scale = (1.0 - g) ** 2
    per_m = []
    c2 = c3 = 0.0
    for m in range(1, m_max + 1):
        cs = c_of_m(mdp, rho, mu, m, norm="sup")
        cw = c_of_m(mdp, rho, mu, m, norm="weighted")
        per_m.append((m, cs, cw))
        c2 += scale * m * g ** (m - 1) * cs
        c3 += scale * m * g ** (m - 1) * cw
    tail = _series_tail(g, m_max)
    return ConcentrabilityReport(
        c1=c1_coefficient(mdp, mu.state_marginal()),
        c2=c2,
        c3=c3,
        c2_tail_bound=scale * per_m[-1][1] * tail,
        c3_tail_bound=scale * per_m[-1][2] * tail,
        m_truncation=m_max,
        per_m=tuple(per_m),
    )


def adversary_payoff(mu: np.ndarray | DistributionSA) -> tuple[float, int]:
    """Worst-case payoff max_beta of the ratio game against mu: the value
    is max_i 1/mu_i, attained by a point mass on an argmin cell.

    Returns (value, flat index of the attaining cell); value is +inf when
    mu has an empty cell.
    """
    p = mu.probs if isinstance(mu, DistributionSA) else np.asarray(mu)
    flat = p.ravel()
    _check_dist(flat)
    idx = int(flat.argmin())
    lo = flat[idx]
    return (float("inf") if lo == 0 else float(1.0 / lo)), idx


@dataclass(frozen=True)
class DirichletAlphaRow:
    alpha: float
    mean_entropy: float
    mean_chi2_to_peers: float
    mean_coverage: dict  # dataset size -> mean coverage


def dirichlet_study(n_pairs: int, alphas, n_dists: int, dataset_sizes,
                    n_peer_dists: int, seed: int = 0) -> list[DirichletAlphaRow]:
    """Sample symmetric-Dirichlet distributions per concentration alpha and
    summarize: mean normalized entropy, mean coverage of multinomial
    datasets per size, and mean chi-square divergence to freshly sampled
    peer distributions from the same Dirichlet.

    Sampling uses normalized independent Gamma draws; the seed is split
    per alpha.
    """
    rows = []
    for k, alpha in enumerate(alphas):
        rng = np.random.default_rng([seed, k])
        dists = _gamma_dirichlet(rng, alpha, n_dists, n_pairs)
        peers = _gamma_dirichlet(rng, alpha, n_peer_dists, n_pairs)

        ents = [entropy(d)[1] for d in dists]
        chi2 = np.einsum("ip,jp->ij", dists ** 2, 1.0 / peers) - 1.0
        cov = {}
        for size in dataset_sizes:
            counts = np.stack([rng.multinomial(size, d) for d in dists])
            cov[int(size)] = float((counts > 0).mean())
        rows.append(DirichletAlphaRow(
            alpha=float(alpha),
            mean_entropy=float(np.mean(ents)),
            mean_chi2_to_peers=float(chi2.mean()),
            mean_coverage=cov,
        ))
    return rows


def _gamma_dirichlet(rng: np.random.Generator, alpha: float, n: int,
                     dim: int) -> np.ndarray:
    g = rng.gamma(alpha, size=(n, dim))
    totals = g.sum(axis=1, keepdims=True)
    if (totals == 0).any():
        raise RuntimeError("gamma draws underflowed to zero; alpha too small")
    return g / totals
