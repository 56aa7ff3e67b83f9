"""Metropolis-Hastings sampler of the exact surfel posterior.

Independent reference implementation used to validate the variational
surfel updates: it samples the joint over the vertex heights h, the
planar deviation nu, and every measurement's latent true point m_i,
then compares the (h, nu) marginals against a surfel belief.

The sampler is deliberately decoupled from the message-passing code: the
log joint below is written directly from the generative model and never
calls into the surfel update routines.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import NotADistribution, inv_psd
from .mapgraph import PriorConfig
from .surfel import ALPHA_BETA_PRIOR_VAR, Measurement, SurfelState

_LOG_2PI = math.log(2.0 * math.pi)


class AdaptationFailed(Exception):
    """Proposal adaptation ended outside the acceptable acceptance range."""


@dataclass
class ChainConfig:
    """Random-walk chain settings.

    Proposal standard deviations are starting points; they are adapted
    during burn-in toward a 0.23-0.44 acceptance rate and then frozen.
    """

    n_samples: int = 500_000
    burn_in: float = 0.2
    thinning: int = 10
    prop_std_h: float = 0.1
    prop_std_lognu: float = 0.3
    prop_std_m: float = 0.05
    adapt_interval: int = 2_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.burn_in < 1.0:
            raise ValueError("burn_in fraction must lie in (0, 1)")
        if min(self.prop_std_h, self.prop_std_lognu, self.prop_std_m) <= 0.0:
            raise ValueError("proposal stds must be positive")
        if self.n_samples < 1 or self.thinning < 1 or self.adapt_interval < 1:
            raise ValueError("counts must be positive")


@dataclass
class ChainResult:
    """Retained post-burn-in samples and chain diagnostics."""

    h_samples: np.ndarray  # (S, 3)
    nu_samples: np.ndarray  # (S,)
    acceptance: dict[str, float]
    proposal_stds: dict[str, float]
    config: ChainConfig = field(repr=False, default=None)


def _log_ig(nu: float, shape: float, scale: float) -> float:
    return (
        shape * math.log(scale)
        - math.lgamma(shape)
        - (shape + 1.0) * math.log(nu)
        - scale / nu
    )


def exact_log_joint(
    h: np.ndarray,
    nu: float,
    m_points: np.ndarray,
    measurements: list[Measurement],
    prior: PriorConfig,
) -> float:
    """Unnormalized log posterior of (h, nu, m_1..m_N).

    Terms: each measurement z_i given its latent point m_i, each latent
    gamma_i given the mean plane and nu, the correlated Gaussian height
    prior, the inverse-gamma deviation prior, and the broad Gaussian
    priors on each latent (alpha_i, beta_i).
    """
    if nu <= 0.0:
        return -math.inf
    h = np.asarray(h, dtype=float).reshape(3)
    m = np.asarray(m_points, dtype=float).reshape(len(measurements), 3)

    total = 0.0
    # measurement terms z_i ~ N(m_i, Sigma_i)
    for i, meas in enumerate(measurements):
        d = meas.mean - m[i]
        lam = inv_psd(meas.cov)
        _, logdet = np.linalg.slogdet(meas.cov)
        total += -0.5 * (3.0 * _LOG_2PI + logdet + d @ lam @ d)

    if len(measurements) > 0:
        a, b, g = m[:, 0], m[:, 1], m[:, 2]
        f = (1.0 - a - b) * h[0] + a * h[1] + b * h[2]
        r = g - f
        total += -0.5 * np.sum(_LOG_2PI + math.log(nu) + r * r / nu)
        # broad latent-position priors centered on the observed coordinates
        za = np.array([meas.mean[:2] for meas in measurements])
        dz = np.concatenate(m[:, :2] - za)
        total += -0.5 * np.sum(
            _LOG_2PI + math.log(ALPHA_BETA_PRIOR_VAR) + dz * dz / ALPHA_BETA_PRIOR_VAR
        )

    cov_h = prior.height_covariance()
    _, logdet = np.linalg.slogdet(cov_h)
    total += -0.5 * (3.0 * _LOG_2PI + logdet + h @ inv_psd(cov_h) @ h)
    total += _log_ig(nu, prior.a_p, prior.b_p)
    return float(total)


def run_mh(
    measurements: list[Measurement],
    prior: PriorConfig,
    config: ChainConfig = None,
) -> ChainResult:
    """Component-wise Gaussian random-walk Metropolis over (h, log nu, m).

    nu is sampled on the log scale with the Jacobian correction, which
    keeps proposals unconstrained. The latent points m_i are conditionally
    independent given (h, nu), so their accept/reject steps are vectorized
    across measurements. Burn-in adapts the proposal stds toward a
    0.23-0.44 acceptance rate, then freezes them.
    """
    if config is None:
        config = ChainConfig()
    rng = np.random.default_rng(config.seed)
    n = len(measurements)

    cov_h = prior.height_covariance()
    lam_h = inv_psd(cov_h)
    if n > 0:
        z = np.array([meas.mean for meas in measurements])  # (n, 3)
        lam_z = np.array([inv_psd(meas.cov) for meas in measurements])
    else:
        z = np.zeros((0, 3))
        lam_z = np.zeros((0, 3, 3))

    # state
    h = np.zeros(3)
    if n > 0:
        h[:] = float(np.mean(z[:, 2]))
    u = math.log(prior.b_p / prior.a_p) if n == 0 else math.log(
        max(float(np.var(z[:, 2])), 1e-4)
    )
    m = z.copy()

    def gamma_loglik(h_, nu_, m_) -> float:
        if n == 0:
            return 0.0
        f = (1.0 - m_[:, 0] - m_[:, 1]) * h_[0] + m_[:, 0] * h_[1] + m_[:, 1] * h_[2]
        r = m_[:, 2] - f
        return -0.5 * float(np.sum(_LOG_2PI + math.log(nu_) + r * r / nu_))

    def u_logpost(u_) -> float:
        # IG prior on nu plus the log-scale Jacobian term
        nu_ = math.exp(u_)
        return gamma_loglik(h, nu_, m) + _log_ig(nu_, prior.a_p, prior.b_p) + u_

    def m_logpost_terms(m_) -> np.ndarray:
        # per-measurement log density terms that depend on m_i
        d = m_ - z
        quad = np.einsum("ij,ijk,ik->i", d, lam_z, d)
        f = (1.0 - m_[:, 0] - m_[:, 1]) * h[0] + m_[:, 0] * h[1] + m_[:, 1] * h[2]
        r = m_[:, 2] - f
        nu_ = math.exp(u)
        ab = d[:, :2]  # latent alpha/beta priors are centered on z
        return (
            -0.5 * quad
            - 0.5 * r * r / nu_
            - 0.5 * np.sum(ab * ab, axis=1) / ALPHA_BETA_PRIOR_VAR
        )

    stds = {
        "h0": config.prop_std_h,
        "ha": config.prop_std_h,
        "hb": config.prop_std_h,
        "lognu": config.prop_std_lognu,
        "m": config.prop_std_m,
    }
    acc = {k: 0 for k in stds}
    tries = {k: 0 for k in stds}

    n_burn = int(config.burn_in * config.n_samples)
    kept_h, kept_nu = [], []
    cur_m_terms = m_logpost_terms(m)

    for it in range(config.n_samples):
        # vertex heights, one scalar at a time
        for k, name in enumerate(("h0", "ha", "hb")):
            h_prop = h.copy()
            h_prop[k] += rng.normal(0.0, stds[name])
            delta = (
                gamma_loglik(h_prop, math.exp(u), m)
                - gamma_loglik(h, math.exp(u), m)
                - 0.5 * (h_prop @ lam_h @ h_prop - h @ lam_h @ h)
            )
            tries[name] += 1
            if math.log(rng.random()) < delta:
                h = h_prop
                acc[name] += 1
        # log deviation
        u_prop = u + rng.normal(0.0, stds["lognu"])
        tries["lognu"] += 1
        if math.log(rng.random()) < u_logpost(u_prop) - u_logpost(u):
            u = u_prop
            acc["lognu"] += 1
        # all latent points at once (conditionally independent)
        if n > 0:
            m_prop = m + rng.normal(0.0, stds["m"], size=(n, 3))
            new_terms = m_logpost_terms(m_prop)
            cur_m_terms = m_logpost_terms(m)
            take = np.log(rng.random(n)) < new_terms - cur_m_terms
            m[take] = m_prop[take]
            tries["m"] += n
            acc["m"] += int(np.sum(take))

        if it < n_burn and (it + 1) % config.adapt_interval == 0:
            for k in stds:
                if tries[k] == 0:
                    continue
                rate = acc[k] / tries[k]
                if not 0.23 <= rate <= 0.44:
                    # smooth multiplicative step toward ~0.33 acceptance
                    stds[k] *= math.exp(2.0 * (rate - 0.335))
                acc[k] = 0
                tries[k] = 0
        if it == n_burn - 1:
            for k in stds:
                acc[k] = 0
                tries[k] = 0
        if it >= n_burn and (it - n_burn) % config.thinning == 0:
            kept_h.append(h.copy())
            kept_nu.append(math.exp(u))

    rates = {k: acc[k] / tries[k] for k in stds if tries[k] > 0}
    for k, rate in rates.items():
        if not 0.05 <= rate <= 0.9:
            raise AdaptationFailed(
                f"post-adaptation acceptance for {k} is {rate:.3f}, "
                "outside [0.05, 0.9]"
            )
    return ChainResult(
        h_samples=np.asarray(kept_h).reshape(len(kept_nu), 3),
        nu_samples=np.array(kept_nu),
        acceptance=rates,
        proposal_stds=dict(stds),
        config=config,
    )


def compare_marginals(result: ChainResult, belief: SurfelState) -> dict:
    """Per-variable comparison of chain marginals against a surfel belief.

    Reports, for each of (h0, h_alpha, h_beta, nu): the chain mean and
    std with Monte Carlo standard errors, the belief mean and std, and
    the standardized mean discrepancy |mean_mh - mean_belief| / std_mh.
    """
    S = len(result.nu_samples)
    if S < 100:
        raise ValueError("need at least 100 retained samples to compare")

    mom = belief.belief_h.to_moments()
    names = ("h0", "h_alpha", "h_beta", "nu")
    chains = [result.h_samples[:, 0], result.h_samples[:, 1],
              result.h_samples[:, 2], result.nu_samples]
    bel_mean = [float(mom.mu[0]), float(mom.mu[1]), float(mom.mu[2]),
                belief.belief_nu.mean()]
    bel_std = [math.sqrt(float(mom.sigma[k, k])) for k in range(3)]
    try:
        bel_std.append(math.sqrt(belief.belief_nu.variance()))
    except NotADistribution:
        bel_std.append(math.inf)

    report = {}
    for name, x, bm, bs in zip(names, chains, bel_mean, bel_std):
        mu = float(np.mean(x))
        sd = float(np.std(x, ddof=1))
        report[name] = {
            "mh_mean": mu,
            "mh_std": sd,
            "mh_mean_se": sd / math.sqrt(S),
            "mh_std_se": sd / math.sqrt(2.0 * (S - 1)),
            "belief_mean": bm,
            "belief_std": bs,
            "std_mean_discrepancy": abs(mu - bm) / sd if sd > 0 else math.inf,
            "std_ratio": bs / sd if sd > 0 else math.inf,
        }
    return report


def samples_to_csv(result: ChainResult, path: str) -> None:
    """One retained sample per row: h0, h_alpha, h_beta, nu."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["h0", "h_alpha", "h_beta", "nu"])
        for hrow, nu in zip(result.h_samples, result.nu_samples):
            w.writerow([f"{hrow[0]:.10g}", f"{hrow[1]:.10g}",
                        f"{hrow[2]:.10g}", f"{nu:.10g}"])
