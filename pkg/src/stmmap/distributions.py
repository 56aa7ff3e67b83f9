"""Exponential-family factor algebra.

Gaussian factors are kept in canonical (information) form, where products
and divisions reduce to addition and subtraction of the natural parameters
(xi, omega). Inverse-gamma factors are kept as unnormalized exponent pairs
(exponent, scale) with density proportional to nu**(-exponent) * exp(-scale/nu),
so that message products are exactly exponent-additive; a normalized
inverse-gamma with shape a and scale b has exponent a + 1.

Factors created by division may be non-normalizable (indefinite information
matrix, non-positive exponent). These are legal intermediates; only terminal
belief queries require normalizability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

Labels = tuple[Hashable, ...]

_JITTER_REL = 1e-12


class NotADistribution(Exception):
    """Raised when a normalizable distribution is required but not available."""


class SingularMarginalization(Exception):
    """Raised when the information block being marginalized out is singular."""


class NotPSD(Exception):
    """Raised when a covariance square root fails."""


def _as_labels(labels: Sequence[Hashable]) -> Labels:
    labels = tuple(labels)
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate variable labels: {labels}")
    return labels


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def solve_psd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric PSD a, with a single jittered retry.

    The retry adds 1e-12 * trace / n to the diagonal, which resolves benign
    rank deficiency from floating-point cancellation without masking
    genuinely singular blocks.
    """
    a = np.atleast_2d(a)
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        n = a.shape[0]
        jitter = _JITTER_REL * max(abs(np.trace(a)), 1.0) / n
        try:
            c = np.linalg.cholesky(a + jitter * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise SingularMarginalization(
                f"singular {n}x{n} block after regularization"
            ) from exc
    return np.linalg.solve(c.T, np.linalg.solve(c, b))


def inv_psd(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric PSD matrix via `solve_psd`."""
    return _symmetrize(solve_psd(a, np.eye(np.atleast_2d(a).shape[0])))


@dataclass(frozen=True)
class GaussianCanonical:
    """Gaussian factor in canonical form over labelled variables.

    xi is the information vector and omega the information matrix. omega is
    symmetrized on construction. A vacuous factor has xi = 0 and omega = 0.
    """

    xi: np.ndarray
    omega: np.ndarray
    labels: Labels

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).reshape(-1)
        omega = np.asarray(self.omega, dtype=float)
        labels = _as_labels(self.labels)
        n = len(labels)
        if xi.shape != (n,) or omega.shape != (n, n):
            raise ValueError(
                f"shape mismatch: xi {xi.shape}, omega {omega.shape}, {n} labels"
            )
        omega = _symmetrize(omega)
        xi.flags.writeable = False
        omega.flags.writeable = False
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def vacuous(cls, labels: Sequence[Hashable]) -> "GaussianCanonical":
        n = len(tuple(labels))
        return cls(np.zeros(n), np.zeros((n, n)), tuple(labels))

    @property
    def dim(self) -> int:
        return len(self.labels)

    def is_vacuous(self, tol: float = 0.0) -> bool:
        return bool(
            np.all(np.abs(self.xi) <= tol) and np.all(np.abs(self.omega) <= tol)
        )

    def is_normalizable(self) -> bool:
        """True when omega is positive definite."""
        if self.dim == 0:
            return False
        try:
            np.linalg.cholesky(self.omega)
            return True
        except np.linalg.LinAlgError:
            return False

    def extend(self, labels: Sequence[Hashable]) -> "GaussianCanonical":
        """Embed this factor in a larger scope, zero-padding new variables."""
        labels = _as_labels(labels)
        missing = [l for l in self.labels if l not in labels]
        if missing:
            raise ValueError(f"extension drops variables: {missing}")
        n = len(labels)
        idx = [labels.index(l) for l in self.labels]
        xi = np.zeros(n)
        omega = np.zeros((n, n))
        xi[idx] = self.xi
        omega[np.ix_(idx, idx)] = self.omega
        return GaussianCanonical(xi, omega, labels)

    def reorder(self, labels: Sequence[Hashable]) -> "GaussianCanonical":
        labels = _as_labels(labels)
        if set(labels) != set(self.labels):
            raise ValueError("reorder must keep the same variable set")
        idx = [self.labels.index(l) for l in labels]
        return GaussianCanonical(self.xi[idx], self.omega[np.ix_(idx, idx)], labels)

    def to_moments(self) -> "GaussianMoment":
        if not self.is_normalizable():
            raise NotADistribution("information matrix is not positive definite")
        sigma = inv_psd(self.omega)
        return GaussianMoment(sigma @ self.xi, sigma)

    def log_density(self, x: np.ndarray) -> float:
        """Normalized log density; requires a normalizable factor."""
        mom = self.to_moments()
        return mom.log_density(x)


@dataclass(frozen=True)
class GaussianMoment:
    """Gaussian in moment form (mean and covariance)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        sigma = _symmetrize(np.asarray(self.sigma, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise ValueError("sigma shape does not match mu")
        eig_floor = -1e-10 * max(abs(np.trace(sigma)), 1.0)
        if np.linalg.eigvalsh(sigma).min() < eig_floor:
            raise ValueError("covariance is not positive semidefinite")
        mu.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size

    def to_canonical(self, labels: Sequence[Hashable]) -> GaussianCanonical:
        omega = inv_psd(self.sigma)
        return GaussianCanonical(omega @ self.mu, omega, tuple(labels))

    def log_density(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        d = x - self.mu
        sign, logdet = np.linalg.slogdet(self.sigma)
        if sign <= 0:
            raise NotADistribution("covariance is singular")
        maha = float(d @ solve_psd(self.sigma, d))
        return -0.5 * (self.dim * math.log(2.0 * math.pi) + logdet + maha)


def gauss_product(g1: GaussianCanonical, g2: GaussianCanonical) -> GaussianCanonical:
    """Product of Gaussian factors: natural-parameter addition over the label union."""
    labels = g1.labels + tuple(l for l in g2.labels if l not in g1.labels)
    a = g1.extend(labels)
    b = g2.extend(labels)
    return GaussianCanonical(a.xi + b.xi, a.omega + b.omega, labels)


def gauss_divide(g1: GaussianCanonical, g2: GaussianCanonical) -> GaussianCanonical:
    """Division: natural-parameter subtraction; g2's scope must lie within g1's."""
    if not set(g2.labels) <= set(g1.labels):
        raise ValueError("divisor scope is not a subset of the dividend scope")
    b = g2.extend(g1.labels)
    return GaussianCanonical(g1.xi - b.xi, g1.omega - b.omega, g1.labels)


def gauss_marginalize(
    g: GaussianCanonical, keep: Sequence[Hashable]
) -> GaussianCanonical:
    """Marginalize onto `keep` via the Schur complement of the discarded block."""
    keep = _as_labels(keep)
    if not set(keep) <= set(g.labels):
        raise ValueError("keep set contains unknown labels")
    if set(keep) == set(g.labels):
        return g.reorder(keep)
    ki = [g.labels.index(l) for l in keep]
    di = [i for i, l in enumerate(g.labels) if l not in keep]
    okk = g.omega[np.ix_(ki, ki)]
    okd = g.omega[np.ix_(ki, di)]
    odd = g.omega[np.ix_(di, di)]
    sol_o = solve_psd(odd, okd.T)
    sol_x = solve_psd(odd, g.xi[di])
    omega = okk - okd @ sol_o
    xi = g.xi[ki] - okd @ sol_x
    return GaussianCanonical(xi, omega, keep)


def kl_gaussian(q: GaussianCanonical, p: GaussianCanonical) -> float:
    """Exclusive KL divergence KL(q || p) for normalizable Gaussians."""
    if set(q.labels) != set(p.labels):
        raise ValueError("KL requires matching variable sets")
    p = p.reorder(q.labels)
    qm = q.to_moments()
    pm = p.to_moments()
    n = qm.dim
    d = pm.mu - qm.mu
    sp_inv_sq = solve_psd(pm.sigma, qm.sigma)
    maha = float(d @ solve_psd(pm.sigma, d))
    _, logdet_q = np.linalg.slogdet(qm.sigma)
    _, logdet_p = np.linalg.slogdet(pm.sigma)
    kl = 0.5 * (np.trace(sp_inv_sq) + maha - n + logdet_p - logdet_q)
    return max(float(kl), 0.0)


@dataclass(frozen=True)
class InverseGammaFactor:
    """Unnormalized inverse-gamma factor: density ~ nu**(-exponent) * exp(-scale/nu)."""

    exponent: float
    scale: float

    @classmethod
    def flat(cls) -> "InverseGammaFactor":
        return cls(0.0, 0.0)

    @classmethod
    def normalized(cls, shape: float, scale: float) -> "InverseGammaFactor":
        """Normalized inverse-gamma with the given shape a and scale b."""
        if shape <= 0.0 or scale <= 0.0:
            raise NotADistribution("inverse-gamma needs shape > 0 and scale > 0")
        return cls(shape + 1.0, scale)

    @property
    def shape(self) -> float:
        """Shape parameter a of the normalized interpretation (exponent - 1)."""
        return self.exponent - 1.0

    def is_normalizable(self) -> bool:
        return self.shape > 0.0 and self.scale > 0.0

    def log_density(self, nu: float) -> float:
        """Normalized log density at nu; requires normalizability."""
        if not self.is_normalizable():
            raise NotADistribution("inverse-gamma factor is not normalizable")
        a, b = self.shape, self.scale
        if nu <= 0.0:
            return -math.inf
        return a * math.log(b) - math.lgamma(a) - (a + 1.0) * math.log(nu) - b / nu

    def mean(self) -> float:
        if self.shape <= 1.0:
            raise NotADistribution("mean requires shape > 1")
        return self.scale / (self.shape - 1.0)

    def variance(self) -> float:
        a, b = self.shape, self.scale
        if a <= 2.0:
            raise NotADistribution("variance requires shape > 2")
        return b * b / ((a - 1.0) ** 2 * (a - 2.0))


def ig_product(f1: InverseGammaFactor, f2: InverseGammaFactor) -> InverseGammaFactor:
    return InverseGammaFactor(f1.exponent + f2.exponent, f1.scale + f2.scale)


def ig_divide(f1: InverseGammaFactor, f2: InverseGammaFactor) -> InverseGammaFactor:
    return InverseGammaFactor(f1.exponent - f2.exponent, f1.scale - f2.scale)


def ig_expected_deviation(belief: InverseGammaFactor) -> float:
    """Harmonic-mean deviation of a normalizable belief: <1/nu>^-1 = b / a."""
    if not belief.is_normalizable():
        raise NotADistribution("expected deviation requires a normalizable belief")
    return belief.scale / belief.shape


@dataclass(frozen=True)
class UTParams:
    """Scaled sigma-point parameters (spread alpha, prior-knowledge beta, kappa)."""

    spread: float = 1e-3
    prior_knowledge: float = 2.0
    secondary: float = 0.0


def unscented_transform(
    g: GaussianMoment,
    f: Callable[[np.ndarray], np.ndarray],
    params: UTParams = UTParams(),
) -> GaussianMoment:
    """Propagate a Gaussian through f using the scaled unscented transform.

    The output covariance is symmetrized and floored at positive semidefinite.
    """
    n = g.dim
    lam = params.spread**2 * (n + params.secondary) - n
    try:
        root = np.linalg.cholesky((n + lam) * g.sigma)
    except np.linalg.LinAlgError as exc:
        raise NotPSD("covariance square root failed") from exc
    pts = np.empty((2 * n + 1, n))
    pts[0] = g.mu
    pts[1 : n + 1] = g.mu + root.T
    pts[n + 1 :] = g.mu - root.T
    ys = np.array([np.asarray(f(p), dtype=float).reshape(-1) for p in pts])
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - params.spread**2 + params.prior_knowledge
    mean = wm @ ys
    d = ys - mean
    cov = _symmetrize(d.T @ (wc[:, None] * d))
    eigmin = np.linalg.eigvalsh(cov).min()
    if eigmin < 0.0:
        cov = cov + (-eigmin) * np.eye(cov.shape[0])
    return GaussianMoment(mean, cov)
