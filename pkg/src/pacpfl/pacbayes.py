"""PAC-Bayesian bound arithmetic for personalized federated learning.

Client-level bound with a differentially private data-dependent prior,
server-level bound on a hyper-posterior, the optimal (Gibbs) posterior and
hyper-posterior over finite sets, and the privacy level implied by sampling
a prior from the optimal hyper-posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


@dataclass
class BoundContext:
    """Scalar constants shared by the bound computations.

    ``m`` and ``m_tilde`` hold, per existing client, the number of samples
    used in federated training and the number of extra samples used only for
    personalization. With ``unknown_m_tilde`` every client is treated as
    having new samples and the worst-case ``(b - a) / n`` replaces each
    ``Delta_i``.
    """

    m: np.ndarray
    m_tilde: np.ndarray
    beta: float
    lam: float
    upsilon: float = 1e-4
    delta: float = 0.05
    loss_bounds: tuple[float, float] = (0.0, 5.0)
    unknown_m_tilde: bool = False

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.int64).ravel()
        self.m_tilde = np.asarray(self.m_tilde, dtype=np.int64).ravel()
        self.loss_bounds = (float(self.loss_bounds[0]), float(self.loss_bounds[1]))

    @property
    def n(self) -> int:
        return int(self.m.size)

    @property
    def n2(self) -> int:
        if self.unknown_m_tilde:
            return self.n
        return int(np.count_nonzero(self.m_tilde > 0))

    @property
    def width(self) -> float:
        a, b = self.loss_bounds
        return b - a

    def validate(self):
        """Raise ``ValueError`` if a hypothesis of the server-level bound fails."""
        a, b = self.loss_bounds
        if self.m.size == 0:
            raise ValueError("need at least one client")
        if self.m_tilde.shape != self.m.shape:
            raise ValueError("m and m_tilde must have the same length")
        if np.any(self.m < 1):
            raise ValueError("every client needs m_i >= 1")
        if np.any(self.m_tilde < 0) or np.any(self.m_tilde > self.m):
            raise ValueError("need 0 <= m_tilde_i <= m_i")
        if not a < b:
            raise ValueError("loss bounds need a < b")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.upsilon <= 0:
            raise ValueError("upsilon must be positive")
        if self.beta < 1.0 / self.n:
            raise ValueError(f"beta >= 1/n is required (beta={self.beta}, n={self.n})")
        if not self.lam > self.n2 + self.upsilon:
            raise ValueError(
                f"lambda > n2 + upsilon is required (lambda={self.lam}, "
                f"n2 + upsilon={self.n2 + self.upsilon})"
            )
        return self

    @property
    def tau(self) -> float:
        return tau(self.n, self.n2, self.upsilon, self.beta, self.lam)

    @property
    def kl_coefficient(self) -> float:
        return 1.0 / (self.n * self.beta) + (self.n2 + self.upsilon) / self.lam


def dp_penalty_I(epsilon_i, m_i, delta) -> float:
    """Extra cost of a data-dependent prior obtained by an ``epsilon_i``-DP algorithm.

    Any ``delta > 0`` is accepted here since the expression stays defined;
    the bounds themselves restrict ``delta`` to ``(0, 1]``.
    """
    if epsilon_i < 0:
        raise ValueError("epsilon_i must be >= 0")
    if m_i < 1:
        raise ValueError("m_i must be >= 1")
    if not delta > 0.0:
        raise ValueError("delta must be positive")
    return (
        0.5 * m_i * epsilon_i ** 2
        + epsilon_i * math.sqrt(0.5 * m_i * math.log(4.0 / delta))
        + math.log(2.0)
    )


def epsilon_for_client(beta, tau_, loss_bounds, m_i) -> float:
    """Privacy level of sampling one prior from the optimal hyper-posterior."""
    a, b = loss_bounds
    return 2.0 * beta * tau_ * (b - a) / m_i


def tau(n, n2, upsilon, beta, lam) -> float:
    """Temperature of the optimal hyper-posterior."""
    return lam / (lam + beta * n * (n2 + upsilon))


def delta_i(beta, m_i, m_tilde_i, loss_bounds, n) -> float:
    if m_tilde_i > m_i:
        raise ValueError("m_tilde_i must not exceed m_i")
    a, b = loss_bounds
    t = 2.0 * beta * m_tilde_i * (b - a) / (m_i + m_tilde_i)
    # exp overflows long after the min has saturated at b - a
    spread = b * (math.exp(t) - math.exp(-t)) if t < 700 else math.inf
    return min(b - a, spread) / n


def deltas(ctx: BoundContext) -> np.ndarray:
    if ctx.unknown_m_tilde:
        return np.full(ctx.n, ctx.width / ctx.n)
    return np.array([
        delta_i(ctx.beta, mi, mti, ctx.loss_bounds, ctx.n)
        for mi, mti in zip(ctx.m, ctx.m_tilde)
    ])


def client_bound(empirical_risk, kl_q_p, beta, m_total, epsilon_i, m_i, delta, loss_bounds) -> float:
    """Upper bound on the true risk of a client's posterior."""
    a, b = loss_bounds
    penalty = (
        kl_q_p
        + beta ** 2 * (b - a) ** 2 / (8.0 * m_total)
        + dp_penalty_I(epsilon_i, m_i, delta)
        + math.log(1.0 / delta)
    )
    return empirical_risk + penalty / beta


def server_bound_terms(avg_neg_lml_per_client, kl_hyper, ctx: BoundContext) -> dict:
    """Each additive term of the server-level bound, in order."""
    v = np.asarray(avg_neg_lml_per_client, dtype=np.float64)
    if v.shape != (ctx.n,):
        raise ValueError(f"expected {ctx.n} per-client values, got shape {v.shape}")
    n, beta = ctx.n, ctx.beta
    d = deltas(ctx)
    return {
        "empirical": float(v.sum() / (n * beta)),
        "kl": float(ctx.kl_coefficient * kl_hyper),
        "sample_complexity": float(beta * ctx.width ** 2 / (8.0 * n) * np.sum(1.0 / ctx.m)),
        "new_samples": float(ctx.lam * np.sum(d ** 2) / (8.0 * (ctx.n2 + ctx.upsilon))),
        "confidence": float(math.log(1.0 / ctx.delta) / math.sqrt(n)),
    }


def server_bound(avg_neg_lml_per_client, kl_hyper, ctx: BoundContext) -> float:
    total = 0.0
    for value in server_bound_terms(avg_neg_lml_per_client, kl_hyper, ctx).values():
        total += value
    return total


def new_client_bound_terms(log_Z_S, ctx: BoundContext) -> dict:
    n, beta = ctx.n, ctx.beta
    return {
        "partition": float(-ctx.kl_coefficient * log_Z_S),
        "sample_complexity": float(
            ctx.width ** 2 / (8.0 * n)
            * (beta * np.sum(1.0 / ctx.m) + ctx.lam / (ctx.n2 + ctx.upsilon))
        ),
        "confidence": float(math.log(1.0 / ctx.delta) / math.sqrt(n)),
    }


def new_client_bound(log_Z_S, ctx: BoundContext) -> float:
    """Bound on the expected true risk of a client that joins after training."""
    total = 0.0
    for value in new_client_bound_terms(log_Z_S, ctx).values():
        total += value
    return total


@dataclass
class FiniteHypothesisSpace:
    """Finitely many hypotheses with their per-sample losses and a prior."""

    losses: np.ndarray
    prior: np.ndarray = field(default=None)

    def __post_init__(self):
        self.losses = np.atleast_2d(np.asarray(self.losses, dtype=np.float64))
        H = self.losses.shape[0]
        if self.prior is None:
            self.prior = np.full(H, 1.0 / H)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.prior.shape != (H,) or np.any(self.prior < 0):
            raise ValueError("prior must be a nonnegative vector with one entry per hypothesis")
        if not np.isclose(self.prior.sum(), 1.0, atol=1e-12):
            raise ValueError("prior must sum to 1")


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _subset_mean_loss(space, sample_subset):
    losses = space.losses if sample_subset is None else space.losses[:, sample_subset]
    if losses.shape[1] == 0:
        raise ValueError("sample subset must be non-empty")
    return losses.mean(axis=1)


def gibbs_posterior(space: FiniteHypothesisSpace, beta, sample_subset=None) -> np.ndarray:
    """Optimal posterior: prior reweighted by ``exp(-beta * mean loss)``."""
    logw = _log(space.prior) - beta * _subset_mean_loss(space, sample_subset)
    return np.exp(logw - logsumexp(logw))


def log_partition(space: FiniteHypothesisSpace, beta, sample_subset=None) -> float:
    """``ln E_{h~prior} exp(-beta * mean loss of h)``."""
    return float(logsumexp(_log(space.prior) - beta * _subset_mean_loss(space, sample_subset)))


def kl_divergence(q, p) -> float:
    """KL between two discrete distributions, with ``0 ln 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mask = q > 0
    if np.any(p[mask] <= 0):
        return math.inf
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))


def optimal_hyper_posterior_weights(priors_Z, hyper_prior, tau_) -> tuple[np.ndarray, float]:
    """Optimal hyper-posterior over an enumerated set of priors.

    ``priors_Z[j, i]`` is ``ln Z`` of client ``i`` under prior ``j``. Returns
    the weights and the log normaliser ``ln Z^S_tau``.
    """
    priors_Z = np.atleast_2d(np.asarray(priors_Z, dtype=np.float64))
    hyper_prior = np.asarray(hyper_prior, dtype=np.float64)
    if priors_Z.shape[0] != hyper_prior.shape[0]:
        raise ValueError("one hyper-prior weight per candidate prior is required")
    logw = _log(hyper_prior) + tau_ * priors_Z.sum(axis=1)
    log_Z_S = float(logsumexp(logw))
    return np.exp(logw - log_Z_S), log_Z_S


def server_objective(weights, priors_Z, hyper_prior, ctx: BoundContext) -> float:
    """Server bound for a discrete hyper-posterior over candidate priors."""
    weights = np.asarray(weights, dtype=np.float64)
    neg = -(weights @ np.asarray(priors_Z, dtype=np.float64))
    return server_bound(neg, kl_divergence(weights, hyper_prior), ctx)


@dataclass
class NonVacuityReport:
    width_ok: bool
    epsilons: np.ndarray
    epsilon_limit: float
    epsilon_ok: np.ndarray
    lambda_max: float

    @property
    def passed(self) -> bool:
        return bool(self.width_ok and np.all(self.epsilon_ok))

    def as_dict(self) -> dict:
        return {
            "width_ok": bool(self.width_ok),
            "epsilon_limit": self.epsilon_limit,
            "epsilons": [float(e) for e in self.epsilons],
            "epsilon_ok": [bool(e) for e in self.epsilon_ok],
            "lambda_max": self.lambda_max,
            "passed": self.passed,
        }


def check_nonvacuous(ctx: BoundContext, epsilons=None) -> NonVacuityReport:
    """Necessary conditions for non-vacuous bounds, plus the largest admissible lambda.

    ``b - a < 8`` and ``epsilon_i < sqrt(2 (b - a))`` for every client; the
    privacy condition is inverted through the optimal-hyper-posterior
    temperature to give an upper limit on ``lambda``.
    """
    w = ctx.width
    limit = math.sqrt(2.0 * w) if w > 0 else 0.0
    if epsilons is None:
        t = ctx.tau
        epsilons = np.array([epsilon_for_client(ctx.beta, t, ctx.loss_bounds, mi) for mi in ctx.m])
    epsilons = np.asarray(epsilons, dtype=np.float64)

    scale = ctx.beta * ctx.n * (ctx.n2 + ctx.upsilon)
    lam_max = math.inf
    for mi in ctx.m:
        tau_max = mi * limit / (2.0 * ctx.beta * w)
        if tau_max < 1.0:
            lam_max = min(lam_max, scale * tau_max / (1.0 - tau_max))
    return NonVacuityReport(
        width_ok=w < 8.0,
        epsilons=epsilons,
        epsilon_limit=limit,
        epsilon_ok=epsilons < limit,
        lambda_max=lam_max,
    )
