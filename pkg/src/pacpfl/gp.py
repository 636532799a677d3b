"""Gaussian processes with a neural mean and a deep squared-exponential kernel.

A prior is identified by a flat particle vector laid out as
``[mean-net params, feature-net params, log_sigma]`` where ``sigma`` is the
standard deviation of the Gaussian likelihood. The kernel is
``exp(-0.5 * ||f(x) - f(x')||^2)`` with ``f`` the feature network (unit
length scale).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky

from . import nn
from .nn import NetSpec

JITTER = 1e-8
MAX_JITTER = 1e-2
LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalInstabilityError(RuntimeError):
    """Cholesky factorisation failed even after jitter escalation."""

    def __init__(self, message, particle_index=None, client_id=None):
        super().__init__(message)
        self.particle_index = particle_index
        self.client_id = client_id

    def __str__(self):
        msg = super().__str__()
        tags = []
        if self.client_id is not None:
            tags.append(f"client {self.client_id}")
        if self.particle_index is not None:
            tags.append(f"particle {self.particle_index}")
        return f"{msg} ({', '.join(tags)})" if tags else msg


@dataclass(frozen=True)
class GpPriorSpec:
    mean_net: NetSpec
    feature_net: NetSpec

    def __post_init__(self):
        if self.mean_net.output_dim != 1:
            raise ValueError("mean_net must have output_dim 1")
        if self.mean_net.input_dim != self.feature_net.input_dim:
            raise ValueError("mean_net and feature_net must share input_dim")

    @classmethod
    def build(cls, input_dim=1, hidden_layers=2, hidden_width=8, feature_dim=2):
        mean = NetSpec(input_dim, hidden_layers, hidden_width, 1)
        feat = NetSpec(input_dim, hidden_layers, hidden_width, feature_dim)
        return cls(mean, feat)

    @property
    def input_dim(self) -> int:
        return self.mean_net.input_dim

    @property
    def dim(self) -> int:
        """Particle dimension: both nets plus the log noise std."""
        return self.mean_net.parameter_count + self.feature_net.parameter_count + 1

    @property
    def log_sigma_index(self) -> int:
        return self.dim - 1

    def split(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.dim,):
            raise nn.ShapeError(f"particle must have shape ({self.dim},), got {phi.shape}")
        n_mean = self.mean_net.parameter_count
        return phi[:n_mean], phi[n_mean:-1], float(phi[-1])

    def digest(self) -> str:
        key = repr((self.mean_net, self.feature_net)).encode()
        return hashlib.sha256(key).hexdigest()[:12]


def _as_matrix(spec: GpPriorSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, spec.input_dim)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise nn.ShapeError(f"expected inputs with {spec.input_dim} columns, got {X.shape}")
    return X


def mean_function(spec: GpPriorSpec, phi, X) -> np.ndarray:
    mean_p, _, _ = spec.split(phi)
    return nn.forward(spec.mean_net, mean_p, _as_matrix(spec, X))[:, 0]


def features(spec: GpPriorSpec, phi, X) -> np.ndarray:
    _, feat_p, _ = spec.split(phi)
    return nn.forward(spec.feature_net, feat_p, _as_matrix(spec, X))


def _se(F1, F2):
    sq = (F1 ** 2).sum(1)[:, None] + (F2 ** 2).sum(1)[None, :] - 2.0 * F1 @ F2.T
    return np.exp(-0.5 * np.maximum(sq, 0.0))


def kernel_matrix(spec: GpPriorSpec, phi, X1, X2=None) -> np.ndarray:
    F1 = features(spec, phi, X1)
    F2 = F1 if X2 is None else features(spec, phi, X2)
    K = _se(F1, F2)
    if X2 is None:
        np.fill_diagonal(K, 1.0)
    return K


def se_deep_kernel(spec: GpPriorSpec, phi, x1, x2) -> float:
    f1 = features(spec, phi, np.atleast_2d(x1))[0]
    f2 = features(spec, phi, np.atleast_2d(x2))[0]
    return float(np.exp(-0.5 * np.sum((f1 - f2) ** 2)))


def stable_cholesky(A, jitter=JITTER, particle_index=None):
    """Lower Cholesky factor of ``A + jitter*I`` with tenfold jitter escalation."""
    eye = np.eye(A.shape[0])
    j = jitter
    while j <= MAX_JITTER * (1 + 1e-12):
        try:
            return cholesky(A + j * eye, lower=True, check_finite=True), j
        except (LinAlgError, ValueError):
            # a zero starting jitter escalates from the default
            j = JITTER if j == 0 else j * 10.0
    raise NumericalInstabilityError(
        "Cholesky failed with jitter up to %.0e" % MAX_JITTER, particle_index=particle_index
    )


@dataclass
class _Factor:
    m: np.ndarray       # prior mean at X
    F: np.ndarray       # features at X
    K: np.ndarray
    sigma2: float
    L: np.ndarray
    alpha: np.ndarray   # A^{-1}(y - m)
    lml: float


def _factor(spec, phi, X, y, jitter, particle_index=None):
    X = _as_matrix(spec, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] < 1 or y.shape[0] != X.shape[0]:
        raise nn.ShapeError(f"need m >= 1 matching rows, got X {X.shape}, y {y.shape}")
    mean_p, feat_p, log_sigma = spec.split(phi)
    m = nn.forward(spec.mean_net, mean_p, X)[:, 0]
    F = nn.forward(spec.feature_net, feat_p, X)
    K = _se(F, F)
    np.fill_diagonal(K, 1.0)
    sigma2 = float(np.exp(2.0 * log_sigma))
    A = K + sigma2 * np.eye(len(y))
    L, _ = stable_cholesky(A, jitter, particle_index)
    r = y - m
    alpha = cho_solve((L, True), r)
    lml = -0.5 * r @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI
    return _Factor(m, F, K, sigma2, L, alpha, float(lml))


def log_marginal_likelihood(spec, phi, X, y, jitter=JITTER, particle_index=None) -> float:
    """``ln N(y; m(X), K(X, X) + sigma^2 I)``."""
    return _factor(spec, phi, X, y, jitter, particle_index).lml


def lml_and_gradient(spec, phi, X, y, jitter=JITTER, particle_index=None):
    """Log marginal likelihood and its exact gradient with respect to ``phi``."""
    X = _as_matrix(spec, X)
    fac = _factor(spec, phi, X, y, jitter, particle_index)
    mean_p, feat_p, _ = spec.split(phi)
    n = len(fac.alpha)

    # dLML/dA = 0.5 (alpha alpha^T - A^{-1})
    A_inv = cho_solve((fac.L, True), np.eye(n))
    W = 0.5 * (np.outer(fac.alpha, fac.alpha) - A_inv)

    g_mean, _ = nn.backward(spec.mean_net, mean_p, X, fac.alpha[:, None])

    # dK_ij/dF_i = -K_ij (F_i - F_j); W symmetric, so both (i,j) and (j,i) count.
    B = W * fac.K
    grad_F = 2.0 * (B @ fac.F - B.sum(1)[:, None] * fac.F)
    g_feat, _ = nn.backward(spec.feature_net, feat_p, X, grad_F)

    g_log_sigma = 2.0 * fac.sigma2 * np.trace(W)
    grad = np.concatenate([g_mean, g_feat, [g_log_sigma]])
    return fac.lml, grad


def lml_gradient(spec, phi, X, y, jitter=JITTER, particle_index=None) -> np.ndarray:
    return lml_and_gradient(spec, phi, X, y, jitter, particle_index)[1]


@dataclass
class PredictiveMixture:
    """Per-test-point Gaussian mixture, one component per prior particle.

    ``weights`` has shape ``(k,)``; ``means`` and ``variances`` have shape
    ``(n_test, k)``. Variances include the observation noise.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_evidence: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.means @ self.weights

    @property
    def variance(self) -> np.ndarray:
        mu = self.mean
        second = (self.variances + self.means ** 2) @ self.weights
        return second - mu ** 2


def _softmax_log(logw):
    logw = np.asarray(logw, dtype=np.float64)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def predict_single(spec, phi, X, y, x_star, jitter=JITTER, particle_index=None):
    """Posterior predictive mean, variance (with noise) and LML of one prior."""
    x_star = _as_matrix(spec, x_star)
    mean_p, feat_p, log_sigma = spec.split(phi)
    sigma2 = float(np.exp(2.0 * log_sigma))
    m_star = nn.forward(spec.mean_net, mean_p, x_star)[:, 0]
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        return m_star, np.full(len(m_star), 1.0 + sigma2), 0.0
    X = _as_matrix(spec, X)
    fac = _factor(spec, phi, X, y, jitter, particle_index)
    F_star = nn.forward(spec.feature_net, feat_p, x_star)
    K_star = _se(fac.F, F_star)                      # (m, n_star)
    mu = m_star + K_star.T @ fac.alpha
    V = cho_solve((fac.L, True), K_star)
    var = 1.0 - np.sum(K_star * V, axis=0)
    # Round-off can push the latent variance slightly negative.
    var = np.maximum(var, 0.0) + sigma2
    return mu, var, fac.lml


def predictive_mixture(spec, particles, X, y, x_star, jitter=JITTER) -> PredictiveMixture:
    """Mixture predictive over ``k`` priors, each conditioned on ``(X, y)``.

    Component weights are proportional to each prior's marginal likelihood
    of ``(X, y)``; with no observations the weights are uniform and each
    component is the prior predictive.
    """
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if particles.shape[0] < 1:
        raise ValueError("need at least one particle")
    means, variances, lmls = [], [], []
    for idx, phi in enumerate(particles):
        mu, var, lml = predict_single(spec, phi, X, y, x_star, jitter, particle_index=idx)
        means.append(mu)
        variances.append(var)
        lmls.append(lml)
    lmls = np.array(lmls)
    return PredictiveMixture(
        weights=_softmax_log(lmls),
        means=np.stack(means, axis=1),
        variances=np.stack(variances, axis=1),
        log_evidence=lmls,
    )


def posterior_at_inputs(spec, phi, X, y, jitter=JITTER):
    """Posterior mean/covariance of the latent function at the training inputs.

    Also returns the prior mean/covariance there; used for closed-form KL
    terms in bound diagnostics.
    """
    X = _as_matrix(spec, X)
    fac = _factor(spec, phi, X, y, jitter)
    post_mean = fac.m + fac.K @ fac.alpha
    post_cov = fac.K - fac.K @ cho_solve((fac.L, True), fac.K)
    post_cov = 0.5 * (post_cov + post_cov.T)
    return post_mean, post_cov, fac.m, fac.K, fac.sigma2
