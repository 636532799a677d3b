"""Stein variational gradient descent over a set of prior particles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform


@dataclass
class HyperPrior:
    """Isotropic Gaussian over particle space."""

    mean: np.ndarray
    variance: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        if not self.variance > 0:
            raise ValueError("hyper-prior variance must be positive")

    @classmethod
    def for_spec(cls, gp_spec, variance, noise_std_mean=0.4):
        """Zero mean over net weights; log-noise centred at ``ln(noise_std_mean)``."""
        mean = np.zeros(gp_spec.dim)
        mean[gp_spec.log_sigma_index] = np.log(noise_std_mean)
        return cls(mean, variance)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, phi) -> np.ndarray:
        phi = np.atleast_2d(phi)
        d = self.dim
        sq = np.sum((phi - self.mean) ** 2, axis=1)
        return -0.5 * sq / self.variance - 0.5 * d * np.log(2.0 * np.pi * self.variance)

    def grad_log_density(self, phi) -> np.ndarray:
        return -(np.asarray(phi) - self.mean) / self.variance

    def sample(self, k, rng) -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((k, self.dim))


def median_bandwidth(particles) -> float:
    """Squared length scale ``median(sq. pairwise dist) / (2 ln(k + 1))``."""
    k = particles.shape[0]
    if k < 2:
        return 1.0
    med = float(np.median(pdist(particles, "sqeuclidean")))
    if med <= 0.0:
        return 1.0
    return med / (2.0 * np.log(k + 1.0))


def rbf_kernel_matrix(particles):
    """RBF kernel between particles and its gradient in the first argument.

    Returns ``K`` with ``K[l, j] = exp(-|phi_l - phi_j|^2 / (2 ell^2))`` and
    ``grad_K`` of shape ``(k, k, d)`` with ``grad_K[l, j] = dK[l, j]/dphi_l``.
    """
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    ell2 = median_bandwidth(particles)
    sq = squareform(pdist(particles, "sqeuclidean")) if len(particles) > 1 else np.zeros((1, 1))
    K = np.exp(-sq / (2.0 * ell2))
    diff = particles[:, None, :] - particles[None, :, :]
    grad_K = -K[:, :, None] * diff / ell2
    return K, grad_K


def score(particles, hyper_prior: HyperPrior, tau, aggregated_grads) -> np.ndarray:
    """Gradient of the log target: hyper-prior pull plus tempered data term."""
    particles = np.atleast_2d(particles)
    aggregated_grads = np.atleast_2d(aggregated_grads)
    if aggregated_grads.shape != particles.shape:
        raise ValueError(
            f"gradient shape {aggregated_grads.shape} does not match particles {particles.shape}"
        )
    return hyper_prior.grad_log_density(particles) + tau * aggregated_grads


def svgd_step(particles, scores, K, grad_K, eta) -> np.ndarray:
    """One transport step; returns a new particle array."""
    particles = np.atleast_2d(particles)
    k = particles.shape[0]
    phi = (K.T @ scores + grad_K.sum(axis=0)) / k
    return particles + eta * phi


def svgd_update(particles, scores, eta) -> np.ndarray:
    K, grad_K = rbf_kernel_matrix(particles)
    return svgd_step(particles, scores, K, grad_K, eta)
