"""Simulated federated training of a particle hyper-posterior, plus baselines.

Everything runs in one process. The only thing that crosses the
client/server boundary is a :class:`GradientMessage`.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import gp, svgd
from .data import ClientDataset
from .gp import GpPriorSpec, NumericalInstabilityError

log = logging.getLogger(__name__)

POOLED_WARN_SAMPLES = 2000


class ProtocolError(RuntimeError):
    """Messages received by the server do not match the round's selection."""


@dataclass
class RoundConfig:
    T: int = 1000
    c: int = 24
    b: int = 10
    eta: float = 0.01
    seed: int = 0
    k: int = 4

    def validate(self, n=None):
        errors = []
        if self.T < 1:
            errors.append("T: must be >= 1")
        if self.c < 1 or (n is not None and self.c > n):
            errors.append(f"c: need 1 <= c <= n (n={n})")
        if self.b < 1:
            errors.append("b: must be >= 1")
        if self.k < 1:
            errors.append("k: must be >= 1")
        if self.eta < 0:
            errors.append("eta: must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))
        return self


@dataclass
class DpConfig:
    epsilon: float = 1.0
    clip_norm: float = 1.0
    enabled: bool = False

    def validate(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon: must be positive")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm: must be positive")
        return self

    def noise_scale(self, T, c) -> float:
        """Laplace scale ``T * clip_norm / (epsilon * c)`` per coordinate."""
        return T * self.clip_norm / (self.epsilon * c)


@dataclass(frozen=True)
class GradientMessage:
    client_id: str
    round: int
    grads: np.ndarray
    batch_lml_mean: float = float("nan")

    def __post_init__(self):
        g = np.array(self.grads, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient from client {self.client_id}")
        g.setflags(write=False)
        object.__setattr__(self, "grads", g)


def client_streams(seed, n):
    """Independent generators: (server selection, particle init, DP noise, per-client list)."""
    root = np.random.SeedSequence(seed)
    children = root.spawn(3 + n)
    make = lambda s: np.random.Generator(np.random.Philox(s))  # noqa: E731
    return make(children[0]), make(children[1]), make(children[2]), [make(s) for s in children[3:]]


def client_update(dataset: ClientDataset, spec: GpPriorSpec, particles, b, rng, round=0) -> GradientMessage:
    """LML gradients of every particle on one uniformly drawn mini-batch.

    The batch LML is used as is, without rescaling to the client's size.
    """
    m = dataset.m
    if m < 1:
        raise ValueError(f"client {dataset.client_id} has no training samples")
    b = min(b, m)
    idx = np.sort(rng.choice(m, size=b, replace=False)) if b < m else np.arange(m)
    Xb, yb = dataset.X[idx], dataset.y[idx]
    particles = np.atleast_2d(particles)
    grads = np.empty_like(particles)
    lmls = np.empty(len(particles))
    for j, phi in enumerate(particles):
        try:
            lmls[j], grads[j] = gp.lml_and_gradient(spec, phi, Xb, yb, particle_index=j)
        except NumericalInstabilityError as err:
            err.client_id = dataset.client_id
            raise
    return GradientMessage(dataset.client_id, round, grads, float(lmls.mean()))


def aggregate(messages, n, c) -> np.ndarray:
    """``n`` times the mean of the ``c`` received gradient matrices.

    The mean over sampled clients, scaled by ``n``, is an unbiased estimate
    of the sum of all ``n`` clients' gradients.
    """
    if len(messages) != c:
        raise ProtocolError(f"expected {c} messages, got {len(messages)}")
    if not 1 <= c <= n:
        raise ProtocolError(f"need 1 <= c <= n, got c={c}, n={n}")
    G = np.mean([msg.grads for msg in messages], axis=0)
    return n * G


def clip_rows(G, clip_norm) -> np.ndarray:
    """Scale each row to L2 norm at most ``clip_norm``."""
    G = np.atleast_2d(G)
    norms = np.linalg.norm(G, axis=1)
    return G / np.maximum(1.0, norms / clip_norm)[:, None]


def dp_sanitize(messages, dp: DpConfig, T, c, rng, n=1) -> np.ndarray:
    """Clip each particle row per client, average, add Laplace noise, scale by ``n``."""
    if len(messages) != c:
        raise ProtocolError(f"expected {c} messages, got {len(messages)}")
    clipped = np.mean([clip_rows(msg.grads, dp.clip_norm) for msg in messages], axis=0)
    noise = rng.laplace(0.0, dp.noise_scale(T, c), size=clipped.shape)
    return n * (clipped + noise)


@dataclass
class RoundLog:
    """One row per client per round; gradient fields are blank for unselected clients."""

    rows: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)

    HEADER = ("round", "client_id", "batch_lml_mean", "grad_norm", "selected")

    def record(self, round, client_ids, messages):
        by_id = {msg.client_id: msg for msg in messages}
        for cid in client_ids:
            msg = by_id.get(cid)
            if msg is None:
                self.rows.append((round, cid, "", "", 0))
            else:
                self.rows.append((round, cid, repr(msg.batch_lml_mean),
                                  repr(float(np.linalg.norm(msg.grads))), 1))

    def selection_counts(self) -> dict:
        counts = {}
        for _, cid, _, _, sel in self.rows:
            counts[cid] = counts.get(cid, 0) + sel
        return counts

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            w.writerows(self.rows)


def run_federated(clients, spec: GpPriorSpec, hyper_prior: svgd.HyperPrior, round_cfg: RoundConfig,
                  tau, dp: DpConfig | None = None, init=None, record_trajectory=False):
    """Server loop: select, collect gradients, aggregate, take one SVGD step.

    Returns ``(particles, RoundLog)``. With ``record_trajectory`` the log
    keeps ``(particles_before, aggregated)`` for every round.
    """
    n = len(clients)
    round_cfg.validate(n)
    if dp is not None and dp.enabled:
        dp.validate()
    sel_rng, init_rng, dp_rng, rngs = client_streams(round_cfg.seed, n)
    particles = hyper_prior.sample(round_cfg.k, init_rng) if init is None else np.array(init, dtype=np.float64)
    if particles.shape != (round_cfg.k, spec.dim):
        raise ValueError(f"initial particles must have shape ({round_cfg.k}, {spec.dim})")
    ids = [cl.client_id for cl in clients]
    roundlog = RoundLog()
    for t in range(round_cfg.T):
        chosen = np.sort(sel_rng.choice(n, size=round_cfg.c, replace=False))
        messages = []
        for i in chosen:
            try:
                messages.append(client_update(clients[i], spec, particles, round_cfg.b, rngs[i], round=t))
            except NumericalInstabilityError as err:
                log.error("round %d aborted: %s", t, err)
                raise
        if dp is not None and dp.enabled:
            G = dp_sanitize(messages, dp, round_cfg.T, round_cfg.c, dp_rng, n=n)
        else:
            G = aggregate(messages, n, round_cfg.c)
        roundlog.record(t, ids, messages)
        if record_trajectory:
            roundlog.trajectory.append((particles.copy(), G))
        scores = svgd.score(particles, hyper_prior, tau, G)
        particles = svgd.svgd_update(particles, scores, round_cfg.eta)
    return particles, roundlog


# ---------------------------------------------------------------------------
# Personalization


@dataclass
class Predictor:
    """Mixture predictor conditioned on one client's samples."""

    spec: GpPriorSpec
    particles: np.ndarray
    X: np.ndarray
    y: np.ndarray

    def predict(self, x_star) -> gp.PredictiveMixture:
        return gp.predictive_mixture(self.spec, self.particles, self.X, self.y, x_star)


def personalize(dataset: ClientDataset, spec: GpPriorSpec, particles) -> Predictor:
    """Bind the client's training and personalization samples to the particles."""
    X, y = dataset.conditioning_set()
    return Predictor(spec, np.atleast_2d(particles), X, y)


# ---------------------------------------------------------------------------
# Baselines


def train_vanilla(X, y, spec: GpPriorSpec, epochs, eta, init):
    """Gradient ascent on the per-sample LML of a single dataset.

    The step is ``eta * grad(LML) / m`` so one learning rate suits clients
    of different sizes.
    """
    phi = np.array(init, dtype=np.float64)
    m = len(y)
    if m < 1:
        raise ValueError("vanilla training needs at least one sample")
    if eta == 0:
        return phi
    for _ in range(epochs):
        phi = phi + eta * gp.lml_gradient(spec, phi, X, y) / m
    return phi


def train_vanilla_clients(clients, spec, epochs, eta, hyper_prior, seed):
    """One independently trained particle per client, initialized from the hyper-prior."""
    _, init_rng, _, _ = client_streams(seed, 0)
    inits = hyper_prior.sample(len(clients), init_rng)
    out = np.empty_like(inits)
    for i, cl in enumerate(clients):
        X, y = cl.conditioning_set()
        try:
            out[i] = train_vanilla(X, y, spec, epochs, eta, inits[i])
        except NumericalInstabilityError as err:
            err.client_id = cl.client_id
            raise
    return out


def pooled_data(clients):
    X = np.vstack([cl.X for cl in clients])
    y = np.concatenate([cl.y for cl in clients])
    return X, y


def train_pooled(clients, spec, epochs, eta, hyper_prior, seed):
    """One particle trained on the concatenation of every client's training split."""
    X, y = pooled_data(clients)
    if len(y) > POOLED_WARN_SAMPLES:
        warnings.warn(f"pooled GP on {len(y)} samples; exact inference scales cubically")
    _, init_rng, _, _ = client_streams(seed, 0)
    init = hyper_prior.sample(1, init_rng)[0]
    return train_vanilla(X, y, spec, epochs, eta, init)


# ---------------------------------------------------------------------------
# Particle files


class ParticleFileError(ValueError):
    pass


def save_particles(path, particles, spec: GpPriorSpec):
    particles = np.atleast_2d(particles)
    k, d = particles.shape
    if d != spec.dim:
        raise ParticleFileError(f"particles have dimension {d}, spec expects {spec.dim}")
    with open(path, "w") as fh:
        fh.write(f"{k} {d} {spec.digest()}\n")
        for row in particles:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_particles(path, spec: GpPriorSpec | None = None) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ParticleFileError(f"{path}: malformed header")
        try:
            k, d, digest = int(header[0]), int(header[1]), header[2]
        except ValueError:
            raise ParticleFileError(f"{path}: malformed header") from None
        if spec is not None and (d != spec.dim or digest != spec.digest()):
            raise ParticleFileError(f"{path}: particles were written for a different model spec")
        rows = []
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rows.append(np.array(line.split(), dtype=np.float64))
            except ValueError:
                raise ParticleFileError(f"{path}: line {line_no} is not numeric") from None
    if any(r.size != d for r in rows) or len(rows) != k:
        found = (len(rows), rows[0].size if rows else d)
        raise ParticleFileError(f"{path}: header declares {k}x{d}, found {found}")
    particles = np.array(rows).reshape(k, d)
    if not np.all(np.isfinite(particles)):
        raise ParticleFileError(f"{path}: non-finite particle values")
    return particles
