"""Dataset loading, training, evaluation and bound reports for one configured run."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.linalg import cho_solve
from scipy.special import logsumexp

from . import data, fed, gp, metrics, pacbayes, svgd
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

PFEDGP_VARIANCE = 1e6
PARTITION_SAMPLES = 256


def gp_spec(cfg: ExperimentConfig) -> gp.GpPriorSpec:
    m = cfg.model
    return gp.GpPriorSpec.build(m.input_dim, m.hidden_layers, m.hidden_width, m.feature_dim)


def effective_config(cfg: ExperimentConfig) -> tuple[ExperimentConfig, list[str]]:
    """Apply the fixed settings each mode implies; returns the copy and notes to log."""
    out = copy.deepcopy(cfg)
    notes = []
    if out.mode == "pfedgp_mode":
        out.fed.k = 1
        out.hyper_prior.variance = PFEDGP_VARIANCE
        notes.append(f"pfedgp_mode: forcing k=1 and hyper-prior variance {PFEDGP_VARIANCE:g}")
    elif out.mode in ("vanilla", "pooled"):
        notes.append(f"{out.mode}: only fed.T (epochs) and fed.eta are used from the fed section")
    if out.mode != "pacpfl_dp":
        out.dp.enabled = False
    else:
        out.dp.enabled = True
    return out, notes


def hyper_prior(cfg: ExperimentConfig, spec) -> svgd.HyperPrior:
    return svgd.HyperPrior.for_spec(spec, cfg.hyper_prior.variance, cfg.hyper_prior.noise_std_mean)


# ---------------------------------------------------------------------------
# Data


def load_dataset(cfg: ExperimentConfig) -> data.FederationDataset:
    d = cfg.data
    if d.source == "synthetic":
        task = d.task
        rng = data.make_rng(task.seed)
        return data.generate_polynomial(
            task, d.n_clients, d.m_train, d.m_test, rng=rng, n_new=d.n_new, m_new=d.m_new,
            m_personal=d.m_personal, feature_scaling=d.feature_scaling,
        )
    return load_manifest(d.manifest)


def write_dataset(dataset: data.FederationDataset, out_dir):
    """One CSV per non-empty split of every client plus ``manifest.yaml``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for group, clients in (("existing", dataset.existing), ("new", dataset.new)):
        for cl in clients:
            entry = {"id": cl.client_id, "group": group}
            for split, X, y in cl._splits():
                if len(y) == 0:
                    continue
                name = f"{cl.client_id}_{split}.csv"
                data.save_csv(data.ClientDataset(X=X, y=y), out_dir / name)
                entry[split] = name
            if cl.f_test is not None and len(cl.f_test):
                name = f"{cl.client_id}_latent.csv"
                data.save_csv(data.ClientDataset(X=cl.X_test, y=cl.f_test), out_dir / name)
                entry["latent"] = name
            if cl.client_id in dataset.standardization:
                entry["standardization"] = dataset.standardization[cl.client_id].as_dict()
            entries.append(entry)
    with open(out_dir / "manifest.yaml", "w") as fh:
        yaml.safe_dump({"clients": entries}, fh, sort_keys=False)
    return out_dir / "manifest.yaml"


def load_manifest(path) -> data.FederationDataset:
    """Read a manifest whose entries name per-split CSVs or one CSV with a split column."""
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    existing, new = [], []
    for i, entry in enumerate(raw.get("clients", [])):
        cid = entry.get("id", f"client_{i:03d}")
        group = entry.get("group", "existing")
        if group not in ("existing", "new"):
            raise data.DataError(f"{path}: clients[{i}].group must be 'existing' or 'new'")
        if "file" in entry:
            cl = data.load_csv(path.parent / entry["file"], client_id=cid)
        else:
            parts = {}
            for split in data.SPLITS:
                if split in entry:
                    part = data.load_csv(path.parent / entry[split], client_id=cid)
                    parts[split] = (part.X, part.y)
            if not parts:
                raise data.DataError(f"{path}: clients[{i}] lists no data files")
            d = next(iter(parts.values()))[0].shape[1]
            empty = (np.zeros((0, d)), np.zeros(0))
            X, y = parts.get("train", empty)
            Xp, yp = parts.get("personal", empty)
            Xt, yt = parts.get("test", empty)
            f_test = None
            if "latent" in entry:
                f_test = data.load_csv(path.parent / entry["latent"]).y
            cl = data.ClientDataset(X=X, y=y, X_personal=Xp, y_personal=yp, X_test=Xt, y_test=yt,
                                    f_test=f_test, client_id=cid)
        (existing if group == "existing" else new).append(cl)
    if not existing:
        raise data.DataError(f"{path}: no existing clients")
    return data.FederationDataset(existing=existing, new=new)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    mode: str
    particles: np.ndarray
    roundlog: fed.RoundLog | None = None
    notes: list = field(default_factory=list)


def bound_context(cfg: ExperimentConfig, dataset) -> pacbayes.BoundContext:
    """Constants for the bounds; ``beta`` is the mean client sample count."""
    m = np.array([cl.m for cl in dataset.existing])
    m_tilde = np.array([cl.m_tilde for cl in dataset.existing])
    b = cfg.bounds
    return pacbayes.BoundContext(
        m=m, m_tilde=m_tilde, beta=float(m.mean()), lam=b.lam, upsilon=b.upsilon,
        delta=b.delta, loss_bounds=(b.a, b.b),
    )


def temperature(cfg, dataset) -> float:
    ctx = bound_context(cfg, dataset)
    try:
        ctx.validate()
    except ValueError as err:
        raise ConfigError(f"bounds: {err}") from None
    return ctx.tau


def train(cfg: ExperimentConfig, dataset) -> TrainResult:
    configured = cfg
    cfg, notes = effective_config(cfg)
    for note in notes:
        log.warning(note)
    spec = gp_spec(cfg)
    prior = hyper_prior(cfg, spec)
    if cfg.mode == "vanilla":
        clients = dataset.existing + dataset.new
        P = fed.train_vanilla_clients(clients, spec, cfg.fed.T, cfg.fed.eta, prior, cfg.fed.seed)
        return TrainResult(cfg.mode, P, None, notes)
    if cfg.mode == "pooled":
        phi = fed.train_pooled(dataset.existing, spec, cfg.fed.T, cfg.fed.eta, prior, cfg.fed.seed)
        return TrainResult(cfg.mode, phi[None, :], None, notes)
    tau = temperature(cfg, dataset)
    dp = cfg.dp if cfg.mode == "pacpfl_dp" else None
    init = None
    if cfg.mode == "pfedgp_mode":
        # The flat hyper-prior only removes the pull; start from a configured-prior draw.
        _, init_rng, _, _ = fed.client_streams(cfg.fed.seed, dataset.n)
        init = hyper_prior(configured, spec).sample(cfg.fed.k, init_rng)
    P, roundlog = fed.run_federated(dataset.existing, spec, prior, cfg.fed, tau, dp=dp, init=init)
    return TrainResult(cfg.mode, P, roundlog, notes)


# ---------------------------------------------------------------------------
# Evaluation


def _oracle_prediction(cfg, dataset, cl):
    if cl.f_test is None:
        raise ConfigError("oracle: the dataset has no latent test targets")
    p = dataset.standardization.get(cl.client_id)
    noise = cfg.data.task.noise_std / (p.y_std if p is not None else 1.0)
    return metrics.PredictionSet.gaussian(cl.f_test, max(noise ** 2, 1e-12), cl.y_test)


def predictions(cfg: ExperimentConfig, dataset, particles):
    """Yield ``(client, group, PredictionSet)`` for every client with test samples.

    With ``cfg.oracle`` the noiseless test targets plus the generator's noise
    variance stand in for a trained model and ``particles`` is ignored.
    """
    cfg, _ = effective_config(cfg)
    spec = gp_spec(cfg)
    n = dataset.n
    groups = [("existing", dataset.existing)]
    if dataset.new:
        groups.append(("new", dataset.new))
    if cfg.oracle:
        for group, clients in groups:
            for cl in clients:
                if len(cl.y_test):
                    yield cl, group, _oracle_prediction(cfg, dataset, cl)
        return
    if particles is None:
        raise ValueError("particles are required unless the oracle predictor is selected")
    particles = np.atleast_2d(particles)
    if cfg.mode == "vanilla" and particles.shape[0] != n + len(dataset.new):
        raise fed.ParticleFileError(
            f"vanilla run needs {n + len(dataset.new)} particles, file has {particles.shape[0]}"
        )
    pooled_X = pooled_y = None
    if cfg.mode == "pooled":
        pooled_X, pooled_y = fed.pooled_data(dataset.existing)
    for group, clients in groups:
        for j, cl in enumerate(clients):
            if len(cl.y_test) == 0:
                continue
            if cfg.mode == "vanilla":
                row = j if group == "existing" else n + j
                predictor = fed.personalize(cl, spec, particles[row])
            elif cfg.mode == "pooled":
                predictor = fed.Predictor(spec, particles, pooled_X, pooled_y)
            else:
                predictor = fed.personalize(cl, spec, particles)
            try:
                mix = predictor.predict(cl.X_test)
            except gp.NumericalInstabilityError as err:
                err.client_id = cl.client_id
                raise
            yield cl, group, metrics.PredictionSet.from_mixture(mix, cl.y_test)


def evaluate(cfg: ExperimentConfig, dataset, particles):
    """Per-client ``(client_id, group, rsmse, ce)`` rows and per-group summaries."""
    rows = []
    for cl, group, ps in predictions(cfg, dataset, particles):
        rows.append((cl.client_id, group, metrics.rsmse(ps), metrics.calibration_error_regression(ps)))
    summaries = []
    for group in ("existing", "new"):
        sel = [r for r in rows if r[1] == group]
        if not sel:
            continue
        summaries.append(metrics.summarize([r[2] for r in sel], group, "rsmse"))
        summaries.append(metrics.summarize([r[3] for r in sel], group, "ce"))
    return rows, summaries


# ---------------------------------------------------------------------------
# Bound report


def _gaussian_kl(mu_q, cov_q, mu_p, cov_p, jitter=1e-8):
    n = len(mu_q)
    eye = np.eye(n)
    Lp, _ = gp.stable_cholesky(cov_p, jitter)
    Lq, _ = gp.stable_cholesky(cov_q, jitter)
    trace = np.trace(cho_solve((Lp, True), cov_q + jitter * eye))
    diff = mu_p - mu_q
    quad = diff @ cho_solve((Lp, True), diff)
    logdet = 2.0 * (np.log(np.diag(Lp)).sum() - np.log(np.diag(Lq)).sum())
    return 0.5 * (trace + quad - n + logdet)


def client_report(cfg, spec, cl, particles, ctx, tau):
    """Client-level bound for the posterior built on the best-evidence particle.

    The posterior is the exact GP posterior at the conditioning inputs; the
    empirical risk is the posterior-expected Gaussian NLL per sample,
    clipped to the loss window.
    """
    X, y = cl.conditioning_set()
    lmls = [gp.log_marginal_likelihood(spec, phi, X, y) for phi in particles]
    phi = particles[int(np.argmax(lmls))]
    post_mean, post_cov, prior_mean, prior_cov, sigma2 = gp.posterior_at_inputs(spec, phi, X, y)
    nll = 0.5 * np.log(2.0 * np.pi * sigma2) + ((y - post_mean) ** 2 + np.diag(post_cov)) / (2.0 * sigma2)
    a, b = ctx.loss_bounds
    risk = float(np.mean(np.clip(nll, a, b)))
    clipped = float(np.mean((nll < a) | (nll > b)))
    kl = float(_gaussian_kl(post_mean, post_cov, prior_mean, prior_cov))
    m_total = len(y)
    eps = pacbayes.epsilon_for_client(ctx.beta, tau, ctx.loss_bounds, cl.m)
    value = pacbayes.client_bound(risk, kl, m_total, m_total, eps, cl.m, ctx.delta, ctx.loss_bounds)
    return {"client_id": cl.client_id, "empirical_risk": risk, "kl": kl, "epsilon": eps,
            "I": pacbayes.dp_penalty_I(eps, cl.m, ctx.delta), "clipped_fraction": clipped,
            "bound": value}


def log_partition_estimate(cfg, spec, prior, dataset, tau, rng, samples=PARTITION_SAMPLES):
    """Monte Carlo ``ln E_prior[exp(tau * sum_i LML_i)]`` from hyper-prior draws."""
    draws = prior.sample(samples, rng)
    total = np.zeros(samples)
    for cl in dataset.existing:
        for s, phi in enumerate(draws):
            try:
                total[s] += gp.log_marginal_likelihood(spec, phi, cl.X, cl.y)
            except gp.NumericalInstabilityError:
                total[s] = -math.inf
    return float(logsumexp(tau * total) - math.log(samples))


def bounds_report(cfg: ExperimentConfig, dataset, particles=None) -> dict:
    """Term-by-term audit of every bound quantity."""
    cfg, _ = effective_config(cfg)
    ctx = bound_context(cfg, dataset)
    try:
        ctx.validate()
    except ValueError as err:
        raise ConfigError(f"bounds: {err}") from None
    tau = ctx.tau
    spec = gp_spec(cfg)
    prior = hyper_prior(cfg, spec)
    eps = [pacbayes.epsilon_for_client(ctx.beta, tau, ctx.loss_bounds, mi) for mi in ctx.m]
    nonvac = pacbayes.check_nonvacuous(ctx, eps)
    report = {
        "n": ctx.n,
        "n2": ctx.n2,
        "beta": ctx.beta,
        "lambda": ctx.lam,
        "upsilon": ctx.upsilon,
        "delta": ctx.delta,
        "loss_bounds": list(ctx.loss_bounds),
        "tau": tau,
        "kl_coefficient": ctx.kl_coefficient,
        "epsilons": [float(e) for e in eps],
        "I": [pacbayes.dp_penalty_I(e, int(mi), ctx.delta) for e, mi in zip(eps, ctx.m)],
        "deltas": [float(d) for d in pacbayes.deltas(ctx)],
        "nonvacuous": nonvac.as_dict(),
    }
    rng = data.make_rng(np.random.SeedSequence([cfg.seed, 1]))
    log_Z = log_partition_estimate(cfg, spec, prior, dataset, tau, rng)
    report["log_partition_estimate"] = log_Z
    report["new_client_terms"] = pacbayes.new_client_bound_terms(log_Z, ctx)
    report["new_client_bound"] = pacbayes.new_client_bound(log_Z, ctx)
    if particles is not None and cfg.mode not in ("vanilla", "pooled"):
        particles = np.atleast_2d(particles)
        neg = np.array([
            -np.mean([gp.log_marginal_likelihood(spec, phi, cl.X, cl.y) for phi in particles])
            for cl in dataset.existing
        ])
        # Particles carry no density, so cross-entropy to the hyper-prior stands in for KL.
        kl_surrogate = float(-np.mean(prior.log_density(particles)))
        report["kl_surrogate"] = kl_surrogate
        report["server_terms"] = pacbayes.server_bound_terms(neg, kl_surrogate, ctx)
        report["server_bound"] = pacbayes.server_bound(neg, kl_surrogate, ctx)
        report["clients"] = [client_report(cfg, spec, cl, particles, ctx, tau) for cl in dataset.existing]
    return report


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(report: dict, path):
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(report), fh, sort_keys=False)
