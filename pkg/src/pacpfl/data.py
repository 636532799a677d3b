"""Client datasets, the bimodal polynomial task generator, CSV I/O and standardization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_COLUMN = "split"
SPLITS = ("train", "personal", "test")


class DataError(ValueError):
    """Malformed dataset, CSV file or generator config."""


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox generator; bit-stable across platforms."""
    return np.random.Generator(np.random.Philox(seed))


def _empty(d):
    return np.zeros((0, d)), np.zeros(0)


@dataclass
class ClientDataset:
    """One client's private samples.

    ``X, y`` is the split used in federated training, ``X_personal,
    y_personal`` the extra samples used only for personalization and
    ``X_test, y_test`` the held-out evaluation split. ``f_test`` optionally
    stores the noiseless targets of the test split (synthetic data only).
    """

    X: np.ndarray
    y: np.ndarray
    X_personal: np.ndarray = None
    y_personal: np.ndarray = None
    X_test: np.ndarray = None
    y_test: np.ndarray = None
    f_test: np.ndarray = None
    client_id: str = ""
    mode: int = -1

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.X.size == 0:
            self.X = self.X.reshape(0, max(self.X.shape[-1], 1))
        d = self.X.shape[1]
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X_personal is None:
            self.X_personal, self.y_personal = _empty(d)
        if self.X_test is None:
            self.X_test, self.y_test = _empty(d)
        self.X_personal = np.asarray(self.X_personal, dtype=np.float64).reshape(-1, d)
        self.y_personal = np.asarray(self.y_personal, dtype=np.float64).ravel()
        self.X_test = np.asarray(self.X_test, dtype=np.float64).reshape(-1, d)
        self.y_test = np.asarray(self.y_test, dtype=np.float64).ravel()
        if self.f_test is not None:
            self.f_test = np.asarray(self.f_test, dtype=np.float64).ravel()
        for name, Xs, ys in self._splits():
            if Xs.shape[0] != ys.shape[0]:
                raise DataError(f"{self.client_id or 'client'}: {name} split has mismatched X/y")
            if not (np.all(np.isfinite(Xs)) and np.all(np.isfinite(ys))):
                raise DataError(f"{self.client_id or 'client'}: {name} split has non-finite values")

    def _splits(self):
        yield "train", self.X, self.y
        yield "personal", self.X_personal, self.y_personal
        yield "test", self.X_test, self.y_test

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def m_tilde(self) -> int:
        return self.X_personal.shape[0]

    def conditioning_set(self) -> tuple[np.ndarray, np.ndarray]:
        """Training and personalization samples together."""
        return (
            np.vstack([self.X, self.X_personal]),
            np.concatenate([self.y, self.y_personal]),
        )


@dataclass
class StandardizationParams:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def transform_x(self, X):
        return (np.asarray(X) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def as_dict(self):
        return {
            "x_mean": [float(v) for v in self.x_mean],
            "x_std": [float(v) for v in self.x_std],
            "y_mean": float(self.y_mean),
            "y_std": float(self.y_std),
        }


def standardize(dataset: ClientDataset, x_stats=None) -> tuple[ClientDataset, StandardizationParams]:
    """Standardize all splits with statistics of the fitting split.

    The fitting split is the training split, or the personalization split
    for clients that hold no training samples (new clients). ``x_stats``
    optionally fixes the feature ``(mean, std)`` instead, for inputs whose
    distribution is known and shared by all clients.
    """
    X_fit, y_fit = dataset.X, dataset.y
    if X_fit.shape[0] == 0:
        X_fit, y_fit = dataset.X_personal, dataset.y_personal
    if X_fit.shape[0] < 2:
        raise DataError("standardization needs at least 2 samples")
    if x_stats is None:
        x_mean, x_std = X_fit.mean(axis=0), X_fit.std(axis=0)
    else:
        x_mean = np.broadcast_to(np.asarray(x_stats[0], dtype=np.float64), (dataset.dim,)).copy()
        x_std = np.broadcast_to(np.asarray(x_stats[1], dtype=np.float64), (dataset.dim,)).copy()
    y_mean = float(y_fit.mean())
    y_std = float(y_fit.std())
    bad = [f"x{j + 1}" for j in np.flatnonzero(x_std == 0)]
    if y_std == 0:
        bad.append("y")
    if bad:
        raise DataError(f"zero variance in column(s): {', '.join(bad)}")
    p = StandardizationParams(x_mean, x_std, y_mean, y_std)
    out = ClientDataset(
        X=p.transform_x(dataset.X),
        y=p.transform_y(dataset.y),
        X_personal=p.transform_x(dataset.X_personal),
        y_personal=p.transform_y(dataset.y_personal),
        X_test=p.transform_x(dataset.X_test),
        y_test=p.transform_y(dataset.y_test),
        f_test=None if dataset.f_test is None else p.transform_y(dataset.f_test),
        client_id=dataset.client_id,
        mode=dataset.mode,
    )
    return out, p


# ---------------------------------------------------------------------------
# Synthetic task distribution


@dataclass
class ModeConfig:
    """One mixture component of the task distribution.

    Functions are drawn from a GP whose mean is the order-7 polynomial with
    ``poly_coeffs`` (lowest degree first) and whose kernel is
    ``se_variance * exp(-(x - x')^2 / (2 se_length_scale^2))``.
    """

    poly_coeffs: list
    se_length_scale: float
    weight: float
    se_variance: float = 1.0


@dataclass
class TaskDistributionConfig:
    modes: list = field(default_factory=list)
    noise_std: float = 0.1
    x_range: tuple = (-1.0, 1.0)
    seed: int = 0

    def validate(self):
        errors = []
        if not self.modes:
            errors.append("modes: at least one mode is required")
        for i, mode in enumerate(self.modes):
            if len(mode.poly_coeffs) != 8:
                errors.append(f"modes[{i}].poly_coeffs: expected 8 coefficients")
            if not mode.se_length_scale > 0:
                errors.append(f"modes[{i}].se_length_scale: must be positive")
            if mode.se_variance < 0:
                errors.append(f"modes[{i}].se_variance: must be >= 0")
            if not 0.0 <= mode.weight <= 1.0:
                errors.append(f"modes[{i}].weight: must lie in [0, 1]")
        weights = [m.weight for m in self.modes]
        if self.modes and not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            errors.append(f"modes[{len(self.modes) - 1}].weight: mode weights sum to {sum(weights)}, not 1")
        if self.noise_std < 0:
            errors.append("noise_std: must be >= 0")
        lo, hi = self.x_range
        if not lo < hi:
            errors.append("x_range: need lo < hi")
        if errors:
            raise DataError("; ".join(errors))
        return self

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.modes])


def default_polynomial_config(seed=0) -> TaskDistributionConfig:
    """Two-mode polynomial task used by the experiments.

    The mode means are odd degree-7 polynomials that rise and fall like a
    smoothed step, and mode b is the negation of mode a. Averaging over modes
    therefore cancels the mean, and a model that ignores the mode of a client
    predicts poorly. The residual GP term is small, so the noise sets the
    predictive floor.
    """
    coeffs = [0.0, 3.467, 0.0, -8.358, 0.0, 10.787, 0.0, -4.956]
    mode_a = ModeConfig(poly_coeffs=coeffs, se_length_scale=0.4, weight=0.5, se_variance=0.001)
    mode_b = ModeConfig(poly_coeffs=[-c for c in coeffs], se_length_scale=0.8, weight=0.5,
                        se_variance=0.001)
    return TaskDistributionConfig(modes=[mode_a, mode_b], noise_std=0.1, x_range=(-1.0, 1.0), seed=seed)


def _se_gram(x, length_scale, variance):
    d = x[:, None] - x[None, :]
    return variance * np.exp(-0.5 * (d / length_scale) ** 2)


def sample_function(mode: ModeConfig, x, rng) -> np.ndarray:
    """Joint draw of a GP function at locations ``x``."""
    mean = np.polynomial.polynomial.polyval(x, mode.poly_coeffs)
    if mode.se_variance == 0:
        return mean
    K = _se_gram(x, mode.se_length_scale, mode.se_variance)
    jitter = 1e-8 * max(mode.se_variance, 1.0)
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(x)))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > 1e-2 * max(mode.se_variance, 1.0):
                raise DataError("joint kernel for function draw is singular")
    return mean + L @ rng.standard_normal(len(x))


def sample_client(config, mode_index, m_fit, m_test, rng, client_id="", fit_split="train", m_personal=0):
    """Draw one client; ``m_fit`` samples go to ``fit_split``, then personal and test samples."""
    mode = config.modes[mode_index]
    lo, hi = config.x_range
    total = m_fit + m_personal + m_test
    x = rng.uniform(lo, hi, size=total)
    f = sample_function(mode, x, rng)
    y = f + config.noise_std * rng.standard_normal(total)
    X = x[:, None]
    a, b = m_fit, m_fit + m_personal
    test = dict(X_test=X[b:], y_test=y[b:], f_test=f[b:])
    if fit_split == "train":
        return ClientDataset(X=X[:a], y=y[:a], X_personal=X[a:b], y_personal=y[a:b],
                             client_id=client_id, mode=mode_index, **test)
    return ClientDataset(
        X=np.zeros((0, 1)), y=np.zeros(0), X_personal=X[:b], y_personal=y[:b],
        client_id=client_id, mode=mode_index, **test,
    )


@dataclass
class FederationDataset:
    existing: list
    new: list = field(default_factory=list)
    standardization: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.existing)


def generate_polynomial(config: TaskDistributionConfig, n_clients, m_train, m_test, rng=None,
                        n_new=0, m_new=None, m_personal=0, standardize_clients=True,
                        feature_scaling="client") -> FederationDataset:
    """Sample existing and new clients from the task distribution.

    Each client draws a mode by weight, then a function from that mode's GP
    jointly at uniformly drawn inputs, then Gaussian observation noise. New
    clients keep their ``m_new`` fitting samples in the personalization split;
    existing clients get ``m_personal`` extra personalization samples.

    Targets and inputs are standardized per client on the fitting split.
    With ``feature_scaling="range"`` inputs use the moments of the uniform
    input law instead, so a given raw input maps to the same value for
    every client.
    """
    config.validate()
    if rng is None:
        rng = make_rng(config.seed)
    m_new = m_train if m_new is None else m_new
    if feature_scaling not in ("range", "client"):
        raise DataError(f"unknown feature_scaling {feature_scaling!r}")
    lo, hi = config.x_range
    x_stats = ((lo + hi) / 2.0, (hi - lo) / math.sqrt(12.0)) if feature_scaling == "range" else None
    weights = config.weights
    existing, new, params = [], [], {}
    for group, count, m_fit, m_extra, split in (("existing", n_clients, m_train, m_personal, "train"),
                                               ("new", n_new, m_new, 0, "personal")):
        for i in range(count):
            cid = f"{group}_{i:03d}"
            mode = int(rng.choice(len(weights), p=weights))
            client = sample_client(config, mode, m_fit, m_test, rng, client_id=cid,
                                   fit_split=split, m_personal=m_extra)
            if standardize_clients:
                client, p = standardize(client, x_stats)
                params[cid] = p
            (existing if group == "existing" else new).append(client)
    return FederationDataset(existing=existing, new=new, standardization=params)


# ---------------------------------------------------------------------------
# CSV


def save_csv(dataset: ClientDataset, path, target_column="y"):
    """Write all splits of a client to one CSV with a ``split`` marker column."""
    d = dataset.dim
    header = [f"x{j + 1}" for j in range(d)] + [target_column, SPLIT_COLUMN]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for name, Xs, ys in dataset._splits():
            for row, target in zip(Xs, ys):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(target)), name])


def load_csv(path, target_column="y", client_id=None) -> ClientDataset:
    """Read a client CSV; an optional ``split`` column assigns rows to splits.

    Rows without a split column are training samples. Errors name the data
    row (1-based, header excluded) and the column.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if target_column not in header:
            raise DataError(f"{path}: missing target column {target_column!r}")
        has_split = SPLIT_COLUMN in header
        feature_cols = [h for h in header if h not in (target_column, SPLIT_COLUMN)]
        if not feature_cols:
            raise DataError(f"{path}: no feature columns")
        rows = {s: ([], []) for s in SPLITS}
        for row_no, record in enumerate(reader, start=1):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise DataError(
                    f"{path}: row {row_no} (line {row_no + 1}) has {len(record)} fields, "
                    f"expected {len(header)}"
                )
            values = dict(zip(header, record))
            parsed = []
            for col in feature_cols + [target_column]:
                try:
                    v = float(values[col])
                except ValueError:
                    raise DataError(
                        f"{path}: row {row_no} (line {row_no + 1}), column {col!r}: "
                        f"cannot parse {values[col]!r} as a number"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(
                        f"{path}: row {row_no} (line {row_no + 1}), column {col!r}: non-finite value"
                    )
                parsed.append(v)
            split = values[SPLIT_COLUMN].strip() if has_split else "train"
            if split not in rows:
                raise DataError(
                    f"{path}: row {row_no} (line {row_no + 1}), column {SPLIT_COLUMN!r}: "
                    f"unknown split {split!r}"
                )
            rows[split][0].append(parsed[:-1])
            rows[split][1].append(parsed[-1])
    d = len(feature_cols)

    def arr(split):
        X, y = rows[split]
        return np.array(X, dtype=np.float64).reshape(-1, d), np.array(y, dtype=np.float64)

    X, y = arr("train")
    Xp, yp = arr("personal")
    Xt, yt = arr("test")
    return ClientDataset(X=X, y=y, X_personal=Xp, y_personal=yp, X_test=Xt, y_test=yt,
                         client_id=client_id or path.stem)
