"""Datasets, standardisation, synthetic generators and output corruption."""
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import adgrad as ad
from . import gp_core
from .kernel import KernelParams, gram

DOMAIN = (0.0, 100.0)
CLUSTER_MEANS = (10.0, 30.0, 50.0, 70.0, 90.0)
CONDITIONS = ("noise", "smoothness", "clustering")
MAX_SYNTH_N = 5000


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Raw inputs/outputs plus the statistics used to standardise them.

    ``Xs``/``ys`` are the standardised views the models are fitted on.
    Constant input columns keep unit scale and are listed in ``constant_columns``.
    """

    X: np.ndarray
    y: np.ndarray
    provenance: str = ""
    columns: list = None
    extras: dict = field(default_factory=dict)
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_mean: float = None
    y_std: float = None
    constant_columns: list = field(default_factory=list)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        self.X = X[:, None] if X.ndim == 1 else X
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.size or self.y.size == 0:
            raise DataError(f"inputs have {self.X.shape[0]} rows, outputs {self.y.size}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite values")
        if self.x_mean is None:
            self.x_mean = self.X.mean(axis=0)
            sd = self.X.std(axis=0)
            self.constant_columns = [int(i) for i in np.flatnonzero(sd == 0)]
            self.x_std = np.where(sd > 0, sd, 1.0)
        if self.y_mean is None:
            self.y_mean = float(self.y.mean())
            sd = float(self.y.std())
            self.y_std = sd if sd > 0 else 1.0

    @property
    def N(self):
        return self.y.size

    @property
    def Xs(self):
        return self.standardize_x(self.X)

    @property
    def ys(self):
        return (self.y - self.y_mean) / self.y_std

    def standardize_x(self, X):
        X = np.asarray(X, dtype=float)
        X = X[:, None] if X.ndim == 1 else X
        return (X - self.x_mean) / self.x_std

    def standardize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def unstandardize_y(self, ys):
        return np.asarray(ys, dtype=float) * self.y_std + self.y_mean

    def unstandardize_var(self, var):
        return np.asarray(var, dtype=float) * self.y_std ** 2

    def stats(self):
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std,
                "constant_columns": list(self.constant_columns)}


@dataclass
class SynthSpec:
    condition: str = "noise"
    intensity: float = None
    N: int = 500
    seed: int = 0
    noise: float = 0.1
    lengthscale: float = 1.0

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        if self.intensity is None:
            self.intensity = {"noise": self.noise, "smoothness": self.lengthscale,
                              "clustering": 1.0}[self.condition]
        if self.condition == "noise" and self.intensity < 0:
            raise ValueError("noise level must be non-negative")
        if self.condition != "noise" and self.intensity <= 0:
            raise ValueError(f"{self.condition} intensity must be positive")

    @property
    def sigma(self):
        return self.intensity if self.condition == "noise" else self.noise

    @property
    def gamma(self):
        return self.intensity if self.condition == "smoothness" else self.lengthscale


def _sample_inputs(spec, rng):
    lo, hi = DOMAIN
    if spec.condition != "clustering":
        return rng.uniform(lo, hi, size=spec.N)
    comp = rng.integers(len(CLUSTER_MEANS), size=spec.N)
    sd = 1.0 / np.sqrt(spec.intensity)
    means = np.asarray(CLUSTER_MEANS)[comp]
    # truncated to the domain so that a vanishing precision tends to uniform
    a, b = (lo - means) / sd, (hi - means) / sd
    return truncnorm.rvs(a, b, loc=means, scale=sd, random_state=rng)


def synth_generate(spec):
    """Draw ``x ~ p(x)``, ``f ~ GP(0, RBF(variance 1, lengthscale gamma))``, ``y = f + sigma eps``."""
    if spec.N > MAX_SYNTH_N:
        raise DataError(f"dense GP sampling is limited to N <= {MAX_SYNTH_N}")
    rng = np.random.default_rng(spec.seed)
    x = _sample_inputs(spec, rng)
    K = gram(KernelParams.init(1, spec.gamma, 1.0), x[:, None]).value
    L = ad.cholesky(K).value
    f = L @ rng.standard_normal(spec.N)
    y = f + spec.sigma * rng.standard_normal(spec.N)
    tag = f"synth:{spec.condition}={spec.intensity:g}:N={spec.N}:seed={spec.seed}"
    return Dataset(x[:, None], y, provenance=tag, columns=["x", "y"], extras={"f": f})


def corrupt_outputs(y, v, seed):
    """``y + eps * sd(y) * v`` with standard normal ``eps``."""
    if not 0.0 <= v < 1.0:
        raise ValueError("corruption level must lie in [0, 1)")
    y = np.asarray(y, dtype=float)
    eps = np.random.default_rng(seed).standard_normal(y.shape)
    return y + eps * np.std(y) * v


def load_csv(path, target=None):
    """Numeric CSV with a header row; ``target`` names the output column (default: last)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    if target is None:
        t = len(header) - 1
    elif target in header:
        t = header.index(target)
    else:
        raise DataError(f"{path}: target column {target!r} not in header {header}")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "":
                raise DataError(f"{path}: missing value at row {i}, column {header[j]!r}")
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric value {cell!r} at row {i}, column {header[j]!r}") from None
    X = np.delete(values, t, axis=1)
    cols = [h for j, h in enumerate(header) if j != t] + [header[t]]
    return Dataset(X, values[:, t], provenance=f"csv:{path}", columns=cols)


def write_csv(path, columns, data):
    data = np.asarray(data, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def dataset_to_csv(path, ds):
    cols = ds.columns or [f"x{j}" for j in range(ds.X.shape[1])] + ["y"]
    write_csv(path, cols, np.column_stack([ds.X, ds.y]))


def posterior_gap(model, subset, data):
    """log p(y) - collapsed ELBO: the KL from the approximate to the exact posterior."""
    X, y = (data.Xs, data.ys) if isinstance(data, Dataset) else data
    if len(y) > 3000:
        raise DataError("posterior_gap needs the exact marginal likelihood (N <= 3000)")
    exact = gp_core.exact_lml(model.kernel, model.log_noise, X, y).value
    return float(exact - gp_core.collapsed_elbo(model, subset, X, y).value)


def square_wave_generate(N=200, seed=0, noise=0.05, periods=2.0):
    """Step function ``sign(sin(pi * periods * x))`` on ``[-1, 1]`` plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-1.0, 1.0, size=N))
    f = np.where(np.sin(np.pi * periods * x) >= 0, 1.0, -1.0)
    y = f + noise * rng.standard_normal(N)
    return Dataset(x[:, None], y, provenance=f"square:N={N}:seed={seed}", columns=["x", "y"],
                   extras={"f": f})


def kinematics_generate(N=500, seed=0, links=8, noise=0.05):
    """Distance from the tip of a planar ``links``-joint arm to a fixed target.

    Joint angles are uniform on ``[-pi/2, pi/2]``; link lengths decrease
    geometrically.  The output is a composition of a smooth map into the
    plane and a distance, which makes it a natural two-layer target.
    """
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-np.pi / 2, np.pi / 2, size=(N, links))
    lengths = 0.8 ** np.arange(links)
    phi = np.cumsum(theta, axis=1)
    tip = np.column_stack([np.cos(phi) @ lengths, np.sin(phi) @ lengths])
    target = np.array([0.5 * lengths.sum(), 0.0])
    f = np.linalg.norm(tip - target, axis=1)
    y = f + noise * rng.standard_normal(N)
    cols = [f"theta{j}" for j in range(links)] + ["y"]
    return Dataset(theta, y, provenance=f"kinematics:N={N}:seed={seed}", columns=cols,
                   extras={"f": f})
