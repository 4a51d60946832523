"""Seeded synthetic-data generators and a LIBSVM-format loader.

Every generator is a pure function of its spec: the seed is expanded into
independent child streams (``numpy.random.SeedSequence.spawn``) for the
coefficient draw, the design matrix and the response noise, so the same
spec always reproduces the same dataset bit for bit, and the responses
depend on the design matrix only through the latent values x_i' beta_0.

LIBSVM sparse text grammar (read and write):

    line    := label (" " index ":" value)*
    label   := float in {-1, +1} or {0, 1}
    index   := 1-based integer column index
    value   := float

Absent indices are zeros; labels {-1, +1} are mapped to {0, 1}.
"""

from dataclasses import dataclass

import numpy as np

from .specfun import sigmoid
from .vblogit import LabeledDataset

__all__ = [
    "LogisticSimSpec",
    "GPToySpec",
    "gen_logistic",
    "gen_gp_toy",
    "load_libsvm",
    "save_libsvm",
    "train_test_split",
]


@dataclass(frozen=True)
class LogisticSimSpec:
    """Synthetic logistic-regression problem: size, predictor law, seed.

    Settings: (1) independent standard normal predictors, (2) banded
    correlation 0.3^|i-j|, (3) rows N(0, W^-1) with a single Wishart(p+3, I)
    draw W shared by the whole dataset.
    """

    n: int
    p: int
    setting: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be >= 1")
        if self.setting not in (1, 2, 3):
            raise ValueError("setting must be 1, 2 or 3")


@dataclass(frozen=True)
class GPToySpec:
    """1-d classification toy problem with a sinusoidal latent function."""

    n_train: int = 50
    n_test: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 2 or self.n_test < 2:
            raise ValueError("n_train and n_test must be >= 2")


def _sample_wishart_identity(rng: np.random.Generator, df: int, p: int):
    """Bartlett factor A and W = A A' for one Wishart(df, I_p) draw."""
    A = np.zeros((p, p))
    for i in range(p):
        A[i, i] = np.sqrt(rng.chisquare(df - i))
    idx = np.tril_indices(p, -1)
    A[idx] = rng.standard_normal(len(idx[0]))
    return A, A @ A.T


def gen_logistic(spec: LogisticSimSpec):
    """Simulate a logistic-regression dataset; returns (dataset, beta0).

    Coefficients are uniform on [-2.0, -0.2] u [0.2, 2.0] (magnitudes
    bounded away from zero), responses are Bernoulli(sigmoid(x_i' beta0)),
    and f0 = X beta0 is stored on the dataset.
    """
    ss_beta, ss_x, ss_y = np.random.SeedSequence(spec.seed).spawn(3)
    rng_beta = np.random.default_rng(ss_beta)
    rng_x = np.random.default_rng(ss_x)
    rng_y = np.random.default_rng(ss_y)

    magnitude = rng_beta.uniform(0.2, 2.0, size=spec.p)
    signs = np.where(rng_beta.uniform(size=spec.p) < 0.5, -1.0, 1.0)
    beta0 = signs * magnitude

    if spec.setting == 1:
        X = rng_x.standard_normal((spec.n, spec.p))
    elif spec.setting == 2:
        cov = 0.3 ** np.abs(np.subtract.outer(np.arange(spec.p), np.arange(spec.p)))
        X = rng_x.standard_normal((spec.n, spec.p)) @ np.linalg.cholesky(cov).T
    else:
        # one Wishart draw shared by every row; x = A^-T z has cov (A A')^-1
        A, _ = _sample_wishart_identity(rng_x, spec.p + 3, spec.p)
        Z = rng_x.standard_normal((spec.n, spec.p))
        X = np.linalg.solve(A.T, Z.T).T

    f0 = X @ beta0
    y = (rng_y.uniform(size=spec.n) < sigmoid(f0)).astype(np.float64)
    return LabeledDataset(X=X, y=y, f0=f0), beta0


def _toy_latent(x: np.ndarray) -> np.ndarray:
    return -4.5 * np.sin(0.5 * np.pi * x)


def _toy_dataset(x: np.ndarray, rng: np.random.Generator) -> LabeledDataset:
    f0 = _toy_latent(x)
    eps = rng.standard_normal(x.shape[0])
    y = (rng.uniform(size=x.shape[0]) < sigmoid(f0 + eps)).astype(np.float64)
    return LabeledDataset(X=x[:, None], y=y, f0=f0)


def gen_gp_toy(spec: GPToySpec):
    """1-d toy: train inputs avoid (2.5, 3.5), test inputs span [0, 5].

    Training inputs are spread evenly over [0, 2.5] and [3.5, 5] with the
    point budget split proportionally to interval length (endpoints
    included); test inputs are an even grid over the full interval.  Latent
    truth f0(x) = -4.5 sin(pi x / 2) is stored on both splits, and labels
    are Bernoulli(sigmoid(f0 + eps)) with unit-variance noise fresh per
    point.
    """
    ss_train, ss_test = np.random.SeedSequence(spec.seed).spawn(2)
    n_left = int(np.ceil(spec.n_train * (2.5 / 4.0)))
    n_right = spec.n_train - n_left
    x_train = np.concatenate([
        np.linspace(0.0, 2.5, n_left),
        np.linspace(3.5, 5.0, n_right) if n_right else np.empty(0),
    ])
    x_test = np.linspace(0.0, 5.0, spec.n_test)
    train = _toy_dataset(x_train, np.random.default_rng(ss_train))
    test = _toy_dataset(x_test, np.random.default_rng(ss_test))
    return train, test


def load_libsvm(path) -> LabeledDataset:
    """Parse a LIBSVM sparse text file into a dense dataset.

    The column count is inferred from the largest index seen.  Raises
    ``ValueError`` naming the offending line for malformed input, and
    listing the label set when it is not a recognized binary one.
    """
    rows = []
    labels = []
    max_index = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            try:
                label = float(parts[0])
            except ValueError as e:
                raise ValueError(f"{path}: malformed label on line {lineno}") from e
            entries = {}
            for token in parts[1:]:
                try:
                    idx_str, value_str = token.split(":", 1)
                    idx = int(idx_str)
                    value = float(value_str)
                except ValueError as e:
                    raise ValueError(
                        f"{path}: malformed feature entry {token!r} on line {lineno}"
                    ) from e
                if idx < 1:
                    raise ValueError(
                        f"{path}: feature indices are 1-based, got {idx} on line {lineno}"
                    )
                entries[idx] = value
                max_index = max(max_index, idx)
            labels.append(label)
            rows.append(entries)
    if not rows:
        raise ValueError(f"{path}: no data lines found")

    label_set = sorted(set(labels))
    if label_set in ([-1.0, 1.0], [-1.0], [1.0]):
        y = np.array([(0.0 if v < 0 else 1.0) for v in labels])
    elif set(label_set) <= {0.0, 1.0}:
        y = np.asarray(labels, dtype=np.float64)
    else:
        raise ValueError(f"{path}: non-binary label set {label_set}")

    X = np.zeros((len(rows), max_index))
    for i, entries in enumerate(rows):
        for idx, value in entries.items():
            X[i, idx - 1] = value
    return LabeledDataset(X=X, y=y)


def save_libsvm(data: LabeledDataset, path) -> None:
    """Write a dataset in the LIBSVM text grammar (1-based dense columns)."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(data.n):
            cells = [f"{int(data.y[i])}"]
            for j in range(data.p):
                value = data.X[i, j]
                if value != 0.0:
                    cells.append(f"{j + 1}:{value:.17g}")
            fh.write(" ".join(cells) + "\n")


def train_test_split(data: LabeledDataset, fraction: float = 0.8):
    """Deterministic prefix split: the first floor(fraction * n) rows train."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must lie strictly between 0 and 1")
    n_train = int(np.floor(fraction * data.n))
    def take(sl):
        return LabeledDataset(
            X=data.X[sl],
            y=data.y[sl],
            f0=None if data.f0 is None else data.f0[sl],
        )
    return take(slice(0, n_train)), take(slice(n_train, data.n))
