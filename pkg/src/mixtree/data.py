"""Dataset model, CSV ingestion, normalization, and synthetic generators.

A dataset is an (n, d) value matrix plus a boolean missingness mask. Masked
value slots are poisoned with NaN so that any consumer accidentally reading
them propagates the poison into its output and fails the finiteness checks
in the test suite.
"""

import csv
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ParseError, RaggedRows, ShapeMismatch

__all__ = [
    "Dataset",
    "Normalizer",
    "load_csv",
    "load_mask_csv",
    "save_csv",
    "save_mask_csv",
    "mask_mcar",
    "mask_square",
    "mask_pattern_walk",
    "gen_mixture",
    "gen_lowrank_images",
    "gen_regression_task",
    "fit_normalizer",
    "normalize",
    "denormalize",
]

DEFAULT_MISSING_MARKERS = ("", "NA", "NaN")


@dataclass(frozen=True)
class Dataset:
    """Value matrix plus per-cell missingness mask (set bit = missing)."""

    values: NDArray[np.float64]
    mask: NDArray[np.bool_]
    column_names: tuple | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if v.ndim != 2 or m.shape != v.shape:
            raise ShapeMismatch(f"values {v.shape} and mask {m.shape} disagree")
        v = v.copy()
        v[m] = np.nan
        v.setflags(write=False)
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def is_complete(self) -> bool:
        return not self.mask.any()

    @classmethod
    def from_array(cls, x, column_names=None) -> "Dataset":
        """Build from a value matrix where NaN marks missing cells."""
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.isnan(x), column_names)

    def take_rows(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.values[rows], self.mask[rows], self.column_names)

    def take_columns(self, cols) -> "Dataset":
        cols = np.asarray(cols)
        names = None
        if self.column_names is not None:
            names = tuple(self.column_names[c] for c in cols)
        return Dataset(self.values[:, cols], self.mask[:, cols], names)

    def filled(self, fill_value: float = 0.0) -> NDArray[np.float64]:
        """Copy of the values with masked slots replaced by ``fill_value``."""
        return np.where(self.mask, fill_value, self.values)


def load_csv(path, missing_markers=DEFAULT_MISSING_MARKERS,
             has_header: bool = False) -> Dataset:
    """Parse a rectangular numeric CSV; marker tokens become missing cells.

    Markers are case-sensitive exact matches (cells are stripped of
    surrounding whitespace first). Raises :class:`ParseError` with the
    offending (row, column) and :class:`RaggedRows` on uneven rows.
    """
    markers = set(missing_markers)
    names = None
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line in reader:
            if not line:
                continue
            if has_header and names is None:
                names = tuple(s.strip() for s in line)
                continue
            rows.append(line)
    if not rows:
        raise RaggedRows(f"{path}: no data rows")
    width = len(rows[0])
    values = np.empty((len(rows), width))
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, line in enumerate(rows):
        if len(line) != width:
            raise RaggedRows(
                f"{path}: row {i} has {len(line)} fields, expected {width}"
            )
        for j, cell in enumerate(line):
            cell = cell.strip()
            if cell in markers:
                mask[i, j] = True
                values[i, j] = np.nan
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ParseError(i, j, cell) from None
    return Dataset(values, mask, names)


def load_mask_csv(path) -> NDArray[np.bool_]:
    """Read a 0/1 mask CSV (1 = missing)."""
    ds = load_csv(path, missing_markers=())
    return ds.values.astype(bool)


def save_csv(dataset: Dataset, path, header=None) -> None:
    """Write values with missing cells as empty fields."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header is None and dataset.column_names is not None:
            header = dataset.column_names
        if header:
            writer.writerow(header)
        for i in range(dataset.n):
            writer.writerow(
                ["" if dataset.mask[i, j] else repr(float(dataset.values[i, j]))
                 for j in range(dataset.d)]
            )


def save_mask_csv(mask, path) -> None:
    """Write a 0/1 mask CSV (1 = missing)."""
    mask = np.asarray(mask, dtype=bool)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mask.astype(int):
            writer.writerow(list(row))


def mask_mcar(dataset: Dataset, fraction: float, seed: int,
              columns=None) -> Dataset:
    """Mask each eligible cell independently with the given probability."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    hits = rng.random((dataset.n, dataset.d)) < fraction
    if columns is not None:
        eligible = np.zeros(dataset.d, dtype=bool)
        eligible[np.asarray(columns)] = True
        hits &= eligible
    return Dataset(dataset.filled(), dataset.mask | hits, dataset.column_names)


def mask_square(dataset: Dataset, height: int, width: int, size: int,
                seed: int) -> Dataset:
    """Mask one uniformly placed size x size pixel square per image row.

    Rows are flat height x width grids; the square is placed fully inside
    the image (uniform over valid top-left corners).
    """
    if dataset.d != height * width:
        raise ShapeMismatch(f"d={dataset.d} is not {height}x{width}")
    if size > min(height, width):
        raise ShapeMismatch("square does not fit inside the image")
    rng = np.random.default_rng(seed)
    mask = dataset.mask.copy()
    tops = rng.integers(0, height - size + 1, size=dataset.n)
    lefts = rng.integers(0, width - size + 1, size=dataset.n)
    grid = mask.reshape(dataset.n, height, width)
    for i in range(dataset.n):
        grid[i, tops[i]:tops[i] + size, lefts[i]:lefts[i] + size] = True
    return Dataset(dataset.filled(), grid.reshape(dataset.n, -1),
                   dataset.column_names)


def mask_pattern_walk(dataset: Dataset, n_patterns: int, fraction: float,
                      flips: int, seed: int) -> Dataset:
    """Structured missingness: patterns form a random walk in mask space.

    Consecutive patterns differ in about ``flips`` bits, the way masks do
    when missingness comes from moving sensor dropouts or merged databases,
    so nearby patterns stay a short Hamming distance apart. Each sample is
    assigned one of the ``n_patterns`` walk states (every state is used at
    least once when n >= n_patterns).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    d = dataset.d
    masks = np.zeros((n_patterns, d), dtype=bool)
    cur = rng.random(d) < fraction
    if not cur.any():
        cur[rng.integers(d)] = True
    masks[0] = cur
    target = fraction * d
    seen = {cur.tobytes()}
    for k in range(1, n_patterns):
        nxt = masks[k - 1].copy()
        for _ in range(200):
            for _ in range(flips):
                # bias the walk toward the target missing count
                if nxt.sum() > target:
                    pool = np.nonzero(nxt)[0]
                else:
                    pool = np.nonzero(~nxt)[0]
                nxt[pool[rng.integers(pool.size)]] ^= True
            if nxt.sum() == 0:
                nxt[rng.integers(d)] = True
            key = nxt.tobytes()
            if key not in seen:
                break
        seen.add(key)
        masks[k] = nxt
    assign = np.concatenate([
        np.arange(n_patterns), rng.integers(0, n_patterns,
                                            size=max(dataset.n - n_patterns, 0))
    ])[: dataset.n]
    rng.shuffle(assign)
    return Dataset(dataset.filled(), dataset.mask | masks[assign],
                   dataset.column_names)


def gen_mixture(n: int, d: int, n_components: int, separation: float,
                seed: int):
    """Sample from a random full-covariance mixture; returns ground truth.

    Component covariances are A A^T scaled to unit-order diagonals plus
    identity; means are drawn on a sphere of radius ``separation``.
    """
    if n < n_components:
        raise ValueError("need at least one sample per component")
    rng = np.random.default_rng(seed)
    means = np.zeros((n_components, d))
    covs = np.zeros((n_components, d, d))
    for j in range(n_components):
        direction = rng.standard_normal(d)
        norm = np.linalg.norm(direction)
        means[j] = separation * direction / (norm if norm > 0 else 1.0)
        a = rng.standard_normal((d, d)) / np.sqrt(d)
        covs[j] = a @ a.T + np.eye(d)
    weights = rng.dirichlet(np.full(n_components, 5.0))
    # one sample per component guaranteed, remainder multinomial
    labels = np.concatenate([
        np.arange(n_components),
        rng.choice(n_components, size=n - n_components, p=weights),
    ])
    rng.shuffle(labels)
    x = np.empty((n, d))
    for j in range(n_components):
        rows = np.nonzero(labels == j)[0]
        chol = np.linalg.cholesky(covs[j])
        x[rows] = means[j] + rng.standard_normal((rows.size, d)) @ chol.T
    params = {"means": means, "covariances": covs, "weights": weights,
              "labels": labels}
    return Dataset(x, np.zeros_like(x, dtype=bool)), params


def gen_lowrank_images(n: int, height: int, width: int, rank: int = 6,
                       noise: float = 0.05, seed: int = 0) -> Dataset:
    """Smooth digit-like images: random low-frequency cosine patterns."""
    rng = np.random.default_rng(seed)
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    basis = []
    freqs = [(fy, fx) for fy in range(3) for fx in range(3)][:rank]
    for fy, fx in freqs:
        b = np.outer(np.cos(np.pi * fy * ys), np.cos(np.pi * fx * xs))
        basis.append(b.ravel())
    basis = np.stack(basis)
    scales = 1.0 / (1.0 + np.arange(len(freqs)))
    coefs = rng.standard_normal((n, len(freqs))) * scales
    imgs = coefs @ basis + noise * rng.standard_normal((n, height * width))
    return Dataset(imgs, np.zeros_like(imgs, dtype=bool))


def gen_regression_task(n: int, d: int = 8, seed: int = 0, noise: float = 0.3,
                        n_factors: int = 2):
    """Correlated-input regression data with a smooth nonlinear target.

    Inputs load on a few shared latent factors (strongly correlated columns,
    the shape of physical measurement panels); the target is a nonlinear
    function of the factors plus noise and is always fully observed.
    """
    rng = np.random.default_rng(seed)
    factors = rng.standard_normal((n, n_factors))
    load = rng.uniform(0.7, 1.0, size=(n_factors, d)) * np.where(
        rng.random((n_factors, d)) < 0.5, 1.0, -1.0
    )
    idio = rng.uniform(0.25, 0.45, size=d)
    x = factors @ load + rng.standard_normal((n, d)) * idio
    f0 = factors[:, 0]
    f1 = factors[:, 1 % n_factors]
    y = f0 + 0.6 * f0 ** 2 + 0.8 * np.tanh(1.5 * f1) + noise * rng.standard_normal(n)
    return x, y


@dataclass(frozen=True)
class Normalizer:
    """Per-column affine transform fitted on observed training entries.

    Population standard deviation (divide by count) to stay consistent with
    the mixture's own covariance convention; constant columns get std 1.
    """

    means: NDArray[np.float64]
    stds: NDArray[np.float64]


def fit_normalizer(dataset: Dataset, train_rows=None) -> Normalizer:
    rows = np.arange(dataset.n) if train_rows is None else np.asarray(train_rows)
    if rows.size == 0:
        raise ValueError("train_rows must be non-empty")
    vals = dataset.values[rows]
    obs = ~dataset.mask[rows]
    means = np.zeros(dataset.d)
    stds = np.ones(dataset.d)
    for c in range(dataset.d):
        col = vals[obs[:, c], c]
        if col.size:
            means[c] = col.mean()
            s = np.sqrt(np.mean((col - means[c]) ** 2))
            stds[c] = s if s > 0 else 1.0
    return Normalizer(means, stds)


def normalize(dataset: Dataset, norm: Normalizer) -> Dataset:
    vals = (dataset.filled() - norm.means) / norm.stds
    return Dataset(vals, dataset.mask, dataset.column_names)


def denormalize(dataset: Dataset, norm: Normalizer) -> Dataset:
    vals = dataset.filled() * norm.stds + norm.means
    return Dataset(vals, dataset.mask, dataset.column_names)
