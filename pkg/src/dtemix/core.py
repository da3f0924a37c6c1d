"""Domain types and data ingestion: partitions, discretized datasets, H matrices.

Continuous variables are discretized into half-open quantile cells ``(a, b]``.
The joint (y, x) cell index is flattened x-major, ``row = x * m_y + y``; every
module in the package shares this convention. All cell indices are 0-based.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray


class DegeneratePartitionError(ValueError):
    """Quantile cuts collapsed; the requested cell count cannot be supported."""


class InsufficientSupportError(ValueError):
    """A conditioning cell required by an estimator holds no observations."""


@dataclass(frozen=True)
class Partition:
    """Half-open interval partition of the real line.

    Parameters
    ----------
    cuts : array-like of float
        Strictly increasing interior cut points. Cell ``m`` is
        ``(cuts[m-1], cuts[m]]`` with implicit -inf and +inf at the ends.
    """

    cuts: tuple[float, ...]

    def __post_init__(self) -> None:
        cuts = tuple(float(c) for c in self.cuts)
        if any(not np.isfinite(c) for c in cuts):
            raise ValueError("partition cuts must be finite")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise DegeneratePartitionError(f"cuts not strictly increasing: {cuts}")
        object.__setattr__(self, "cuts", cuts)

    @property
    def n_cells(self) -> int:
        return len(self.cuts) + 1

    def cell_index(self, values) -> NDArray[np.int64]:
        """Map values to 0-based cell indices; a value equal to a cut falls in the lower cell."""
        v = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("cannot assign non-finite values to partition cells")
        return np.searchsorted(np.asarray(self.cuts), v, side="left").astype(np.int64)


def build_partition(values, cell_count: int) -> Partition:
    """Build an equal-probability partition from empirical quantiles.

    Cuts are the nearest-rank quantiles at levels ``m / cell_count`` for
    ``m = 1, ..., cell_count - 1``, so each cell holds roughly ``n / cell_count``
    observations (exactly, up to ties).

    Raises
    ------
    DegeneratePartitionError
        If ``cell_count`` exceeds the number of distinct values, or ties make
        two cuts coincide.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("values must be non-empty")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    if cell_count < 1:
        raise ValueError("cell_count must be >= 1")
    distinct = np.unique(v)
    if cell_count > distinct.size:
        raise DegeneratePartitionError(
            f"cell_count={cell_count} exceeds {distinct.size} distinct values"
        )
    if cell_count == 1:
        return Partition(cuts=())
    if cell_count == distinct.size:
        # already-discrete support: one cell per distinct value, whatever the masses
        return Partition(cuts=tuple(distinct[:-1]))
    v = np.sort(v)
    n = v.size
    # nearest-rank rule: the q-quantile is the ceil(q*n)-th order statistic
    ranks = np.ceil(np.arange(1, cell_count) * n / cell_count).astype(int)
    cuts = v[ranks - 1]
    # a cut at the sample maximum would leave the top cell empty; with heavy
    # ties the last quantile can land there, so step it down a distinct value
    while cuts.size and cuts[-1] >= distinct[-1]:
        below = distinct[distinct < cuts[-1]]
        if below.size == 0:
            raise DegeneratePartitionError(
                f"cannot place {cell_count - 1} cuts below the maximum value")
        cuts[-1] = below[-1]
    if np.unique(cuts).size != cuts.size:
        raise DegeneratePartitionError(
            f"tied quantiles collapse cuts for cell_count={cell_count}: {cuts.tolist()}"
        )
    return Partition(cuts=tuple(cuts))


@dataclass(frozen=True)
class LatentConfig:
    """Latent support size and the column-ordering convention for fitted factors.

    ``order_by`` names the functional that ranks latent classes; columns are
    permuted so it is ascending. The only supported convention is the
    conditional mean of the untreated outcome over cell indices.
    """

    k: int
    order_by: str = "y0_mean"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.order_by != "y0_mean":
            raise ValueError(f"unknown ordering convention: {self.order_by!r}")


@dataclass(frozen=True)
class CondProbMatrix:
    """Column-stochastic matrix of conditional cell probabilities."""

    values: NDArray[np.float64]

    COLSUM_TOL = 1e-12

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("CondProbMatrix must be 2-dimensional")
        if np.any(v < -1e-15) or np.any(v > 1 + 1e-12):
            raise ValueError("entries must lie in [0, 1]")
        colsums = v.sum(axis=0)
        if np.any(np.abs(colsums - 1.0) > self.COLSUM_TOL):
            worst = float(np.max(np.abs(colsums - 1.0)))
            raise ValueError(f"columns must sum to 1 (max deviation {worst:.3e})")
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def as_stochastic(values: NDArray[np.float64], tol: float = 1e-8) -> CondProbMatrix:
    """Clean tiny numerical violations and wrap as a CondProbMatrix.

    Entries below zero by at most ``tol`` are clipped and columns renormalized;
    larger violations raise.
    """
    v = np.asarray(values, dtype=float)
    if np.any(v < -tol):
        raise ValueError(f"negative entries beyond tolerance (min {v.min():.3e})")
    v = np.clip(v, 0.0, None)
    colsums = v.sum(axis=0)
    if np.any(np.abs(colsums - 1.0) > tol):
        worst = float(np.max(np.abs(colsums - 1.0)))
        raise ValueError(f"column sums off by {worst:.3e}, beyond tolerance {tol:.1e}")
    return CondProbMatrix(v / colsums)


@dataclass(frozen=True)
class DiscreteDataset:
    """Per-unit cell indices for (Y, D, X, Z) plus the contingency count tensor.

    ``counts[y, d, x, z]`` holds cell frequencies; its shape fixes the cell
    counts (m_y, 2, m_x, m_z) for all downstream estimators.
    """

    n: int
    y_cell: NDArray[np.int64]
    d: NDArray[np.int64]
    x_cell: NDArray[np.int64]
    z_cell: NDArray[np.int64]
    counts: NDArray[np.int64]
    partitions: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.counts.sum() != self.n:
            raise ValueError("counts tensor does not total n")
        m_y, two, m_x, m_z = self.counts.shape
        if two != 2:
            raise ValueError("counts axis 1 must have size 2 (treatment arms)")
        for name, arr, m in (
            ("y_cell", self.y_cell, m_y),
            ("x_cell", self.x_cell, m_x),
            ("z_cell", self.z_cell, m_z),
        ):
            if arr.min(initial=0) < 0 or arr.max(initial=-1) >= m:
                raise ValueError(f"{name} indices out of range [0, {m})")

    @property
    def m_y(self) -> int:
        return self.counts.shape[0]

    @property
    def m_x(self) -> int:
        return self.counts.shape[2]

    @property
    def m_z(self) -> int:
        return self.counts.shape[3]


def _count_tensor(y, d, x, z, m_y, m_x, m_z) -> NDArray[np.int64]:
    flat = ((y * 2 + d) * m_x + x) * m_z + z
    counts = np.bincount(flat, minlength=m_y * 2 * m_x * m_z)
    return counts.reshape(m_y, 2, m_x, m_z).astype(np.int64)


def from_cells(y_cell, d, x_cell, z_cell, m_y: int, m_x: int, m_z: int,
               partitions: dict | None = None) -> DiscreteDataset:
    """Assemble a DiscreteDataset from already-discretized cell indices."""
    y_cell = np.asarray(y_cell, dtype=np.int64)
    d = np.asarray(d, dtype=np.int64)
    x_cell = np.asarray(x_cell, dtype=np.int64)
    z_cell = np.asarray(z_cell, dtype=np.int64)
    n = y_cell.size
    if not (d.size == x_cell.size == z_cell.size == n):
        raise ValueError("per-unit arrays must share length")
    if n == 0:
        raise ValueError("dataset is empty")
    if not np.isin(d, (0, 1)).all():
        raise ValueError("treatment must be binary 0/1")
    counts = _count_tensor(y_cell, d, x_cell, z_cell, m_y, m_x, m_z)
    return DiscreteDataset(
        n=n, y_cell=y_cell, d=d, x_cell=x_cell, z_cell=z_cell,
        counts=counts, partitions=partitions or {},
    )


def discretize(y, d, x, z, y_partition: Partition, x_partition: Partition,
               z_partition: Partition) -> DiscreteDataset:
    """Discretize raw (y, d, x, z) rows by half-open-interval membership."""
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    d_arr = np.asarray(d).ravel()
    if y.size == 0:
        raise ValueError("input is empty")
    if not (d_arr.size == y.size == x.size == z.size):
        raise ValueError("columns must share length")
    d_float = d_arr.astype(float)
    if not np.isin(d_float, (0.0, 1.0)).all():
        bad = np.unique(d_float[~np.isin(d_float, (0.0, 1.0))])
        raise ValueError(f"treatment must be binary 0/1, found {bad[:5].tolist()}")
    return from_cells(
        y_partition.cell_index(y),
        d_float.astype(np.int64),
        x_partition.cell_index(x),
        z_partition.cell_index(z),
        y_partition.n_cells, x_partition.n_cells, z_partition.n_cells,
        partitions={"y": y_partition, "x": x_partition, "z": z_partition},
    )


def collapse_x(dataset: DiscreteDataset, partition: Partition) -> DiscreteDataset:
    """Regroup the X cells of a dataset through a partition over cell indices.

    The partition is applied to the 0-based x cell indices, so e.g. cuts
    (1.5, 3.5) merge six cells into the pairs {0,1}, {2,3}, {4,5}.
    """
    new_x = partition.cell_index(dataset.x_cell.astype(float))
    parts = dict(dataset.partitions)
    parts["x_collapse"] = partition
    return from_cells(
        dataset.y_cell, dataset.d, new_x, dataset.z_cell,
        dataset.m_y, partition.n_cells, dataset.m_z, partitions=parts,
    )


def build_h(dataset: DiscreteDataset, d: int) -> CondProbMatrix:
    """Empirical conditional probability matrix of the (y, x) cell given (d, z).

    Entry ``((y, x), z) = N[y, d, x, z] / N[d, z]`` with rows flattened x-major.

    Raises
    ------
    InsufficientSupportError
        If some (d, z) cell holds no observations.
    """
    if d not in (0, 1):
        raise ValueError("d must be 0 or 1")
    sub = dataset.counts[:, d, :, :].astype(float)  # [y, x, z]
    col_totals = sub.sum(axis=(0, 1))
    empty = np.nonzero(col_totals == 0)[0]
    if empty.size:
        raise InsufficientSupportError(
            f"no observations in cell (d={d}, z_cell={int(empty[0])})"
        )
    h = sub.transpose(1, 0, 2).reshape(dataset.m_x * dataset.m_y, dataset.m_z)
    h = h / col_totals
    return CondProbMatrix(h)


def load_csv(path) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Read a ``y,d,x,z`` CSV into float columns (d validated binary later)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        expected = ["y", "d", "x", "z"]
        if [c.strip().lower() for c in header] != expected:
            raise ValueError(f"{path}: header must be 'y,d,x,z', got {header}")
        rows = []
        for i, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{i}: expected 4 fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{i}: non-numeric field in {row}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
