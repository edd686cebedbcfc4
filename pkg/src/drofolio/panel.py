"""Return panels: the raw p-by-T input every estimator consumes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    """A complete panel of per-period excess returns.

    Parameters
    ----------
    returns : numpy.ndarray, shape (p, T)
        Excess returns as decimals, one row per asset, one column per period.
    asset_ids : tuple of str
        One identifier per row of ``returns``.
    time_index : tuple
        Strictly increasing period labels (integers, floats, or sortable
        strings such as ISO dates), one per column of ``returns``.
    """

    returns: np.ndarray
    asset_ids: tuple = field(default=())
    time_index: tuple = field(default=())

    def __post_init__(self):
        returns = np.asarray(self.returns, dtype=float)
        object.__setattr__(self, "returns", returns)
        if returns.ndim != 2:
            raise ValueError("returns must be a 2-d array of shape (p, T)")
        p, t = returns.shape
        if p < 2:
            raise ValueError(f"need at least 2 assets, got {p}")
        if t < 4:
            raise ValueError(f"need at least 4 periods, got {t}")
        if not np.all(np.isfinite(returns)):
            raise ValueError("returns contain missing or non-finite entries")
        asset_ids = tuple(self.asset_ids) if self.asset_ids else tuple(
            f"A{i:04d}" for i in range(p)
        )
        time_index = tuple(self.time_index) if self.time_index else tuple(range(t))
        if len(asset_ids) != p:
            raise ValueError(f"expected {p} asset ids, got {len(asset_ids)}")
        if len(time_index) != t:
            raise ValueError(f"expected {t} time labels, got {len(time_index)}")
        for a, b in zip(time_index, time_index[1:]):
            if not a < b:
                raise ValueError(f"time index not strictly increasing at {b!r}")
        object.__setattr__(self, "asset_ids", asset_ids)
        object.__setattr__(self, "time_index", time_index)

    @property
    def n_assets(self) -> int:
        return self.returns.shape[0]

    @property
    def n_periods(self) -> int:
        return self.returns.shape[1]

    def window(self, start: int, stop: int) -> "ReturnPanel":
        """Column slice ``[start, stop)`` as a new panel."""
        if not (0 <= start < stop <= self.n_periods):
            raise ValueError(f"invalid window [{start}, {stop})")
        return ReturnPanel(
            self.returns[:, start:stop],
            self.asset_ids,
            self.time_index[start:stop],
        )


def _parse_time_labels(raw: list[str]) -> tuple:
    """Interpret time labels as ints, then floats, else keep strings."""
    for caster in (int, float):
        try:
            return tuple(caster(v) for v in raw)
        except ValueError:
            continue
    return tuple(raw)


def load_returns_csv(path) -> ReturnPanel:
    """Read a returns panel from CSV.

    Layout: a header row of asset ids, first column the period label, each
    remaining column one asset, values per-period excess returns as decimals.
    Assets with no data anywhere are dropped; any other missing cell aborts
    with the offending line number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and not row[0].startswith("#")]
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    header = [c.strip() for c in rows[0]]
    if len(header) < 3:
        raise ValueError(f"{path}: need a time column plus at least 2 assets")
    asset_ids = header[1:]
    n_cols = len(header)

    times: list[str] = []
    cells: list[list[str]] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != n_cols:
            raise ValueError(f"{path}: line {line_no}: expected {n_cols} cells, got {len(row)}")
        times.append(row[0].strip())
        cells.append([c.strip() for c in row[1:]])

    # Assets missing for the whole horizon are dropped up front.
    keep = [j for j in range(len(asset_ids)) if any(r[j] != "" for r in cells)]
    if len(keep) < len(asset_ids):
        asset_ids = [asset_ids[j] for j in keep]
        cells = [[r[j] for j in keep] for r in cells]

    values = np.empty((len(cells), len(asset_ids)))
    for i, row in enumerate(cells):
        for j, cell in enumerate(row):
            if cell == "":
                raise ValueError(
                    f"{path}: line {i + 2}: missing value for asset {asset_ids[j]!r}"
                )
            try:
                values[i, j] = float(cell)
            except ValueError as exc:
                raise ValueError(
                    f"{path}: line {i + 2}: bad number {cell!r} for asset {asset_ids[j]!r}"
                ) from exc

    return ReturnPanel(values.T, tuple(asset_ids), _parse_time_labels(times))
