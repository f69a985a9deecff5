"""Characteristic/return panel: loading, standardization, ranks, weights.

The panel is stored month by month because the cross-section is unbalanced:
each month carries its own asset list, characteristic matrix, returns, market
caps and prices. All transforms are pure functions of the loaded panel and
operate on one month at a time, so results do not depend on evaluation order.

Alignment convention: a row (month t, asset n) holds the return realized in
month t together with the (lagged) characteristics, market cap and price that
instrument it. Lagging is done upstream by the data provider.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import (
    DegenerateColumnError,
    EmptyMonthError,
    ParseError,
    ValidationError,
)

DEFAULT_PRICE_FLOOR = 5.0


@dataclass(frozen=True)
class PanelSchema:
    """Column-name mapping for raw panel CSV files.

    ``characteristics`` may be left empty, in which case every column not
    claimed by another role is treated as a characteristic.
    """

    date: str = "date"
    asset: str = "asset"
    ret: str = "ret"
    mktcap: str = "mktcap"
    price: str = "price"
    characteristics: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "PanelSchema":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown schema keys: {sorted(extra)}")
        d = dict(d)
        if "characteristics" in d:
            d["characteristics"] = tuple(d["characteristics"])
        return cls(**d)


@dataclass
class CharacteristicPanel:
    """Unbalanced monthly panel of asset characteristics and returns.

    Attributes
    ----------
    dates : list[int]
        Month identifiers (YYYYMM), strictly increasing.
    assets : list[np.ndarray]
        Per-month asset identifiers, sorted.
    X : list[np.ndarray]
        Per-month (N_t, I) characteristic matrices; NaN marks missing.
    returns, mktcap, prices : list[np.ndarray]
        Per-month vectors aligned with ``assets``.
    char_names : list[str]
        Characteristic identifiers (columns of X).
    """

    dates: list[int]
    assets: list[np.ndarray]
    X: list[np.ndarray]
    returns: list[np.ndarray]
    mktcap: list[np.ndarray]
    prices: list[np.ndarray]
    char_names: list[str]

    @property
    def n_months(self) -> int:
        return len(self.dates)

    @property
    def n_chars(self) -> int:
        return len(self.char_names)

    def n_assets(self, t: int) -> int:
        return len(self.returns[t])

    def validate(self) -> None:
        """Check structural invariants; raise ValidationError on failure."""
        if self.n_chars < 1:
            raise ValidationError("panel needs at least one characteristic")
        if self.n_months < 1:
            raise ValidationError("panel has no months")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValidationError("dates must be strictly increasing")
        for t, date in enumerate(self.dates):
            n = self.n_assets(t)
            if not (len(self.assets[t]) == self.X[t].shape[0] == n
                    == len(self.mktcap[t]) == len(self.prices[t])):
                raise ValidationError(f"month {date}: ragged cross-section")
            if self.X[t].shape[1] != self.n_chars:
                raise ValidationError(f"month {date}: wrong characteristic count")
            if np.any(~np.isfinite(self.mktcap[t])) or np.any(self.mktcap[t] <= 0):
                raise ValidationError(f"month {date}: market caps must be positive")
            all_missing = np.all(np.isnan(self.X[t]), axis=0)
            if np.any(all_missing):
                bad = [self.char_names[i] for i in np.flatnonzero(all_missing)]
                raise ValidationError(
                    f"month {date}: characteristic(s) entirely missing: {bad}")

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame with canonical column names, one row per (date, asset)."""
        frames = []
        for t, date in enumerate(self.dates):
            df = pd.DataFrame(self.X[t], columns=self.char_names)
            df.insert(0, "price", self.prices[t])
            df.insert(0, "mktcap", self.mktcap[t])
            df.insert(0, "ret", self.returns[t])
            df.insert(0, "asset", self.assets[t])
            df.insert(0, "date", date)
            frames.append(df)
        return pd.concat(frames, ignore_index=True)

    def subset(self, months: slice | Sequence[int]) -> "CharacteristicPanel":
        """Return a panel restricted to the given month indices."""
        if isinstance(months, slice):
            idx = range(*months.indices(self.n_months))
        else:
            idx = list(months)
        return CharacteristicPanel(
            dates=[self.dates[t] for t in idx],
            assets=[self.assets[t] for t in idx],
            X=[self.X[t] for t in idx],
            returns=[self.returns[t] for t in idx],
            mktcap=[self.mktcap[t] for t in idx],
            prices=[self.prices[t] for t in idx],
            char_names=list(self.char_names),
        )


@dataclass
class InstrumentMatrix:
    """Per-month standardized characteristics plus a trailing ones column."""

    dates: list[int]
    Z: list[np.ndarray]          # (N_t, I+1), last column all ones
    char_names: list[str]        # the I characteristic names (no constant)

    @property
    def n_instruments(self) -> int:
        return len(self.char_names) + 1

    def to_frame(self, panel: CharacteristicPanel) -> pd.DataFrame:
        """Serialize to a long DataFrame in the panel's row order."""
        frames = []
        for t, date in enumerate(self.dates):
            df = pd.DataFrame(self.Z[t][:, :-1], columns=self.char_names)
            df.insert(0, "asset", panel.assets[t])
            df.insert(0, "date", date)
            frames.append(df)
        return pd.concat(frames, ignore_index=True)


@dataclass
class RankPanel:
    """Per-month cross-sectional ranks of each characteristic.

    ``valid[t][i]`` is False when characteristic i had no observation in
    month t (its rank column is then the uninformative constant (N_t+1)/2).
    """

    dates: list[int]
    ranks: list[np.ndarray]      # (N_t, I), average-tie ranks in 1..N_t
    valid: list[np.ndarray]      # (I,) bool
    char_names: list[str]

    def to_frame(self, panel: CharacteristicPanel) -> pd.DataFrame:
        frames = []
        for t, date in enumerate(self.dates):
            df = pd.DataFrame(self.ranks[t], columns=self.char_names)
            df.insert(0, "asset", panel.assets[t])
            df.insert(0, "date", date)
            frames.append(df)
        return pd.concat(frames, ignore_index=True)


@dataclass
class WeightSeries:
    """Per-month nonnegative portfolio weights summing to one."""

    dates: list[int]
    scheme: str                  # "value" or "equal"
    w: list[np.ndarray]


def load_panel(path, schema: PanelSchema | dict | None = None) -> CharacteristicPanel:
    """Load a raw panel CSV into a validated CharacteristicPanel.

    Rows with missing return or market cap are dropped; missing
    characteristics are kept as NaN. Rows are sorted by (date, asset).

    Raises
    ------
    ParseError
        Malformed file or non-numeric values (with row index).
    ValidationError
        Duplicate (date, asset) pairs or invariant violations.
    """
    if schema is None:
        schema = PanelSchema()
    elif isinstance(schema, dict):
        schema = PanelSchema.from_dict(schema)

    try:
        raw = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read panel file {path}: {exc}") from exc

    base_cols = [schema.date, schema.asset, schema.ret, schema.mktcap, schema.price]
    missing_cols = [c for c in base_cols if c not in raw.columns]
    if missing_cols:
        raise ParseError(f"panel file {path} lacks columns {missing_cols}")

    if schema.characteristics:
        char_names = list(schema.characteristics)
        absent = [c for c in char_names if c not in raw.columns]
        if absent:
            raise ParseError(f"panel file {path} lacks characteristics {absent}")
    else:
        char_names = [c for c in raw.columns if c not in base_cols]
    if not char_names:
        raise ValidationError("no characteristic columns found")

    numeric_cols = [schema.ret, schema.mktcap, schema.price] + char_names
    for col in numeric_cols:
        coerced = pd.to_numeric(raw[col], errors="coerce")
        bad = coerced.isna() & raw[col].notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ParseError(f"non-numeric value in column {col!r} at row {row}")
        raw[col] = coerced
    try:
        raw[schema.date] = raw[schema.date].astype(int)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"date column {schema.date!r} not YYYYMM integers: {exc}") from exc

    dup = raw.duplicated(subset=[schema.date, schema.asset], keep=False)
    if dup.any():
        first = raw.loc[dup, [schema.date, schema.asset]].iloc[0]
        raise ValidationError(
            f"duplicate (date, asset) pair: ({first[schema.date]}, {first[schema.asset]})")

    raw = raw.dropna(subset=[schema.ret, schema.mktcap])
    raw = raw.sort_values([schema.date, schema.asset], kind="mergesort")

    dates, assets, X, returns, mktcap, prices = [], [], [], [], [], []
    for date, g in raw.groupby(schema.date, sort=True):
        dates.append(int(date))
        assets.append(g[schema.asset].to_numpy())
        X.append(g[char_names].to_numpy(dtype=float))
        returns.append(g[schema.ret].to_numpy(dtype=float))
        mktcap.append(g[schema.mktcap].to_numpy(dtype=float))
        prices.append(g[schema.price].to_numpy(dtype=float))

    panel = CharacteristicPanel(dates, assets, X, returns, mktcap, prices, char_names)
    panel.validate()
    return panel


def standardize(panel: CharacteristicPanel, impute: str = "zero") -> InstrumentMatrix:
    """Cross-sectionally z-score each characteristic per month.

    Uses the population (divide-by-N) standard deviation over non-missing
    entries. With ``impute="zero"`` (default) missing entries become 0,
    i.e. the cross-sectional mean; ``impute="none"`` keeps them as NaN.
    A constant ones column is appended as the last instrument.

    Raises
    ------
    DegenerateColumnError
        A (month, characteristic) cell has fewer than 2 observations or
        zero cross-sectional standard deviation.
    """
    if impute not in ("zero", "none"):
        raise ValueError(f"unknown impute policy {impute!r}")
    Z = []
    for t, date in enumerate(panel.dates):
        Xt = panel.X[t]
        n = Xt.shape[0]
        out = np.empty((n, panel.n_chars + 1))
        out[:, -1] = 1.0
        for i, name in enumerate(panel.char_names):
            col = Xt[:, i]
            obs = ~np.isnan(col)
            if obs.sum() < 2:
                raise DegenerateColumnError(
                    f"month {date}, characteristic {name!r}: "
                    f"needs >= 2 observations, got {int(obs.sum())}")
            mu = col[obs].mean()
            sd = col[obs].std()  # population SD
            if sd == 0.0:
                raise DegenerateColumnError(
                    f"month {date}, characteristic {name!r}: zero cross-sectional SD")
            z = (col - mu) / sd
            if impute == "zero":
                z[~obs] = 0.0
            out[:, i] = z
        Z.append(out)
    return InstrumentMatrix(dates=list(panel.dates), Z=Z, char_names=list(panel.char_names))


def rank_transform(panel: CharacteristicPanel) -> RankPanel:
    """Cross-sectional average-tie ranks per month and characteristic.

    Missing values are imputed at the column median before ranking, which
    assigns them the median rank (N_t+1)/2 and leaves the ranking of
    observed values otherwise untouched. Ranks are invariant under strictly
    increasing transforms of the underlying column.
    """
    ranks = []
    valid = []
    for t in range(panel.n_months):
        Xt = panel.X[t]
        n = Xt.shape[0]
        R = np.empty_like(Xt)
        ok = np.empty(panel.n_chars, dtype=bool)
        for i in range(panel.n_chars):
            col = Xt[:, i].copy()
            obs = ~np.isnan(col)
            ok[i] = bool(obs.any())
            if not ok[i]:
                R[:, i] = (n + 1) / 2.0
                continue
            col[~obs] = np.median(col[obs])
            R[:, i] = rankdata(col, method="average")
        ranks.append(R)
        valid.append(ok)
    return RankPanel(dates=list(panel.dates), ranks=ranks, valid=valid,
                     char_names=list(panel.char_names))


def build_weights(panel: CharacteristicPanel, scheme: str = "value",
                  price_floor: float = DEFAULT_PRICE_FLOOR) -> WeightSeries:
    """Build per-month portfolio weights.

    ``value``: proportional to market cap. ``equal``: uniform over assets
    with price >= ``price_floor`` (default 5); the floor applies only to
    the equal scheme.

    Raises
    ------
    EmptyMonthError
        Every asset excluded in some month.
    ValidationError
        Value scheme with nonpositive market caps.
    """
    if scheme not in ("value", "equal"):
        raise ValueError(f"unknown weighting scheme {scheme!r}")
    w = []
    for t, date in enumerate(panel.dates):
        if scheme == "value":
            caps = panel.mktcap[t]
            if np.any(caps <= 0):
                raise ValidationError(f"month {date}: nonpositive market cap")
            wt = caps / caps.sum()
        else:
            keep = panel.prices[t] >= price_floor
            if not keep.any():
                raise EmptyMonthError(
                    f"month {date}: all assets below price floor {price_floor}")
            wt = keep / keep.sum()
        w.append(wt.astype(float))
    return WeightSeries(dates=list(panel.dates), scheme=scheme, w=w)
