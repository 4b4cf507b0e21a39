"""
Panel CSV -> estimation sample.

Stages run in this order and each one books its dropped rows in a
:class:`RowLedger`:

1. ``ingest``      validate raw records (age 26+, menu deductible, ...)
2. ``lags``        attach previous-year values; first waves become lag sources
3. ``intensive``   keep rows with at least one visit, add ``log_visits``
4. ``premiums``    join the average-market-premium instrument
5. ``stable``      optional: persons with unchanged characteristics
6. ``year``        keep the estimation wave
7. ``stratum``     optional: one stratum of the sample
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import market
from .econometrics.data import MteData, independent_columns

__all__ = [
    "PANEL_COLUMNS",
    "LAG_FIELDS",
    "STABLE_FIELDS",
    "SWITCHING_GROUPS",
    "STRATA_DIMENSIONS",
    "PipelineError",
    "RowLedger",
    "StageCount",
    "EstimationSample",
    "ingest_panel_csv",
    "build_lags",
    "health_shock",
    "intensive_margin",
    "treatment_indicator",
    "switching_group",
    "join_premiums",
    "stable_subsample",
    "stratify",
    "design_matrix",
    "build_sample",
]

log = logging.getLogger(__name__)

PANEL_COLUMNS = (
    "person_id", "year", "canton", "age", "gender", "educ_years", "hh_size", "income_pm",
    "employment", "subsidy", "suppl_ins", "deductible", "plan_type", "visits",
    "self_health", "illness", "chronic", "smoke", "phys_act", "med_need",
)
EMPLOYMENT_CODES = ("active", "unemployed", "not_in_lf")
LAG_FIELDS = ("visits", "self_health", "chronic", "smoke", "phys_act", "med_need", "illness")
STABLE_FIELDS = ("canton", "subsidy", "self_health", "health_shock", "smoke", "chronic",
                 "phys_act", "med_need", "employment", "hh_size")
SWITCHING_GROUPS = ("NoSwitch", "StrongDrop", "MildDrop", "MildIncrease", "StrongIncrease")
STRATA_DIMENSIONS = ("household_size_band", "gender", "subsidy", "education_band")
MIN_AGE = 26

_INT_COLUMNS = ("person_id", "year", "age", "gender", "educ_years", "hh_size", "subsidy",
                "suppl_ins", "deductible", "self_health", "illness", "chronic", "smoke",
                "phys_act", "med_need")
_FLAG_COLUMNS = ("subsidy", "suppl_ins", "illness", "chronic", "smoke", "phys_act", "gender")
_RANGES = {"self_health": (1, 5), "med_need": (0, 10), "educ_years": (0, 30), "hh_size": (1, 20)}
_DROP_COLUMNS = ("stage", "row", "person_id", "year", "reason")


class PipelineError(ValueError):
    """A panel file that cannot be processed at all."""


@dataclass(frozen=True)
class StageCount:
    stage: str
    n_in: int
    n_out: int
    dropped: dict

    @property
    def balanced(self) -> bool:
        return self.n_in == self.n_out + sum(self.dropped.values())


@dataclass
class RowLedger:
    """Per-stage row accounting plus the dropped rows themselves."""

    stages: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    def record(self, stage, n_in, kept: pd.DataFrame, dropped: pd.DataFrame):
        counts = dropped["reason"].value_counts().sort_index().to_dict() if len(dropped) else {}
        entry = StageCount(stage, int(n_in), len(kept), {k: int(v) for k, v in counts.items()})
        if not entry.balanced:
            raise AssertionError(f"row ledger out of balance at stage {stage}: {entry}")
        self.stages.append(entry)
        if len(dropped):
            out = dropped.reindex(columns=["row", "person_id", "year", "reason"]).copy()
            out.insert(0, "stage", stage)
            self.dropped.append(out)
        return kept

    def dropped_frame(self) -> pd.DataFrame:
        if not self.dropped:
            return pd.DataFrame(columns=list(_DROP_COLUMNS))
        return pd.concat(self.dropped, ignore_index=True)

    def summary(self) -> list[dict]:
        return [{"stage": s.stage, "n_in": s.n_in, "n_out": s.n_out, "dropped": s.dropped}
                for s in self.stages]


def _drops(frame, mask, reason):
    out = frame.loc[mask, ["row", "person_id", "year"]].copy()
    out["reason"] = reason if isinstance(reason, str) else reason[mask]
    return out


# --- ingestion --------------------------------------------------------------

def _read_raw(source) -> pd.DataFrame:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        try:
            handle = open(source, newline="", encoding="utf-8")
        except OSError as exc:
            raise PipelineError(f"cannot read panel file {source}: {exc.strerror}") from None
    elif isinstance(source, str):
        handle = io.StringIO(source)
    else:
        handle = source
    try:
        return pd.read_csv(handle, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise PipelineError("panel file is empty (header row required)") from None
    except pd.errors.ParserError as exc:
        raise PipelineError(f"malformed panel file: {exc}") from None
    finally:
        if handle is not source:
            handle.close()


def ingest_panel_csv(source, ledger: RowLedger | None = None) -> pd.DataFrame:
    """Read and validate a panel CSV.

    ``source`` is a path, an open text handle, or the CSV text itself.
    Rows violating a record invariant are dropped with a reason and their
    file line number (the header is line 1); missing values drop the row
    (complete-case).  Returns the valid records with a ``row`` column.

    Raises
    ------
    PipelineError
        Missing header columns or an unparseable file.
    """
    ledger = ledger if ledger is not None else RowLedger()
    raw = _read_raw(source)
    missing = [c for c in PANEL_COLUMNS if c not in raw.columns]
    if missing:
        raise PipelineError(f"panel header lacks columns: {', '.join(missing)}")
    raw = raw[list(PANEL_COLUMNS)].copy()
    n_in = len(raw)
    raw.insert(0, "row", np.arange(2, n_in + 2))
    reason = pd.Series("", index=raw.index, dtype=object)

    def flag(mask, text):
        mask = mask & (reason == "")
        reason[mask] = text

    for col in PANEL_COLUMNS:
        flag(raw[col].fillna("").str.strip() == "", f"missing {col}")
    frame = raw.copy()
    for col in _INT_COLUMNS + ("income_pm", "visits"):
        values = pd.to_numeric(raw[col], errors="coerce")
        flag(values.isna() & (reason == ""), f"non-numeric {col}")
        if col in _INT_COLUMNS:
            flag(values.notna() & (values != values.round()), f"non-integer {col}")
        frame[col] = values
    for col in ("canton", "employment", "plan_type"):
        frame[col] = raw[col].str.strip()
    # domain checks, in order of precedence
    flag(frame["age"] < MIN_AGE, f"age<{MIN_AGE}")
    flag(~frame["deductible"].isin(market.DEDUCTIBLES), "off-menu deductible")
    flag(frame["visits"] < 0, "negative visits")
    flag(~frame["canton"].isin(market.CANTONS), "unknown canton")
    flag(~frame["plan_type"].isin(market.PLAN_TYPES), "unknown plan_type")
    flag(~frame["employment"].isin(EMPLOYMENT_CODES), "unknown employment")
    for col in _FLAG_COLUMNS:
        flag(~frame[col].isin((0, 1)), f"{col} not 0/1")
    for col, (lo, hi) in _RANGES.items():
        flag((frame[col] < lo) | (frame[col] > hi), f"{col} out of range")
    flag(frame["income_pm"] < 0, "negative income_pm")
    valid = reason == ""
    dup = frame.loc[valid].duplicated(["person_id", "year"], keep="first")
    flag(valid & dup.reindex(frame.index, fill_value=False), "duplicate person-year")

    bad = reason != ""
    dropped = _drops(frame, bad, reason)
    kept = frame.loc[~bad].copy()
    for col in _INT_COLUMNS:
        kept[col] = kept[col].astype(np.int64)
    kept["income_pm"] = kept["income_pm"].astype(float)
    kept["visits"] = kept["visits"].astype(float)
    kept = kept.sort_values(["person_id", "year"], kind="stable").reset_index(drop=True)
    return ledger.record("ingest", n_in, kept, dropped)


# --- derived fields ---------------------------------------------------------

def build_lags(records: pd.DataFrame, ledger: RowLedger | None = None) -> pd.DataFrame:
    """Attach year t-1 values of :data:`LAG_FIELDS` (suffix ``_lag``) plus the
    previous deductible and canton.

    A row survives only when the same person has a record for the previous
    calendar year; first waves and post-gap years are consumed as lag
    sources.
    """
    ledger = ledger if ledger is not None else RowLedger()
    carry = list(LAG_FIELDS) + ["deductible"]
    prev = records[["person_id", "year", *carry]].copy()
    prev["year"] = prev["year"] + 1
    prev = prev.rename(columns={c: f"{c}_lag" for c in carry})
    merged = records.merge(prev, on=["person_id", "year"], how="left", indicator=True)
    has_lag = (merged.pop("_merge") == "both").to_numpy()
    dropped = _drops(merged, ~has_lag, "no previous-year record")
    kept = merged.loc[has_lag].copy()
    for c in carry:
        kept[f"{c}_lag"] = kept[f"{c}_lag"].astype(records[c].dtype)
    kept["health_shock"] = health_shock(kept["illness"].to_numpy(), kept["illness_lag"].to_numpy())
    kept["switching_group"] = [switching_group(a, b) for a, b in
                               zip(kept["deductible"], kept["deductible_lag"])]
    return ledger.record("lags", len(records), kept.reset_index(drop=True), dropped)


def health_shock(current, lagged):
    """1 for a new illness: reported in t and not in t-1.

    Works on scalars or arrays; a missing lag is an error, not a zero.
    """
    cur = np.asarray(current, dtype=float)
    lag = np.asarray(lagged, dtype=float)
    if np.any(np.isnan(cur)) or np.any(np.isnan(lag)):
        raise ValueError("health shock needs both the current and the lagged illness flag")
    for arr in (cur, lag):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("illness flags must be 0/1")
    out = ((cur == 1) & (lag == 0)).astype(int)
    return int(out) if out.ndim == 0 else out


def intensive_margin(rows: pd.DataFrame, ledger: RowLedger | None = None) -> pd.DataFrame:
    """Keep rows with at least one visit and add ``log_visits``."""
    ledger = ledger if ledger is not None else RowLedger()
    some = rows["visits"].to_numpy() >= 1
    dropped = _drops(rows, ~some, "zero visits")
    kept = rows.loc[some].copy()
    kept["log_visits"] = np.log(kept["visits"].to_numpy(float))
    return ledger.record("intensive", len(rows), kept.reset_index(drop=True), dropped)


def _check_menu(values, what="deductible"):
    arr = np.asarray(values)
    off = ~np.isin(arr, market.DEDUCTIBLES)
    if np.any(off):
        raise ValueError(f"{what} {arr[off].ravel()[0]!r} is not on the menu {market.DEDUCTIBLES}")
    return arr


def treatment_indicator(deductible, which="lowest"):
    """``1{deductible == 300}`` (lowest) or ``1{deductible == 2500}`` (highest)."""
    if which not in ("lowest", "highest"):
        raise ValueError(f"treatment side must be 'lowest' or 'highest', got {which!r}")
    arr = _check_menu(deductible)
    target = min(market.DEDUCTIBLES) if which == "lowest" else max(market.DEDUCTIBLES)
    out = (arr == target).astype(int)
    return int(out) if out.ndim == 0 else out


def switching_group(ded_t, ded_prev) -> str:
    """Classify a deductible change from t-1 to t into one of :data:`SWITCHING_GROUPS`."""
    _check_menu([ded_t, ded_prev])
    diff = int(ded_t) - int(ded_prev)
    if diff == 0:
        return "NoSwitch"
    if diff <= -1000:
        return "StrongDrop"
    if -700 <= diff <= -200:
        return "MildDrop"
    if 200 <= diff <= 700:
        return "MildIncrease"
    if diff >= 1000:
        return "StrongIncrease"
    raise ValueError(f"deductible change {diff} falls outside every switching band")


def join_premiums(rows: pd.DataFrame, table: market.PremiumTable,
                  ledger: RowLedger | None = None) -> pd.DataFrame:
    """Attach ``avg_premium`` for each row's (canton, adult, deductible, plan type) cell."""
    ledger = ledger if ledger is not None else RowLedger()
    cache = {}
    values = np.empty(len(rows))
    for i, key in enumerate(zip(rows["canton"], rows["deductible"], rows["plan_type"])):
        if key not in cache:
            try:
                cache[key] = market.average_market_premium(table, key[0], "adult", int(key[1]), key[2])
            except market.EmptyCellError:
                cache[key] = np.nan
        values[i] = cache[key]
    found = ~np.isnan(values)
    dropped = _drops(rows, ~found, "no premium cell")
    kept = rows.loc[found].copy()
    kept["avg_premium"] = values[found]
    return ledger.record("premiums", len(rows), kept.reset_index(drop=True), dropped)


def stable_subsample(rows: pd.DataFrame, years=(2018, 2019),
                     ledger: RowLedger | None = None) -> pd.DataFrame:
    """Keep persons observed in both ``years`` whose :data:`STABLE_FIELDS` agree.

    Rows of persons missing one of the years are dropped as well.
    """
    ledger = ledger if ledger is not None else RowLedger()
    y0, y1 = years
    a = rows[rows["year"] == y0].set_index("person_id")
    b = rows[rows["year"] == y1].set_index("person_id")
    both = a.index.intersection(b.index)
    same = (a.loc[both, list(STABLE_FIELDS)] == b.loc[both, list(STABLE_FIELDS)]).all(axis=1)
    stable_ids = set(same.index[same.to_numpy()])
    in_both = rows["person_id"].isin(both).to_numpy()
    keep = rows["person_id"].isin(stable_ids).to_numpy() & rows["year"].isin(years).to_numpy()
    reason = np.where(~rows["year"].isin(years).to_numpy(), "outside stable-panel years",
                      np.where(in_both, "characteristics changed", "not observed in both years"))
    dropped = _drops(rows, ~keep, pd.Series(reason, index=rows.index))
    kept = rows.loc[keep].copy()
    kept["stable"] = 1
    return ledger.record("stable", len(rows), kept.reset_index(drop=True), dropped)


def _band(dimension, rows, education_median=None):
    if dimension == "household_size_band":
        hh = rows["hh_size"].to_numpy()
        return np.where(hh >= 3, "3+", hh.astype(str)), ("1", "2", "3+")
    if dimension == "gender":
        return rows["gender"].astype(str).to_numpy(), ("0", "1")
    if dimension == "subsidy":
        return rows["subsidy"].astype(str).to_numpy(), ("0", "1")
    if dimension == "education_band":
        med = float(np.median(rows["educ_years"])) if education_median is None else education_median
        return (np.where(rows["educ_years"].to_numpy() > med, "high", "low"), ("low", "high"))
    raise ValueError(f"unknown stratification dimension {dimension!r}; "
                     f"choose from {', '.join(STRATA_DIMENSIONS)}")


def stratify(rows: pd.DataFrame, dimension: str) -> dict[str, pd.DataFrame]:
    """Partition ``rows`` along ``dimension``.

    Household bands are ``1``, ``2`` and ``3+``; education splits at the
    sample median of years of schooling (``low`` is at or below it).  Empty
    strata are returned (and logged) rather than raising.
    """
    if len(rows) == 0:
        _, names = _band(dimension, rows, education_median=0.0)
        return {name: rows.copy() for name in names}
    labels, names = _band(dimension, rows)
    out = {}
    for name in names:
        part = rows.loc[labels == name].copy()
        if part.empty:
            log.warning("stratum %s=%s is empty", dimension, name)
        out[name] = part
    return out


# --- design -----------------------------------------------------------------

DESIGN_COVARIATES = (
    "age", "age_sq", "gender", "educ_years", "hh_size", "income_pm", "unemployed",
    "not_in_lf", "subsidy", "managed", "health_shock", "self_health_lag", "chronic_lag",
    "smoke_lag", "phys_act_lag", "med_need_lag",
)
INSTRUMENTS = ("avg_premium", "suppl_ins")


def design_matrix(rows: pd.DataFrame, treatment="lowest", covariates=DESIGN_COVARIATES):
    """Build :class:`MteData` from estimation rows.

    Covariates are the listed columns plus canton indicators (alphabetically
    first canton present is the reference) and year indicators when several
    years are pooled.  Constant or collinear covariates are dropped and
    reported.  Clusters are cantons.
    """
    frame = pd.DataFrame(index=rows.index)
    derived = {
        "age_sq": rows["age"].to_numpy(float) ** 2,
        "unemployed": (rows["employment"] == "unemployed").to_numpy(float),
        "not_in_lf": (rows["employment"] == "not_in_lf").to_numpy(float),
        "managed": (rows["plan_type"] == "managed").to_numpy(float),
    }
    for name in covariates:
        frame[name] = derived[name] if name in derived else rows[name].to_numpy(float)
    cantons = sorted(rows["canton"].unique())
    for c in cantons[1:]:
        frame[f"canton_{c}"] = (rows["canton"] == c).to_numpy(float)
    years = sorted(rows["year"].unique())
    for y in years[1:]:
        frame[f"year_{y}"] = (rows["year"] == y).to_numpy(float)
    Z = rows[list(INSTRUMENTS)].to_numpy(float)
    _, z_dropped = independent_columns(Z, INSTRUMENTS)
    if z_dropped:
        raise PipelineError("instrument without variation: "
                            + ", ".join(f"{n} ({why})" for n, why in z_dropped))
    names = list(frame.columns)
    keep, dropped = independent_columns(frame.to_numpy(), names,
                                        np.column_stack([np.ones(len(rows)), Z]))
    X = frame.iloc[:, keep]
    data = MteData(
        y=rows["log_visits"].to_numpy(float),
        d=treatment_indicator(rows["deductible"].to_numpy(), treatment),
        covariates=X.to_numpy(float),
        instruments=Z,
        clusters=rows["canton"].to_numpy(),
        covariate_names=tuple(X.columns),
        instrument_names=INSTRUMENTS,
    )
    return data, dropped


@dataclass(frozen=True)
class EstimationSample:
    rows: pd.DataFrame
    data: MteData
    ledger: RowLedger
    dropped_covariates: tuple

    @property
    def extensive_exclusion_rate(self) -> float:
        stage = next(s for s in self.ledger.stages if s.stage == "intensive")
        return sum(stage.dropped.values()) / stage.n_in if stage.n_in else float("nan")


def build_sample(panel_source, premiums: market.PremiumTable, treatment="lowest",
                 stable_only=False, stratum=None, year=None) -> EstimationSample:
    """Run every pipeline stage and assemble the estimation arrays.

    ``stratum`` is ``"<dimension>=<band>"``, e.g. ``"household_size_band=3+"``.
    ``year`` selects the estimation wave (default: the latest year present).
    """
    ledger = RowLedger()
    rows = ingest_panel_csv(panel_source, ledger)
    rows = build_lags(rows, ledger)
    rows = intensive_margin(rows, ledger)
    rows = join_premiums(rows, premiums, ledger)
    if rows.empty:
        raise PipelineError("no rows left after joining premiums")
    year = int(rows["year"].max()) if year is None else int(year)
    if stable_only:
        rows = stable_subsample(rows, (year - 1, year), ledger)
    in_year = (rows["year"] == year).to_numpy()
    rows = ledger.record("year", len(rows), rows.loc[in_year].reset_index(drop=True),
                         _drops(rows, ~in_year, f"not in estimation year {year}"))
    if stratum:
        dimension, _, band = stratum.partition("=")
        parts = stratify(rows, dimension)
        if band not in parts:
            raise PipelineError(f"unknown band {band!r} for {dimension}; choose from {', '.join(parts)}")
        chosen = rows.index.isin(parts[band].index)
        rows = ledger.record("stratum", len(rows), rows.loc[chosen].reset_index(drop=True),
                             _drops(rows, ~chosen, f"outside stratum {stratum}"))
    if rows.empty:
        raise PipelineError("estimation sample is empty")
    data, dropped = design_matrix(rows, treatment)
    return EstimationSample(rows, data, ledger, tuple(dropped))
