"""
Swiss mandatory health insurance: plan menu, cost sharing and premium data.

Cost sharing: the insured pays everything up to the deductible, then 10
percent of costs above it until the co-payment total reaches CHF 700.
Monetary arithmetic in :func:`out_of_pocket` is done in exact decimal CHF
(spend is rounded to the cent on entry; no rounding afterwards).

Premium listings use one canonical CSV schema::

    canton,age_group,deductible,plan_type,insurer,monthly_premium
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, NamedTuple

import numpy as np

__all__ = [
    "DEDUCTIBLES",
    "CANTONS",
    "AGE_GROUPS",
    "PLAN_TYPES",
    "COINSURANCE_RATE",
    "COINSURANCE_CAP",
    "PREMIUM_COLUMNS",
    "MarketDataError",
    "EmptyCellError",
    "PlanSpec",
    "PremiumRow",
    "PremiumTable",
    "out_of_pocket",
    "marginal_price",
    "average_market_premium",
    "ingest_premium_csv",
    "write_premium_csv",
]

DEDUCTIBLES = (300, 500, 1000, 1500, 2000, 2500)
CANTONS = (
    "AG", "AI", "AR", "BE", "BL", "BS", "FR", "GE", "GL", "GR", "JU", "LU", "NE",
    "NW", "OW", "SG", "SH", "SO", "SZ", "TG", "TI", "UR", "VD", "VS", "ZG", "ZH",
)
AGE_GROUPS = ("child", "young_adult", "adult")
# managed-care subtypes (family doctor, telemedicine, HMO) share one code
PLAN_TYPES = ("free", "managed")

COINSURANCE_RATE = Decimal("0.10")
COINSURANCE_CAP = Decimal("700")
PREMIUM_COLUMNS = ("canton", "age_group", "deductible", "plan_type", "insurer", "monthly_premium")

_CENT = Decimal("0.01")


class MarketDataError(ValueError):
    """Malformed or inconsistent premium data."""


class EmptyCellError(LookupError):
    """No premium listing exists for the requested market cell."""


@dataclass(frozen=True)
class PlanSpec:
    deductible: int
    plan_type: str = "free"
    age_group: str = "adult"
    canton: str = "ZH"

    def __post_init__(self):
        _check_deductible(self.deductible)
        if self.plan_type not in PLAN_TYPES:
            raise ValueError(f"unknown plan type {self.plan_type!r}")
        if self.age_group not in AGE_GROUPS:
            raise ValueError(f"unknown age group {self.age_group!r}")
        if self.canton not in CANTONS:
            raise ValueError(f"unknown canton {self.canton!r}")


class PremiumRow(NamedTuple):
    canton: str
    age_group: str
    deductible: int
    plan_type: str
    insurer: str
    monthly_premium: float

    @property
    def key(self):
        return (self.canton, self.age_group, self.deductible, self.plan_type, self.insurer)


@dataclass(frozen=True)
class PremiumTable:
    """Immutable collection of insurer premium listings."""

    rows: tuple[PremiumRow, ...]
    _cells: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cells = defaultdict(list)
        seen = set()
        for row in self.rows:
            if not row.monthly_premium > 0:
                raise MarketDataError(f"non-positive premium for {row.key}")
            if row.key in seen:
                raise MarketDataError(f"duplicate premium listing for {row.key}")
            seen.add(row.key)
            cells[row.key[:4]].append(row.monthly_premium)
        object.__setattr__(self, "_cells", {k: tuple(v) for k, v in cells.items()})

    def __len__(self):
        return len(self.rows)

    def cell(self, canton, age_group, deductible, plan_type) -> tuple[float, ...]:
        return self._cells.get((canton, age_group, int(deductible), plan_type), ())

    @classmethod
    def from_rows(cls, rows: Iterable) -> "PremiumTable":
        return cls(tuple(PremiumRow(*r) for r in rows))


def _check_deductible(deductible):
    if deductible not in DEDUCTIBLES:
        raise ValueError(f"deductible {deductible!r} is not on the menu {DEDUCTIBLES}")


def _chf(amount) -> Decimal:
    if isinstance(amount, (float, np.floating)):
        amount = repr(float(amount))
    elif isinstance(amount, np.integer):
        amount = int(amount)
    return Decimal(amount).quantize(_CENT, rounding=ROUND_HALF_UP)


def out_of_pocket(annual_spend, deductible) -> Decimal:
    """Annual out-of-pocket payment in CHF for a given spend and deductible.

    >>> out_of_pocket(1300, 300)
    Decimal('400.000')
    """
    _check_deductible(deductible)
    spend = _chf(annual_spend)
    if spend < 0:
        raise ValueError(f"annual spend must be non-negative, got {annual_spend}")
    d = Decimal(deductible)
    coinsurance = COINSURANCE_RATE * max(Decimal(0), spend - d)
    return min(spend, d) + min(coinsurance, COINSURANCE_CAP)


def marginal_price(annual_spend, deductible) -> float:
    """Effective co-payment rate at a spend level: 1 below the deductible,
    0.1 inside the coinsurance band, 0 once the cap is exhausted.

    At a kink the rate of the band starting there applies.
    """
    _check_deductible(deductible)
    if annual_spend < 0:
        raise ValueError(f"annual spend must be non-negative, got {annual_spend}")
    cap_point = deductible + float(COINSURANCE_CAP / COINSURANCE_RATE)
    if annual_spend < deductible:
        return 1.0
    if annual_spend < cap_point:
        return float(COINSURANCE_RATE)
    return 0.0


def average_market_premium(table: PremiumTable, canton, age_group, deductible, plan_type) -> float:
    """Unweighted mean monthly premium across insurers in one market cell."""
    premiums = table.cell(canton, age_group, deductible, plan_type)
    if not premiums:
        raise EmptyCellError(
            f"no premium listing for canton={canton} age_group={age_group} "
            f"deductible={deductible} plan_type={plan_type}"
        )
    # fsum keeps the mean independent of row order
    return math.fsum(premiums) / len(premiums)


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        return source
    raise TypeError(f"cannot read premiums from {type(source).__name__}")


def ingest_premium_csv(source) -> PremiumTable:
    """Load and validate a premium listing in the canonical CSV schema.

    Row numbers in error messages count the header as row 1.
    """
    handle = _open_text(source)
    try:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise MarketDataError("premium file is empty (header row required)")
        header = [h.strip() for h in header]
        if tuple(header) != PREMIUM_COLUMNS:
            raise MarketDataError(
                f"premium header must be {','.join(PREMIUM_COLUMNS)}, got {','.join(header)}"
            )
        rows, seen = [], {}
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            rows.append(_parse_premium_row(raw, lineno))
            key = rows[-1].key
            if key in seen:
                raise MarketDataError(
                    f"row {lineno}: duplicate listing {key} (first seen on row {seen[key]})"
                )
            seen[key] = lineno
    finally:
        if handle is not source:
            handle.close()
    return PremiumTable(tuple(rows))


def _parse_premium_row(raw, lineno) -> PremiumRow:
    if len(raw) != len(PREMIUM_COLUMNS):
        raise MarketDataError(f"row {lineno}: expected {len(PREMIUM_COLUMNS)} columns, got {len(raw)}")
    canton, age_group, ded, plan_type, insurer, premium = (c.strip() for c in raw)
    if canton not in CANTONS:
        raise MarketDataError(f"row {lineno}: unknown canton {canton!r}")
    if age_group not in AGE_GROUPS:
        raise MarketDataError(f"row {lineno}: unknown age group {age_group!r}")
    if plan_type not in PLAN_TYPES:
        raise MarketDataError(f"row {lineno}: unknown plan type {plan_type!r}")
    try:
        deductible = int(ded)
    except ValueError:
        raise MarketDataError(f"row {lineno}: deductible {ded!r} is not an integer") from None
    if deductible not in DEDUCTIBLES:
        raise MarketDataError(f"row {lineno}: deductible {deductible} is not on the menu")
    try:
        value = float(premium)
    except ValueError:
        raise MarketDataError(f"row {lineno}: monthly premium {premium!r} is not numeric") from None
    if not np.isfinite(value) or value <= 0:
        raise MarketDataError(f"row {lineno}: monthly premium must be positive, got {premium}")
    if not insurer:
        raise MarketDataError(f"row {lineno}: empty insurer id")
    return PremiumRow(canton, age_group, deductible, plan_type, insurer, value)


def write_premium_csv(table: PremiumTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREMIUM_COLUMNS)
        for row in table.rows:
            writer.writerow([row.canton, row.age_group, row.deductible, row.plan_type,
                             row.insurer, f"{row.monthly_premium:.2f}"])
