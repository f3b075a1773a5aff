"""Parsing, filtering and hourly aggregation of Windows authentication events."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, TextIO

import numpy as np

logger = logging.getLogger(__name__)

RESERVED_ACCOUNTS = frozenset({"LOCAL", "SYSTEM", "ANONYMOUS", "ADMINISTRATOR"})
COUNTS_HEADER = ["user", "bucket", "hour", "dow", "method", "count"]


class Method(str, enum.Enum):
    KERBEROS = "kerberos"
    NTLM = "ntlm"
    OTHER = "other"

    @classmethod
    def parse(cls, text: str) -> "Method":
        text = text.strip().lower()
        if text == "kerberos":
            return cls.KERBEROS
        if text == "ntlm":
            return cls.NTLM
        return cls.OTHER

    @property
    def index(self) -> int:
        """1 for Kerberos, 2 for NTLM; the model-side method index."""
        if self is Method.OTHER:
            raise ValueError("only Kerberos and NTLM carry a model index")
        return 1 if self is Method.KERBEROS else 2


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class ParseError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class RawEvent:
    timestamp: datetime
    user: str
    target: str
    method: Method
    outcome: Outcome


@dataclass(frozen=True, slots=True, order=True)
class HourlyCount:
    user: str
    bucket: datetime
    hour: int
    dow: int
    method: Method
    count: int

    @property
    def key(self) -> tuple[str, datetime, Method]:
        return (self.user, self.bucket, self.method)


@dataclass
class Dataset:
    train: list[HourlyCount]
    test: list[HourlyCount]
    users: set[str]
    train_start: datetime | None = None
    test_start: datetime | None = None
    test_end: datetime | None = None


@dataclass
class ParseResult:
    events: list[RawEvent] = field(default_factory=list)
    malformed: int = 0


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def day_of_week(ts: datetime) -> int:
    """1 = Sunday ... 7 = Saturday."""
    return (ts.isoweekday() % 7) + 1


def _record_to_event(rec: dict) -> RawEvent:
    try:
        ts, user, target = rec["ts"], rec["user"], rec["target"]
        method, outcome = rec["method"], rec["outcome"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"missing field {exc}") from None
    if not isinstance(user, str) or not user or not isinstance(target, str) or not target:
        raise ParseError("user and target must be non-empty strings")
    try:
        timestamp = parse_timestamp(str(ts))
        out = Outcome(str(outcome).strip().lower())
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    return RawEvent(timestamp, user, target, Method.parse(str(method)), out)


def parse_events(stream: TextIO | Iterable[str], format: str = "jsonl", strict: bool = False) -> ParseResult:
    """Parse line-delimited events, skipping (or, if ``strict``, raising on) bad lines."""
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unknown event format {format!r}")
    result = ParseResult()
    if format == "jsonl":
        records: Iterable = (line for line in stream if line.strip())

        def decode(line):
            try:
                return json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc)) from None
    else:
        records = csv.DictReader(stream)

        def decode(row):
            return row

    for lineno, raw in enumerate(records, start=1):
        try:
            result.events.append(_record_to_event(decode(raw)))
        except ParseError as exc:
            if strict:
                raise ParseError(f"line {lineno}: {exc}") from None
            result.malformed += 1
    if result.malformed:
        logger.warning("skipped %d malformed event lines", result.malformed)
    return result


def is_human_account(user: str) -> bool:
    return not user.endswith("$") and user.upper() not in RESERVED_ACCOUNTS


def filter_events(events: Iterable[RawEvent]) -> list[RawEvent]:
    return [
        e
        for e in events
        if e.outcome is Outcome.SUCCESS
        and e.method in (Method.KERBEROS, Method.NTLM)
        and is_human_account(e.user)
    ]


def hour_bucket(ts: datetime) -> datetime:
    return ts.replace(minute=0, second=0, microsecond=0)


def aggregate_hourly(events: Iterable[RawEvent]) -> list[HourlyCount]:
    """Distinct targets per (user, hour bucket, method), sorted by bucket then user."""
    targets: dict[tuple, set] = defaultdict(set)
    for e in events:
        targets[(e.user, hour_bucket(e.timestamp), e.method)].add(e.target)
    rows = [
        HourlyCount(user, bucket, bucket.hour, day_of_week(bucket), method, len(tset))
        for (user, bucket, method), tset in targets.items()
    ]
    rows.sort(key=lambda r: (r.bucket, r.user, r.method.value))
    return rows


def split_and_prune(
    counts: list[HourlyCount], train_days: int = 20, test_days: int = 7, min_train_obs: int = 10
) -> Dataset:
    """Calendar-day train/test split at UTC midnight followed by sparse-user pruning."""
    if min_train_obs < 1:
        raise ValueError("min_train_obs must be >= 1")
    if not counts:
        raise ValueError("no hourly counts to split")
    first = min(r.bucket for r in counts).replace(hour=0)
    last = max(r.bucket for r in counts).replace(hour=0)
    span = (last - first).days + 1
    if span < train_days + test_days:
        raise ValueError(f"counts span {span} calendar days, need {train_days + test_days}")
    test_start = first + timedelta(days=train_days)
    test_end = test_start + timedelta(days=test_days)

    train = [r for r in counts if r.bucket < test_start]
    test = [r for r in counts if test_start <= r.bucket < test_end]
    n_train: dict[str, int] = defaultdict(int)
    for r in train:
        n_train[r.user] += 1
    keep = {u for u, n in n_train.items() if n >= min_train_obs}
    dropped = len({r.user for r in counts} - keep)
    if dropped:
        logger.info("pruned %d users (fewer than %d training rows or test-only)", dropped, min_train_obs)
    return Dataset(
        train=[r for r in train if r.user in keep],
        test=[r for r in test if r.user in keep],
        users=keep,
        train_start=first,
        test_start=test_start,
        test_end=test_end,
    )


def dispersion_ratio(counts) -> float:
    """Sample variance (n-1 denominator) over sample mean."""
    x = np.asarray(list(counts), dtype=float)
    if x.size < 2:
        raise ValueError("dispersion ratio needs at least two values")
    mean = x.mean()
    if mean <= 0:
        raise ValueError("dispersion ratio needs a positive mean")
    return float(x.var(ddof=1) / mean)


def write_counts_csv(rows: Iterable[HourlyCount], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(COUNTS_HEADER)
    for r in rows:
        w.writerow([r.user, format_timestamp(r.bucket), r.hour, r.dow, r.method.value, r.count])


def read_counts_csv(fh: TextIO) -> list[HourlyCount]:
    rows = []
    for rec in csv.DictReader(fh):
        bucket = parse_timestamp(rec["bucket"])
        row = HourlyCount(rec["user"], bucket, int(rec["hour"]), int(rec["dow"]), Method(rec["method"]), int(rec["count"]))
        if row.count < 1 or row.hour != bucket.hour or row.dow != day_of_week(bucket):
            raise ValueError(f"inconsistent counts row {rec}")
        rows.append(row)
    return rows


def counts_to_text(rows: Iterable[HourlyCount]) -> str:
    buf = io.StringIO()
    write_counts_csv(rows, buf)
    return buf.getvalue()
