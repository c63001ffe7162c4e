"""Message/activity ingestion, user geo-referencing, and penetration filtering.

Message files are CSV or JSONL with one row per directed message carrying a
score in [0, 1] per relationship dimension. Malformed rows are counted and
skipped, never fatal; self-replies are dropped at parse time because a user
messaging themselves is not a tie.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import InputError, NumericalError

# user -> area code; each user maps to at most one area
UserLocationMap = dict[str, str]


@dataclass(frozen=True)
class MessageRecord:
    message_id: str
    sender: str
    receiver: str
    timestamp: float
    scores: dict[str, float]


@dataclass(frozen=True)
class GeoActivityRecord:
    user: str
    area: str
    count: int


@dataclass
class AreaInfo:
    population: float
    gdp_per_capita: float
    density: float
    centroid_lat: float
    centroid_lon: float
    included: bool = True
    user_count: int = 0


@dataclass
class AreaTable:
    """Per-area metadata keyed by area code."""

    areas: dict[str, AreaInfo]

    def codes(self) -> list[str]:
        return sorted(self.areas)

    def included_codes(self) -> list[str]:
        return [c for c in self.codes() if self.areas[c].included]

    def __len__(self) -> int:
        return len(self.areas)

    def __getitem__(self, code: str) -> AreaInfo:
        return self.areas[code]

    def __contains__(self, code: str) -> bool:
        return code in self.areas

    def validate(self) -> None:
        for code, info in self.areas.items():
            if not info.population > 0:
                raise InputError(f"area {code}: population must be > 0")
            if not -90.0 <= info.centroid_lat <= 90.0:
                raise InputError(f"area {code}: latitude out of range")
            if not -180.0 <= info.centroid_lon <= 180.0:
                raise InputError(f"area {code}: longitude out of range")


@dataclass(frozen=True)
class MessageSchema:
    """Column map for message files; score column names default to the
    dimension names themselves."""

    dimensions: tuple[str, ...]
    message_id: str = "message_id"
    sender: str = "sender"
    receiver: str = "receiver"
    timestamp: str = "timestamp"
    score_template: str = "{dim}"

    def score_column(self, dim: str) -> str:
        return self.score_template.format(dim=dim)

    def required_columns(self) -> list[str]:
        return [self.message_id, self.sender, self.receiver, self.timestamp] + [
            self.score_column(d) for d in self.dimensions
        ]


@dataclass
class ParseStats:
    rows_total: int = 0
    parsed: int = 0
    rejected: int = 0
    self_loops: int = 0
    outside_window: int = 0

    def merge(self, other: "ParseStats") -> None:
        self.rows_total += other.rows_total
        self.parsed += other.parsed
        self.rejected += other.rejected
        self.self_loops += other.self_loops
        self.outside_window += other.outside_window


def _detect_format(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    return "jsonl" if ext in (".jsonl", ".json", ".ndjson") else "csv"


def _row_to_record(
    row: Mapping[str, object], schema: MessageSchema
) -> MessageRecord | None:
    """Convert one raw row into a record, or None when the row is malformed."""
    try:
        sender = str(row[schema.sender]).strip()
        receiver = str(row[schema.receiver]).strip()
        message_id = str(row[schema.message_id]).strip()
        ts = float(row[schema.timestamp])  # type: ignore[arg-type]
    except (KeyError, TypeError, ValueError):
        return None
    if not sender or not receiver or not math.isfinite(ts):
        return None
    scores: dict[str, float] = {}
    for dim in schema.dimensions:
        try:
            s = float(row[schema.score_column(dim)])  # type: ignore[arg-type]
        except (KeyError, TypeError, ValueError):
            return None
        if not 0.0 <= s <= 1.0:
            return None
        scores[dim] = s
    return MessageRecord(message_id, sender, receiver, ts, scores)


class MessageParser:
    """Streaming message parser.

    Iterate to obtain records in file order; ``stats`` is complete once the
    iterator is exhausted. ``window`` is an optional half-open timestamp
    interval [start, end) applied at parse time.
    """

    def __init__(
        self,
        path: str,
        schema: MessageSchema,
        window: tuple[float | None, float | None] | None = None,
    ):
        if not os.path.exists(path):
            raise InputError(f"message file not found: {path}")
        self.path = path
        self.schema = schema
        self.window = window
        self.fmt = _detect_format(path)
        self.stats = ParseStats()

    def _in_window(self, ts: float) -> bool:
        if self.window is None:
            return True
        start, end = self.window
        if start is not None and ts < start:
            return False
        if end is not None and ts >= end:
            return False
        return True

    def _iter_rows(self) -> Iterator[Mapping[str, object] | None]:
        if self.fmt == "csv":
            with open(self.path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                header = reader.fieldnames or []
                missing = [c for c in self.schema.required_columns() if c not in header]
                if missing:
                    raise InputError(
                        f"{self.path}: missing declared columns: {', '.join(missing)}"
                    )
                for row in reader:
                    # extra fields beyond the header mean a malformed row
                    yield None if None in row else row
        else:
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        obj = json.loads(line)
                    except json.JSONDecodeError:
                        yield None
                        continue
                    yield obj if isinstance(obj, dict) else None

    def __iter__(self) -> Iterator[MessageRecord]:
        for row in self._iter_rows():
            self.stats.rows_total += 1
            rec = _row_to_record(row, self.schema) if row is not None else None
            if rec is None:
                self.stats.rejected += 1
                continue
            if rec.sender == rec.receiver:
                self.stats.self_loops += 1
                continue
            if not self._in_window(rec.timestamp):
                self.stats.outside_window += 1
                continue
            self.stats.parsed += 1
            yield rec


def parse_messages(
    path: str,
    schema: MessageSchema,
    window: tuple[float | None, float | None] | None = None,
) -> MessageParser:
    """Streaming parse of one message file; see MessageParser."""
    return MessageParser(path, schema, window)


@dataclass
class MessageTable:
    """Columnar message store used by the graph and synthesis stages.

    ``sender``/``receiver`` are integer codes into ``users``; ``scores`` is an
    (n, d) float64 matrix in the order of ``dimensions``.
    """

    users: list[str]
    sender: np.ndarray
    receiver: np.ndarray
    timestamp: np.ndarray
    dimensions: tuple[str, ...]
    scores: np.ndarray

    def __len__(self) -> int:
        return self.sender.shape[0]

    def dim_index(self, dim: str) -> int:
        try:
            return self.dimensions.index(dim)
        except ValueError:
            raise InputError(f"unknown dimension: {dim}") from None

    def iter_records(self) -> Iterator[MessageRecord]:
        for i in range(len(self)):
            yield MessageRecord(
                message_id=str(i),
                sender=self.users[self.sender[i]],
                receiver=self.users[self.receiver[i]],
                timestamp=float(self.timestamp[i]),
                scores={d: float(self.scores[i, j]) for j, d in enumerate(self.dimensions)},
            )

    def filter_window(
        self, start: float | None, end: float | None
    ) -> "MessageTable":
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.timestamp >= start
        if end is not None:
            mask &= self.timestamp < end
        return MessageTable(
            self.users,
            self.sender[mask],
            self.receiver[mask],
            self.timestamp[mask],
            self.dimensions,
            self.scores[mask],
        )

    @classmethod
    def from_records(
        cls, records: Iterable[MessageRecord], dimensions: Sequence[str] | None = None
    ) -> "MessageTable":
        code: dict[str, int] = {}
        senders: list[int] = []
        receivers: list[int] = []
        stamps: list[float] = []
        rows: list[list[float]] = []
        dims: tuple[str, ...] | None = tuple(dimensions) if dimensions else None
        for rec in records:
            if dims is None:
                dims = tuple(sorted(rec.scores))
            for u in (rec.sender, rec.receiver):
                if u not in code:
                    code[u] = len(code)
            senders.append(code[rec.sender])
            receivers.append(code[rec.receiver])
            stamps.append(rec.timestamp)
            rows.append([rec.scores[d] for d in dims])
        if dims is None:
            dims = ()
        n = len(senders)
        return cls(
            users=list(code),
            sender=np.asarray(senders, dtype=np.int64),
            receiver=np.asarray(receivers, dtype=np.int64),
            timestamp=np.asarray(stamps, dtype=np.float64),
            dimensions=dims,
            scores=np.asarray(rows, dtype=np.float64).reshape(n, len(dims)),
        )


def as_table(messages: "MessageTable | Iterable[MessageRecord]") -> MessageTable:
    if isinstance(messages, MessageTable):
        return messages
    return MessageTable.from_records(messages)


def load_messages(
    paths: str | Sequence[str],
    schema: MessageSchema,
    window: tuple[float | None, float | None] | None = None,
    chunksize: int = 1_000_000,
) -> tuple[MessageTable, ParseStats]:
    """Bulk columnar load of one or more message files.

    CSV files go through a chunked pandas reader with vectorized validation;
    JSONL falls back to the streaming parser. Validation rules are identical
    to MessageParser (equivalence is covered by tests).
    """
    if isinstance(paths, str):
        paths = [p for p in paths.split(",") if p]
    stats = ParseStats()
    code: dict[str, int] = {}
    senders: list[np.ndarray] = []
    receivers: list[np.ndarray] = []
    stamps: list[np.ndarray] = []
    score_chunks: list[np.ndarray] = []
    dims = tuple(schema.dimensions)
    score_cols = [schema.score_column(d) for d in dims]

    def encode(values: np.ndarray) -> np.ndarray:
        local, uniques = pd.factorize(values)
        mapped = np.empty(len(uniques), dtype=np.int64)
        for i, v in enumerate(uniques):
            j = code.get(v)
            if j is None:
                j = len(code)
                code[v] = j
            mapped[i] = j
        return mapped[local]

    def to_float_exact(series: pd.Series) -> np.ndarray:
        """Correctly rounded string->float conversion; pandas' to_numeric can
        be one ulp off, which would break byte round-trips."""
        arr = series.to_numpy()
        try:
            return arr.astype(np.float64)
        except (ValueError, TypeError):
            out = np.empty(len(arr), dtype=np.float64)
            for i, v in enumerate(arr):
                try:
                    out[i] = float(v)
                except (ValueError, TypeError):
                    out[i] = np.nan
            return out

    for path in paths:
        if not os.path.exists(path):
            raise InputError(f"message file not found: {path}")
        if _detect_format(path) != "csv":
            parser = parse_messages(path, schema, window)
            for rec in parser:
                for u in (rec.sender, rec.receiver):
                    if u not in code:
                        code[u] = len(code)
                senders.append(np.array([code[rec.sender]], dtype=np.int64))
                receivers.append(np.array([code[rec.receiver]], dtype=np.int64))
                stamps.append(np.array([rec.timestamp]))
                score_chunks.append(
                    np.array([[rec.scores[d] for d in dims]], dtype=np.float64)
                )
            stats.merge(parser.stats)
            continue

        def process_chunk(chunk: pd.DataFrame, fstats: ParseStats, sink: list) -> None:
            missing = [c for c in schema.required_columns() if c not in chunk.columns]
            if missing:
                raise InputError(
                    f"{path}: missing declared columns: {', '.join(missing)}"
                )
            n = len(chunk)
            fstats.rows_total += n
            snd = chunk[schema.sender].str.strip()
            rcv = chunk[schema.receiver].str.strip()
            mid = chunk[schema.message_id].str.strip()
            ts = to_float_exact(chunk[schema.timestamp])
            ok = (
                (snd != "").to_numpy()
                & (rcv != "").to_numpy()
                & (mid != "").to_numpy()
                & np.isfinite(ts)
            )
            score_mat = np.empty((n, len(dims)), dtype=np.float64)
            for j, col in enumerate(score_cols):
                vals = to_float_exact(chunk[col])
                score_mat[:, j] = vals
                ok &= np.isfinite(vals) & (vals >= 0.0) & (vals <= 1.0)
            fstats.rejected += int(n - ok.sum())
            loops = ok & (snd == rcv).to_numpy()
            fstats.self_loops += int(loops.sum())
            keep = ok & ~loops
            if window is not None:
                start, end = window
                inside = np.ones(n, dtype=bool)
                if start is not None:
                    inside &= ts >= start
                if end is not None:
                    inside &= ts < end
                fstats.outside_window += int((keep & ~inside).sum())
                keep &= inside
            if keep.any():
                sink.append(
                    (snd.to_numpy()[keep], rcv.to_numpy()[keep],
                     ts[keep], score_mat[keep])
                )
            fstats.parsed += int(keep.sum())

        # C engine is several times faster but cannot count malformed lines;
        # retry the whole file with the python engine only when it has them
        fstats = ParseStats()
        sink: list = []
        try:
            for chunk in pd.read_csv(
                path, dtype=str, chunksize=chunksize,
                on_bad_lines="error", engine="c", keep_default_na=False,
            ):
                process_chunk(chunk, fstats, sink)
        except pd.errors.EmptyDataError:
            raise InputError(f"{path}: empty message file") from None
        except pd.errors.ParserError:
            bad_lines = 0

            def on_bad(line: list[str]) -> None:
                nonlocal bad_lines
                bad_lines += 1

            fstats = ParseStats()
            sink = []
            for chunk in pd.read_csv(
                path, dtype=str, chunksize=chunksize,
                on_bad_lines=on_bad, engine="python", keep_default_na=False,
            ):
                process_chunk(chunk, fstats, sink)
            fstats.rows_total += bad_lines
            fstats.rejected += bad_lines
        for snd_arr, rcv_arr, ts_arr, score_arr in sink:
            senders.append(encode(snd_arr))
            receivers.append(encode(rcv_arr))
            stamps.append(ts_arr)
            score_chunks.append(score_arr)
        stats.merge(fstats)

    if senders:
        table = MessageTable(
            users=list(code),
            sender=np.concatenate(senders),
            receiver=np.concatenate(receivers),
            timestamp=np.concatenate(stamps),
            dimensions=dims,
            scores=np.concatenate(score_chunks, axis=0),
        )
    else:
        table = MessageTable(
            users=[],
            sender=np.empty(0, dtype=np.int64),
            receiver=np.empty(0, dtype=np.int64),
            timestamp=np.empty(0, dtype=np.float64),
            dimensions=dims,
            scores=np.empty((0, len(dims)), dtype=np.float64),
        )
    return table, stats


def read_activity_csv(path: str) -> list[GeoActivityRecord]:
    """Load user activity per area: columns user, area, count."""
    if not os.path.exists(path):
        raise InputError(f"activity file not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in ("user", "area", "count"):
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise InputError(f"{path}: missing column '{col}'")
        for lineno, row in enumerate(reader, start=2):
            try:
                count = int(row["count"])
            except (TypeError, ValueError):
                raise InputError(f"{path}:{lineno}: count is not an integer") from None
            if count < 0:
                raise InputError(f"{path}:{lineno}: count must be >= 0")
            user = (row["user"] or "").strip()
            area = (row["area"] or "").strip()
            if not user or not area:
                raise InputError(f"{path}:{lineno}: empty user or area")
            records.append(GeoActivityRecord(user, area, count))
    return records


def georeference_users(
    activity: Iterable[GeoActivityRecord], n_min: int = 3, purity: float = 0.95
) -> UserLocationMap:
    """Assign each user to the area where they are saliently active.

    A user maps to area a iff their activity count there is at least ``n_min``
    and makes up at least ``purity`` of their total activity. Both boundaries
    are inclusive. Users failing the rule are omitted. Purity must exceed 0.5
    so the assignment is unique; output is independent of input order.
    """
    if n_min < 1:
        raise InputError("n_min must be >= 1")
    if not 0.5 < purity <= 1.0:
        raise InputError("purity must be in (0.5, 1]")
    per_user: dict[str, dict[str, int]] = {}
    for rec in activity:
        counts = per_user.setdefault(rec.user, {})
        counts[rec.area] = counts.get(rec.area, 0) + rec.count
    locations: UserLocationMap = {}
    for user in sorted(per_user):
        counts = per_user[user]
        total = sum(counts.values())
        if total == 0:
            continue
        best_area = max(sorted(counts), key=counts.get)  # type: ignore[arg-type]
        best = counts[best_area]
        # compare as a ratio, not cross-multiplied: 19/20 >= 0.95 must hold
        if best >= n_min and best / total >= purity:
            locations[user] = best_area
    return locations


def filter_states_by_penetration(
    areas: AreaTable,
    user_counts: Mapping[str, int],
    sd_mult: float = 1.0,
    min_users: int = 1000,
) -> AreaTable:
    """Flag areas whose platform penetration is disproportionate.

    Fits a least-squares line user_count ~ population over all areas, then
    excludes areas whose residual deviates from the residual mean by more
    than ``sd_mult`` residual standard deviations, or whose user count is
    below ``min_users``. Both criteria are applied to the full set at once.
    """
    codes = areas.codes()
    counts = np.array([float(user_counts.get(c, 0)) for c in codes])
    if int((counts > 0).sum()) < 3:
        raise InputError("penetration filter needs at least 3 areas with users")
    pops = np.array([areas[c].population for c in codes], dtype=np.float64)
    if np.ptp(pops) == 0:
        raise NumericalError("degenerate penetration fit: all populations equal")
    design = np.column_stack([np.ones_like(pops), pops])
    coef, *_ = np.linalg.lstsq(design, counts, rcond=None)
    residuals = counts - design @ coef
    mu = residuals.mean()
    sigma = residuals.std(ddof=0)
    # a residual spread at float-noise level is an exact fit; without this
    # floor the sd criterion would slice on rounding error
    if sigma <= 1e-9 * max(1.0, float(np.abs(counts).max())):
        sigma = 0.0
        residuals = np.zeros_like(residuals)
        mu = 0.0
    out = {}
    for i, c in enumerate(codes):
        deviant = abs(residuals[i] - mu) > sd_mult * sigma
        included = not deviant and counts[i] >= min_users
        out[c] = replace(areas[c], included=bool(included), user_count=int(counts[i]))
    return AreaTable(out)


def located_user_counts(locations: UserLocationMap) -> dict[str, int]:
    counts: dict[str, int] = {}
    for area in locations.values():
        counts[area] = counts.get(area, 0) + 1
    return counts


def read_area_csv(path: str) -> AreaTable:
    """Area metadata: columns area, population, gdp_per_capita, density,
    centroid_lat, centroid_lon."""
    if not os.path.exists(path):
        raise InputError(f"area file not found: {path}")
    out: dict[str, AreaInfo] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = ("area", "population", "gdp_per_capita", "density", "centroid_lat", "centroid_lon")
        for col in needed:
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise InputError(f"{path}: missing column '{col}'")
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row["area"].strip()] = AreaInfo(
                    population=float(row["population"]),
                    gdp_per_capita=float(row["gdp_per_capita"]),
                    density=float(row["density"]),
                    centroid_lat=float(row["centroid_lat"]),
                    centroid_lon=float(row["centroid_lon"]),
                    included=_parse_bool(row.get("included", "true")),
                    user_count=int(row.get("user_count") or 0),
                )
            except (TypeError, ValueError):
                raise InputError(f"{path}:{lineno}: malformed area row") from None
    table = AreaTable(out)
    table.validate()
    return table


def _parse_bool(value: str) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes")


def write_area_csv(areas: AreaTable, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["area", "population", "gdp_per_capita", "density", "centroid_lat",
             "centroid_lon", "included", "user_count"]
        )
        for code in areas.codes():
            a = areas[code]
            writer.writerow(
                [code, repr(a.population), repr(a.gdp_per_capita), repr(a.density),
                 repr(a.centroid_lat), repr(a.centroid_lon),
                 "true" if a.included else "false", a.user_count]
            )


def write_locations_csv(locations: UserLocationMap, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "area"])
        for user in sorted(locations):
            writer.writerow([user, locations[user]])


def read_locations_csv(path: str) -> UserLocationMap:
    if not os.path.exists(path):
        raise InputError(f"locations file not found: {path}")
    out: UserLocationMap = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "user" not in reader.fieldnames or "area" not in reader.fieldnames:
            raise InputError(f"{path}: expected columns user, area")
        for row in reader:
            out[row["user"]] = row["area"]
    return out
