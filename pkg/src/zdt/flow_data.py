"""Flow records, CSV ingestion and per-flow feature assembly."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CANONICAL_FIELDS = (
    "ts",
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "duration",
    "fwd_bytes",
    "bwd_bytes",
)
LABEL_FIELD = "label"

FLOW_FEATURES = ("duration", "src_port", "dst_port", "fwd_bytes", "bwd_bytes")
HOST_FEATURES = (
    "in_degree",
    "out_degree",
    "in_strength",
    "out_strength",
    "pagerank",
    "clustering",
    "community_size_fraction",
    "intra_community_ratio",
    "k_core",
)
FEATURE_NAMES = (
    FLOW_FEATURES
    + tuple(f"src_{n}" for n in HOST_FEATURES)
    + tuple(f"dst_{n}" for n in HOST_FEATURES)
    + ("cross_community",)
)
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 24


class FlowDataError(Exception):
    pass


class SchemaError(FlowDataError):
    def __init__(self, column: str):
        super().__init__(f"missing column {column!r} in CSV header")
        self.column = column


class UnknownHostError(FlowDataError, KeyError):
    def __init__(self, host: str):
        super().__init__(f"unknown host {host}")
        self.host = host

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class FlowRecord:
    timestamp: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    duration: float
    fwd_bytes: int
    bwd_bytes: int
    label: str | None = None

    def __post_init__(self):
        for name in ("src_port", "dst_port"):
            v = getattr(self, name)
            if not 0 <= v <= 65535:
                raise ValueError(f"{name} {v} outside [0, 65535]")
        if not self.duration >= 0:
            raise ValueError(f"negative or NaN duration {self.duration}")
        if self.fwd_bytes < 0 or self.bwd_bytes < 0:
            raise ValueError("negative byte count")


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    record_id: int

    def __post_init__(self):
        if len(self.values) != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} values, got {len(self.values)}")
        if not all(np.isfinite(self.values)):
            raise ValueError("non-finite feature value")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass
class RowError:
    line: int
    message: str


@dataclass
class ParseReport:
    records: list[FlowRecord] = field(default_factory=list)
    errors: list[RowError] = field(default_factory=list)

    @property
    def n_errors(self) -> int:
        return len(self.errors)


def _as_int(text: str) -> int:
    # tolerate "80.0" style exports, reject "80.5"
    try:
        return int(text)
    except ValueError:
        f = float(text)
        if not f.is_integer():
            raise ValueError(f"non-integral value {text!r}") from None
        return int(f)


def parse_flow_csv(
    source: IO[bytes] | IO[str] | str,
    schema: Mapping[str, str] | None = None,
) -> ParseReport:
    """Parse a flow CSV into records.

    ``schema`` maps canonical field names (``ts``, ``src_ip``, ... ``label``)
    to the header names used in the file; unmapped fields use the canonical
    name. Malformed rows are skipped and reported with their line number.
    A missing mapped column raises :class:`SchemaError` before any row is read.
    """
    if isinstance(source, str):
        fh = open(source, "r", encoding="utf-8", newline="")
        close = True
    else:
        close = False
        fh = source
        if isinstance(source.read(0), bytes):
            fh = io.TextIOWrapper(source, encoding="utf-8", newline="")  # type: ignore[arg-type]
    try:
        return _parse(fh, dict(schema or {}))
    finally:
        if close:
            fh.close()


def _parse(fh: IO[str], schema: dict[str, str]) -> ParseReport:
    report = ParseReport()
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        return report
    header = [h.strip() for h in header]
    pos = {h: i for i, h in enumerate(header)}
    cols = {}
    for name in CANONICAL_FIELDS:
        col = schema.get(name, name)
        if col not in pos:
            raise SchemaError(col)
        cols[name] = pos[col]
    label_col = schema.get(LABEL_FIELD, LABEL_FIELD)
    if LABEL_FIELD in schema and label_col not in pos:
        raise SchemaError(label_col)
    label_idx = pos.get(label_col)

    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        try:
            get = lambda name: row[cols[name]].strip()  # noqa: E731
            label = None
            if label_idx is not None:
                label = row[label_idx].strip() or None
            rec = FlowRecord(
                timestamp=_as_int(get("ts")),
                src_ip=get("src_ip"),
                dst_ip=get("dst_ip"),
                src_port=_as_int(get("src_port")),
                dst_port=_as_int(get("dst_port")),
                duration=float(get("duration")),
                fwd_bytes=_as_int(get("fwd_bytes")),
                bwd_bytes=_as_int(get("bwd_bytes")),
                label=label,
            )
        except (ValueError, IndexError) as exc:
            report.errors.append(RowError(line, str(exc)))
            continue
        report.records.append(rec)
    if report.errors:
        logger.warning("skipped %d malformed flow rows", report.n_errors)
    return report


def write_flow_csv(records: Iterable[FlowRecord], dest: IO[str] | str) -> None:
    """Write records with the canonical header (label column always present)."""
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write_flow_csv(records, fh)
        return
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(CANONICAL_FIELDS + (LABEL_FIELD,))
    for r in records:
        w.writerow([
            r.timestamp, r.src_ip, r.dst_ip, r.src_port, r.dst_port,
            repr(float(r.duration)), r.fwd_bytes, r.bwd_bytes, r.label or "",
        ])


def flow_values(record: FlowRecord) -> list[float]:
    return [
        float(record.duration),
        float(record.src_port),
        float(record.dst_port),
        float(record.fwd_bytes),
        float(record.bwd_bytes),
    ]


def assemble_features(
    record: FlowRecord,
    host_features: Mapping[str, Sequence[float]],
    communities: Mapping[str, int],
    record_id: int = 0,
) -> FeatureVector:
    """Build the 24-value vector for one flow.

    Layout: five flow fields, nine source host features, nine destination
    host features, then 1.0 if the endpoints sit in different communities.
    The timestamp and the addresses themselves are never features.
    """
    for host in (record.src_ip, record.dst_ip):
        if host not in host_features or host not in communities:
            raise UnknownHostError(host)
    src = [float(v) for v in host_features[record.src_ip]]
    dst = [float(v) for v in host_features[record.dst_ip]]
    cross = 1.0 if communities[record.src_ip] != communities[record.dst_ip] else 0.0
    return FeatureVector(tuple(flow_values(record) + src + dst + [cross]), record_id)


def labels_of(records: Sequence[FlowRecord]) -> np.ndarray:
    return np.array([r.label or "" for r in records], dtype=object)
