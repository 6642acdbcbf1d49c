"""Sequence ingestion: FASTA-like parsing, completeness filtering, mutation
calling, deduplication and tabulation of daily cluster counts."""

from __future__ import annotations

import csv
import datetime as dt
import gzip
import io
import json
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

STANDARD_AA = frozenset("ACDEFGHIKLMNPQRSTVWY")
SPIKE_LENGTH = 1273
DEFAULT_HEADER = ("id", "country", "date")


class RecordError(ValueError):
    """A single malformed record; carries the 1-based line number of its header."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.reason = message
        self.line = line


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    country: str
    date: dt.date
    residues: str

    def __post_init__(self):
        if not self.residues:
            raise ValueError(f"record {self.id!r} has no residues")
        if not self.country:
            raise ValueError(f"record {self.id!r} has no country")


@dataclass(frozen=True)
class ReferenceSequence:
    residues: str
    length: int = SPIKE_LENGTH

    def __post_init__(self):
        if len(self.residues) != self.length:
            raise ValueError(
                f"reference must have {self.length} residues, got {len(self.residues)}"
            )

    def __len__(self):
        return len(self.residues)


@dataclass(frozen=True, order=True)
class Mutation:
    position: int
    ref_aa: str
    alt_aa: str

    def __post_init__(self):
        if self.position < 1:
            raise ValueError("mutation positions are 1-based")
        if self.ref_aa == self.alt_aa:
            raise ValueError(f"not a substitution: {self.ref_aa}{self.position}{self.alt_aa}")

    def __str__(self):
        return f"{self.ref_aa}{self.position}{self.alt_aa}"

    @classmethod
    def parse(cls, text: str) -> "Mutation":
        text = text.strip()
        return cls(int(text[1:-1]), text[0], text[-1])


@dataclass
class UniqueVariant:
    residues: str
    mutations: frozenset
    member_ids: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.member_ids)

    @property
    def id(self) -> str:
        return self.member_ids[0] if self.member_ids else ""

    def label(self) -> str:
        """Mutation list in position order, e.g. ``"R21I, D614G"``."""
        if not self.mutations:
            return "Reference Sequence"
        return ", ".join(str(m) for m in sorted(self.mutations))


@dataclass
class CountSeries:
    """Daily cluster counts, ``counts[i, t, c]`` for country i, day t (0-based
    from ``start_date``) and cluster c."""

    countries: list
    start_date: dt.date
    counts: np.ndarray
    pre_start: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3:
            raise ValueError("counts must be a K x T x C array")
        if self.counts.shape[0] != len(self.countries):
            raise ValueError("counts first axis must match the country list")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")

    @property
    def days(self) -> int:
        return self.counts.shape[1]

    @property
    def n_clusters(self) -> int:
        return self.counts.shape[2]

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    def date(self, t: int) -> dt.date:
        return self.start_date + dt.timedelta(days=int(t))

    def dates(self) -> list:
        return [self.date(t) for t in range(self.days)]

    def country_index(self, country: str) -> int:
        try:
            return self.countries.index(country)
        except ValueError:
            raise KeyError(f"unknown country {country!r}") from None

    def to_csv(self, path) -> None:
        """Tidy CSV, one row per (country, date, cluster); zero cells included."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["country", "date", "cluster", "count"])
            for i, country in enumerate(self.countries):
                for t in range(self.days):
                    day = self.date(t).isoformat()
                    for c in range(self.n_clusters):
                        w.writerow([country, day, c + 1, int(self.counts[i, t, c])])

    @classmethod
    def from_csv(cls, path, countries: Sequence[str] | None = None,
                 start_date: dt.date | None = None, end_date: dt.date | None = None,
                 n_clusters: int | None = None) -> "CountSeries":
        """Read the tidy format written by :meth:`to_csv`.

        Cluster labels may be integers 1..C or roman numerals I..V.
        Missing (country, date, cluster) cells are zero.
        """
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((row["country"], dt.date.fromisoformat(row["date"]),
                             _cluster_number(row["cluster"]), int(row["count"])))
        if not rows:
            raise ValueError(f"{path}: no count rows")
        if countries is None:
            countries = list(OrderedDict.fromkeys(r[0] for r in rows))
        start = start_date or min(r[1] for r in rows)
        end = end_date or max(r[1] for r in rows)
        C = n_clusters or max(r[2] for r in rows)
        T = (end - start).days + 1
        arr = np.zeros((len(countries), T, C), dtype=np.int64)
        index = {c: i for i, c in enumerate(countries)}
        for country, day, cl, n in rows:
            t = (day - start).days
            if country in index and 0 <= t < T:
                arr[index[country], t, cl - 1] += n
        return cls(list(countries), start, arr)

    def to_json(self) -> dict:
        return {
            "countries": list(self.countries),
            "start_date": self.start_date.isoformat(),
            "counts": self.counts.tolist(),
            "pre_start": dict(self.pre_start),
            "dropped": dict(self.dropped),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "CountSeries":
        return cls(list(obj["countries"]), dt.date.fromisoformat(obj["start_date"]),
                   np.asarray(obj["counts"]), Counter(obj.get("pre_start", {})),
                   Counter(obj.get("dropped", {})))


_ROMAN = {"I": 1, "II": 2, "III": 3, "IV": 4, "V": 5, "VI": 6, "VII": 7, "VIII": 8, "IX": 9, "X": 10}


def _cluster_number(label: str) -> int:
    label = str(label).strip()
    if label.isdigit():
        return int(label)
    try:
        return _ROMAN[label.upper()]
    except KeyError:
        raise ValueError(f"unrecognised cluster label {label!r}") from None


def roman(n: int) -> str:
    for k, v in _ROMAN.items():
        if v == n:
            return k
    return str(n)


# ---------------------------------------------------------------- parsing


def open_text(path) -> IO[str]:
    """Open a possibly gzip-compressed text file."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def _iter_fasta(lines: Iterable[str]):
    header, header_line, chunks = None, 0, []
    for lineno, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if header is not None:
                yield header, header_line, "".join(chunks)
            header, header_line, chunks = line[1:], lineno, []
        elif header is None:
            raise RecordError("sequence data before first header", lineno)
        else:
            chunks.append("".join(line.split()))
    if header is not None:
        yield header, header_line, "".join(chunks)


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def parse_records(stream, header_spec: Sequence[str] = DEFAULT_HEADER, *,
                  sep: str = "|", errors: list | None = None) -> list[SequenceRecord]:
    """Parse FASTA-like records with pipe-delimited headers.

    ``header_spec`` names the header fields in order; it must contain
    ``id``, ``country`` and ``date`` (other names are ignored).  Records
    with a malformed header or an unreadable date raise
    :class:`RecordError`, unless an ``errors`` list is given, in which case
    the error is appended there and parsing continues.
    """
    missing = {"id", "country", "date"} - set(header_spec)
    if missing:
        raise ValueError(f"header spec lacks fields: {sorted(missing)}")
    if isinstance(stream, (str, bytes)):
        text = stream.decode() if isinstance(stream, bytes) else stream
        stream = io.StringIO(text)
    pos = {name: k for k, name in enumerate(header_spec)}
    out = []
    for header, lineno, seq in _iter_fasta(stream):
        try:
            fields = [f.strip() for f in header.split(sep)]
            for name in ("id", "country", "date"):
                if pos[name] >= len(fields) or not fields[pos[name]]:
                    raise RecordError(f"missing {name} field", lineno)
            try:
                day = parse_date(fields[pos["date"]])
            except ValueError:
                raise RecordError(f"unreadable date {fields[pos['date']]!r}", lineno) from None
            if not seq:
                raise RecordError("empty sequence", lineno)
            out.append(SequenceRecord(fields[pos["id"]], fields[pos["country"]], day, seq.upper()))
        except RecordError as exc:
            if errors is None:
                raise
            errors.append(exc)
    return out


def read_reference(path_or_stream) -> ReferenceSequence:
    """Single-record reference from a path or from literal FASTA text."""
    if isinstance(path_or_stream, str) and "\n" in path_or_stream:
        entries = list(_iter_fasta(io.StringIO(path_or_stream)))
    elif isinstance(path_or_stream, (str, Path)):
        with open_text(path_or_stream) as fh:
            entries = list(_iter_fasta(fh))
    else:
        entries = list(_iter_fasta(path_or_stream))
    if len(entries) != 1:
        raise ValueError(f"reference must contain exactly one record, found {len(entries)}")
    return ReferenceSequence(entries[0][2].upper())


# ------------------------------------------------------ filtering / calling


def filter_complete(records: Sequence[SequenceRecord], ref: ReferenceSequence):
    """Keep records of reference length over the 20 standard letters.

    Returns ``(kept, report)`` where ``report`` counts rejections under
    ``"wrong_length"`` and ``"nonstandard_letter"``.
    """
    kept = []
    report = Counter({"wrong_length": 0, "nonstandard_letter": 0})
    n = len(ref)
    for rec in records:
        if len(rec.residues) != n:
            report["wrong_length"] += 1
        elif not STANDARD_AA.issuperset(rec.residues):
            report["nonstandard_letter"] += 1
        else:
            kept.append(rec)
    return kept, report


def call_mutations(seq: str, ref) -> frozenset:
    ref_res = ref.residues if isinstance(ref, ReferenceSequence) else ref
    if len(seq) != len(ref_res):
        raise ValueError(f"length mismatch: sequence {len(seq)} vs reference {len(ref_res)}")
    return frozenset(
        Mutation(k + 1, r, s) for k, (r, s) in enumerate(zip(ref_res, seq)) if r != s
    )


def apply_mutations(ref, mutations: Iterable[Mutation]) -> str:
    res = list(ref.residues if isinstance(ref, ReferenceSequence) else ref)
    for m in mutations:
        if res[m.position - 1] != m.ref_aa:
            raise ValueError(f"{m} does not match reference residue {res[m.position - 1]}")
        res[m.position - 1] = m.alt_aa
    return "".join(res)


def deduplicate(records: Sequence[SequenceRecord], ref=None) -> list[UniqueVariant]:
    """Group records by identical residue string, in order of first appearance.

    Mutations are called against ``ref`` when one is given.
    """
    groups: dict[str, list] = OrderedDict()
    for rec in records:
        groups.setdefault(rec.residues, []).append(rec.id)
    return [
        UniqueVariant(res, call_mutations(res, ref) if ref is not None else frozenset(), ids)
        for res, ids in groups.items()
    ]


# ------------------------------------------------------------- tabulation


def tabulate_counts(records: Sequence[SequenceRecord], assignment, start_date: dt.date,
                    end_date: dt.date, countries: Sequence[str] | None = None,
                    n_clusters: int | None = None) -> CountSeries:
    """Count records per (country, day, cluster).

    ``assignment`` maps a record's residue string (or record id) to its
    1-based cluster label; a :class:`~spikeevo.cluster.ClusterAssignment`
    works directly.  Records before ``start_date`` are tallied by cluster in
    ``pre_start``; records from countries outside ``countries`` are tallied
    in ``dropped``.
    """
    if start_date > end_date:
        raise ValueError("start_date must not be after end_date")
    if countries is None:
        countries = sorted({r.country for r in records})
    lookup = assignment.label_of if hasattr(assignment, "label_of") else assignment.__getitem__
    labels = [lookup(r) for r in records]
    C = n_clusters or getattr(assignment, "k", None) or max(labels, default=1)
    T = (end_date - start_date).days + 1
    index = {c: i for i, c in enumerate(countries)}
    arr = np.zeros((len(countries), T, C), dtype=np.int64)
    pre, dropped = Counter(), Counter()
    for rec, lab in zip(records, labels):
        if rec.country not in index:
            dropped[rec.country] += 1
            continue
        t = (rec.date - start_date).days
        if t < 0:
            pre[lab] += 1
        elif t < T:
            arr[index[rec.country], t, lab - 1] += 1
    if dropped:
        logger.warning("dropped %d records from unlisted countries", sum(dropped.values()))
    return CountSeries(list(countries), start_date, arr, pre, dropped)


def write_variants(path, variants: Sequence[UniqueVariant]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "count", "mutations", "members"])
        for k, v in enumerate(variants):
            w.writerow([k, v.count, ";".join(str(m) for m in sorted(v.mutations)),
                        ";".join(v.member_ids)])


def read_variants(path, ref: ReferenceSequence) -> list[UniqueVariant]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            muts = frozenset(Mutation.parse(m) for m in row["mutations"].split(";") if m)
            members = [m for m in row["members"].split(";") if m]
            out.append(UniqueVariant(apply_mutations(ref, muts), muts, members))
    return out


def write_records_json(path, records: Sequence[SequenceRecord], variants: Sequence[UniqueVariant]):
    """Record metadata keyed to variant index, enough to re-tabulate without the FASTA."""
    vindex = {v.residues: k for k, v in enumerate(variants)}
    rows = [{"id": r.id, "country": r.country, "date": r.date.isoformat(),
             "variant": vindex[r.residues]} for r in records]
    with open(path, "w") as fh:
        json.dump(rows, fh)
