"""Raw diagnosis events -> fixed-length encoded sequences.

Pipeline per patient: same-day dedup, one-level hierarchy roll-up, collapse
of COVID events to the earliest one (which fixes the index date), the
45-day post-index window, then vocabulary encoding with [PAD]/[UNK].
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, NoCovidEventError

log = logging.getLogger(__name__)

PAD, UNK = "[PAD]", "[UNK]"
PAD_ID, UNK_ID = 0, 1
EPOCH = dt.date(1970, 1, 1)
NO_DATE = np.iinfo(np.int32).min


@dataclass(frozen=True, order=True)
class DiagnosisEvent:
    date: dt.date
    code: str
    patient_id: str = field(default="", compare=False)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    events: tuple[DiagnosisEvent, ...]
    label: int
    covid_index_date: dt.date | None = None

    @property
    def codes(self) -> list[str]:
        return [e.code for e in self.events]


def normalize_events(events: Iterable[DiagnosisEvent]) -> tuple[DiagnosisEvent, ...]:
    """Sort by (date, code) and keep one event per (code, date)."""
    seen: dict[tuple[dt.date, str], DiagnosisEvent] = {}
    for e in events:
        seen.setdefault((e.date, e.code), e)
    return tuple(seen[k] for k in sorted(seen))


def days(date: dt.date) -> int:
    return (date - EPOCH).days


def from_days(n: int) -> dt.date:
    return EPOCH + dt.timedelta(days=int(n))


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip()[:10])
    except ValueError:
        raise FormatError(f"{where}: unparseable date {text!r} (expected YYYY-MM-DD)") from None


def _read_csv(path, header: Sequence[str]):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        first = next(rows, None)
        if first is None or [h.strip() for h in first] != list(header):
            raise FormatError(f"{path}:1: expected header {','.join(header)}, got {first}")
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def read_labels(path) -> dict[str, int]:
    labels: dict[str, int] = {}
    for lineno, (pid, label) in _read_csv(path, ("patient_id", "label")):
        if label not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        if not pid:
            raise FormatError(f"{path}:{lineno}: empty patient_id")
        if pid in labels:
            raise FormatError(f"{path}:{lineno}: duplicate label entry for patient {pid!r}")
        labels[pid] = int(label)
    return labels


def ingest_events(events_path, labels_path) -> list[PatientRecord]:
    """Read the events and labels CSVs into sorted, deduplicated records.

    Every labelled patient is returned (possibly with no events), ordered by
    patient id. Events for a patient absent from the labels file are an error.
    """
    labels = read_labels(labels_path)
    grouped: dict[str, list[DiagnosisEvent]] = {pid: [] for pid in labels}
    for lineno, (pid, date, code) in _read_csv(events_path, ("patient_id", "date", "code")):
        where = f"{events_path}:{lineno}"
        if not code:
            raise FormatError(f"{where}: empty code")
        if pid not in grouped:
            raise FormatError(f"{where}: patient {pid!r} has no entry in the labels file")
        grouped[pid].append(DiagnosisEvent(_parse_date(date, where), code, pid))
    return [PatientRecord(pid, normalize_events(grouped[pid]), labels[pid]) for pid in sorted(grouped)]


def load_hierarchy(path) -> dict[str, str]:
    parents: dict[str, str] = {}
    for lineno, (child, parent) in _read_csv(path, ("child", "parent")):
        if not child or not parent:
            raise FormatError(f"{path}:{lineno}: empty code")
        if child == parent:
            raise FormatError(f"{path}:{lineno}: self-loop on {child!r}")
        if parents.get(child, parent) != parent:
            raise FormatError(f"{path}:{lineno}: {child!r} has two parents ({parents[child]!r}, {parent!r})")
        parents[child] = parent
    return parents


def load_code_set(path) -> frozenset[str]:
    """One code per line; blank lines and ``#`` comments ignored."""
    out = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.add(line)
    return frozenset(out)


def rollup(record: PatientRecord, hierarchy: dict[str, str]) -> PatientRecord:
    events = (replace(e, code=hierarchy.get(e.code, e.code)) for e in record.events)
    return replace(record, events=normalize_events(events))


def lift_code_set(codes: Iterable[str], hierarchy: dict[str, str]) -> frozenset[str]:
    """A code set plus the parents of its members, so it matches rolled-up records."""
    codes = frozenset(codes)
    return codes | {hierarchy[c] for c in codes if c in hierarchy}


def collapse_covid(record: PatientRecord, covid_codes: Iterable[str]) -> PatientRecord:
    """Keep only the earliest COVID-set event; its date becomes the index date."""
    covid = frozenset(covid_codes)
    hits = [e for e in record.events if e.code in covid]
    if not hits:
        raise NoCovidEventError(f"patient {record.patient_id!r} has no COVID diagnosis or test")
    first = min(hits)
    events = tuple(e for e in record.events if e.code not in covid or e is first)
    return replace(record, events=events, covid_index_date=first.date)


def window(record: PatientRecord, days_after: int = 45) -> PatientRecord:
    if record.covid_index_date is None:
        raise NoCovidEventError(f"patient {record.patient_id!r} has no index date; collapse COVID events first")
    cutoff = record.covid_index_date + dt.timedelta(days=days_after)
    return replace(record, events=tuple(e for e in record.events if e.date <= cutoff))


def strip_codes(record: PatientRecord, codes: Iterable[str]) -> PatientRecord:
    drop = frozenset(codes)
    return replace(record, events=tuple(e for e in record.events if e.code not in drop))


# ------------------------------------------------------------------ vocabulary


class Vocabulary:
    """Code <-> id map; ids 0 and 1 are reserved for [PAD] and [UNK]."""

    def __init__(self, codes: Iterable[str]):
        self.codes: list[str] = [PAD, UNK]
        self.index: dict[str, int] = {}
        for code in codes:
            if code in (PAD, UNK):
                raise FormatError(f"{code} is a reserved token")
            if code in self.index:
                raise FormatError(f"duplicate code {code!r} in vocabulary")
            self.index[code] = len(self.codes)
            self.codes.append(code)

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: str) -> bool:
        return code in self.index

    def id(self, code: str) -> int:
        return self.index.get(code, UNK_ID)

    def code(self, token_id: int) -> str:
        return self.codes[token_id]


@dataclass
class EmbeddingTable:
    vocab: Vocabulary
    vectors: np.ndarray  # [len(vocab), D]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def load_embeddings(path, vocab: Vocabulary | None = None, dim: int | None = 200) -> EmbeddingTable:
    """Parse a word2vec-style text file (``V D`` header, then ``code v1 .. vD``).

    Without ``vocab`` the vocabulary is the file's codes in file order. The
    [PAD] row is zero and the [UNK] row is the mean of all loaded code rows.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        head = fh.readline().split()
        if len(head) != 2 or not all(h.isdigit() for h in head):
            raise FormatError(f"{path}:1: expected header 'V D', got {' '.join(head)!r}")
        n, d = int(head[0]), int(head[1])
        if dim is not None and d != dim:
            raise FormatError(f"{path}:1: embedding dimension {d} does not match expected {dim}")
        codes: list[str] = []
        rows = np.empty((n, d))
        seen: set[str] = set()
        lineno = 1
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(codes) == n:
                raise FormatError(f"{path}:{lineno}: more than the {n} vectors declared in the header")
            if len(parts) != d + 1:
                raise FormatError(f"{path}:{lineno}: expected {d} values, got {len(parts) - 1}")
            code = parts[0]
            if code in seen:
                raise FormatError(f"{path}:{lineno}: duplicate code {code!r}")
            try:
                rows[len(codes)] = [float(v) for v in parts[1:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric vector component") from None
            seen.add(code)
            codes.append(code)
        if len(codes) != n:
            raise FormatError(f"{path}: header declares {n} vectors, found {len(codes)}")
    if not np.all(np.isfinite(rows)):
        raise FormatError(f"{path}: non-finite vector component")
    if vocab is None:
        vocab = Vocabulary(codes)
    by_code = dict(zip(codes, rows))
    missing = [c for c in vocab.codes[2:] if c not in by_code]
    if missing:
        raise FormatError(f"{path}: no vector for vocabulary code {missing[0]!r}")
    vectors = np.zeros((len(vocab), d))
    for i, code in enumerate(vocab.codes[2:], start=2):
        vectors[i] = by_code[code]
    if len(vocab) > 2:
        vectors[UNK_ID] = vectors[2:].mean(axis=0)
    return EmbeddingTable(vocab, vectors)


# -------------------------------------------------------------------- encoding


@dataclass
class EncodedPatient:
    patient_id: str
    token_ids: np.ndarray  # int32 [K]
    event_dates: np.ndarray  # int32 days since 1970-01-01, NO_DATE on PAD slots
    codes: list[str]  # original (rolled-up) code per real position
    label: int
    covid_index_date: dt.date | None

    @property
    def n_events(self) -> int:
        return len(self.codes)

    def event_date(self, position: int) -> dt.date:
        return from_days(self.event_dates[position])


def encode(record: PatientRecord, vocab: Vocabulary, max_len: int = 1000,
           leak_codes: Iterable[str] = ()) -> EncodedPatient:
    """Map codes to ids, keep the most recent ``max_len`` events, pad the tail."""
    events = strip_codes(record, leak_codes).events[-max_len:] if max_len else ()
    ids = np.full(max_len, PAD_ID, dtype=np.int32)
    dates = np.full(max_len, NO_DATE, dtype=np.int32)
    for i, e in enumerate(events):
        ids[i] = vocab.id(e.code)
        dates[i] = days(e.date)
    return EncodedPatient(record.patient_id, ids, dates, [e.code for e in events], record.label,
                          record.covid_index_date)


@dataclass
class Exclusion:
    patient_id: str
    reason: str


@dataclass
class EncodedCohort:
    max_len: int
    vocab: Vocabulary
    embeddings: np.ndarray
    patients: list[EncodedPatient]

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def token_ids(self) -> np.ndarray:
        if not self.patients:
            return np.zeros((0, self.max_len), dtype=np.int32)
        return np.stack([p.token_ids for p in self.patients])

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patients], dtype=np.int64)

    def subset(self, indices) -> "EncodedCohort":
        return EncodedCohort(self.max_len, self.vocab, self.embeddings, [self.patients[i] for i in indices])


def process_record(record: PatientRecord, hierarchy: dict[str, str], covid_codes: frozenset[str],
                   leak_codes: frozenset[str], window_days: int = 45) -> PatientRecord:
    """Leak strip -> roll-up -> leak strip -> COVID collapse -> window, for one patient.

    The second strip catches children that roll up into a leak code.
    """
    record = strip_codes(record, leak_codes)
    record = rollup(record, hierarchy)
    record = strip_codes(record, leak_codes)
    record = collapse_covid(record, lift_code_set(covid_codes, hierarchy))
    return window(record, window_days)


def build_cohort(records: Sequence[PatientRecord], hierarchy: dict[str, str], table: EmbeddingTable,
                 covid_codes: Iterable[str], leak_codes: Iterable[str] = (), window_days: int = 45,
                 max_len: int = 1000) -> tuple[EncodedCohort, list[Exclusion]]:
    covid = frozenset(covid_codes)
    leak = frozenset(leak_codes)
    patients, excluded = [], []
    for record in records:
        try:
            processed = process_record(record, hierarchy, covid, leak, window_days)
        except NoCovidEventError as exc:
            excluded.append(Exclusion(record.patient_id, str(exc)))
            continue
        patients.append(encode(processed, table.vocab, max_len, leak))
    if excluded:
        log.warning("excluded %d patient(s) without a COVID event", len(excluded))
    return EncodedCohort(max_len, table.vocab, table.vectors, patients), excluded


# ------------------------------------------------------------ cohort container

COHORT_MAGIC = b"PASCCOH\x00"
COHORT_VERSION = 1


def _write_strings(fh, strings: Sequence[str]) -> None:
    for s in strings:
        b = s.encode("utf-8")
        fh.write(struct.pack("<I", len(b)))
        fh.write(b)


def _read_strings(raw: bytes, offset: int, n: int) -> tuple[list[str], int]:
    out = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        out.append(raw[offset : offset + length].decode("utf-8"))
        offset += length
    return out, offset


def save_cohort(cohort: EncodedCohort, path) -> None:
    """Write the encoded cohort.

    Layout (little-endian)::

        8 bytes      magic "PASCCOH\\0"
        u32 x 6      version, K, N patients, V vocab size, D embedding dim, C code-table size
        C strings    code table (u32 byte length + UTF-8); entries 0..V-1 are the vocabulary
                     in id order, later entries are codes that encoded to [UNK]
        V*D f64      embedding table
        N strings    patient ids
        N u8         labels
        N i32        COVID index dates (days since 1970-01-01; INT32_MIN if unset)
        N i32        number of real events
        N*K i32      token ids
        N*K i32      code-table index per position (-1 on PAD)
        N*K i32      event dates (INT32_MIN on PAD)
    """
    table = list(cohort.vocab.codes)
    where = {c: i for i, c in enumerate(table)}
    for p in cohort.patients:
        for code in p.codes:
            if code not in where:
                where[code] = len(table)
                table.append(code)
    n, k = len(cohort.patients), cohort.max_len
    code_idx = np.full((n, k), -1, dtype="<i4")
    for r, p in enumerate(cohort.patients):
        code_idx[r, : p.n_events] = [where[c] for c in p.codes]
    index_dates = [days(p.covid_index_date) if p.covid_index_date else NO_DATE for p in cohort.patients]
    with open(path, "wb") as fh:
        fh.write(COHORT_MAGIC)
        fh.write(struct.pack("<6I", COHORT_VERSION, k, n, len(cohort.vocab), cohort.embeddings.shape[1], len(table)))
        _write_strings(fh, table)
        fh.write(np.ascontiguousarray(cohort.embeddings, dtype="<f8").tobytes())
        _write_strings(fh, [p.patient_id for p in cohort.patients])
        fh.write(np.array([p.label for p in cohort.patients], dtype="u1").tobytes())
        fh.write(np.array(index_dates, dtype="<i4").tobytes())
        fh.write(np.array([p.n_events for p in cohort.patients], dtype="<i4").tobytes())
        fh.write(cohort.token_ids.astype("<i4").tobytes())
        fh.write(code_idx.tobytes())
        dates = np.stack([p.event_dates for p in cohort.patients]) if n else np.zeros((0, k))
        fh.write(dates.astype("<i4").tobytes())


def load_cohort(path) -> EncodedCohort:
    raw = Path(path).read_bytes()
    if raw[:8] != COHORT_MAGIC:
        raise FormatError(f"{path}: not an encoded cohort (bad magic)")
    version, k, n, v, d, c = struct.unpack_from("<6I", raw, 8)
    if version != COHORT_VERSION:
        raise FormatError(f"{path}: unsupported cohort version {version}")
    try:
        table, off = _read_strings(raw, 32, c)
        emb = np.frombuffer(raw, "<f8", v * d, off).reshape(v, d).astype(np.float64)
        off += 8 * v * d
        pids, off = _read_strings(raw, off, n)

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(raw, dtype, count, off)
            off += arr.nbytes
            return arr

        labels = take("u1", n)
        index_dates = take("<i4", n)
        n_events = take("<i4", n)
        ids = take("<i4", n * k).reshape(n, k)
        code_idx = take("<i4", n * k).reshape(n, k)
        dates = take("<i4", n * k).reshape(n, k)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt cohort file ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    vocab = Vocabulary(table[2:v])
    patients = []
    for r in range(n):
        m = int(n_events[r])
        patients.append(EncodedPatient(
            patient_id=pids[r],
            token_ids=ids[r].astype(np.int32),
            event_dates=dates[r].astype(np.int32),
            codes=[table[i] for i in code_idx[r, :m]],
            label=int(labels[r]),
            covid_index_date=None if index_dates[r] == NO_DATE else from_days(index_dates[r]),
        ))
    return EncodedCohort(k, vocab, emb, patients)
