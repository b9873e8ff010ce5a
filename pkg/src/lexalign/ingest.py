"""Parsers for embeddings, feature tables, lexica, and judgment logs, plus
derived lexical variables (OLD20, token-averaged vectors).

All words are compared after Unicode NFC normalization; every parser applies
it on the way in. Parsed tables are immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import csv
import math
import unicodedata
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable, Mapping, Sequence

import numpy as np


class IngestError(ValueError):
    """An input file or record violates its format contract."""


def nfc(word: str) -> str:
    """Canonical Unicode form used for all word comparisons."""
    return unicodedata.normalize("NFC", word)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class EmbeddingTable:
    """word -> D-dimensional real vector, one table per embedding source."""

    source_name: str
    dim: int
    entries: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise IngestError(f"embedding dim must be positive, got {self.dim}")
        if not self.entries:
            raise IngestError("embedding table has no entries")
        for word, vec in self.entries.items():
            if vec.shape != (self.dim,):
                raise IngestError(
                    f"vector for {word!r} has {vec.shape[0] if vec.ndim == 1 else vec.shape} "
                    f"components, expected {self.dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise IngestError(f"non-finite component in vector for {word!r}")
            if not np.any(vec):
                raise IngestError(f"all-zero vector for {word!r} (cosine undefined)")

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def words(self) -> list[str]:
        return list(self.entries)

    def vector(self, word: str) -> np.ndarray:
        try:
            return self.entries[word]
        except KeyError:
            raise KeyError(f"word {word!r} not in embedding table {self.source_name!r}") from None

    def matrix(self, words: Sequence[str]) -> np.ndarray:
        """Row-stack vectors for `words` (raises on any missing word)."""
        return np.stack([self.vector(w) for w in words])


@dataclass(frozen=True)
class FeatureTable:
    """Named scalar features per word, with optional per-feature bounds."""

    features: dict[str, dict[str, float]]
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, column in self.features.items():
            for word, value in column.items():
                if not math.isfinite(value):
                    raise IngestError(f"non-finite value for feature {name!r}, word {word!r}")
                if name in self.bounds:
                    lo, hi = self.bounds[name]
                    if not lo <= value <= hi:
                        raise IngestError(
                            f"feature {name!r} value {value} for word {word!r} "
                            f"outside declared bounds [{lo}, {hi}]"
                        )

    @property
    def feature_names(self) -> list[str]:
        return list(self.features)

    def column(self, name: str) -> dict[str, float]:
        try:
            return self.features[name]
        except KeyError:
            raise KeyError(
                f"feature {name!r} not in table (has {sorted(self.features)})"
            ) from None

    def values(self, name: str, words: Sequence[str]) -> np.ndarray:
        """Feature values for `words` in order (raises on a missing word)."""
        column = self.column(name)
        missing = [w for w in words if w not in column]
        if missing:
            raise KeyError(f"feature {name!r} missing values for {missing[:5]}")
        return np.array([column[w] for w in words], dtype=float)


@dataclass(frozen=True)
class Lexicon:
    """word -> occurrence count, the frequency source for OLD20."""

    entries: dict[str, int]

    def __post_init__(self) -> None:
        if not self.entries:
            raise IngestError("lexicon is empty")
        for word, count in self.entries.items():
            if count < 0:
                raise IngestError(f"negative count {count} for word {word!r}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def words(self) -> list[str]:
        return list(self.entries)


def canonical_triplet(a: str, b: str, c: str) -> tuple[str, str, str]:
    """Sort an unordered word triple into the fixed canonical order."""
    i, j, k = sorted((nfc(a), nfc(b), nfc(c)))
    if i == j or j == k:
        raise IngestError(f"triplet words must be distinct, got {(a, b, c)}")
    return (i, j, k)


@dataclass(frozen=True)
class TripletJudgment:
    """One participant choice on one word triplet."""

    session_id: str
    triplet: tuple[str, str, str]
    odd_word: str
    response_time_ms: float
    timestamp: datetime

    def __post_init__(self) -> None:
        if self.triplet != canonical_triplet(*self.triplet):
            raise IngestError(f"triplet {self.triplet} is not in canonical order")
        if self.odd_word not in self.triplet:
            raise IngestError(
                f"odd word {self.odd_word!r} not in triplet {self.triplet}"
            )
        if self.response_time_ms < 0:
            raise IngestError(f"negative response time {self.response_time_ms}")


# ---------------------------------------------------------------------------
# embedding files

def _is_header(tokens: list[str]) -> bool:
    # A first line of exactly two integer tokens is a "count dim" header.
    if len(tokens) != 2:
        return False
    try:
        int(tokens[0]), int(tokens[1])
    except ValueError:
        return False
    return True


def parse_embedding_file(
    stream: Iterable[str],
    merge_duplicates: bool = False,
    source_name: str = "embedding",
) -> EmbeddingTable:
    """Parse whitespace-separated "word v1 ... vD" lines into a table.

    An optional first header line "count dim" is auto-detected. Repeated
    words are an error unless `merge_duplicates` is set, in which case they
    are averaged component-wise (the subword token-averaging workflow).
    """
    dim: int | None = None
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    first = True
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if first:
            first = False
            if _is_header(tokens):
                dim = int(tokens[1])
                if dim < 1:
                    raise IngestError(f"header declares non-positive dim {dim}")
                continue
        word = nfc(tokens[0])
        try:
            vec = np.array([float(t) for t in tokens[1:]], dtype=float)
        except ValueError as exc:
            raise IngestError(f"line {lineno}: non-numeric component ({exc})") from None
        if dim is None:
            dim = vec.shape[0]
            if dim < 1:
                raise IngestError(f"line {lineno}: word {word!r} has no components")
        if vec.shape[0] != dim:
            raise IngestError(
                f"line {lineno}: word {word!r} has {vec.shape[0]} components, expected {dim}"
            )
        if word in sums:
            if not merge_duplicates:
                raise IngestError(f"line {lineno}: duplicate word {word!r} without merge flag")
            sums[word] += vec
            counts[word] += 1
        else:
            sums[word] = vec.copy()
            counts[word] = 1
    if not sums:
        raise IngestError("embedding stream contains no data rows")
    entries = {w: sums[w] / counts[w] for w in sums}
    return EmbeddingTable(source_name=source_name, dim=int(dim), entries=entries)


def write_embedding_file(table: EmbeddingTable, stream: IO[str], header: bool = True) -> None:
    """Serialize a table back to the text format (round-trips within 1e-9)."""
    if header:
        stream.write(f"{len(table)} {table.dim}\n")
    for word, vec in table.entries.items():
        stream.write(word + " " + " ".join(f"{v:.17g}" for v in vec) + "\n")


def average_token_vectors(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Component-wise mean of subword token vectors for one word."""
    if len(rows) == 0:
        raise IngestError("cannot average an empty list of vectors")
    first_dim = np.asarray(rows[0], dtype=float).shape
    if len(first_dim) != 1:
        raise IngestError("token vectors must be one-dimensional")
    for r in rows[1:]:
        if np.asarray(r).shape != first_dim:
            raise IngestError("token vectors have mismatched dimensions")
    return np.mean(np.asarray(rows, dtype=float), axis=0)


# ---------------------------------------------------------------------------
# OLD20

def levenshtein(a: str, b: str) -> int:
    """Plain two-row dynamic-programming edit distance."""
    n, m = len(a), len(b)
    if n > m:
        a, b, n, m = b, a, m, n
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        bc = b[i - 1]
        for j in range(1, n + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[j - 1] != bc))
        prev = cur
    return prev[n]


def _levenshtein_to_many(word: str, candidates: Sequence[str]) -> np.ndarray:
    """Edit distance from `word` to every candidate, vectorized over candidates.

    Runs the DP column by column with all candidates in lockstep; exact
    integer arithmetic, so results equal the scalar `levenshtein`.
    """
    n_cand = len(candidates)
    m = len(word)
    lengths = np.array([len(c) for c in candidates], dtype=np.int32)
    max_len = int(lengths.max()) if n_cand else 0
    if m == 0:
        return lengths.astype(np.int64)
    # Pad candidate characters into an (n_cand, max_len) codepoint matrix.
    chars = np.zeros((n_cand, max_len), dtype=np.int32)
    for idx, cand in enumerate(candidates):
        if cand:
            chars[idx, : len(cand)] = np.frombuffer(
                cand.encode("utf-32-le"), dtype=np.uint32
            ).astype(np.int32)
    word_codes = np.frombuffer(word.encode("utf-32-le"), dtype=np.uint32).astype(np.int32)

    results = m * np.ones(n_cand, dtype=np.int32)  # candidates of length 0
    cur = np.tile(np.arange(m + 1, dtype=np.int32), (n_cand, 1))
    for j in range(1, max_len + 1):
        nxt = np.empty_like(cur)
        nxt[:, 0] = j
        cand_char = chars[:, j - 1]
        for i in range(1, m + 1):
            sub = cur[:, i - 1] + (word_codes[i - 1] != cand_char)
            np.minimum(sub, cur[:, i] + 1, out=sub)
            np.minimum(sub, nxt[:, i - 1] + 1, out=sub)
            nxt[:, i] = sub
        cur = nxt
        at_end = lengths == j
        if np.any(at_end):
            results[at_end] = cur[at_end, m]
    return results.astype(np.int64)


def compute_old20(word: str, lexicon: Lexicon, n_neighbors: int = 20) -> float:
    """Mean edit distance from `word` to its `n_neighbors` closest lexicon
    entries, excluding entries string-identical to `word`.

    Ties at the cutoff do not affect the value (all tied distances are
    equal), so any 20 smallest give the same mean.
    """
    probe = nfc(word)
    candidates = [w for w in lexicon.entries if w != probe]
    if len(candidates) < n_neighbors:
        raise IngestError(
            f"lexicon has only {len(candidates)} entries distinct from {word!r}, "
            f"need at least {n_neighbors}"
        )
    distances = _levenshtein_to_many(probe, candidates)
    smallest = np.partition(distances, n_neighbors - 1)[:n_neighbors]
    return float(np.mean(smallest))


def log_frequency(count: float, corpus_total: float, *, constant: float = 0.0) -> float:
    """log10(count per million + constant).

    Provided for convenience only; published log-frequency norms should be
    ingested as-is since each source fixes its own transform. The smoothing
    `constant` defaults to 0 and must be configured deliberately.
    """
    if corpus_total <= 0:
        raise IngestError("corpus_total must be positive")
    per_million = count / corpus_total * 1_000_000.0
    if per_million + constant <= 0:
        raise IngestError(
            f"log undefined for count-per-million {per_million} with constant {constant}"
        )
    return math.log10(per_million + constant)


# ---------------------------------------------------------------------------
# delimited tables

def _csv_rows(stream: Iterable[str]) -> Iterable[list[str]]:
    # Comment rows (leading '#') carry export status flags; skip them.
    return csv.reader(line for line in stream if not line.startswith("#"))


def load_feature_table(
    stream: Iterable[str],
    bounds: Mapping[str, tuple[float, float]] | None = None,
) -> FeatureTable:
    """Load a comma-separated table whose first column is the word and whose
    remaining columns are numeric features."""
    rows = _csv_rows(stream)
    try:
        header = next(rows)
    except StopIteration:
        raise IngestError("feature table is missing its header row") from None
    if len(header) < 2:
        raise IngestError("feature table needs a word column and at least one feature")
    names = [h.strip() for h in header[1:]]
    features: dict[str, dict[str, float]] = {name: {} for name in names}
    seen: set[str] = set()
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise IngestError(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
        word = nfc(row[0])
        if word in seen:
            raise IngestError(f"line {lineno}: duplicate word {word!r}")
        seen.add(word)
        for name, cell in zip(names, row[1:]):
            try:
                value = float(cell)
            except ValueError:
                raise IngestError(
                    f"line {lineno}: non-numeric cell {cell!r} in feature {name!r}"
                ) from None
            features[name][word] = value
    return FeatureTable(features=features, bounds=dict(bounds or {}))


def write_feature_table(table: FeatureTable, stream: IO[str]) -> None:
    names = table.feature_names
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["word"] + names)
    words = sorted(set().union(*(table.features[n] for n in names)))
    for word in words:
        writer.writerow([word] + [f"{table.features[n][word]:.17g}" for n in names])


def load_lexicon(stream: Iterable[str]) -> Lexicon:
    """Load a comma-separated word,count lexicon with a header row."""
    rows = _csv_rows(stream)
    try:
        header = next(rows)
    except StopIteration:
        raise IngestError("lexicon file is missing its header row") from None
    if len(header) < 2:
        raise IngestError("lexicon needs word and count columns")
    entries: dict[str, int] = {}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        word = nfc(row[0])
        if word in entries:
            raise IngestError(f"line {lineno}: duplicate word {word!r}")
        try:
            count = int(row[1])
        except ValueError:
            raise IngestError(f"line {lineno}: non-integer count {row[1]!r}") from None
        entries[word] = count
    return Lexicon(entries=entries)


JUDGMENT_COLUMNS = ["session_id", "word_a", "word_b", "word_c", "odd_word", "rt_ms", "timestamp"]


def _parse_timestamp(text: str) -> datetime:
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise IngestError(f"malformed timestamp {text!r}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def load_judgments(stream: Iterable[str]) -> list[TripletJudgment]:
    """Load triplet judgments from the delimited log format.

    Triples are canonicalized on the way in; odd-word membership is
    validated. An empty file (header only) yields an empty list.
    """
    rows = _csv_rows(stream)
    try:
        header = next(rows)
    except StopIteration:
        raise IngestError("judgment file is missing its header row") from None
    if [h.strip() for h in header] != JUDGMENT_COLUMNS:
        raise IngestError(
            f"judgment header must be {','.join(JUDGMENT_COLUMNS)}, got {','.join(header)}"
        )
    judgments = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(JUDGMENT_COLUMNS):
            raise IngestError(f"line {lineno}: malformed row ({len(row)} cells)")
        session_id, a, b, c, odd, rt_ms, timestamp = row
        triplet = canonical_triplet(a, b, c)
        odd = nfc(odd)
        if odd not in triplet:
            raise IngestError(f"line {lineno}: odd word {odd!r} not in triplet {triplet}")
        try:
            rt = float(rt_ms)
        except ValueError:
            raise IngestError(f"line {lineno}: non-numeric rt_ms {rt_ms!r}") from None
        judgments.append(
            TripletJudgment(
                session_id=session_id,
                triplet=triplet,
                odd_word=odd,
                response_time_ms=rt,
                timestamp=_parse_timestamp(timestamp),
            )
        )
    return judgments


def write_judgments(judgments: Sequence[TripletJudgment], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(JUDGMENT_COLUMNS)
    for j in judgments:
        writer.writerow(
            [j.session_id, *j.triplet, j.odd_word, f"{j.response_time_ms:g}",
             j.timestamp.isoformat()]
        )


RATING_SCALE = (1, 9)
RATING_COLUMNS = ["session_id", "word", "rating", "rt_ms", "timestamp"]


@dataclass(frozen=True)
class WordRating:
    """One participant's 1-9 rating of a single word."""

    session_id: str
    word: str
    rating: int
    response_time_ms: float
    timestamp: datetime

    def __post_init__(self) -> None:
        lo, hi = RATING_SCALE
        if not isinstance(self.rating, int) or not lo <= self.rating <= hi:
            raise IngestError(f"rating must be an integer in [{lo}, {hi}], got {self.rating!r}")
        if self.response_time_ms < 0:
            raise IngestError(f"negative response time {self.response_time_ms!r}")
        object.__setattr__(self, "word", nfc(self.word))


def load_ratings(stream: Iterable[str]) -> list[WordRating]:
    """Load word ratings from the delimited log format."""
    rows = _csv_rows(stream)
    try:
        header = next(rows)
    except StopIteration:
        raise IngestError("rating file is missing its header row") from None
    if [h.strip() for h in header] != RATING_COLUMNS:
        raise IngestError(
            f"rating header must be {','.join(RATING_COLUMNS)}, got {','.join(header)}"
        )
    ratings = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(RATING_COLUMNS):
            raise IngestError(f"line {lineno}: malformed row ({len(row)} cells)")
        session_id, word, rating, rt_ms, timestamp = row
        try:
            value = int(rating)
        except ValueError:
            raise IngestError(f"line {lineno}: non-integer rating {rating!r}") from None
        try:
            rt = float(rt_ms)
        except ValueError:
            raise IngestError(f"line {lineno}: non-numeric rt_ms {rt_ms!r}") from None
        ratings.append(
            WordRating(
                session_id=session_id,
                word=word,
                rating=value,
                response_time_ms=rt,
                timestamp=_parse_timestamp(timestamp),
            )
        )
    return ratings


def write_ratings(ratings: Sequence[WordRating], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(RATING_COLUMNS)
    for r in ratings:
        writer.writerow(
            [r.session_id, r.word, r.rating, f"{r.response_time_ms:g}",
             r.timestamp.isoformat()]
        )


def mean_ratings(ratings: Sequence[WordRating]) -> dict[str, float]:
    """Per-word mean rating across sessions."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for r in ratings:
        sums[r.word] = sums.get(r.word, 0.0) + r.rating
        counts[r.word] = counts.get(r.word, 0) + 1
    return {w: sums[w] / counts[w] for w in sums}
