"""Representational dissimilarity matrices from embeddings, scalar features,
and triplet judgments, plus the condensed upper-triangle form consumed by the
statistics layer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .ingest import EmbeddingTable, TripletJudgment

KINDS = ("cosine", "euclidean_1d", "behavioral")

SYMMETRY_TOL = 1e-12


class RDMError(ValueError):
    """An RDM constructor input or invariant violation."""


@dataclass(frozen=True)
class RDM:
    """Labeled symmetric dissimilarity matrix with zero diagonal.

    kind "cosine" entries lie in [0, 2], "behavioral" in [0, 1];
    "euclidean_1d" is the absolute difference of scalar feature values.
    """

    labels: tuple[str, ...]
    values: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        n = len(self.labels)
        if n < 2:
            raise RDMError(f"an RDM needs at least 2 conditions, got {n}")
        if len(set(self.labels)) != n:
            raise RDMError("RDM labels must be unique")
        if self.kind not in KINDS:
            raise RDMError(f"unknown RDM kind {self.kind!r} (expected one of {KINDS})")
        v = self.values
        if v.shape != (n, n):
            raise RDMError(f"values shape {v.shape} does not match {n} labels")
        if not np.all(np.isfinite(v)):
            raise RDMError("RDM contains non-finite entries")
        if np.any(np.diag(v) != 0.0):
            raise RDMError("RDM diagonal must be exactly zero")
        if np.max(np.abs(v - v.T)) > SYMMETRY_TOL:
            raise RDMError(f"RDM asymmetric beyond {SYMMETRY_TOL}")
        if self.kind == "behavioral" and (v.min() < 0.0 or v.max() > 1.0):
            raise RDMError("behavioral dissimilarities must lie in [0, 1]")
        if self.kind == "cosine" and (v.min() < 0.0 or v.max() > 2.0):
            raise RDMError("cosine dissimilarities must lie in [0, 2]")

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class CondensedVector:
    """Row-major upper triangle of an RDM: (0,1),(0,2),...,(n-2,n-1)."""

    labels: tuple[str, ...]
    pair_labels: tuple[tuple[str, str], ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        if len(self.pair_labels) != len(self.values):
            raise RDMError("pair label count does not match value count")
        n = len(self.labels)
        if len(self.values) != n * (n - 1) // 2:
            raise RDMError("condensed length does not match label count")


def condense(rdm: RDM) -> CondensedVector:
    """Upper triangle of `rdm` in row-major order."""
    iu, ju = np.triu_indices(rdm.n, k=1)
    pairs = tuple((rdm.labels[i], rdm.labels[j]) for i, j in zip(iu, ju))
    return CondensedVector(labels=rdm.labels, pair_labels=pairs, values=rdm.values[iu, ju].copy())


def expand(condensed: CondensedVector, kind: str) -> RDM:
    """Rebuild the full symmetric matrix from a condensed vector."""
    n = len(condensed.labels)
    values = np.zeros((n, n))
    iu, ju = np.triu_indices(n, k=1)
    values[iu, ju] = condensed.values
    values[ju, iu] = condensed.values
    return RDM(labels=condensed.labels, values=values, kind=kind)


def _normalized_rows(table: EmbeddingTable, words: Sequence[str]) -> np.ndarray:
    matrix = table.matrix(words)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        zero = [w for w, nv in zip(words, norms) if nv == 0.0]
        raise RDMError(f"zero vector(s) for {zero[:5]}")
    return matrix / norms[:, None]


def cosine_rdm(labels: Sequence[str], matrix: np.ndarray) -> RDM:
    """Pairwise cosine distance (1 - cosine similarity) over row vectors."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != len(labels):
        raise RDMError(f"matrix shape {m.shape} does not match {len(labels)} labels")
    if not np.all(np.isfinite(m)):
        raise RDMError("matrix contains non-finite entries")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        zero = [w for w, nv in zip(labels, norms) if nv == 0.0]
        raise RDMError(f"zero vector(s) for {zero[:5]} (cosine undefined)")
    unit = m / norms[:, None]
    sim = unit @ unit.T
    values = 1.0 - sim
    # Float round-off can push values a hair outside [0, 2]; clamp it.
    np.clip(values, 0.0, 2.0, out=values)
    values = 0.5 * (values + values.T)
    np.fill_diagonal(values, 0.0)
    return RDM(labels=tuple(labels), values=values, kind="cosine")


def embedding_rdm(table: EmbeddingTable, words: Sequence[str]) -> RDM:
    """Cosine-distance RDM over the given words of an embedding table."""
    return cosine_rdm(words, table.matrix(words))


def feature_rdm(column: Mapping[str, float], words: Sequence[str]) -> RDM:
    """Absolute-difference RDM over a scalar feature column."""
    missing = [w for w in words if w not in column]
    if missing:
        raise RDMError(f"feature values missing for {missing[:5]}")
    x = np.array([column[w] for w in words], dtype=float)
    values = np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(values, 0.0)
    return RDM(labels=tuple(words), values=values, kind="euclidean_1d")


def behavioral_rdm(judgments: Iterable[TripletJudgment], words: Sequence[str]) -> RDM:
    """Build the behavioral RDM from odd-one-out choices.

    For a judged triple (i, j, k) with odd word k, the pair (i, j) is coded
    as similar (1) and the pairs containing k as dissimilar (0). Pairwise
    similarity is the mean code over all judgments containing the pair
    (38 codes per pair in the exhaustive 40-word design); dissimilarity
    is 1 - similarity.
    """
    labels = tuple(words)
    index = {w: i for i, w in enumerate(labels)}
    if len(index) != len(labels):
        raise RDMError("word list contains duplicates")
    n = len(labels)
    code_sums = np.zeros((n, n))
    counts = np.zeros((n, n), dtype=np.int64)
    n_judgments = 0
    for judgment in judgments:
        n_judgments += 1
        try:
            ti, tj, tk = (index[w] for w in judgment.triplet)
        except KeyError:
            outside = [w for w in judgment.triplet if w not in index]
            raise RDMError(
                f"judgment on {judgment.triplet} references words outside the "
                f"condition set: {outside}"
            ) from None
        odd = index[judgment.odd_word]
        for a, b in ((ti, tj), (ti, tk), (tj, tk)):
            counts[a, b] += 1
            counts[b, a] += 1
            if odd not in (a, b):
                code_sums[a, b] += 1.0
                code_sums[b, a] += 1.0
    if n_judgments == 0:
        raise RDMError("no judgments supplied")
    off_diag = ~np.eye(n, dtype=bool)
    if np.any(counts[off_diag] == 0):
        iu, ju = np.where((counts == 0) & off_diag)
        missing = sorted({(labels[min(a, b)], labels[max(a, b)]) for a, b in zip(iu, ju)})
        raise RDMError(
            f"{len(missing)} word pair(s) never observed in any triplet, "
            f"e.g. {missing[:5]}"
        )
    similarity = code_sums / np.where(counts == 0, 1, counts)
    values = 1.0 - similarity
    np.fill_diagonal(values, 0.0)
    values = 0.5 * (values + values.T)
    return RDM(labels=labels, values=values, kind="behavioral")


# ---------------------------------------------------------------------------
# file formats

def write_rdm(rdm: RDM, stream: IO[str]) -> None:
    """Delimited text: '# kind:' comment, label header row/column, zeros on
    the diagonal."""
    stream.write(f"# kind: {rdm.kind}\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow([""] + list(rdm.labels))
    for label, row in zip(rdm.labels, rdm.values):
        writer.writerow([label] + [f"{v:.17g}" for v in row])


def read_rdm(stream: Iterable[str], kind: str | None = None) -> RDM:
    lines = list(stream)
    for line in lines:
        if line.startswith("# kind:"):
            file_kind = line.split(":", 1)[1].strip()
            if kind is not None and kind != file_kind:
                raise RDMError(f"requested kind {kind!r} but file says {file_kind!r}")
            kind = file_kind
    if kind is None:
        raise RDMError("RDM file has no kind comment; pass kind explicitly")
    rows = list(csv.reader(line for line in lines if not line.startswith("#")))
    if not rows:
        raise RDMError("RDM file is empty")
    labels = tuple(rows[0][1:])
    n = len(labels)
    if len(rows) != n + 1:
        raise RDMError(f"expected {n} data rows, got {len(rows) - 1}")
    values = np.zeros((n, n))
    for i, row in enumerate(rows[1:]):
        if row[0] != labels[i]:
            raise RDMError(f"row label {row[0]!r} does not match column label {labels[i]!r}")
        values[i] = [float(cell) for cell in row[1:]]
    return RDM(labels=labels, values=values, kind=kind)


def write_condensed(condensed: CondensedVector, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["pair_a", "pair_b", "value"])
    for (a, b), value in zip(condensed.pair_labels, condensed.values):
        writer.writerow([a, b, f"{value:.17g}"])
