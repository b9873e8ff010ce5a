"""Stimulus design: word-affinity construction, clustering, constrained
selection of a balanced stimulus set, and triplet scheduling.

The pipeline starts from an embedding table over a candidate pool, clusters
the pool in a reduced space, picks the cluster with the widest concreteness
spread, and draws five matched groups of words from it. The full set of
word triples is then generated and partitioned into per-participant blocks.

Selection automates what would otherwise be a manual curation step: the
greedy rule prefers the most extreme eligible candidates and breaks ties
with a seeded draw, so a fixed seed reproduces the set exactly. Callers
that already have a hand-picked set can bypass the rule via ``explicit``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .ingest import EmbeddingTable, FeatureTable, canonical_triplet, nfc

FEATURE_KEYS = ("concreteness", "frequency", "length", "old20")
GROUP_NAMES = ("concrete", "abstract", "frequent", "infrequent", "central")

ROW_SUM_TOL = 1e-9


class StimulusError(ValueError):
    """Raised when stimulus-design inputs or invariants are violated."""


class SelectionInfeasibleError(StimulusError):
    """A selection group has fewer eligible candidates than requested."""

    def __init__(self, group: str, n_eligible: int, n_needed: int):
        self.group = group
        self.n_eligible = n_eligible
        self.n_needed = n_needed
        super().__init__(
            f"group '{group}' has {n_eligible} eligible candidates, needs {n_needed}"
        )


@dataclass(frozen=True)
class AffinityMatrix:
    """Row-stochastic word-affinity matrix with a zero diagonal."""

    labels: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if n < 2:
            raise StimulusError("affinity matrix needs at least 2 words")
        if len(set(self.labels)) != n:
            raise StimulusError("affinity labels must be unique")
        v = np.asarray(self.values, dtype=float)
        if v.shape != (n, n):
            raise StimulusError(f"affinity values must be {n}x{n}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise StimulusError("affinity values must be finite")
        if np.any(np.diag(v) != 0.0):
            raise StimulusError("affinity diagonal must be exactly zero")
        if np.any(v < 0.0):
            raise StimulusError("affinity entries must be non-negative")
        sums = v.sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)[0]
        if bad.size:
            raise StimulusError(
                f"affinity rows must sum to 1; row {bad[0]} "
                f"({self.labels[bad[0]]!r}) sums to {sums[bad[0]]!r}"
            )
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ClusterModel:
    """k-means partition of words in a PCA-reduced affinity space."""

    assignments: dict[str, int]
    centroids: np.ndarray
    reduced_coords: dict[str, np.ndarray]
    k: int
    seed: int
    inertia: float
    # inertia after each update step of the winning restart; must never increase
    inertia_trace: tuple[float, ...] = field(repr=False, default=())

    def __post_init__(self):
        if self.k < 1:
            raise StimulusError("k must be positive")
        if np.asarray(self.centroids).shape[0] != self.k:
            raise StimulusError("centroid count must equal k")
        for word, cid in self.assignments.items():
            if not 0 <= cid < self.k:
                raise StimulusError(f"cluster id {cid} for {word!r} out of range")
            if word not in self.reduced_coords:
                raise StimulusError(f"no reduced coordinates for {word!r}")

    def members(self, cluster_id: int) -> list[str]:
        return [w for w, c in self.assignments.items() if c == cluster_id]


@dataclass(frozen=True)
class SelectionConfig:
    group_size: int = 8
    sd_threshold: float = 1.0
    length_range: tuple[int, int] = (5, 9)
    matching_tolerance_sd: float = 1.0

    def __post_init__(self):
        if self.group_size < 1:
            raise StimulusError("group_size must be at least 1")
        lo, hi = self.length_range
        if lo <= 0 or hi < lo:
            raise StimulusError("length_range bounds must be positive and ordered")


@dataclass(frozen=True)
class StimulusSet:
    """Five disjoint word groups of equal size."""

    concrete: tuple[str, ...]
    abstract: tuple[str, ...]
    frequent: tuple[str, ...]
    infrequent: tuple[str, ...]
    central: tuple[str, ...]

    def __post_init__(self):
        groups = self.groups()
        sizes = {name: len(words) for name, words in groups.items()}
        if len(set(sizes.values())) != 1 or min(sizes.values()) < 1:
            raise StimulusError(f"groups must be non-empty and equal-sized, got {sizes}")
        all_words = [w for words in groups.values() for w in words]
        if len(set(all_words)) != len(all_words):
            raise StimulusError("stimulus groups must be pairwise disjoint")

    def groups(self) -> dict[str, tuple[str, ...]]:
        return {name: getattr(self, name) for name in GROUP_NAMES}

    def words(self) -> tuple[str, ...]:
        """All stimulus words in group order."""
        return tuple(w for name in GROUP_NAMES for w in getattr(self, name))


@dataclass(frozen=True)
class TripletSchedule:
    """Partition of a triplet list into ordered per-participant blocks."""

    participants: tuple[int, ...]
    blocks: dict[int, tuple[tuple[str, str, str], ...]]
    seed: int

    def __post_init__(self):
        if set(self.participants) != set(self.blocks):
            raise StimulusError("participants and blocks must cover the same slots")
        seen: set[tuple[str, str, str]] = set()
        for slot in self.participants:
            for tri in self.blocks[slot]:
                if tri in seen:
                    raise StimulusError(f"triple {tri} appears in more than one block")
                seen.add(tri)

    def all_triplets(self) -> list[tuple[str, str, str]]:
        return [tri for slot in self.participants for tri in self.blocks[slot]]


def build_affinity(
    table: EmbeddingTable,
    words: Sequence[str],
    *,
    include_diagonal_in_minmax: bool = True,
) -> AffinityMatrix:
    """Cosine similarities rescaled to [0, 1], diagonal zeroed, rows
    normalized to sum to 1.

    The min-max rescale by default runs over every cell including the
    diagonal, so the self-similarity of 1 anchors the maximum.
    """
    labels = tuple(nfc(w) for w in words)
    if len(labels) < 2:
        raise StimulusError("affinity needs at least 2 words")
    if len(set(labels)) != len(labels):
        raise StimulusError("affinity word list contains duplicates")
    m = table.matrix(labels)
    norms = np.linalg.norm(m, axis=1)
    unit = m / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    if include_diagonal_in_minmax:
        lo, hi = float(sims.min()), float(sims.max())
    else:
        off = sims[~np.eye(len(labels), dtype=bool)]
        lo, hi = float(off.min()), float(off.max())
    if hi <= lo:
        raise StimulusError("similarities are constant; affinity is undefined")
    scaled = (sims - lo) / (hi - lo)
    np.fill_diagonal(scaled, 0.0)
    sums = scaled.sum(axis=1)
    dead = np.nonzero(sums == 0.0)[0]
    if dead.size:
        raise StimulusError(
            f"row for {labels[dead[0]]!r} sums to 0 after zeroing the diagonal"
        )
    return AffinityMatrix(labels=labels, values=scaled / sums[:, None])


def _pca_coords(values: np.ndarray, n_components: int | None) -> np.ndarray:
    """Project mean-centered rows onto leading principal components.

    Without an explicit count, keeps the smallest number of components
    explaining at least 95% of the variance, capped at n - 1. Component
    signs are fixed so the largest-magnitude loading is positive.
    """
    n = values.shape[0]
    centered = values - values.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(s**2))
    if n_components is None:
        if total == 0.0:
            n_components = 1
        else:
            ratio = np.cumsum(s**2) / total
            n_components = int(np.searchsorted(ratio, 0.95 - 1e-12) + 1)
        n_components = max(1, min(n_components, n - 1))
    for i in range(min(n_components, vt.shape[0])):
        j = int(np.argmax(np.abs(vt[i])))
        if vt[i, j] < 0:
            vt[i] = -vt[i]
    return centered @ vt[:n_components].T


def _kmeans_once(x: np.ndarray, k: int, rng: np.random.Generator):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(n))]
    closest = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(closest.sum())
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, np.sum((x - centroids[j]) ** 2, axis=1))

    prev = None
    trace: list[float] = []
    for _ in range(300):
        d2 = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = d2.argmin(axis=1)
        moved: set[int] = set()
        for j in range(k):
            if np.any(assign == j):
                continue
            # revive an empty cluster with the farthest non-singleton point
            own = d2[np.arange(n), assign]
            for idx in np.argsort(-own):
                idx = int(idx)
                if idx in moved or int(np.sum(assign == assign[idx])) <= 1:
                    continue
                assign[idx] = j
                moved.add(idx)
                break
        for j in range(k):
            centroids[j] = x[assign == j].mean(axis=0)
        trace.append(float(np.sum((x - centroids[assign]) ** 2)))
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign.copy()
    return assign, centroids, trace


def cluster(
    affinity: AffinityMatrix,
    k: int,
    n_components: int | None = None,
    seed: int = 0,
    n_restarts: int = 10,
) -> ClusterModel:
    """Partition words by k-means++ in the PCA-reduced affinity space.

    Runs ``n_restarts`` independent seedings derived from the master seed
    and keeps the lowest-inertia run, ties going to the earlier restart.
    """
    n = len(affinity.labels)
    if not 1 <= k <= n:
        raise StimulusError(f"k must be in [1, {n}], got {k}")
    if n_components is not None and not 1 <= n_components <= n:
        raise StimulusError(f"n_components must be in [1, {n}], got {n_components}")
    if n_restarts < 1:
        raise StimulusError("n_restarts must be at least 1")
    coords = _pca_coords(affinity.values, n_components)
    best = None
    for r in range(n_restarts):
        rng = np.random.default_rng((seed, r))
        assign, centroids, trace = _kmeans_once(coords, k, rng)
        inertia = trace[-1]
        if best is None or inertia < best[0]:
            best = (inertia, assign, centroids, trace)
    inertia, assign, centroids, trace = best
    return ClusterModel(
        assignments={w: int(c) for w, c in zip(affinity.labels, assign)},
        centroids=centroids,
        reduced_coords={w: coords[i].copy() for i, w in enumerate(affinity.labels)},
        k=k,
        seed=seed,
        inertia=inertia,
        inertia_trace=tuple(trace),
    )


def pick_target_cluster(model: ClusterModel, concreteness: Mapping[str, float]) -> int:
    """Cluster id with the highest unbiased concreteness variance.

    Singleton clusters are skipped; ties break toward the lowest id.
    """
    missing = [w for w in model.assignments if w not in concreteness]
    if missing:
        raise StimulusError(f"no concreteness value for {missing[0]!r}")
    best_id, best_var = None, -np.inf
    for cid in range(model.k):
        values = [concreteness[w] for w in model.assignments if model.assignments[w] == cid]
        if len(values) < 2:
            continue
        var = float(np.var(values, ddof=1))
        if var > best_var:
            best_id, best_var = cid, var
    if best_id is None:
        raise StimulusError("every cluster is a singleton; variance is undefined")
    return best_id


def centroid_distances(model: ClusterModel, cluster_id: int) -> dict[str, float]:
    """Euclidean distance of each member word to its cluster centroid."""
    if not 0 <= cluster_id < model.k:
        raise StimulusError(f"cluster id {cluster_id} out of range")
    centroid = np.asarray(model.centroids)[cluster_id]
    return {
        w: float(np.linalg.norm(model.reduced_coords[w] - centroid))
        for w in model.members(cluster_id)
    }


def _greedy_pick(
    group: str,
    candidates: list[str],
    key: Mapping[str, float],
    size: int,
    rng: np.random.Generator,
) -> list[str]:
    """Take the `size` lowest-key candidates, seeded jitter breaking ties."""
    if len(candidates) < size:
        raise SelectionInfeasibleError(group, len(candidates), size)
    jitter = rng.random(len(candidates))
    order = sorted(range(len(candidates)), key=lambda i: (key[candidates[i]], jitter[i]))
    return [candidates[i] for i in order[:size]]


def select_stimuli(
    cluster_words: Sequence[str],
    features: FeatureTable,
    config: SelectionConfig,
    seed: int = 0,
    centroid_distance: Mapping[str, float] | None = None,
    explicit: Mapping[str, Sequence[str]] | None = None,
) -> StimulusSet:
    """Draw five disjoint matched groups from one cluster's words.

    Concrete and abstract groups sit beyond ``sd_threshold`` standard
    deviations of the cluster concreteness mean while staying within
    ``matching_tolerance_sd`` of the cluster means for frequency and
    OLD20; frequent and infrequent groups do the same on log frequency
    with concreteness and OLD20 matched. All four groups respect the
    length range. The central group is the words closest to the target
    centroid (``centroid_distance``) among those not already chosen.

    Greedy order prefers the most extreme eligible candidates; ties are
    broken by a seeded draw. ``explicit`` bypasses eligibility entirely
    and only checks group shape, for hand-curated sets.
    """
    if explicit is not None:
        groups = {}
        for name in GROUP_NAMES:
            if name not in explicit:
                raise StimulusError(f"explicit selection is missing group '{name}'")
            groups[name] = tuple(nfc(w) for w in explicit[name])
        return StimulusSet(**groups)

    words = [nfc(w) for w in cluster_words]
    if len(set(words)) != len(words):
        raise StimulusError("cluster word list contains duplicates")
    table = {}
    for w in words:
        row = {}
        for key in FEATURE_KEYS:
            column = features.features.get(key)
            if column is None or w not in column:
                raise StimulusError(f"{w!r} is missing feature {key!r}")
            row[key] = column[w]
        table[w] = row

    conc = {w: table[w]["concreteness"] for w in words}
    freq = {w: table[w]["frequency"] for w in words}
    length = {w: table[w]["length"] for w in words}
    old20 = {w: table[w]["old20"] for w in words}

    def stats(col: Mapping[str, float]) -> tuple[float, float]:
        vals = np.array([col[w] for w in words])
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return float(vals.mean()), sd

    conc_mean, conc_sd = stats(conc)
    freq_mean, freq_sd = stats(freq)
    old_mean, old_sd = stats(old20)
    tol = config.matching_tolerance_sd
    lo_len, hi_len = config.length_range

    def length_ok(w: str) -> bool:
        return lo_len <= length[w] <= hi_len

    def matched(w: str, cols: list[tuple[Mapping[str, float], float, float]]) -> bool:
        return all(abs(col[w] - mean) <= tol * sd for col, mean, sd in cols)

    chosen: set[str] = set()
    picked: dict[str, list[str]] = {}
    specs = {
        # group: (driving column, high side?, matching columns)
        "concrete": (conc, conc_mean + config.sd_threshold * conc_sd, True,
                     [(freq, freq_mean, freq_sd), (old20, old_mean, old_sd)]),
        "abstract": (conc, conc_mean - config.sd_threshold * conc_sd, False,
                     [(freq, freq_mean, freq_sd), (old20, old_mean, old_sd)]),
        "frequent": (freq, freq_mean + config.sd_threshold * freq_sd, True,
                     [(conc, conc_mean, conc_sd), (old20, old_mean, old_sd)]),
        "infrequent": (freq, freq_mean - config.sd_threshold * freq_sd, False,
                       [(conc, conc_mean, conc_sd), (old20, old_mean, old_sd)]),
    }
    for gi, name in enumerate(GROUP_NAMES[:4]):
        col, threshold, high, match_cols = specs[name]
        eligible = [
            w for w in words
            if w not in chosen
            and (col[w] > threshold if high else col[w] < threshold)
            and length_ok(w)
            and matched(w, match_cols)
        ]
        # most extreme first: sort key is negative distance beyond threshold
        key = {w: -(col[w] - threshold) if high else (col[w] - threshold) for w in eligible}
        rng = np.random.default_rng((seed, gi))
        picked[name] = _greedy_pick(name, eligible, key, config.group_size, rng)
        chosen.update(picked[name])

    if centroid_distance is None:
        raise StimulusError("centroid_distance is required for the central group")
    remaining = [w for w in words if w not in chosen]
    missing = [w for w in remaining if w not in centroid_distance]
    if missing:
        raise StimulusError(f"no centroid distance for {missing[0]!r}")
    rng = np.random.default_rng((seed, 4))
    picked["central"] = _greedy_pick(
        "central", remaining, centroid_distance, config.group_size, rng
    )
    return StimulusSet(**{name: tuple(picked[name]) for name in GROUP_NAMES})


def generate_triplets(words: Sequence[str]) -> list[tuple[str, str, str]]:
    """All C(n, 3) canonical triples in lexicographic order."""
    ws = sorted(nfc(w) for w in words)
    if len(set(ws)) != len(ws):
        raise StimulusError("word list contains duplicates")
    if len(ws) < 3:
        raise StimulusError("triplet generation needs at least 3 words")
    return [tuple(c) for c in itertools.combinations(ws, 3)]


def schedule_triplets(
    triplets: Sequence[tuple[str, str, str]],
    n_participants: int,
    seed: int = 0,
) -> TripletSchedule:
    """Partition triples into near-equal seeded-random blocks, one per
    participant slot, each block in its own seeded order."""
    if n_participants < 1:
        raise StimulusError("n_participants must be at least 1")
    if not triplets:
        raise StimulusError("cannot schedule an empty triplet list")
    canon = [canonical_triplet(*t) for t in triplets]
    if len(set(canon)) != len(canon):
        raise StimulusError("triplet list contains duplicates")
    rng = np.random.default_rng(seed)
    shuffled = [canon[i] for i in rng.permutation(len(canon))]
    base, extra = divmod(len(canon), n_participants)
    blocks: dict[int, tuple[tuple[str, str, str], ...]] = {}
    pos = 0
    for slot in range(n_participants):
        size = base + (1 if slot < extra else 0)
        block = shuffled[pos : pos + size]
        pos += size
        slot_rng = np.random.default_rng((seed, slot))
        order = slot_rng.permutation(len(block))
        blocks[slot] = tuple(block[i] for i in order)
    return TripletSchedule(
        participants=tuple(range(n_participants)), blocks=blocks, seed=seed
    )


def write_stimulus_set(stimuli: StimulusSet, stream: IO[str]) -> None:
    writer = csv.writer(stream)
    writer.writerow(["word", "group"])
    for name in GROUP_NAMES:
        for w in getattr(stimuli, name):
            writer.writerow([w, name])


def read_stimulus_set(stream: IO[str]) -> StimulusSet:
    groups: dict[str, list[str]] = {name: [] for name in GROUP_NAMES}
    reader = csv.reader(row for row in stream if not row.startswith("#"))
    header = next(reader, None)
    if header != ["word", "group"]:
        raise StimulusError(f"expected header word,group; got {header}")
    for row in reader:
        if not row:
            continue
        word, name = row
        if name not in groups:
            raise StimulusError(f"unknown group {name!r}")
        groups[name].append(nfc(word))
    return StimulusSet(**{name: tuple(ws) for name, ws in groups.items()})


def write_schedule(schedule: TripletSchedule, stream: IO[str]) -> None:
    writer = csv.writer(stream)
    writer.writerow(["participant_slot", "position", "word_a", "word_b", "word_c"])
    for slot in schedule.participants:
        for position, tri in enumerate(schedule.blocks[slot]):
            writer.writerow([slot, position, *tri])


def read_schedule(stream: IO[str], seed: int = 0) -> TripletSchedule:
    """Rebuild a schedule from its delimited form.

    The seed is not part of the table; pass the value recorded in the
    sidecar manifest to preserve it.
    """
    reader = csv.reader(row for row in stream if not row.startswith("#"))
    header = next(reader, None)
    expected = ["participant_slot", "position", "word_a", "word_b", "word_c"]
    if header != expected:
        raise StimulusError(f"expected header {','.join(expected)}; got {header}")
    rows: dict[int, list[tuple[int, tuple[str, str, str]]]] = {}
    for row in reader:
        if not row:
            continue
        slot, position = int(row[0]), int(row[1])
        tri = (nfc(row[2]), nfc(row[3]), nfc(row[4]))
        rows.setdefault(slot, []).append((position, tri))
    blocks = {}
    for slot, entries in rows.items():
        entries.sort()
        if [p for p, _ in entries] != list(range(len(entries))):
            raise StimulusError(f"slot {slot} has gaps in its position column")
        blocks[slot] = tuple(tri for _, tri in entries)
    return TripletSchedule(
        participants=tuple(sorted(blocks)), blocks=blocks, seed=seed
    )
