import io
import itertools
import math

import numpy as np
import pytest

from lexalign.ingest import EmbeddingTable, FeatureTable
from lexalign.stimuli import (
    AffinityMatrix,
    ClusterModel,
    SelectionConfig,
    SelectionInfeasibleError,
    StimulusError,
    build_affinity,
    centroid_distances,
    cluster,
    generate_triplets,
    pick_target_cluster,
    read_schedule,
    read_stimulus_set,
    schedule_triplets,
    select_stimuli,
    write_schedule,
    write_stimulus_set,
)


def table_from(vectors):
    dim = len(next(iter(vectors.values())))
    return EmbeddingTable(
        source_name="test",
        dim=dim,
        entries={w: np.asarray(v, dtype=float) for w, v in vectors.items()},
    )


class TestBuildAffinity:
    def test_colinear_pair_makes_dead_row(self):
        # a and b point the same way, c is orthogonal to both: after the
        # min-max rescale c's similarities hit the minimum, its row becomes
        # all zero and cannot be normalized
        t = table_from({"a": [1, 0], "b": [1, 0], "c": [0, 1]})
        with pytest.raises(StimulusError, match="sums to 0"):
            build_affinity(t, ["a", "b", "c"])

    def test_hand_computed_chain(self):
        # sim(a,b)=cos10, sim(a,c)=0, sim(b,c)=sin10; min 0, max 1 (diagonal)
        # so the rescale is the identity; after zeroing the diagonal row a is
        # (0, cos10, 0) which normalizes to (0, 1, 0)
        rad = math.radians(10.0)
        t = table_from(
            {"a": [1, 0], "b": [math.cos(rad), math.sin(rad)], "c": [0, 1]}
        )
        aff = build_affinity(t, ["a", "b", "c"])
        assert np.allclose(aff.values[0], [0.0, 1.0, 0.0], atol=1e-12)
        assert np.allclose(aff.values[2], [0.0, 1.0, 0.0], atol=1e-12)
        b_row = np.array([math.cos(rad), 0.0, math.sin(rad)])
        assert np.allclose(aff.values[1], b_row / b_row.sum(), atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        t = table_from({f"w{i}": rng.normal(size=5) for i in range(12)})
        aff = build_affinity(t, sorted(t.entries))
        assert np.allclose(aff.values.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.diag(aff.values) == 0.0)

    def test_single_word_rejected(self):
        t = table_from({"a": [1, 0]})
        with pytest.raises(StimulusError, match="at least 2"):
            build_affinity(t, ["a"])

    def test_order_invariance_up_to_permutation(self):
        rng = np.random.default_rng(2)
        t = table_from({w: rng.normal(size=4) for w in "abcde"})
        fwd = build_affinity(t, list("abcde"))
        rev = build_affinity(t, list("edcba"))
        perm = [rev.labels.index(w) for w in fwd.labels]
        assert np.allclose(fwd.values, rev.values[np.ix_(perm, perm)], atol=1e-12)

    def test_diagonal_inclusion_is_immaterial(self):
        # row normalization divides out the (max - min) scale, and the
        # diagonal can only ever move the max, so both settings agree
        rng = np.random.default_rng(3)
        t = table_from({w: rng.normal(size=4) for w in "abcdef"})
        words = list("abcdef")
        with_diag = build_affinity(t, words, include_diagonal_in_minmax=True)
        without = build_affinity(t, words, include_diagonal_in_minmax=False)
        assert np.allclose(with_diag.values, without.values, atol=1e-12)

    def test_missing_word(self):
        t = table_from({"a": [1, 0], "b": [0, 1]})
        with pytest.raises(KeyError):
            build_affinity(t, ["a", "zzz"])


def separable_pool(n_per_group=6, spread=0.01, seed=0):
    """Two tight bundles of directions: within-group cosine ~1, between ~0."""
    rng = np.random.default_rng(seed)
    vectors = {}
    for i in range(n_per_group):
        vectors[f"g0_{i}"] = np.array([1.0, spread * rng.normal(), spread * rng.normal()])
        vectors[f"g1_{i}"] = np.array([spread * rng.normal(), 1.0, spread * rng.normal()])
    return vectors


class TestCluster:
    def test_separable_groups_split_exactly(self):
        vectors = separable_pool(n_per_group=4)
        aff = build_affinity(table_from(vectors), sorted(vectors))
        model = cluster(aff, k=2, seed=0)
        sides = {
            frozenset(w for w, c in model.assignments.items() if c == cid)
            for cid in (0, 1)
        }
        expected = {
            frozenset(w for w in vectors if w.startswith("g0")),
            frozenset(w for w in vectors if w.startswith("g1")),
        }
        assert sides == expected

    def test_k_equals_n_gives_singletons(self):
        rng = np.random.default_rng(5)
        t = table_from({w: rng.normal(size=4) for w in "abcdef"})
        aff = build_affinity(t, list("abcdef"))
        model = cluster(aff, k=6, seed=1)
        assert sorted(model.assignments.values()) == list(range(6))
        assert model.inertia == pytest.approx(0.0, abs=1e-20)

    def test_k_too_large_rejected(self):
        rng = np.random.default_rng(6)
        t = table_from({w: rng.normal(size=3) for w in "abc"})
        aff = build_affinity(t, list("abc"))
        with pytest.raises(StimulusError, match="k must be"):
            cluster(aff, k=4)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(7)
        t = table_from({f"w{i}": rng.normal(size=6) for i in range(30)})
        aff = build_affinity(t, sorted(t.entries))
        m1 = cluster(aff, k=5, seed=11)
        m2 = cluster(aff, k=5, seed=11)
        assert m1.assignments == m2.assignments
        assert np.array_equal(m1.centroids, m2.centroids)

    def test_inertia_trace_never_increases(self):
        rng = np.random.default_rng(8)
        t = table_from({f"w{i}": rng.normal(size=8) for i in range(60)})
        aff = build_affinity(t, sorted(t.entries))
        model = cluster(aff, k=6, seed=3)
        trace = np.array(model.inertia_trace)
        assert np.all(np.diff(trace) <= 1e-9 * max(1.0, trace[0]))

    def test_large_pool_with_paper_scale_k(self):
        rng = np.random.default_rng(9)
        t = table_from({f"w{i:03d}": rng.normal(size=20) for i in range(500)})
        aff = build_affinity(t, sorted(t.entries))
        model = cluster(aff, k=19, n_components=10, seed=0, n_restarts=3)
        assert model.k == 19
        assert len(set(model.assignments.values())) == 19


def model_with(groups, coords=None):
    """Build a ClusterModel directly from {cluster_id: [words]}."""
    assignments = {w: cid for cid, ws in groups.items() for w in ws}
    k = max(groups) + 1
    if coords is None:
        coords = {w: np.zeros(2) for w in assignments}
    centroids = np.zeros((k, 2))
    return ClusterModel(
        assignments=assignments,
        centroids=centroids,
        reduced_coords=coords,
        k=k,
        seed=0,
        inertia=0.0,
    )


class TestPickTargetCluster:
    def test_highest_variance_wins(self):
        model = model_with({0: ["a", "b"], 1: ["c", "d"]})
        conc = {"a": 1.0, "b": 9.0, "c": 5.0, "d": 5.0}
        assert pick_target_cluster(model, conc) == 0

    def test_tie_breaks_to_lower_id(self):
        model = model_with({0: ["a", "b"], 1: ["c", "d"]})
        conc = {"a": 1.0, "b": 3.0, "c": 6.0, "d": 8.0}
        assert pick_target_cluster(model, conc) == 0

    def test_singletons_skipped(self):
        model = model_with({0: ["a"], 1: ["b", "c"]})
        conc = {"a": 9.0, "b": 1.0, "c": 2.0}
        assert pick_target_cluster(model, conc) == 1

    def test_all_singletons_rejected(self):
        model = model_with({0: ["a"], 1: ["b"]})
        with pytest.raises(StimulusError, match="singleton"):
            pick_target_cluster(model, {"a": 1.0, "b": 2.0})

    def test_missing_value_rejected(self):
        model = model_with({0: ["a", "b"]})
        with pytest.raises(StimulusError, match="concreteness"):
            pick_target_cluster(model, {"a": 1.0})


def synthetic_cluster(n=200, seed=0):
    rng = np.random.default_rng(seed)
    words = [f"word{i:03d}" for i in range(n)]
    columns = {key: {} for key in ("concreteness", "frequency", "length", "old20")}
    for w in words:
        columns["concreteness"][w] = float(np.clip(rng.normal(4.95, 1.51), 1.0, 9.0))
        columns["frequency"][w] = float(rng.normal(2.83, 0.77))
        columns["length"][w] = float(rng.integers(5, 10))
        columns["old20"][w] = float(np.clip(rng.normal(2.0, 0.5), 1.0, None))
    distances = {w: float(rng.uniform(0.0, 1.0)) for w in words}
    return words, FeatureTable(features=columns), distances


class TestSelectStimuli:
    def test_five_disjoint_groups_meeting_constraints(self):
        words, features, distances = synthetic_cluster()
        config = SelectionConfig()
        result = select_stimuli(words, features, config, seed=0, centroid_distance=distances)

        groups = result.groups()
        assert all(len(ws) == 8 for ws in groups.values())
        assert len(set(result.words())) == 40

        col = features.features
        cols = {
            key: np.array([col[key][w] for w in words])
            for key in ("concreteness", "frequency", "old20")
        }
        means = {k: v.mean() for k, v in cols.items()}
        sds = {k: v.std(ddof=1) for k, v in cols.items()}

        def check_matched(w, keys):
            for key in keys:
                assert abs(col[key][w] - means[key]) <= sds[key]

        for w in result.concrete:
            assert col["concreteness"][w] > means["concreteness"] + sds["concreteness"]
            assert 5 <= col["length"][w] <= 9
            check_matched(w, ["frequency", "old20"])
        for w in result.abstract:
            assert col["concreteness"][w] < means["concreteness"] - sds["concreteness"]
            assert 5 <= col["length"][w] <= 9
            check_matched(w, ["frequency", "old20"])
        for w in result.frequent:
            assert col["frequency"][w] > means["frequency"] + sds["frequency"]
            assert 5 <= col["length"][w] <= 9
            check_matched(w, ["concreteness", "old20"])
        for w in result.infrequent:
            assert col["frequency"][w] < means["frequency"] - sds["frequency"]
            assert 5 <= col["length"][w] <= 9
            check_matched(w, ["concreteness", "old20"])

        # central words are the nearest remaining ones
        chosen_before_central = set(result.words()) - set(result.central)
        remaining = [w for w in words if w not in chosen_before_central]
        nearest = sorted(remaining, key=lambda w: distances[w])[:8]
        assert set(result.central) == set(nearest)

    def test_greedy_prefers_extremes(self):
        words, features, distances = synthetic_cluster(seed=1)
        result = select_stimuli(
            words, features, SelectionConfig(), seed=0, centroid_distance=distances
        )
        col = features.features
        conc = col["concreteness"]
        vals = np.array([conc[w] for w in words])
        mean, sd = vals.mean(), vals.std(ddof=1)
        freq_vals = np.array([col["frequency"][w] for w in words])
        old_vals = np.array([col["old20"][w] for w in words])
        eligible = [
            w for w in words
            if conc[w] > mean + sd
            and 5 <= col["length"][w] <= 9
            and abs(col["frequency"][w] - freq_vals.mean()) <= freq_vals.std(ddof=1)
            and abs(col["old20"][w] - old_vals.mean()) <= old_vals.std(ddof=1)
        ]
        top8 = sorted(eligible, key=lambda w: -conc[w])[:8]
        assert set(result.concrete) == set(top8)

    def test_deterministic_given_seed(self):
        words, features, distances = synthetic_cluster(seed=2)
        a = select_stimuli(words, features, SelectionConfig(), seed=5, centroid_distance=distances)
        b = select_stimuli(words, features, SelectionConfig(), seed=5, centroid_distance=distances)
        assert a == b

    def test_infeasible_concrete_group(self):
        words = [f"w{i:02d}" for i in range(30)]
        features = FeatureTable(
            features={
                "concreteness": {w: 5.0 for w in words},
                "frequency": {w: 2.8 for w in words},
                "length": {w: 6.0 for w in words},
                "old20": {w: 2.0 for w in words},
            }
        )
        with pytest.raises(SelectionInfeasibleError) as err:
            select_stimuli(
                words, features, SelectionConfig(), seed=0,
                centroid_distance={w: 0.5 for w in words},
            )
        assert err.value.group == "concrete"
        assert err.value.n_eligible == 0

    def test_explicit_escape_hatch(self):
        groups = {
            name: tuple(f"{name}{i}" for i in range(3))
            for name in ("concrete", "abstract", "frequent", "infrequent", "central")
        }
        result = select_stimuli(
            [], FeatureTable(features={}), SelectionConfig(group_size=3),
            explicit=groups,
        )
        assert result.concrete == groups["concrete"]
        assert len(result.words()) == 15

    def test_missing_feature_rejected(self):
        words = ["alpha", "bravo"]
        features = FeatureTable(
            features={
                "concreteness": {w: 5.0 for w in words},
                "frequency": {w: 2.8 for w in words},
            }
        )
        with pytest.raises(StimulusError, match="missing feature"):
            select_stimuli(words, features, SelectionConfig(), centroid_distance={})


class TestGenerateTriplets:
    def test_paper_scale_count(self):
        words = [f"w{i:02d}" for i in range(40)]
        triples = generate_triplets(words)
        assert len(triples) == 9880

    def test_small_counts(self):
        assert len(generate_triplets(["a", "b", "c"])) == 1
        assert len(generate_triplets(["a", "b", "c", "d"])) == 4

    def test_every_pair_in_n_minus_2_triples(self):
        words = [f"w{i}" for i in range(10)]
        triples = generate_triplets(words)
        counts = {}
        for tri in triples:
            for pair in itertools.combinations(tri, 2):
                counts[pair] = counts.get(pair, 0) + 1
        assert set(counts.values()) == {8}
        assert len(counts) == 45

    def test_lexicographic_canonical_order(self):
        triples = generate_triplets(["c", "a", "d", "b"])
        assert triples == [
            ("a", "b", "c"), ("a", "b", "d"), ("a", "c", "d"), ("b", "c", "d"),
        ]

    def test_duplicates_rejected(self):
        with pytest.raises(StimulusError, match="duplicates"):
            generate_triplets(["a", "b", "a", "c"])

    def test_too_few_words(self):
        with pytest.raises(StimulusError, match="at least 3"):
            generate_triplets(["a", "b"])


class TestScheduleTriplets:
    def test_paper_scale_partition(self):
        words = [f"w{i:02d}" for i in range(40)]
        triples = generate_triplets(words)
        schedule = schedule_triplets(triples, n_participants=40, seed=0)
        assert len(schedule.participants) == 40
        assert all(len(schedule.blocks[s]) == 247 for s in schedule.participants)
        assert sorted(schedule.all_triplets()) == triples

    def test_near_equal_partition(self):
        triples = generate_triplets([f"w{i}" for i in range(5)])  # C(5,3) = 10
        schedule = schedule_triplets(triples, n_participants=3, seed=1)
        sizes = sorted(len(schedule.blocks[s]) for s in schedule.participants)
        assert sizes == [3, 3, 4]

    def test_deterministic_given_seed(self):
        triples = generate_triplets([f"w{i}" for i in range(8)])
        s1 = schedule_triplets(triples, 4, seed=9)
        s2 = schedule_triplets(triples, 4, seed=9)
        assert s1.blocks == s2.blocks

    def test_seed_changes_layout(self):
        words = [f"w{i:02d}" for i in range(12)]
        triples = generate_triplets(words)
        s1 = schedule_triplets(triples, 4, seed=0)
        s2 = schedule_triplets(triples, 4, seed=1)
        assert s1.blocks != s2.blocks

    def test_duplicate_triples_rejected(self):
        with pytest.raises(StimulusError, match="duplicates"):
            schedule_triplets(
                [("a", "b", "c"), ("c", "b", "a")], n_participants=1, seed=0
            )

    def test_zero_participants_rejected(self):
        with pytest.raises(StimulusError, match="participants"):
            schedule_triplets([("a", "b", "c")], n_participants=0)

    def test_empty_list_rejected(self):
        with pytest.raises(StimulusError, match="empty"):
            schedule_triplets([], n_participants=2)


class TestSerialization:
    def test_stimulus_set_round_trip(self):
        words, features, distances = synthetic_cluster(seed=3)
        stimuli = select_stimuli(
            words, features, SelectionConfig(), seed=0, centroid_distance=distances
        )
        buf = io.StringIO()
        write_stimulus_set(stimuli, buf)
        again = read_stimulus_set(io.StringIO(buf.getvalue()))
        assert again == stimuli

    def test_schedule_round_trip(self):
        triples = generate_triplets([f"w{i}" for i in range(7)])
        schedule = schedule_triplets(triples, 5, seed=13)
        buf = io.StringIO()
        write_schedule(schedule, buf)
        again = read_schedule(io.StringIO(buf.getvalue()), seed=13)
        assert again == schedule

    def test_centroid_distances_helper(self):
        coords = {"a": np.array([0.0, 0.0]), "b": np.array([3.0, 4.0]), "c": np.array([1.0, 0.0])}
        model = ClusterModel(
            assignments={"a": 0, "b": 0, "c": 1},
            centroids=np.array([[0.0, 0.0], [1.0, 0.0]]),
            reduced_coords=coords,
            k=2,
            seed=0,
            inertia=0.0,
        )
        d = centroid_distances(model, 0)
        assert d == {"a": 0.0, "b": 5.0}
