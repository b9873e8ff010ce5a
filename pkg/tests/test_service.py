import io
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timedelta, timezone

import pytest

from lexalign.ingest import load_judgments, load_ratings, mean_ratings
from lexalign.rdm import behavioral_rdm
from lexalign.service import ServiceConfig, Study, StudyError, create_app
from lexalign.stimuli import StimulusSet, generate_triplets, schedule_triplets

WORDS = ("alpha", "bluff", "crisp", "dough", "ember")


def small_stimuli():
    return StimulusSet(
        concrete=("alpha",),
        abstract=("bluff",),
        frequent=("crisp",),
        infrequent=("dough",),
        central=("ember",),
    )


def make_clock():
    base = datetime(2024, 6, 1, 12, 0, tzinfo=timezone.utc)
    counter = itertools.count()
    return lambda: base + timedelta(seconds=next(counter))


def make_study(tmp_path, n_participants=2, seed=3, subdir="data"):
    triples = generate_triplets(WORDS)
    schedule = schedule_triplets(triples, n_participants, seed=seed)
    ids = (f"session{i:02d}" for i in itertools.count())
    return Study(
        schedule,
        small_stimuli(),
        tmp_path / subdir,
        consent_text="you agree to take part",
        clock=make_clock(),
        id_factory=lambda: next(ids),
    )


def complete_session(study, session):
    sid = session["session_id"]
    while True:
        trial = study.next_trial(sid)
        if trial.get("complete"):
            return
        if trial["kind"] == "odd_one_out":
            study.submit_choice(sid, trial["trial_id"], trial["words"][0], 500.0)
        else:
            study.submit_rating(sid, trial["trial_id"], (trial["index"] % 9) + 1, 800.0)


class TestSessions:
    def test_first_claim_gets_lowest_slot(self, tmp_path):
        study = make_study(tmp_path)
        info = study.create_session()
        assert info["participant_slot"] == 0
        assert info["phase"] == "triplets"
        assert info["n_triplets"] == 5
        assert info["n_rating_words"] == 5
        assert info["consent_text"] == "you agree to take part"
        assert study.create_session()["participant_slot"] == 1

    def test_study_full(self, tmp_path):
        study = make_study(tmp_path)
        study.create_session()
        study.create_session()
        with pytest.raises(StudyError) as err:
            study.create_session()
        assert err.value.code == "study_full"

    def test_concurrent_claims_are_atomic(self, tmp_path):
        study = make_study(tmp_path, n_participants=4)
        outcomes = []

        def claim():
            try:
                return ("ok", study.create_session()["participant_slot"])
            except StudyError as err:
                return ("err", err.code)

        with ThreadPoolExecutor(max_workers=12) as pool:
            outcomes = list(pool.map(lambda _: claim(), range(12)))
        slots = sorted(slot for kind, slot in outcomes if kind == "ok")
        errors = [code for kind, code in outcomes if kind == "err"]
        assert slots == [0, 1, 2, 3]
        assert errors == ["study_full"] * 8


class TestTrials:
    def test_fresh_session_first_trial(self, tmp_path):
        study = make_study(tmp_path)
        info = study.create_session()
        trial = study.next_trial(info["session_id"])
        assert trial["trial_id"] == "triplets-0"
        assert trial["kind"] == "odd_one_out"
        assert trial["index"] == 1
        assert trial["total"] == 5
        assert len(set(trial["words"])) == 3
        assert tuple(sorted(trial["words"])) == study.schedule.blocks[0][0]

    def test_repeated_read_is_idempotent(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        assert study.next_trial(sid) == study.next_trial(sid)

    def test_unknown_session(self, tmp_path):
        study = make_study(tmp_path)
        with pytest.raises(StudyError) as err:
            study.next_trial("nope")
        assert err.value.code == "unknown_session"

    def test_display_order_varies_across_trials(self, tmp_path):
        study = make_study(tmp_path, n_participants=1, seed=0)
        sid = study.create_session()["session_id"]
        orders = []
        for _ in range(10):
            trial = study.next_trial(sid)
            orders.append(tuple(trial["words"]) != tuple(sorted(trial["words"])))
            study.submit_choice(sid, trial["trial_id"], trial["words"][0], 100.0)
        assert any(orders)  # at least one trial shows a non-canonical order


class TestSubmissions:
    def test_choice_advances_cursor(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        trial = study.next_trial(sid)
        ack = study.submit_choice(sid, trial["trial_id"], trial["words"][1], 432.0)
        assert ack["accepted"] is True
        assert study.next_trial(sid)["trial_id"] == "triplets-1"

    def test_word_outside_triplet_rejected(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        trial = study.next_trial(sid)
        with pytest.raises(StudyError) as err:
            study.submit_choice(sid, trial["trial_id"], "zzzzz", 100.0)
        assert err.value.code == "word_not_in_triplet"
        assert study.next_trial(sid) == trial  # cursor unchanged

    def test_duplicate_returns_original_ack_once(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        trial = study.next_trial(sid)
        first = study.submit_choice(sid, trial["trial_id"], trial["words"][0], 100.0)
        replay = study.submit_choice(sid, trial["trial_id"], trial["words"][0], 100.0)
        assert replay == first
        exported = study.export_judgments()
        data_rows = [l for l in exported.splitlines() if l and not l.startswith("#")]
        assert len(data_rows) == 2  # header + exactly one record

    def test_concurrent_replays_store_one_record(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        trial = study.next_trial(sid)

        def fire(_):
            return study.submit_choice(sid, trial["trial_id"], trial["words"][0], 99.0)

        with ThreadPoolExecutor(max_workers=8) as pool:
            acks = list(pool.map(fire, range(16)))
        assert all(a == acks[0] for a in acks)
        rows = [l for l in study.export_judgments().splitlines() if not l.startswith("#")]
        assert len(rows) == 2

    def test_stale_trial_rejected(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        with pytest.raises(StudyError) as err:
            study.submit_choice(sid, "triplets-3", "alpha", 100.0)
        assert err.value.code == "stale_trial"

    def test_rating_submission_in_triplet_phase_rejected(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        with pytest.raises(StudyError) as err:
            study.submit_rating(sid, "ratings-0", 5, 100.0)
        assert err.value.code == "wrong_phase"

    def test_rating_out_of_range(self, tmp_path):
        study = make_study(tmp_path)
        info = study.create_session()
        sid = info["session_id"]
        for _ in range(5):
            trial = study.next_trial(sid)
            study.submit_choice(sid, trial["trial_id"], trial["words"][0], 50.0)
        trial = study.next_trial(sid)
        assert trial["kind"] == "rating"
        for bad in (0, 10):
            with pytest.raises(StudyError) as err:
                study.submit_rating(sid, trial["trial_id"], bad, 50.0)
            assert err.value.code == "rating_out_of_range"
        ack = study.submit_rating(sid, trial["trial_id"], 9, 50.0)
        assert ack["accepted"] is True


class TestPhases:
    def test_phase_flow_and_rating_order(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        for i in range(5):
            trial = study.next_trial(sid)
            assert trial["kind"] == "odd_one_out"
            study.submit_choice(sid, trial["trial_id"], trial["words"][0], 10.0)
        served = []
        for i in range(5):
            trial = study.next_trial(sid)
            assert trial["kind"] == "rating"
            assert trial["index"] == i + 1
            assert trial["scale_min"] == 1 and trial["scale_max"] == 9
            served.append(trial["word"])
            study.submit_rating(sid, trial["trial_id"], 4, 10.0)
        assert sorted(served) == sorted(WORDS)
        assert study.next_trial(sid) == {"complete": True, "phase": "done"}

    def test_no_choice_after_rating_in_log(self, tmp_path):
        study = make_study(tmp_path)
        for _ in range(2):
            complete_session(study, study.create_session())
        by_session = {}
        with open(study.data_dir / "study.wal", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["type"] in ("choice", "rating"):
                    by_session.setdefault(rec["session_id"], []).append(rec["type"])
        for kinds in by_session.values():
            switched = kinds.index("rating")
            assert all(k == "rating" for k in kinds[switched:])


class TestDurability:
    def test_restart_preserves_everything(self, tmp_path):
        study = make_study(tmp_path)
        info = study.create_session()
        sid = info["session_id"]
        for _ in range(3):
            trial = study.next_trial(sid)
            study.submit_choice(sid, trial["trial_id"], trial["words"][0], 20.0)
        pending = study.next_trial(sid)
        before = study.export_judgments()
        study.close()

        reborn = make_study(tmp_path)
        assert reborn.next_trial(sid) == pending
        assert reborn.export_judgments() == before
        # slot 0 still claimed: a new session gets slot 1
        assert reborn.create_session()["participant_slot"] == 1
        reborn.close()

    def test_torn_tail_is_discarded(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        trial = study.next_trial(sid)
        study.submit_choice(sid, trial["trial_id"], trial["words"][0], 20.0)
        study.close()
        wal = tmp_path / "data" / "study.wal"
        with open(wal, "a", encoding="utf-8") as fh:
            fh.write('{"type": "choice", "session_id": "sess')  # no newline
        reborn = make_study(tmp_path)
        assert reborn.next_trial(sid)["trial_id"] == "triplets-1"
        reborn.close()

    def test_corrupt_interior_line_raises(self, tmp_path):
        study = make_study(tmp_path)
        study.create_session()
        study.close()
        wal = tmp_path / "data" / "study.wal"
        content = wal.read_text(encoding="utf-8")
        wal.write_text("garbage line\n" + content, encoding="utf-8")
        with pytest.raises(StudyError) as err:
            make_study(tmp_path)
        assert err.value.code == "corrupt_log"

    def test_snapshot_plus_tail_replay(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        for _ in range(2):
            trial = study.next_trial(sid)
            study.submit_choice(sid, trial["trial_id"], trial["words"][0], 20.0)
        study.write_snapshot()
        for _ in range(2):
            trial = study.next_trial(sid)
            study.submit_choice(sid, trial["trial_id"], trial["words"][0], 20.0)
        expected_trial = study.next_trial(sid)
        expected_export = study.export_judgments()
        study.close()

        reborn = make_study(tmp_path)
        assert reborn.next_trial(sid) == expected_trial
        assert reborn.export_judgments() == expected_export
        reborn.close()


class TestRelease:
    def test_release_frees_slot_and_hides_records(self, tmp_path):
        study = make_study(tmp_path)
        info = study.create_session()
        sid = info["session_id"]
        trial = study.next_trial(sid)
        study.submit_choice(sid, trial["trial_id"], trial["words"][0], 20.0)
        result = study.release_session(sid)
        assert result == {"released": True, "participant_slot": 0}

        rows = [l for l in study.export_judgments().splitlines() if not l.startswith("#")]
        assert len(rows) == 1  # header only
        assert study.create_session()["participant_slot"] == 0
        with pytest.raises(StudyError) as err:
            study.next_trial(sid)
        assert err.value.code == "unknown_session"

    def test_release_unknown_session(self, tmp_path):
        study = make_study(tmp_path)
        with pytest.raises(StudyError) as err:
            study.release_session("ghost")
        assert err.value.code == "unknown_session"


class TestExports:
    def test_partial_export_is_flagged(self, tmp_path):
        study = make_study(tmp_path)
        sid = study.create_session()["session_id"]
        trial = study.next_trial(sid)
        study.submit_choice(sid, trial["trial_id"], trial["words"][0], 20.0)
        text = study.export_judgments()
        assert text.startswith("# partial study: 1/10 choices, 0/10 ratings")
        assert load_judgments(io.StringIO(text)) != []  # parsers skip the flag line

    def test_empty_export_has_header_only(self, tmp_path):
        study = make_study(tmp_path)
        text = study.export_ratings()
        lines = text.splitlines()
        assert lines[0].startswith("# partial study")
        assert lines[1] == "session_id,word,rating,rt_ms,timestamp"
        assert len(lines) == 2
        assert load_ratings(io.StringIO(text)) == []

    def test_complete_study_round_trips_to_rdm(self, tmp_path):
        study = make_study(tmp_path)
        complete_session(study, study.create_session())
        complete_session(study, study.create_session())

        judgments_text = study.export_judgments()
        ratings_text = study.export_ratings()
        assert not judgments_text.startswith("#")
        assert not ratings_text.startswith("#")

        judgments = load_judgments(io.StringIO(judgments_text))
        assert len(judgments) == 10
        triples = sorted(j.triplet for j in judgments)
        assert triples == generate_triplets(WORDS)  # every triple exactly once
        assert all(j.odd_word in j.triplet for j in judgments)

        rdm = behavioral_rdm(judgments, list(WORDS))
        assert rdm.values.shape == (5, 5)

        ratings = load_ratings(io.StringIO(ratings_text))
        assert len(ratings) == 10  # 2 participants x 5 words
        means = mean_ratings(ratings)
        assert set(means) == set(WORDS)


class TestConfig:
    def test_from_json_validates_keys(self, tmp_path):
        path = tmp_path / "conf.json"
        path.write_text(json.dumps({"schedule_path": "s", "stimulus_path": "w"}))
        with pytest.raises(ValueError, match="missing config keys"):
            ServiceConfig.from_json(path)
        path.write_text(
            json.dumps(
                {"schedule_path": "s", "stimulus_path": "w", "data_dir": "d", "oops": 1}
            )
        )
        with pytest.raises(ValueError, match="unknown config keys"):
            ServiceConfig.from_json(path)


@pytest.fixture()
def client(tmp_path):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient
    study = make_study(tmp_path)
    with TestClient(create_app(study)) as c:
        yield c
    study.close()


class TestHttpApi:
    def test_full_session_over_http(self, client):
        created = client.post("/sessions")
        assert created.status_code == 201
        sid = created.json()["session_id"]

        for _ in range(5):
            trial = client.get(f"/sessions/{sid}/trial").json()
            assert trial["kind"] == "odd_one_out"
            r = client.post(
                f"/sessions/{sid}/choice",
                json={
                    "trial_id": trial["trial_id"],
                    "chosen": trial["words"][2],
                    "response_time_ms": 640.5,
                },
            )
            assert r.status_code == 200
        for _ in range(5):
            trial = client.get(f"/sessions/{sid}/trial").json()
            assert trial["kind"] == "rating"
            r = client.post(
                f"/sessions/{sid}/rating",
                json={"trial_id": trial["trial_id"], "rating": 7, "response_time_ms": 120},
            )
            assert r.status_code == 200
        assert client.get(f"/sessions/{sid}/trial").json()["complete"] is True

        health = client.get("/health").json()
        assert health["status"] == "ok"
        assert health["choices"] == 5
        assert health["ratings"] == 5

        export = client.get("/export/judgments.csv")
        assert export.status_code == 200
        assert "text/csv" in export.headers["content-type"]
        assert len(load_judgments(io.StringIO(export.text))) == 5

    def test_error_codes_surface(self, client):
        assert client.get("/sessions/nope/trial").status_code == 404
        assert (
            client.get("/sessions/nope/trial").json()["error"]["code"]
            == "unknown_session"
        )

        sid = client.post("/sessions").json()["session_id"]
        trial = client.get(f"/sessions/{sid}/trial").json()
        bad = client.post(
            f"/sessions/{sid}/choice",
            json={"trial_id": trial["trial_id"], "chosen": "zzzzz", "response_time_ms": 1},
        )
        assert bad.status_code == 422
        assert bad.json()["error"]["code"] == "word_not_in_triplet"

    def test_fractional_rating_is_a_type_error(self, client):
        sid = client.post("/sessions").json()["session_id"]
        for _ in range(5):
            trial = client.get(f"/sessions/{sid}/trial").json()
            client.post(
                f"/sessions/{sid}/choice",
                json={
                    "trial_id": trial["trial_id"],
                    "chosen": trial["words"][0],
                    "response_time_ms": 1,
                },
            )
        trial = client.get(f"/sessions/{sid}/trial").json()
        r = client.post(
            f"/sessions/{sid}/rating",
            json={"trial_id": trial["trial_id"], "rating": 4.5, "response_time_ms": 1},
        )
        assert r.status_code == 422
        assert r.json()["error"]["code"] == "validation"

    def test_study_full_over_http(self, client):
        assert client.post("/sessions").status_code == 201
        assert client.post("/sessions").status_code == 201
        r = client.post("/sessions")
        assert r.status_code == 409
        assert r.json()["error"]["code"] == "study_full"

    def test_release_endpoint(self, client):
        sid = client.post("/sessions").json()["session_id"]
        r = client.post(f"/admin/sessions/{sid}/release")
        assert r.status_code == 200
        assert r.json()["released"] is True
        assert client.post("/sessions").json()["participant_slot"] == 0
