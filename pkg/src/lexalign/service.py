"""HTTP service for the two-phase behavioral experiment.

Participants claim a slot, work through that slot's triplet block one
odd-one-out trial at a time, then rate every stimulus word on a 1-9
scale. Every accepted response is appended to a write-ahead log and
fsynced before the acknowledgement leaves the server; restarts replay
the log, so a crash can lose at most an unacknowledged response.

Live operations and log replay share one state-transition path: a
request handler validates, appends the record, then applies it with
exactly the code replay uses. Whatever a restart rebuilds is therefore
what the running process had.

``Study`` holds all experiment logic and is framework-free;
``create_app`` wraps it in a thin FastAPI layer that maps domain errors
to machine-readable codes.
"""

from __future__ import annotations

import csv
import io
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
import pydantic

from .ingest import RATING_SCALE, nfc
from .stimuli import StimulusSet, TripletSchedule

WAL_NAME = "study.wal"
SNAPSHOT_NAME = "snapshot.json"


class StudyError(Exception):
    """Domain error with a machine-readable code."""

    def __init__(self, code: str, message: str, http_status: int = 400):
        self.code = code
        self.http_status = http_status
        super().__init__(message)


def _err(code: str, message: str, status: int) -> StudyError:
    return StudyError(code, message, http_status=status)


@dataclass
class _SessionState:
    session_id: str
    slot: int
    created_at: str
    phase: str = "triplets"  # triplets -> ratings -> done, never backward
    cursor: int = 0
    released: bool = False
    acks: dict[str, dict] = field(default_factory=dict)
    choices: list[dict] = field(default_factory=list)
    ratings: list[dict] = field(default_factory=list)


class Study:
    """All experiment state plus its durable log.

    Mutating operations hold the study-wide lock, append to the log,
    flush and fsync, apply the record, and only then return.
    """

    def __init__(
        self,
        schedule: TripletSchedule,
        stimuli: StimulusSet,
        data_dir: str | Path,
        *,
        consent_text: str = "",
        clock: Callable[[], datetime] | None = None,
        id_factory: Callable[[], str] | None = None,
    ):
        self.schedule = schedule
        self.stimuli = stimuli
        self.words = stimuli.words()
        self.consent_text = consent_text
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._new_id = id_factory or (lambda: uuid.uuid4().hex)
        self._lock = threading.Lock()
        self._sessions: dict[str, _SessionState] = {}
        self._slot_owner: dict[int, str] = {}
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._wal_path = self.data_dir / WAL_NAME
        self._wal_lines = 0
        self._recover()
        self._wal = open(self._wal_path, "a", encoding="utf-8")

    # -- durability -------------------------------------------------------

    def _append(self, record: dict) -> None:
        self._wal.write(json.dumps(record, sort_keys=True) + "\n")
        self._wal.flush()
        os.fsync(self._wal.fileno())
        self._wal_lines += 1

    def _recover(self) -> None:
        snapshot_path = self.data_dir / SNAPSHOT_NAME
        start_line = self._load_snapshot(snapshot_path) if snapshot_path.exists() else 0
        self._wal_lines = start_line
        if not self._wal_path.exists():
            return
        keep_bytes = 0
        with open(self._wal_path, "rb") as fh:
            raw_lines = fh.read().split(b"\n")
        # a trailing chunk without its newline is a torn write from a crash
        complete = raw_lines[:-1]
        for i, raw in enumerate(complete):
            try:
                record = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise StudyError(
                    "corrupt_log", f"unreadable log record at line {i + 1}", 500
                ) from None
            if i >= start_line:
                self._apply(record)
                self._wal_lines = i + 1
            keep_bytes += len(raw) + 1
        if raw_lines[-1]:
            with open(self._wal_path, "r+b") as fh:
                fh.truncate(keep_bytes)

    def _apply(self, record: dict) -> dict:
        """Fold one log record into memory; shared by live ops and replay."""
        kind = record["type"]
        if kind == "session":
            state = _SessionState(
                session_id=record["session_id"],
                slot=record["slot"],
                created_at=record["at"],
            )
            self._normalize_phase(state)
            self._sessions[state.session_id] = state
            self._slot_owner[state.slot] = state.session_id
        elif kind in ("choice", "rating"):
            state = self._sessions[record["session_id"]]
            (state.choices if kind == "choice" else state.ratings).append(record)
            state.acks[record["trial_id"]] = record["ack"]
            self._advance(state)
        elif kind == "release":
            state = self._sessions[record["session_id"]]
            state.released = True
            if self._slot_owner.get(state.slot) == state.session_id:
                del self._slot_owner[state.slot]
        else:
            raise StudyError("corrupt_log", f"unknown record type {kind!r}", 500)
        return record

    def _normalize_phase(self, state: _SessionState) -> None:
        # a slot can have an empty block when participants outnumber triples
        if state.phase == "triplets" and state.cursor >= len(self._block(state.slot)):
            state.phase, state.cursor = "ratings", 0
        if state.phase == "ratings" and state.cursor >= len(self.words):
            state.phase = "done"

    def _advance(self, state: _SessionState) -> None:
        state.cursor += 1
        if state.phase == "triplets" and state.cursor >= len(self._block(state.slot)):
            state.phase, state.cursor = "ratings", 0
            self._normalize_phase(state)
        elif state.phase == "ratings" and state.cursor >= len(self.words):
            state.phase = "done"

    def write_snapshot(self) -> None:
        """Cache derived state so restarts can skip already-applied lines.

        The log stays the source of truth; the snapshot records how many
        of its lines are folded in and is replaced atomically.
        """
        with self._lock:
            payload = {
                "wal_lines": self._wal_lines,
                "sessions": [vars(s) for s in self._sessions.values()],
            }
            tmp = self.data_dir / (SNAPSHOT_NAME + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, sort_keys=True)
                fh.flush()
                os.fsync(fh.fileno())
            tmp.replace(self.data_dir / SNAPSHOT_NAME)

    def _load_snapshot(self, path: Path) -> int:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        for raw in payload["sessions"]:
            state = _SessionState(**raw)
            self._sessions[state.session_id] = state
            if not state.released:
                self._slot_owner[state.slot] = state.session_id
        return int(payload["wal_lines"])

    def close(self) -> None:
        self._wal.close()

    # -- trial layout -----------------------------------------------------

    def _block(self, slot: int) -> tuple[tuple[str, str, str], ...]:
        return self.schedule.blocks[slot]

    def _display_triplet(self, slot: int, cursor: int) -> list[str]:
        triple = self._block(slot)[cursor]
        rng = np.random.default_rng((self.schedule.seed, slot, 0, cursor))
        return [triple[i] for i in rng.permutation(3)]

    def _rating_order(self, slot: int) -> list[str]:
        rng = np.random.default_rng((self.schedule.seed, slot, 1))
        return [self.words[i] for i in rng.permutation(len(self.words))]

    # -- operations -------------------------------------------------------

    def create_session(self) -> dict:
        with self._lock:
            free = [s for s in self.schedule.participants if s not in self._slot_owner]
            if not free:
                raise _err("study_full", "every participant slot is claimed", 409)
            slot = min(free)
            record = {
                "type": "session",
                "session_id": self._new_id(),
                "slot": slot,
                "at": self._clock().isoformat(),
            }
            self._append(record)
            self._apply(record)
            state = self._sessions[record["session_id"]]
            return {
                "session_id": state.session_id,
                "participant_slot": slot,
                "phase": state.phase,
                "n_triplets": len(self._block(slot)),
                "n_rating_words": len(self.words),
                "consent_text": self.consent_text,
            }

    def _get(self, session_id: str) -> _SessionState:
        state = self._sessions.get(session_id)
        if state is None or state.released:
            raise _err("unknown_session", f"no session {session_id!r}", 404)
        return state

    def next_trial(self, session_id: str) -> dict:
        with self._lock:
            state = self._get(session_id)
            if state.phase == "done":
                return {"complete": True, "phase": "done"}
            if state.phase == "triplets":
                return {
                    "complete": False,
                    "trial_id": f"triplets-{state.cursor}",
                    "kind": "odd_one_out",
                    "words": self._display_triplet(state.slot, state.cursor),
                    "index": state.cursor + 1,
                    "total": len(self._block(state.slot)),
                    "phase": state.phase,
                }
            order = self._rating_order(state.slot)
            return {
                "complete": False,
                "trial_id": f"ratings-{state.cursor}",
                "kind": "rating",
                "word": order[state.cursor],
                "scale_min": RATING_SCALE[0],
                "scale_max": RATING_SCALE[1],
                "index": state.cursor + 1,
                "total": len(order),
                "phase": state.phase,
            }

    def _stored_ack(self, state: _SessionState, trial_id: str, phase: str) -> dict | None:
        """Stored ack for replayed submissions, None when the trial is live."""
        if trial_id in state.acks:
            return state.acks[trial_id]
        if state.phase != phase:
            raise _err(
                "wrong_phase", f"session is in phase {state.phase!r}, not {phase!r}", 409
            )
        expected = f"{phase}-{state.cursor}"
        if trial_id != expected:
            raise _err(
                "stale_trial", f"trial {trial_id!r} is not the current {expected!r}", 409
            )
        return None

    def submit_choice(self, session_id: str, trial_id: str, chosen: str, rt_ms: float) -> dict:
        with self._lock:
            state = self._get(session_id)
            stored = self._stored_ack(state, trial_id, "triplets")
            if stored is not None:
                return stored
            chosen = nfc(chosen)
            triple = self._block(state.slot)[state.cursor]
            if chosen not in triple:
                raise _err(
                    "word_not_in_triplet", f"{chosen!r} is not one of {list(triple)}", 422
                )
            ack = {
                "accepted": True,
                "trial_id": trial_id,
                "kind": "odd_one_out",
                "index": state.cursor + 1,
                "total": len(self._block(state.slot)),
            }
            record = {
                "type": "choice",
                "session_id": session_id,
                "trial_id": trial_id,
                "triplet": list(triple),
                "chosen": chosen,
                "rt_ms": rt_ms,
                "at": self._clock().isoformat(),
                "ack": ack,
            }
            self._append(record)
            self._apply(record)
            return ack

    def submit_rating(self, session_id: str, trial_id: str, rating: int, rt_ms: float) -> dict:
        with self._lock:
            state = self._get(session_id)
            stored = self._stored_ack(state, trial_id, "ratings")
            if stored is not None:
                return stored
            lo, hi = RATING_SCALE
            if not isinstance(rating, int) or isinstance(rating, bool) or not lo <= rating <= hi:
                raise _err(
                    "rating_out_of_range",
                    f"rating must be an integer in [{lo}, {hi}], got {rating!r}",
                    422,
                )
            ack = {
                "accepted": True,
                "trial_id": trial_id,
                "kind": "rating",
                "index": state.cursor + 1,
                "total": len(self.words),
            }
            record = {
                "type": "rating",
                "session_id": session_id,
                "trial_id": trial_id,
                "word": self._rating_order(state.slot)[state.cursor],
                "rating": rating,
                "rt_ms": rt_ms,
                "at": self._clock().isoformat(),
                "ack": ack,
            }
            self._append(record)
            self._apply(record)
            return ack

    def release_session(self, session_id: str) -> dict:
        """Free an abandoned session's slot for a fresh claim.

        Released records stay in the log for audit but are excluded from
        exports, so a completed study still covers every triplet once.
        """
        with self._lock:
            state = self._sessions.get(session_id)
            if state is None:
                raise _err("unknown_session", f"no session {session_id!r}", 404)
            if not state.released:
                record = {"type": "release", "session_id": session_id}
                self._append(record)
                self._apply(record)
            return {"released": True, "participant_slot": state.slot}

    # -- exports ----------------------------------------------------------

    def _active_sessions(self) -> list[_SessionState]:
        return sorted(
            (s for s in self._sessions.values() if not s.released),
            key=lambda s: s.slot,
        )

    def counts(self) -> dict:
        active = self._active_sessions()
        n_choices = sum(len(s.choices) for s in active)
        n_ratings = sum(len(s.ratings) for s in active)
        total_choices = sum(len(self._block(s)) for s in self.schedule.participants)
        total_ratings = len(self.schedule.participants) * len(self.words)
        return {
            "choices": n_choices,
            "ratings": n_ratings,
            "total_choices": total_choices,
            "total_ratings": total_ratings,
            "complete": n_choices == total_choices and n_ratings == total_ratings,
        }

    def _export(self, header: list[str], rows) -> str:
        counts = self.counts()
        buf = io.StringIO()
        if not counts["complete"]:
            buf.write(
                f"# partial study: {counts['choices']}/{counts['total_choices']} choices,"
                f" {counts['ratings']}/{counts['total_ratings']} ratings\n"
            )
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()

    def export_judgments(self) -> str:
        with self._lock:
            rows = [
                [s.session_id, *sorted(rec["triplet"]), rec["chosen"],
                 f"{rec['rt_ms']:g}", rec["at"]]
                for s in self._active_sessions()
                for rec in s.choices
            ]
            return self._export(
                ["session_id", "word_a", "word_b", "word_c", "odd_word", "rt_ms", "timestamp"],
                rows,
            )

    def export_ratings(self) -> str:
        with self._lock:
            rows = [
                [s.session_id, rec["word"], rec["rating"], f"{rec['rt_ms']:g}", rec["at"]]
                for s in self._active_sessions()
                for rec in s.ratings
            ]
            return self._export(
                ["session_id", "word", "rating", "rt_ms", "timestamp"], rows
            )


@dataclass(frozen=True)
class ServiceConfig:
    """Single-file service configuration."""

    schedule_path: str
    stimulus_path: str
    data_dir: str
    host: str = "127.0.0.1"
    port: int = 8000
    schedule_seed: int = 0
    consent_text: str = ""

    @classmethod
    def from_json(cls, path: str | Path) -> "ServiceConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        missing = {"schedule_path", "stimulus_path", "data_dir"} - set(raw)
        if missing:
            raise ValueError(f"missing config keys: {sorted(missing)}")
        return cls(**raw)


def study_from_config(config: ServiceConfig) -> Study:
    from .stimuli import read_schedule, read_stimulus_set

    with open(config.schedule_path, encoding="utf-8") as fh:
        schedule = read_schedule(fh, seed=config.schedule_seed)
    with open(config.stimulus_path, encoding="utf-8") as fh:
        stimuli = read_stimulus_set(fh)
    return Study(schedule, stimuli, config.data_dir, consent_text=config.consent_text)


# Module level so FastAPI can resolve the (stringified) annotations of the
# endpoint signatures; StrictInt keeps 4.5 and "7" out of the rating field.
class ChoiceBody(pydantic.BaseModel):
    trial_id: pydantic.StrictStr
    chosen: pydantic.StrictStr
    response_time_ms: float = pydantic.Field(ge=0)


class RatingBody(pydantic.BaseModel):
    trial_id: pydantic.StrictStr
    rating: pydantic.StrictInt
    response_time_ms: float = pydantic.Field(ge=0)


def create_app(study: Study):
    """FastAPI layer over a Study; all errors carry machine-readable codes."""
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse, PlainTextResponse

    app = FastAPI(title="odd-one-out study", docs_url=None, redoc_url=None)
    app.state.study = study

    @app.exception_handler(StudyError)
    async def study_error(_request: Request, exc: StudyError):
        return JSONResponse(
            status_code=exc.http_status,
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    @app.exception_handler(RequestValidationError)
    async def validation_error(_request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content={"error": {"code": "validation", "message": str(exc.errors())}},
        )

    @app.post("/sessions", status_code=201)
    def create_session():
        return study.create_session()

    @app.get("/sessions/{session_id}/trial")
    def next_trial(session_id: str):
        return study.next_trial(session_id)

    @app.post("/sessions/{session_id}/choice")
    def submit_choice(session_id: str, body: ChoiceBody):
        return study.submit_choice(
            session_id, body.trial_id, body.chosen, body.response_time_ms
        )

    @app.post("/sessions/{session_id}/rating")
    def submit_rating(session_id: str, body: RatingBody):
        return study.submit_rating(
            session_id, body.trial_id, body.rating, body.response_time_ms
        )

    @app.post("/admin/sessions/{session_id}/release")
    def release_session(session_id: str):
        return study.release_session(session_id)

    @app.get("/export/judgments.csv")
    def export_judgments():
        return PlainTextResponse(study.export_judgments(), media_type="text/csv")

    @app.get("/export/ratings.csv")
    def export_ratings():
        return PlainTextResponse(study.export_ratings(), media_type="text/csv")

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "claimed_slots": len(study._slot_owner),
            "total_slots": len(study.schedule.participants),
            **study.counts(),
        }

    return app
