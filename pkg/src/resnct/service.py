"""Blinded reader-study HTTP service.

Serves a shuffled pool of real and synthesized slices one at a time, records
Likert scores to an append-only log before acknowledging, and produces a
study report by un-blinding truth labels server-side. Client-visible image
ids are opaque random tokens so nothing in the traffic correlates with the
truth label.
"""

from __future__ import annotations

import base64
import datetime
import io
import json
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from .errors import ConfigError
from .stats import StudyRecord, TruthLabel, study_report
from .volume_io import WindowSpec, window_to_unit


@dataclass(frozen=True)
class PoolImage:
    image_id: str            # opaque random token, safe for clients
    truth_label: TruthLabel  # server-side only
    pixels_hu: np.ndarray    # 2D HU slice


@dataclass
class Session:
    session_id: str
    reader_id: str
    queue: list[PoolImage]
    cursor: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)
    # image_id -> likert, for idempotent retries
    scored: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.cursor >= len(self.queue)


class ImagePool:
    """Real and synthesized slices keyed by opaque random image ids."""

    def __init__(self, rng: np.random.Generator | None = None):
        self._rng = rng or np.random.default_rng()
        self._images: dict[str, PoolImage] = {}

    def add(self, truth_label: TruthLabel, pixels_hu: np.ndarray) -> str:
        image_id = secrets.token_hex(16)
        self._images[image_id] = PoolImage(image_id, truth_label, np.asarray(pixels_hu))
        return image_id

    def get(self, image_id: str) -> PoolImage:
        return self._images[image_id]

    def sample(self, real: int, synthesized: int, seed: int) -> list[PoolImage]:
        by_label = {TruthLabel.REAL: [], TruthLabel.SYNTHESIZED: []}
        for img in self._images.values():
            by_label[img.truth_label].append(img)
        for label in by_label:
            by_label[label].sort(key=lambda im: im.image_id)
        want = {TruthLabel.REAL: real, TruthLabel.SYNTHESIZED: synthesized}
        for label, n in want.items():
            if n > len(by_label[label]):
                raise ConfigError(
                    f"pool has {len(by_label[label])} {label.value} images, need {n}"
                )
        rng = np.random.default_rng(seed)
        queue = []
        for label, n in want.items():
            picks = rng.permutation(len(by_label[label]))[:n]
            queue.extend(by_label[label][i] for i in picks)
        order = rng.permutation(len(queue))
        return [queue[i] for i in order]


def render_png(pixels_hu: np.ndarray, window: WindowSpec = WindowSpec()) -> bytes:
    """Fixed-window 8-bit grayscale PNG so every reader sees one presentation."""
    unit = window_to_unit(pixels_hu, window)
    raster = np.round(unit * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(raster, mode="L").save(buf, format="PNG")
    return buf.getvalue()


class CreateSessionBody(BaseModel):
    reader_id: str
    real: int = Field(ge=1)
    synthesized: int = Field(ge=1)
    seed: int = 0


class ScoreBody(BaseModel):
    image_id: str
    likert: int


class StudyService:
    def __init__(self, pool: ImagePool, log_path: str | Path):
        self.pool = pool
        self.log_path = Path(log_path)
        self.sessions: dict[str, Session] = {}
        self._log_lock = threading.Lock()
        self._records: list[StudyRecord] = []
        self._replay_log()

    def _replay_log(self) -> None:
        if not self.log_path.exists():
            return
        with open(self.log_path) as fp:
            for line in fp:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                self._records.append(
                    StudyRecord(
                        image_id=obj["image_id"],
                        truth_label=TruthLabel(obj["truth_label"]),
                        reader_id=obj["reader_id"],
                        likert=obj["likert"],
                        timestamp=obj["timestamp"],
                    )
                )

    def _persist(self, record: StudyRecord) -> None:
        # Durable append before the HTTP ack; fsync so a crash cannot drop
        # an acknowledged score.
        with self._log_lock:
            with open(self.log_path, "a") as fp:
                fp.write(json.dumps({
                    "image_id": record.image_id,
                    "truth_label": record.truth_label.value,
                    "reader_id": record.reader_id,
                    "likert": record.likert,
                    "timestamp": record.timestamp,
                }) + "\n")
                fp.flush()
                import os
                os.fsync(fp.fileno())
            self._records.append(record)

    def create_session(self, body: CreateSessionBody) -> dict:
        try:
            queue = self.pool.sample(body.real, body.synthesized, body.seed)
        except ConfigError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        session = Session(secrets.token_hex(16), body.reader_id, queue)
        self.sessions[session.session_id] = session
        return {
            "session_id": session.session_id,
            "reader_id": session.reader_id,
            "total": len(queue),
            "cursor": 0,
            "status": "active",
        }

    def _session(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return session

    def next_image(self, session_id: str) -> dict:
        session = self._session(session_id)
        with session.lock:
            if session.complete:
                return {"done": True, "cursor": session.cursor, "total": len(session.queue)}
            item = session.queue[session.cursor]
            return {
                "done": False,
                "image_id": item.image_id,
                "image": base64.b64encode(render_png(item.pixels_hu)).decode(),
                "cursor": session.cursor,
                "total": len(session.queue),
            }

    def submit_score(self, session_id: str, body: ScoreBody) -> dict:
        if body.likert not in (1, 2, 3, 4):
            raise HTTPException(status_code=422, detail="likert score must be 1-4")
        session = self._session(session_id)
        with session.lock:
            if body.image_id in session.scored:
                if session.scored[body.image_id] != body.likert:
                    raise HTTPException(status_code=409,
                                        detail="image already scored with a different value")
                return self._progress(session)  # idempotent retry
            if session.complete:
                raise HTTPException(status_code=409, detail="session complete")
            current = session.queue[session.cursor]
            if body.image_id != current.image_id:
                raise HTTPException(status_code=409,
                                    detail="image_id is not the current queue item")
            record = StudyRecord(
                image_id=current.image_id,
                truth_label=current.truth_label,
                reader_id=session.reader_id,
                likert=body.likert,
                timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat(),
            )
            self._persist(record)
            session.scored[body.image_id] = body.likert
            session.cursor += 1
            return self._progress(session)

    @staticmethod
    def _progress(session: Session) -> dict:
        return {
            "ok": True,
            "cursor": session.cursor,
            "total": len(session.queue),
            "status": "complete" if session.complete else "active",
        }

    def report(self, session_ids: list[str]) -> dict:
        incomplete = []
        keys = set()
        for sid in session_ids:
            session = self._session(sid)
            if not session.complete:
                incomplete.append({"session_id": sid,
                                   "scored": session.cursor,
                                   "total": len(session.queue)})
            keys.update((img.image_id, session.reader_id) for img in session.queue)
        if incomplete:
            raise HTTPException(status_code=409, detail={"incomplete": incomplete})
        records = [r for r in self._records if (r.image_id, r.reader_id) in keys]
        return study_report(records)


def create_app(pool: ImagePool, log_path: str | Path) -> FastAPI:
    service = StudyService(pool, log_path)
    app = FastAPI(title="reader-study")
    app.state.service = service

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        return service.create_session(body)

    @app.get("/sessions/{session_id}/next")
    def next_image(session_id: str):
        return service.next_image(session_id)

    @app.post("/sessions/{session_id}/scores")
    def submit_score(session_id: str, body: ScoreBody):
        return service.submit_score(session_id, body)

    @app.get("/report")
    def report(sessions: str):
        return service.report([s for s in sessions.split(",") if s])

    return app
