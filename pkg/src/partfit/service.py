"""HTTP facade for interactive repair sessions.

JSON over HTTP, one engine per process holding the immutable model and
index snapshots. Sessions are persisted as append-only event logs that
replay deterministically on restart, so a restarted service reproduces the
exact rankings it served before. Mutations go through optimistic
concurrency (revision numbers); GETs never change state.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import uuid
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import geometry as geo
from . import relnet as rn
from . import retrieval as rv
from .dataprep import DatasetPair, subsample
from .encoder import encode_part
from .errors import (
    InvalidChoiceError,
    InvalidInputError,
    NotFoundError,
    PartFitError,
    StaleRevisionError,
    UnknownClassError,
)

log = logging.getLogger(__name__)

TRANSPORT_POINT_CAP = 4096
DEFAULT_K = 10


class SlotPayload(BaseModel):
    centroid: list[float] = Field(min_length=3, max_length=3)
    axis: Optional[list[float]] = Field(default=None, min_length=3, max_length=3)
    scale: Optional[float] = None


class PartPayload(BaseModel):
    points: list[list[float]] = Field(min_length=1)


class CreateSessionPayload(BaseModel):
    class_id: int
    parts: list[PartPayload] = Field(min_length=1)
    slots: list[SlotPayload] = Field(min_length=1)


class SelectionPayload(BaseModel):
    part_id: int
    revision: int


class SessionRecord:
    def __init__(self, session: rv.Session, session_id: str, query_points: list):
        self.session = session
        self.session_id = session_id
        self.query_points = query_points  # decimated original-frame clouds
        self.revision = 1

    def bump(self):
        self.revision += 1


class Engine:
    """Shared immutable model/index plus the live session table."""

    def __init__(self, bundle: rn.ModelBundle, index: rv.WarehouseIndex,
                 dataset: DatasetPair, session_dir=None, default_k: int = DEFAULT_K):
        expected = rn.encoder_fingerprint(bundle.enc_params)
        if index.encoder_hash != expected:
            raise InvalidInputError(
                f"index encoder hash {index.encoder_hash[:12]}... does not match "
                f"model encoder hash {expected[:12]}...")
        self.bundle = bundle
        self.index = index
        self.dataset = dataset
        self.parts_by_id = {p.part_id: p for p in dataset.warehouse}
        self.sessions: dict[str, SessionRecord] = {}
        self.session_dir = Path(session_dir) if session_dir else None
        self._lock = threading.Lock()
        if self.session_dir:
            self.session_dir.mkdir(parents=True, exist_ok=True)
            self._restore_sessions()

    # -- persistence --------------------------------------------------------

    def _log_path(self, session_id: str) -> Optional[Path]:
        return self.session_dir / f"{session_id}.jsonl" if self.session_dir else None

    def _append_event(self, session_id: str, event: dict):
        path = self._log_path(session_id)
        if path is None:
            return
        with open(path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _restore_sessions(self):
        for path in sorted(self.session_dir.glob("*.jsonl")):
            session_id = path.stem
            try:
                self.replay_log(path, session_id=session_id)
            except PartFitError as exc:
                log.warning("could not restore session %s: %s", session_id, exc)

    def replay_log(self, path, session_id: Optional[str] = None) -> str:
        """Rebuild one session from its event log; rankings are recomputed,
        so restored state matches what was served."""
        events = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        if not events or events[0].get("event") != "create":
            raise InvalidInputError(f"log {path} does not start with a create event")
        sid = session_id or events[0]["session_id"]
        record = self._create_record(CreateSessionPayload(**events[0]["payload"]),
                                     session_id=sid, persist=False)
        for event in events[1:]:
            if event.get("event") != "choose":
                raise InvalidInputError(f"unknown event {event.get('event')!r}")
            rv.session_candidates(record.session, self.index, self.bundle, event["k"])
            rv.advance_session(record.session, event["part_id"], self.index)
            record.bump()
        return sid

    # -- validation ---------------------------------------------------------

    def _validate_create(self, payload: CreateSessionPayload):
        if not 0 <= payload.class_id < self.bundle.num_classes:
            raise UnknownClassError(f"unknown class id {payload.class_id}")
        for i, part in enumerate(payload.parts):
            pts = np.asarray(part.points, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise InvalidInputError(f"parts[{i}].points must be Nx3")
            if not np.isfinite(pts).all():
                raise InvalidInputError(f"parts[{i}].points contains non-finite values")
        for i, slot in enumerate(payload.slots):
            if not np.isfinite(np.asarray(slot.centroid, dtype=np.float64)).all():
                raise InvalidInputError(f"slots[{i}].centroid contains non-finite values")

    # -- operations ---------------------------------------------------------

    def _create_record(self, payload: CreateSessionPayload, session_id=None,
                       persist=True) -> SessionRecord:
        self._validate_create(payload)
        parts = []
        query_points = []
        for part in payload.parts:
            raw = np.asarray(part.points, dtype=np.float64)
            cloud, pose = geo.normalize_part(raw)
            feature = encode_part(cloud, self.bundle.enc_params).astype(np.float32)
            parts.append(rv.ContextPart(feature=feature, centroid=pose.centroid,
                                        scale=pose.scale, part_id=None, part_label=None))
            query_points.append(subsample(raw, TRANSPORT_POINT_CAP).tolist())
        slots = [rv.SlotTarget(centroid=s.centroid, axis=s.axis, scale=s.scale)
                 for s in payload.slots]
        session = rv.Session(object_class=payload.class_id, parts=parts, slots=slots)
        sid = session_id or uuid.uuid4().hex
        record = SessionRecord(session, sid, query_points)
        self.sessions[sid] = record
        if persist:
            self._append_event(sid, {"event": "create", "session_id": sid,
                                     "payload": payload.model_dump()})
        return record

    def create_session(self, payload: CreateSessionPayload) -> dict:
        with self._lock:
            record = self._create_record(payload)
            return {"session_id": record.session_id, "revision": record.revision,
                    "completed": record.session.complete}

    def _record(self, session_id: str) -> SessionRecord:
        record = self.sessions.get(session_id)
        if record is None:
            raise NotFoundError(f"unknown session {session_id}")
        return record

    def _part_points_for_transport(self, part) -> list:
        placed = geo.denormalize_part(part.cloud, part.pose)
        return subsample(placed, TRANSPORT_POINT_CAP).tolist()

    def session_state(self, session_id: str) -> dict:
        with self._lock:
            record = self._record(session_id)
            session = record.session
            n_query = len(session.parts) - len(session.history)
            parts = []
            for i, part in enumerate(session.parts):
                entry = {
                    "part_id": part.part_id,
                    "source": "query" if i < n_query else "chosen",
                    "part_label": part.part_label,
                    "centroid": np.asarray(part.centroid).tolist(),
                    "scale": float(part.scale),
                }
                if i < n_query:
                    entry["points"] = record.query_points[i]
                else:
                    choice = session.history[i - n_query]
                    donor = self.parts_by_id.get(part.part_id)
                    if donor is not None:
                        placed = rv.place_part(donor, session.slots[choice["slot"]])
                        entry["points"] = subsample(placed, TRANSPORT_POINT_CAP).tolist()
                        entry["part_label_name"] = self.dataset.part_label_names[donor.part_label]
                parts.append(entry)
            return {
                "session_id": session_id,
                "revision": record.revision,
                "class_id": session.object_class,
                "class_name": self.bundle.class_names[session.object_class],
                "completed": session.complete,
                "active_slot": session.active_slot,
                "open_slots": session.open_slots,
                "slots": [
                    {"centroid": np.asarray(s.centroid).tolist(),
                     "axis": None if s.axis is None else np.asarray(s.axis).tolist(),
                     "scale": s.scale,
                     "filled": bool(session.filled[i])}
                    for i, s in enumerate(session.slots)
                ],
                "parts": parts,
                "history": list(session.history),
            }

    def candidates(self, session_id: str, k: int) -> dict:
        with self._lock:
            record = self._record(session_id)
            if record.session.complete:
                return {"session_id": session_id, "revision": record.revision,
                        "completed": True, "candidates": []}
            ranking = rv.session_candidates(record.session, self.index, self.bundle, k)
            out = []
            for cand in ranking:
                slot = record.session.slots[cand.slot]
                donor_scale = float(self.index.scales[self.index.row_of(cand.part_id)])
                out.append({
                    "part_id": cand.part_id,
                    "rank": cand.rank,
                    "slot": cand.slot,
                    "suitability": cand.suitability,
                    "logit": cand.logit,
                    "part_label": cand.part_label,
                    "part_label_name": self.dataset.part_label_names[cand.part_label],
                    "pose": {
                        "centroid": np.asarray(slot.centroid).tolist(),
                        "axis": None if slot.axis is None else np.asarray(slot.axis).tolist(),
                        "scale": slot.scale if slot.scale is not None else donor_scale,
                    },
                })
            return {"session_id": session_id, "revision": record.revision,
                    "completed": False, "candidates": out}

    def choose(self, session_id: str, selection: SelectionPayload) -> dict:
        with self._lock:
            record = self._record(session_id)
            if selection.revision != record.revision:
                raise StaleRevisionError(
                    f"revision {selection.revision} is stale (current {record.revision})")
            if record.session.complete:
                raise InvalidChoiceError("session is already complete")
            shown = record.session.last_shown
            if not shown:
                raise InvalidChoiceError("no ranking has been served for this slot")
            rv.advance_session(record.session, selection.part_id, self.index)
            record.bump()
            self._append_event(session_id, {"event": "choose", "session_id": session_id,
                                            "part_id": selection.part_id,
                                            "k": len(shown),
                                            "revision": record.revision})
            return {"session_id": session_id, "revision": record.revision,
                    "completed": record.session.complete,
                    "parts": len(record.session.parts),
                    "active_slot": record.session.active_slot}

    def part_geometry(self, part_id: int) -> dict:
        with self._lock:
            part = self.parts_by_id.get(part_id)
            if part is None:
                raise NotFoundError(f"unknown part {part_id}")
            return {
                "part_id": part.part_id,
                "object_class": part.object_class,
                "part_label": part.part_label,
                "part_label_name": self.dataset.part_label_names[part.part_label],
                "points": subsample(part.cloud, TRANSPORT_POINT_CAP).tolist(),
                "pose": {
                    "centroid": part.pose.centroid.tolist(),
                    "scale": part.pose.scale,
                    "axis": part.pose.axis.tolist(),
                    "axis_kind": int(part.pose.axis_kind),
                },
            }

    def state_hash(self) -> str:
        """Digest of all observable session state; GETs must not change it."""
        with self._lock:
            h = hashlib.sha256()
            for sid in sorted(self.sessions):
                record = self.sessions[sid]
                h.update(sid.encode())
                h.update(str(record.revision).encode())
                h.update(str(record.session.filled).encode())
                h.update(str(len(record.session.parts)).encode())
                for entry in record.session.history:
                    h.update(json.dumps(entry, sort_keys=True).encode())
            return h.hexdigest()


def _error_response(status: int, code: str, message: str, field: str | None = None):
    body = {"code": code, "message": message}
    if field:
        body["field"] = field
    return JSONResponse(status_code=status, content=body)


def create_app(engine: Engine) -> FastAPI:
    app = FastAPI(title="partfit service", version="1")

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        err = exc.errors()[0] if exc.errors() else {}
        loc = ".".join(str(x) for x in err.get("loc", []) if x != "body")
        return _error_response(400, "validation", err.get("msg", "invalid payload"), loc or None)

    @app.exception_handler(PartFitError)
    async def partfit_handler(request: Request, exc: PartFitError):
        if isinstance(exc, NotFoundError):
            return _error_response(404, "not_found", str(exc))
        if isinstance(exc, UnknownClassError):
            return _error_response(422, "unknown_class", str(exc))
        if isinstance(exc, StaleRevisionError):
            return _error_response(409, "stale_revision", str(exc))
        if isinstance(exc, InvalidChoiceError):
            return _error_response(422, "invalid_choice", str(exc))
        if isinstance(exc, InvalidInputError):
            return _error_response(400, "invalid_input", str(exc))
        return _error_response(500, "internal", str(exc))

    @app.post("/v1/sessions", status_code=201)
    async def create_session(payload: CreateSessionPayload):
        return engine.create_session(payload)

    @app.get("/v1/sessions/{session_id}")
    async def get_session(session_id: str):
        return engine.session_state(session_id)

    @app.get("/v1/sessions/{session_id}/candidates")
    async def get_candidates(session_id: str, k: int = DEFAULT_K):
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        return engine.candidates(session_id, k)

    @app.post("/v1/sessions/{session_id}/selection")
    async def choose(session_id: str, selection: SelectionPayload):
        return engine.choose(session_id, selection)

    @app.get("/v1/warehouse/parts/{part_id}")
    async def part_geometry(part_id: int):
        return engine.part_geometry(part_id)

    return app
