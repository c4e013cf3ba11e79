"""Sleep-session HTTP service: idempotent ingestion, blobs, analytics.

Storage is an append-only JSON-Lines log per session plus a session
registry, all fsynced before a 2xx goes out, so a crash never loses an
acknowledged event and a restart rebuilds state by rescanning the files.
No database, everything greppable.
"""

from __future__ import annotations

import json
import os
import re
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .audio import decode_wav
from .errors import FormatError
from .gateway import EVENT_TYPES

_HOUR_MS = 3_600_000


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


# --- analytics (pure functions over stored events) -----------------------


def reconstruct_episodes(events: list[dict]) -> list[tuple[int, int]]:
    """Snore episodes from summary events, in stream time.

    An episode opens at a summary whose class is snoring and closes at the
    next summary whose class is non-snoring; an episode still open at the
    end of the log closes at the last event timestamp seen.
    """
    episodes = []
    open_start = None
    last_ts = None
    for event in events:
        last_ts = event["timestamp_ms"] if last_ts is None else max(last_ts, event["timestamp_ms"])
        if event["type"] != "activity_summary":
            continue
        klass = event["payload"]["inferred_class"]
        start = event["payload"]["window_start_ms"]
        if klass == "snoring" and open_start is None:
            open_start = start
        elif klass == "non_snoring" and open_start is not None:
            episodes.append((open_start, start))
            open_start = None
    if open_start is not None and last_ts is not None and last_ts > open_start:
        episodes.append((open_start, last_ts))
    return episodes


def compute_summary(events: list[dict]) -> dict:
    """Fold the event log into the session summary.

    Duration is the observed monitoring span (first to last event
    timestamp), which shares the stream clock the episode timestamps use.
    """
    if not events:
        raise HttpError(422, "session has no events")
    timestamps = [e["timestamp_ms"] for e in events]
    t0, t1 = min(timestamps), max(timestamps)
    duration_min = (t1 - t0) / 60_000

    episodes = reconstruct_episodes(events)
    snore_ms = sum(end - start for start, end in episodes)
    snore_minutes = snore_ms / 60_000

    env_sums: dict[str, list[float]] = {}
    for event in events:
        if event["type"] == "environment":
            env_sums.setdefault(event["payload"]["kind"], []).append(event["payload"]["value"])
    env_means = {
        "temperature_c": None,
        "humidity_pct": None,
        "pressure_pa": None,
    }
    key_map = {"temperature": "temperature_c", "humidity": "humidity_pct", "pressure": "pressure_pa"}
    for kind, values in env_sums.items():
        env_means[key_map[kind]] = sum(values) / len(values)

    n_hours = max(1, -(-(t1 - t0) // _HOUR_MS)) if t1 > t0 else 1
    histogram = [0] * n_hours
    for start, _ in episodes:
        histogram[min((start - t0) // _HOUR_MS, n_hours - 1)] += 1

    return {
        "duration_min": duration_min,
        "episode_count": len(episodes),
        "snore_minutes": snore_minutes,
        "snore_fraction": (snore_minutes / duration_min) if duration_min > 0 else 0.0,
        "mean_episode_s": (snore_ms / 1000 / len(episodes)) if episodes else 0.0,
        "env_means": env_means,
        "hourly_snore_histogram": histogram,
    }


def least_squares_slope(xs: list[float], ys: list[float]) -> float:
    """Ordinary least-squares slope; degenerate series give 0 by definition."""
    if len(xs) < 2:
        return 0.0
    x_mean = sum(xs) / len(xs)
    y_mean = sum(ys) / len(ys)
    denom = sum((x - x_mean) ** 2 for x in xs)
    if denom == 0:
        return 0.0
    return sum((x - x_mean) * (y - y_mean) for x, y in zip(xs, ys)) / denom


# --- storage --------------------------------------------------------------


def _append_fsync(path: Path, lines: list[str]) -> None:
    with open(path, "a") as fh:
        for line in lines:
            fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _scan_jsonl(path: Path) -> list[dict]:
    """Read a JSONL file, tolerating one torn line at the tail."""
    rows = []
    if not path.exists():
        return rows
    with open(path) as fh:
        for line in fh:
            try:
                rows.append(json.loads(line))
            except ValueError:
                continue
    return rows


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class SessionStore:
    """Durable session/event/audio store under one data directory."""

    def __init__(self, data_dir):
        self.dir = Path(data_dir)
        (self.dir / "events").mkdir(parents=True, exist_ok=True)
        (self.dir / "audio").mkdir(parents=True, exist_ok=True)
        self.sessions_path = self.dir / "sessions.jsonl"
        self.audio_index_path = self.dir / "audio.jsonl"
        self._registry_lock = threading.Lock()
        self._session_locks: dict[str, threading.Lock] = {}
        self.sessions: dict[str, dict] = {}
        self.audio_index: dict[str, dict] = {}
        self._events: dict[str, list[dict]] = {}
        self._event_keys: dict[str, dict[int, str]] = {}
        self._load()

    def _load(self) -> None:
        for row in _scan_jsonl(self.sessions_path):
            if row.get("op") == "create":
                self.sessions[row["session_id"]] = {
                    "session_id": row["session_id"],
                    "device_id": row["device_id"],
                    "started_at": row["started_at"],
                    "ended_at": None,
                    "status": "open",
                }
            elif row.get("op") == "close" and row["session_id"] in self.sessions:
                self.sessions[row["session_id"]]["status"] = "closed"
                self.sessions[row["session_id"]]["ended_at"] = row["ended_at"]
        for row in _scan_jsonl(self.audio_index_path):
            self.audio_index[row["audio_id"]] = row

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._session_locks.setdefault(session_id, threading.Lock())

    def _session(self, session_id: str) -> dict:
        session = self.sessions.get(session_id)
        if session is None:
            raise HttpError(404, f"unknown session {session_id}")
        return session

    def _events_for(self, session_id: str) -> tuple[list[dict], dict[int, str]]:
        if session_id not in self._events:
            rows = _scan_jsonl(self.dir / "events" / f"{session_id}.jsonl")
            self._events[session_id] = rows
            self._event_keys[session_id] = {row["seq"]: _canonical(row) for row in rows}
        return self._events[session_id], self._event_keys[session_id]

    # -- lifecycle --

    def create_session(self, device_id: str, started_at: int) -> str:
        session_id = uuid.uuid4().hex[:16]
        with self._registry_lock:
            _append_fsync(
                self.sessions_path,
                [_canonical({"op": "create", "session_id": session_id, "device_id": device_id, "started_at": started_at})],
            )
            self.sessions[session_id] = {
                "session_id": session_id,
                "device_id": device_id,
                "started_at": started_at,
                "ended_at": None,
                "status": "open",
            }
        return session_id

    def end_session(self, session_id: str, ended_at: int) -> dict:
        with self._lock_for(session_id):
            session = self._session(session_id)
            if session["status"] == "closed":
                raise HttpError(409, "session already closed")
            with self._registry_lock:
                _append_fsync(
                    self.sessions_path,
                    [_canonical({"op": "close", "session_id": session_id, "ended_at": ended_at})],
                )
            session["status"] = "closed"
            session["ended_at"] = ended_at
            return dict(session)

    # -- events --

    @staticmethod
    def _validate_event(event) -> None:
        if not isinstance(event, dict):
            raise HttpError(400, "event must be an object")
        required = {"device_id": str, "seq": int, "type": str, "timestamp_ms": int, "payload": dict}
        for key, kind in required.items():
            value = event.get(key)
            if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                raise HttpError(400, f"event field {key!r} missing or wrong type")
        if event["type"] not in EVENT_TYPES:
            raise HttpError(400, f"unknown event type {event['type']!r}")
        if event["seq"] < 0:
            raise HttpError(400, "seq must be >= 0")

    def append_events(self, session_id: str, events: list) -> tuple[int, int]:
        """Idempotent batch ingestion keyed by (session, seq).

        The whole batch is validated first and persisted atomically; a seq
        resent with a different body rejects the batch with 409.
        """
        if not isinstance(events, list):
            raise HttpError(400, "events must be a list")
        with self._lock_for(session_id):
            session = self._session(session_id)
            if session["status"] == "closed":
                raise HttpError(409, "session is closed")
            rows, keys = self._events_for(session_id)
            accepted, duplicates = [], 0
            seen_in_batch: dict[int, str] = {}
            for event in events:
                self._validate_event(event)
                canonical = _canonical(event)
                seq = event["seq"]
                existing = keys.get(seq, seen_in_batch.get(seq))
                if existing is not None:
                    if existing != canonical:
                        raise HttpError(409, f"seq {seq} already stored with a different body")
                    duplicates += 1
                    continue
                seen_in_batch[seq] = canonical
                accepted.append(event)
            if accepted:
                _append_fsync(
                    self.dir / "events" / f"{session_id}.jsonl",
                    [_canonical(e) for e in accepted],
                )
                rows.extend(accepted)
                for event in accepted:
                    keys[event["seq"]] = _canonical(event)
            return len(accepted), duplicates

    def events(self, session_id: str) -> list[dict]:
        with self._lock_for(session_id):
            self._session(session_id)
            rows, _ = self._events_for(session_id)
            return sorted(rows, key=lambda e: e["seq"])

    # -- audio --

    def store_audio(self, session_id: str, wav_bytes: bytes, start_ms: int, end_ms: int) -> str:
        if end_ms <= start_ms:
            raise HttpError(400, "end_ms must exceed start_ms")
        try:
            decode_wav(wav_bytes, name="<upload>")
        except FormatError as exc:
            raise HttpError(400, f"invalid WAV: {exc}") from exc
        with self._lock_for(session_id):
            self._session(session_id)
            audio_id = uuid.uuid4().hex[:16]
            blob_path = self.dir / "audio" / f"{audio_id}.wav"
            with open(blob_path, "wb") as fh:
                fh.write(wav_bytes)
                fh.flush()
                os.fsync(fh.fileno())
            row = {
                "audio_id": audio_id,
                "session_id": session_id,
                "start_ms": start_ms,
                "end_ms": end_ms,
                "bytes": len(wav_bytes),
            }
            with self._registry_lock:
                _append_fsync(self.audio_index_path, [_canonical(row)])
                self.audio_index[audio_id] = row
            return audio_id

    def audio_blob(self, audio_id: str) -> bytes:
        row = self.audio_index.get(audio_id)
        if row is None:
            raise HttpError(404, f"unknown audio {audio_id}")
        return (self.dir / "audio" / f"{audio_id}.wav").read_bytes()

    # -- analytics --

    def summary(self, session_id: str) -> dict:
        with self._lock_for(session_id):
            session = self._session(session_id)
            rows, _ = self._events_for(session_id)
            events = sorted(rows, key=lambda e: e["seq"])
        body = compute_summary(events)
        body["session_id"] = session_id
        body["device_id"] = session["device_id"]
        body["status"] = session["status"]
        return body

    def trends(self, device_id: str, date_from: str | None, date_to: str | None) -> dict:
        series = []
        for session in sorted(self.sessions.values(), key=lambda s: s["started_at"]):
            if session["device_id"] != device_id:
                continue
            date = datetime.fromtimestamp(session["started_at"] / 1000, tz=timezone.utc).date()
            if date_from and date.isoformat() < date_from:
                continue
            if date_to and date.isoformat() > date_to:
                continue
            try:
                summary = self.summary(session["session_id"])
            except HttpError:
                continue  # sessions without events carry no analytics
            series.append(
                {
                    "date": date.isoformat(),
                    "session_id": session["session_id"],
                    "snore_minutes": summary["snore_minutes"],
                    "episode_count": summary["episode_count"],
                }
            )
        series.sort(key=lambda row: row["date"])
        xs = [datetime.fromisoformat(row["date"]).toordinal() for row in series]
        ys = [row["snore_minutes"] for row in series]
        return {
            "device_id": device_id,
            "window": {"from": date_from, "to": date_to},
            "series": series,
            "slope_min_per_night": least_squares_slope([float(x) for x in xs], ys),
        }


# --- HTTP layer ------------------------------------------------------------

_ROUTES = [
    ("POST", re.compile(r"^/api/v1/sessions$"), "create_session"),
    ("POST", re.compile(r"^/api/v1/sessions/([^/]+)/events$"), "post_events"),
    ("POST", re.compile(r"^/api/v1/sessions/([^/]+)/audio$"), "post_audio"),
    ("POST", re.compile(r"^/api/v1/sessions/([^/]+)/end$"), "end_session"),
    ("GET", re.compile(r"^/api/v1/sessions/([^/]+)/summary$"), "get_summary"),
    ("GET", re.compile(r"^/api/v1/sessions/([^/]+)/events$"), "get_events"),
    ("GET", re.compile(r"^/api/v1/trends$"), "get_trends"),
    ("GET", re.compile(r"^/audio/([^/]+)$"), "get_audio"),
    ("GET", re.compile(r"^/healthz$"), "healthz"),
]


def _now_ms() -> int:
    return int(datetime.now(tz=timezone.utc).timestamp() * 1000)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "snorewatch"

    # the ThreadingHTTPServer subclass carries .store and .token

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send_json(self, status: int, body: dict) -> None:
        raw = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0))
        return self.rfile.read(length) if length else b""

    def _read_json(self) -> dict:
        try:
            body = json.loads(self._read_body() or b"null")
        except ValueError as exc:
            raise HttpError(400, f"malformed JSON: {exc}") from exc
        if not isinstance(body, dict):
            raise HttpError(400, "body must be a JSON object")
        return body

    def _authorized(self, path: str) -> bool:
        token = self.server.token
        if not token or not path.startswith("/api/"):
            return True
        return self.headers.get("Authorization") == f"Bearer {token}"

    def _dispatch(self, method: str) -> None:
        parsed = urlparse(self.path)
        try:
            if not self._authorized(parsed.path):
                raise HttpError(401, "missing or wrong bearer token")
            for verb, pattern, name in _ROUTES:
                if verb != method:
                    continue
                match = pattern.match(parsed.path)
                if match:
                    getattr(self, "_h_" + name)(parse_qs(parsed.query), *match.groups())
                    return
            raise HttpError(404, f"no route for {method} {parsed.path}")
        except HttpError as exc:
            self._send_json(exc.status, {"error": exc.message})
        except Exception as exc:  # pragma: no cover - defensive
            self._send_json(500, {"error": f"internal: {exc}"})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    # -- handlers --

    def _h_healthz(self, query):
        raw = b"ok"
        self.send_response(200)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _h_create_session(self, query):
        body = self._read_json()
        device_id = body.get("device_id")
        started_at = body.get("started_at")
        if not isinstance(device_id, str) or not device_id:
            raise HttpError(400, "device_id required")
        if not isinstance(started_at, int) or isinstance(started_at, bool):
            raise HttpError(400, "started_at (epoch ms) required")
        session_id = self.server.store.create_session(device_id, started_at)
        self._send_json(201, {"session_id": session_id})

    def _h_post_events(self, query, session_id):
        body = self._read_json()
        if "events" not in body:
            raise HttpError(400, "body must carry an 'events' list")
        accepted, duplicates = self.server.store.append_events(session_id, body["events"])
        self._send_json(200, {"accepted": accepted, "duplicates": duplicates})

    def _h_post_audio(self, query, session_id):
        try:
            start_ms = int(query["start_ms"][0])
            end_ms = int(query["end_ms"][0])
        except (KeyError, ValueError) as exc:
            raise HttpError(400, "start_ms and end_ms query params required") from exc
        audio_id = self.server.store.store_audio(session_id, self._read_body(), start_ms, end_ms)
        self._send_json(201, {"audio_id": audio_id})

    def _h_end_session(self, query, session_id):
        session = self.server.store.end_session(session_id, _now_ms())
        self._send_json(200, session)

    def _h_get_summary(self, query, session_id):
        self._send_json(200, self.server.store.summary(session_id))

    def _h_get_events(self, query, session_id):
        self._send_json(200, {"events": self.server.store.events(session_id)})

    def _h_get_trends(self, query):
        device_id = query.get("device_id", [None])[0]
        if not device_id:
            raise HttpError(400, "device_id query param required")
        date_from = query.get("from", [None])[0]
        date_to = query.get("to", [None])[0]
        self._send_json(200, self.server.store.trends(device_id, date_from, date_to))

    def _h_get_audio(self, query, audio_id):
        blob = self.server.store.audio_blob(audio_id)
        self.send_response(200)
        self.send_header("Content-Type", "audio/wav")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)


class CloudServer(ThreadingHTTPServer):
    """HTTP server bound to a store; port 0 picks a free port."""

    daemon_threads = True

    def __init__(self, port: int, data_dir, token: str | None = None, host: str = "127.0.0.1"):
        self.store = SessionStore(data_dir)
        self.token = token
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
