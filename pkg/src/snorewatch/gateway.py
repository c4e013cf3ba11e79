"""Relay role: decode link messages into JSON events and upload them.

The gateway assigns its own monotonic event sequence (link frames may be
lost), journals every event to a spool before upload, posts batches with
exponential backoff, and keeps the recent-audio ring so completed snore
episodes can be clipped with padding and shipped to the audio endpoint.
Delivery is at-least-once; the server deduplicates on (session, seq).
"""

from __future__ import annotations

import json
import os
import queue
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .audio import AudioClip, RecentAudioRing, encode_wav
from .errors import EvictedError, NetworkError
from .link import (
    ActivityInstantaneous,
    ActivitySummary,
    Alerting,
    CharacteristicMessage,
    Environment,
    Label,
    SimulatedLink,
)

EVENT_TYPES = ("activity_instantaneous", "activity_summary", "environment", "alerting")


@dataclass(frozen=True)
class GatewayEvent:
    device_id: str
    seq: int
    type: str
    timestamp_ms: int
    payload: dict

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "seq": self.seq,
            "type": self.type,
            "timestamp_ms": self.timestamp_ms,
            "payload": self.payload,
        }


def message_to_event(msg: CharacteristicMessage, device_id: str, seq: int) -> GatewayEvent:
    """Total, deterministic mapping from a decoded message to a JSON event."""
    if isinstance(msg, ActivityInstantaneous):
        return GatewayEvent(
            device_id,
            seq,
            "activity_instantaneous",
            msg.timestamp_ms,
            {"p_snore": msg.p_snore_bp / 10000, "p_non_snore": msg.p_non_snore_bp / 10000},
        )
    if isinstance(msg, ActivitySummary):
        return GatewayEvent(
            device_id,
            seq,
            "activity_summary",
            msg.window_start_ms,
            {
                "window_start_ms": msg.window_start_ms,
                "window_end_ms": msg.window_end_ms,
                "inferred_class": msg.inferred_class.value,
                "episode_count": msg.episode_count,
            },
        )
    if isinstance(msg, Environment):
        return GatewayEvent(
            device_id,
            seq,
            "environment",
            msg.timestamp_ms,
            {"kind": msg.kind.value, "value": msg.value},
        )
    if isinstance(msg, Alerting):
        return GatewayEvent(
            device_id,
            seq,
            "alerting",
            msg.timestamp_ms,
            {"active": msg.active, "intensity": round(msg.intensity_byte / 255, 3)},
        )
    raise TypeError(f"not a characteristic message: {msg!r}")


# --- spool ----------------------------------------------------------------


class Spool:
    """Durable JSON-Lines journal with an acked-through watermark.

    Events are appended before upload; the watermark moves only after the
    server acknowledged a batch, so replay after a crash re-delivers every
    event the server might not have seen.
    """

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.dir / "events.jsonl"
        self.acked_path = self.dir / "acked.json"
        self.quarantine_path = self.dir / "quarantine.jsonl"

    def append(self, events: list[GatewayEvent]) -> None:
        if not events:
            return
        with open(self.journal_path, "a") as fh:
            for event in events:
                fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def acked_through(self) -> int:
        try:
            return json.loads(self.acked_path.read_text())["acked_through_seq"]
        except (OSError, ValueError, KeyError):
            return -1

    def ack(self, seq: int) -> None:
        tmp = self.acked_path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump({"acked_through_seq": seq}, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.acked_path)

    def pending(self) -> list[dict]:
        """Journaled event dicts not yet acknowledged, in seq order."""
        acked = self.acked_through()
        out = []
        if not self.journal_path.exists():
            return out
        with open(self.journal_path) as fh:
            for line in fh:
                try:
                    event = json.loads(line)
                except ValueError:
                    continue  # torn tail write from a crash
                if event["seq"] > acked:
                    out.append(event)
        return out

    def quarantine(self, events: list[dict], reason: str) -> None:
        with open(self.quarantine_path, "a") as fh:
            for event in events:
                fh.write(json.dumps({"reason": reason, "event": event}, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())


# --- HTTP client -----------------------------------------------------------


@dataclass(frozen=True)
class UploadPolicy:
    batch_size: int = 100
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0
    backoff_cap_s: float = 60.0
    max_attempts: int = 25
    jitter_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class FaultInjectingSession:
    """requests.Session proxy that simulates transient 503s, seeded.

    Most injected faults reject the request before it reaches the server;
    a fraction forwards it, drops the response, and reports 503 anyway so
    the retry path exercises server-side deduplication.
    """

    LOST_RESPONSE_SHARE = 0.2

    def __init__(self, session: requests.Session, fault_rate: float, seed: int = 0):
        if not (0.0 <= fault_rate < 1.0):
            raise ValueError("fault_rate must be in [0, 1)")
        self._session = session
        self.fault_rate = fault_rate
        self._rng = random.Random(seed)
        self.injected = 0
        self.lost_responses = 0

    def _fake_503(self) -> requests.Response:
        resp = requests.Response()
        resp.status_code = 503
        resp._content = b'{"error": "injected transient failure"}'
        resp.headers["Content-Type"] = "application/json"
        return resp

    def request(self, method: str, url: str, **kwargs) -> requests.Response:
        if self._rng.random() < self.fault_rate:
            self.injected += 1
            if self._rng.random() < self.LOST_RESPONSE_SHARE:
                self.lost_responses += 1
                self._session.request(method, url, **kwargs).close()
            return self._fake_503()
        return self._session.request(method, url, **kwargs)

    def post(self, url: str, **kwargs) -> requests.Response:
        return self.request("POST", url, **kwargs)

    def get(self, url: str, **kwargs) -> requests.Response:
        return self.request("GET", url, **kwargs)


class CloudClient:
    """Thin client for the sleep-session service."""

    def __init__(self, base_url: str, token: str | None = None, session=None, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.http = session or requests.Session()
        self.timeout = timeout

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def post_json(self, path: str, body: dict, params: dict | None = None) -> requests.Response:
        return self.http.post(
            self.base_url + path,
            data=json.dumps(body),
            params=params,
            headers=self._headers(),
            timeout=self.timeout,
        )

    def post_bytes(self, path: str, body: bytes, params: dict) -> requests.Response:
        headers = self._headers()
        headers["Content-Type"] = "audio/wav"
        return self.http.post(
            self.base_url + path, data=body, params=params, headers=headers, timeout=self.timeout
        )

    def get(self, path: str, params: dict | None = None) -> requests.Response:
        return self.http.get(
            self.base_url + path, params=params, headers=self._headers(), timeout=self.timeout
        )


def _backoff_delays(policy: UploadPolicy, rng: random.Random):
    """Exponential delays (base, x factor, capped) with multiplicative jitter."""
    attempt = 0
    while True:
        nominal = min(policy.backoff_base_s * policy.backoff_factor**attempt, policy.backoff_cap_s)
        yield nominal * (0.5 + rng.random())
        attempt += 1


def request_with_retry(
    send_once,
    policy: UploadPolicy,
    rng: random.Random,
    sleep=time.sleep,
) -> tuple[requests.Response, int]:
    """Run ``send_once`` until a non-5xx response; returns (response, retries).

    Connection errors and 5xx responses retry with backoff; 4xx and 2xx are
    returned to the caller to interpret. Exhausting max_attempts raises
    NetworkError.
    """
    delays = _backoff_delays(policy, rng)
    retries = 0
    for attempt in range(policy.max_attempts):
        try:
            response = send_once()
            if response.status_code < 500:
                return response, retries
        except requests.RequestException:
            pass
        retries += 1
        if attempt < policy.max_attempts - 1:
            sleep(next(delays))
    raise NetworkError(f"gave up after {policy.max_attempts} attempts")


@dataclass
class UploadReport:
    delivered: int = 0
    duplicates: int = 0
    retries: int = 0
    quarantined: int = 0
    requests: int = 0


def batch_upload(
    events: list[dict],
    client: CloudClient,
    session_id: str,
    policy: UploadPolicy | None = None,
    spool: Spool | None = None,
    sleep=time.sleep,
) -> UploadReport:
    """Post events in order in batches of at most ``policy.batch_size``.

    5xx and connection failures retry with seeded exponential backoff;
    non-retryable 4xx quarantines the batch to the spool and moves on.
    Successful batches advance the spool's acked watermark.
    """
    policy = policy or UploadPolicy()
    rng = random.Random(policy.jitter_seed)
    report = UploadReport()
    for start in range(0, len(events), policy.batch_size):
        batch = events[start : start + policy.batch_size]
        response, retries = request_with_retry(
            lambda: client.post_json(f"/api/v1/sessions/{session_id}/events", {"events": batch}),
            policy,
            rng,
            sleep=sleep,
        )
        report.retries += retries
        report.requests += retries + 1
        if 200 <= response.status_code < 300:
            body = response.json()
            report.delivered += body.get("accepted", 0)
            report.duplicates += body.get("duplicates", 0)
            if spool is not None:
                spool.ack(batch[-1]["seq"])
        else:
            reason = f"http {response.status_code}"
            if spool is not None:
                spool.quarantine(batch, reason)
            report.quarantined += len(batch)
    return report


# --- episode audio ----------------------------------------------------------


@dataclass(frozen=True)
class EpisodeClip:
    """Ring extraction around one completed snore episode."""

    episode_start_ms: int
    episode_end_ms: int
    clip_start_ms: int
    clip_end_ms: int
    audio: AudioClip


def clip_episode(
    ring: RecentAudioRing, episode_start_ms: int, episode_end_ms: int, pad_ms: int = 5000
) -> EpisodeClip:
    """Extract [start - pad, end + pad] clamped to the stream and retention.

    Raises EvictedError when the whole padded range has aged out.
    """
    now_ms = ring.total_written_ms
    retained_from_ms = max(0, now_ms - ring.capacity_ms)
    want_from = max(episode_start_ms - pad_ms, 0, retained_from_ms)
    want_to = min(episode_end_ms + pad_ms, now_ms)
    if want_to <= retained_from_ms or want_to <= want_from:
        raise EvictedError(
            f"episode [{episode_start_ms}, {episode_end_ms}] ms no longer in retention"
        )
    return EpisodeClip(
        episode_start_ms=episode_start_ms,
        episode_end_ms=episode_end_ms,
        clip_start_ms=want_from,
        clip_end_ms=want_to,
        audio=ring.extract(want_from, want_to),
    )


# --- gateway ----------------------------------------------------------------


@dataclass
class GatewayStats:
    messages_received: int = 0
    decode_errors: int = 0
    events_emitted: int = 0
    episodes_clipped: int = 0
    episodes_evicted: int = 0
    audio_uploads: int = 0


class Gateway:
    """Collects link messages into events, tracks episodes, uploads.

    ``handle_message``/``feed_audio`` ingest; ``flush_events`` and
    ``upload_episode_audio`` push to the cloud. ``run_threaded`` runs the
    receiver and uploader concurrently over a bounded queue.
    """

    QUEUE_CAPACITY = 10_000

    def __init__(
        self,
        device_id: str,
        client: CloudClient | None = None,
        session_id: str | None = None,
        spool: Spool | None = None,
        policy: UploadPolicy | None = None,
        ring: RecentAudioRing | None = None,
        episode_pad_ms: int = 5000,
        sleep=time.sleep,
    ):
        self.device_id = device_id
        self.client = client
        self.session_id = session_id
        self.spool = spool
        self.policy = policy or UploadPolicy()
        self.ring = ring
        self.episode_pad_ms = episode_pad_ms
        self.sleep = sleep
        self.events: list[GatewayEvent] = []
        self.episodes: list[tuple[int, int]] = []
        self.clips: list[EpisodeClip] = []
        self.stats = GatewayStats()
        self._next_seq = 0
        self._open_episode_start: int | None = None

    def feed_audio(self, samples) -> None:
        if self.ring is not None:
            self.ring.write(samples)

    def handle_message(self, msg: CharacteristicMessage) -> GatewayEvent:
        """Map one decoded message to an event; journal it; track episodes."""
        self.stats.messages_received += 1
        event = message_to_event(msg, self.device_id, self._next_seq)
        self._next_seq += 1
        self.events.append(event)
        self.stats.events_emitted += 1
        if self.spool is not None:
            self.spool.append([event])
        if isinstance(msg, ActivitySummary):
            if msg.inferred_class == Label.SNORING and self._open_episode_start is None:
                self._open_episode_start = msg.window_start_ms
            elif msg.inferred_class == Label.NON_SNORING and self._open_episode_start is not None:
                self._finish_episode(self._open_episode_start, msg.window_start_ms)
                self._open_episode_start = None
        return event

    def _finish_episode(self, start_ms: int, end_ms: int) -> None:
        self.episodes.append((start_ms, end_ms))
        if self.ring is None:
            return
        try:
            self.clips.append(clip_episode(self.ring, start_ms, end_ms, self.episode_pad_ms))
            self.stats.episodes_clipped += 1
        except EvictedError:
            self.stats.episodes_evicted += 1

    def drain_link(self, link: SimulatedLink) -> int:
        """Pull everything currently queued on the link."""
        n = 0
        while (item := link.recv()) is not None:
            self.handle_message(item[1])
            n += 1
        return n

    def flush_events(self) -> UploadReport:
        if self.client is None or self.session_id is None:
            raise RuntimeError("gateway has no cloud client/session")
        return batch_upload(
            [e.to_dict() for e in self.events],
            self.client,
            self.session_id,
            self.policy,
            self.spool,
            sleep=self.sleep,
        )

    def upload_episode_audio(self) -> int:
        """Ship every collected episode clip to the audio endpoint."""
        if self.client is None or self.session_id is None:
            raise RuntimeError("gateway has no cloud client/session")
        rng = random.Random(self.policy.jitter_seed + 1)
        uploaded = 0
        for clip in self.clips[self.stats.audio_uploads :]:
            response, _ = request_with_retry(
                lambda: self.client.post_bytes(
                    f"/api/v1/sessions/{self.session_id}/audio",
                    encode_wav(clip.audio),
                    {"start_ms": clip.clip_start_ms, "end_ms": clip.clip_end_ms},
                ),
                self.policy,
                rng,
                sleep=self.sleep,
            )
            if response.status_code // 100 != 2:
                raise NetworkError(f"audio upload rejected: http {response.status_code}")
            uploaded += 1
        self.stats.audio_uploads += uploaded
        return uploaded

    def run_threaded(self, link: SimulatedLink, producer_done: threading.Event) -> UploadReport:
        """Receiver and uploader as concurrent threads over a bounded queue.

        The receiver decodes frames into events and blocks when the queue is
        full (backpressure); the uploader drains batches and posts them.
        Returns once the producer finished and both sides drained.
        """
        if self.client is None or self.session_id is None:
            raise RuntimeError("gateway has no cloud client/session")
        event_queue: queue.Queue = queue.Queue(maxsize=self.QUEUE_CAPACITY)
        report = UploadReport()
        report_lock = threading.Lock()

        def receiver():
            while True:
                item = link.recv()
                if item is not None:
                    event_queue.put(self.handle_message(item[1]))  # blocks when full
                    continue
                if producer_done.is_set():
                    if (item := link.recv()) is None:
                        break
                    event_queue.put(self.handle_message(item[1]))
                    continue
                time.sleep(0.001)
            event_queue.put(None)

        def uploader():
            pending: list[GatewayEvent] = []
            done = False
            while not done:
                try:
                    item = event_queue.get(timeout=0.05)
                    if item is None:
                        done = True
                    else:
                        pending.append(item)
                except queue.Empty:
                    pass
                if pending and (done or len(pending) >= self.policy.batch_size):
                    part = batch_upload(
                        [e.to_dict() for e in pending],
                        self.client,
                        self.session_id,
                        self.policy,
                        self.spool,
                        sleep=self.sleep,
                    )
                    with report_lock:
                        report.delivered += part.delivered
                        report.duplicates += part.duplicates
                        report.retries += part.retries
                        report.quarantined += part.quarantined
                        report.requests += part.requests
                    pending = []

        threads = [threading.Thread(target=receiver), threading.Thread(target=uploader)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return report


def replay_spool(spool: Spool, client: CloudClient, session_id: str, policy: UploadPolicy | None = None, sleep=time.sleep) -> UploadReport:
    """Re-deliver journaled events past the acked watermark (crash recovery)."""
    return batch_upload(spool.pending(), client, session_id, policy or UploadPolicy(), spool, sleep=sleep)
