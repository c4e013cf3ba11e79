import json
import random
import threading
import time

import numpy as np
import pytest
import requests

from snorewatch.audio import Label, RecentAudioRing
from snorewatch.errors import EvictedError, NetworkError
from snorewatch.gateway import (
    CloudClient,
    FaultInjectingSession,
    Gateway,
    Spool,
    UploadPolicy,
    batch_upload,
    clip_episode,
    message_to_event,
    replay_spool,
)
from snorewatch.link import (
    ActivityInstantaneous,
    ActivitySummary,
    Alerting,
    Environment,
    EnvKind,
    SimulatedLink,
)
from snorewatch.service import CloudServer

S, N = Label.SNORING, Label.NON_SNORING

no_sleep = lambda _s: None


class FakeResponse:
    def __init__(self, status_code, body=None):
        self.status_code = status_code
        self._body = body or {}
        self.text = json.dumps(self._body)

    def json(self):
        return self._body


class ScriptedClient:
    """Stands in for CloudClient: returns queued responses, records bodies."""

    def __init__(self, script):
        self.script = list(script)
        self.bodies = []

    def post_json(self, path, body, params=None):
        self.bodies.append(body)
        status = self.script.pop(0) if self.script else 200
        if status == 200:
            return FakeResponse(200, {"accepted": len(body["events"]), "duplicates": 0})
        return FakeResponse(status, {"error": "scripted"})


@pytest.fixture
def live_server(tmp_path):
    server = CloudServer(0, tmp_path / "data")
    server.start_background()
    yield server
    server.shutdown()


def make_events(n, device_id="dev"):
    return [
        message_to_event(ActivityInstantaneous(i * 333, 7000, 3000), device_id, i).to_dict()
        for i in range(n)
    ]


class TestEventMapping:
    def test_instantaneous_basis_points_to_floats(self):
        event = message_to_event(ActivityInstantaneous(5, 9000, 1000), "dev", 0)
        assert event.type == "activity_instantaneous"
        assert event.payload == {"p_snore": 0.9, "p_non_snore": 0.1}

    def test_alerting_intensity_rounding(self):
        event = message_to_event(Alerting(5, True, 128), "dev", 1)
        assert event.payload == {"active": True, "intensity": 0.502}

    def test_summary_and_environment(self):
        summary = message_to_event(ActivitySummary(0, 999, S, 2), "dev", 2)
        assert summary.payload["inferred_class"] == "snoring"
        assert summary.timestamp_ms == 0
        env = message_to_event(Environment(EnvKind.TEMPERATURE, 7, 2134), "dev", 3)
        assert env.payload == {"kind": "temperature", "value": 21.34}

    def test_gateway_assigns_contiguous_seq(self):
        gw = Gateway("dev")
        link = SimulatedLink()
        rng = random.Random(0)
        for i in range(50):
            link.send(ActivityInstantaneous(i, 5000, 5000))
        gw.drain_link(link)
        assert [e.seq for e in gw.events] == list(range(50))


class TestBatchUpload:
    def test_250_events_batch_as_100_100_50(self):
        client = ScriptedClient([])
        report = batch_upload(make_events(250), client, "sid", UploadPolicy(), sleep=no_sleep)
        assert [len(b["events"]) for b in client.bodies] == [100, 100, 50]
        assert report.delivered == 250 and report.retries == 0

    def test_503_then_200_retries_once(self):
        client = ScriptedClient([503, 200])
        report = batch_upload(make_events(10), client, "sid", UploadPolicy(), sleep=no_sleep)
        assert report.delivered == 10
        assert report.retries == 1
        assert len(client.bodies) == 2

    def test_4xx_quarantines_batch(self, tmp_path):
        spool = Spool(tmp_path / "spool")
        client = ScriptedClient([422])
        report = batch_upload(make_events(5), client, "sid", UploadPolicy(), spool, sleep=no_sleep)
        assert report.quarantined == 5 and report.delivered == 0
        assert len(spool.quarantine_path.read_text().splitlines()) == 5

    def test_gives_up_after_max_attempts(self):
        client = ScriptedClient([503] * 10)
        with pytest.raises(NetworkError):
            batch_upload(
                make_events(1), client, "sid", UploadPolicy(max_attempts=3), sleep=no_sleep
            )

    def test_flaky_server_still_delivers_every_event_once(self, live_server):
        url = f"http://127.0.0.1:{live_server.port}"
        plain = CloudClient(url)
        sid = plain.post_json("/api/v1/sessions", {"device_id": "dev", "started_at": 0}).json()[
            "session_id"
        ]
        flaky = CloudClient(url, session=FaultInjectingSession(requests.Session(), 0.5, seed=3))
        events = make_events(1000)
        policy = UploadPolicy(batch_size=50, backoff_base_s=0.001, jitter_seed=1)
        report = batch_upload(events, flaky, sid, policy, sleep=no_sleep)
        stored = plain.get(f"/api/v1/sessions/{sid}/events").json()["events"]
        assert [e["seq"] for e in stored] == list(range(1000))
        assert report.retries > 0, "fault injection should have forced retries"


class TestEpisodeClips:
    def test_padding_and_end_clamp(self):
        ring = RecentAudioRing(60_000, 16000)
        ring.write(np.arange(45 * 16000) / (45 * 16000))
        clip = clip_episode(ring, 30_000, 40_000)
        assert (clip.clip_start_ms, clip.clip_end_ms) == (25_000, 45_000)
        np.testing.assert_array_equal(
            clip.audio.samples, (np.arange(45 * 16000) / (45 * 16000))[25 * 16000 : 45 * 16000]
        )

    def test_fully_evicted_raises(self):
        ring = RecentAudioRing(10_000, 16000)
        ring.write(np.zeros(100 * 16000))
        with pytest.raises(EvictedError):
            clip_episode(ring, 10_000, 20_000)

    def test_partial_eviction_clamps_to_retention(self):
        ring = RecentAudioRing(30_000, 16000)
        ring.write(np.random.default_rng(0).uniform(-1, 1, 60 * 16000))
        clip = clip_episode(ring, 28_000, 35_000)
        assert clip.clip_start_ms == 30_000  # retention boundary, not start - 5s
        assert clip.clip_end_ms == 40_000

    def test_gateway_records_event_even_when_audio_evicted(self):
        ring = RecentAudioRing(5_000, 16000)
        gw = Gateway("dev", ring=ring)
        gw.feed_audio(np.zeros(100 * 16000))
        gw.handle_message(ActivitySummary(10_000, 10_999, S, 0))
        gw.handle_message(ActivitySummary(20_000, 20_999, N, 1))
        assert gw.stats.episodes_evicted == 1
        assert len(gw.events) == 2  # both summaries still became events


class TestSpool:
    def test_append_ack_pending(self, tmp_path):
        spool = Spool(tmp_path / "s")
        gw = Gateway("dev", spool=spool)
        link = SimulatedLink()
        for i in range(10):
            link.send(ActivityInstantaneous(i, 5000, 5000))
        gw.drain_link(link)
        assert len(spool.pending()) == 10
        spool.ack(4)
        assert [e["seq"] for e in spool.pending()] == [5, 6, 7, 8, 9]

    def test_replay_after_crash_completes_delivery(self, live_server, tmp_path):
        url = f"http://127.0.0.1:{live_server.port}"
        client = CloudClient(url)
        sid = client.post_json("/api/v1/sessions", {"device_id": "dev", "started_at": 0}).json()[
            "session_id"
        ]
        spool = Spool(tmp_path / "s")
        gw = Gateway("dev", client, sid, spool=spool, policy=UploadPolicy(), sleep=no_sleep)
        link = SimulatedLink()
        for i in range(500):
            link.send(ActivityInstantaneous(i * 333, 7000, 3000))
        gw.drain_link(link)

        # deliver only the first two batches, then "crash": the server saw
        # 300 events but the watermark only covers 200
        batch_upload([e.to_dict() for e in gw.events[:200]], client, sid, UploadPolicy(), spool, sleep=no_sleep)
        batch_upload([e.to_dict() for e in gw.events[200:300]], client, sid, UploadPolicy(), sleep=no_sleep)
        assert spool.acked_through() == 199

        fresh_spool = Spool(tmp_path / "s")
        report = replay_spool(fresh_spool, client, sid, UploadPolicy(), sleep=no_sleep)
        assert report.delivered == 200  # 300..499 were new
        assert report.duplicates == 100  # 200..299 deduplicated server-side
        stored = client.get(f"/api/v1/sessions/{sid}/events").json()["events"]
        assert [e["seq"] for e in stored] == list(range(500))


class TestThreadedGateway:
    def test_receiver_and_uploader_drain_everything_in_order(self, live_server):
        url = f"http://127.0.0.1:{live_server.port}"
        client = CloudClient(url)
        sid = client.post_json("/api/v1/sessions", {"device_id": "dev", "started_at": 0}).json()[
            "session_id"
        ]
        gw = Gateway("dev", client, sid, policy=UploadPolicy(batch_size=40), sleep=no_sleep)
        link = SimulatedLink()
        done = threading.Event()

        def producer():
            for i in range(400):
                link.send(ActivityInstantaneous(i * 333, 6000, 4000))
                if i % 97 == 0:
                    time.sleep(0.002)
            done.set()

        thread = threading.Thread(target=producer)
        thread.start()
        report = gw.run_threaded(link, done)
        thread.join()
        assert report.delivered == 400
        stored = client.get(f"/api/v1/sessions/{sid}/events").json()["events"]
        assert [e["seq"] for e in stored] == list(range(400))


class TestExactlyOnceVisible:
    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_faulty_link_and_http_end_state_matches_gateway(self, live_server, tmp_path, seed):
        url = f"http://127.0.0.1:{live_server.port}"
        plain = CloudClient(url)
        sid = plain.post_json("/api/v1/sessions", {"device_id": "dev", "started_at": 0}).json()[
            "session_id"
        ]
        flaky = CloudClient(url, session=FaultInjectingSession(requests.Session(), 0.4, seed=seed))
        gw = Gateway(
            "dev",
            flaky,
            sid,
            spool=Spool(tmp_path / f"s{seed}"),
            policy=UploadPolicy(batch_size=30, backoff_base_s=0.001, jitter_seed=seed),
            sleep=no_sleep,
        )
        link = SimulatedLink(drop_rate=0.1, dup_rate=0.05, seed=seed)
        for i in range(600):
            link.send(ActivityInstantaneous(i * 333, 5500, 4500))
        gw.drain_link(link)
        gw.flush_events()
        stored = plain.get(f"/api/v1/sessions/{sid}/events").json()["events"]
        assert [e["seq"] for e in stored] == [e.seq for e in gw.events]
