"""`kw` command line: dataset prep, training, evaluation, inference,
end-to-end simulation, and serving.

Exit codes: 0 success, 2 usage error, 3 data error, 4 network error,
5 internal error. Every output-producing run drops a run_manifest.json
next to its outputs; reruns with the same seed reproduce the same model
and report bytes (wall-clock latency fields aside).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import random
import signal
import sys
import threading
import time
from datetime import datetime, timezone
from pathlib import Path

import requests

from . import __version__, audio, detector, gateway, link, nn, service
from .errors import (
    CorruptError,
    DataError,
    FormatError,
    IoError,
    NetworkError,
    ShapeError,
    SnoreWatchError,
    UnsupportedError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NETWORK = 4
EXIT_INTERNAL = 5


def _now_iso() -> str:
    return datetime.now(tz=timezone.utc).isoformat(timespec="seconds")


def _now_ms() -> int:
    return int(time.time() * 1000)


def _write_run_manifest(directory, command: str, args: argparse.Namespace, outputs: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:] if sys.argv else [],
        "seed": getattr(args, "seed", None),
        "config": {k: v for k, v in vars(args).items() if k != "func" and not k.startswith("_")},
        "started_at": started,
        "finished_at": _now_iso(),
        "outputs": outputs,
        "version": __version__,
    }
    path = Path(directory) / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")


# --- synth ------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = _now_iso()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = audio.synth_corpus(args.seed, args.per_class, args.sample_rate, args.clip_seconds)
    entries = []
    counters = {audio.Label.SNORING: 0, audio.Label.NON_SNORING: 0}
    for clip in clips:
        index = counters[clip.label]
        counters[clip.label] += 1
        name = f"{clip.label.value}_{index:04d}.wav"
        audio.save_wav(clip, out_dir / name)
        entries.append((name, clip.label))
    audio.write_manifest(out_dir / "manifest.csv", entries)
    _write_run_manifest(out_dir, "synth", args, [str(out_dir / "manifest.csv")], started)
    print(f"wrote {len(clips)} clips and manifest.csv to {out_dir}")
    return EXIT_OK


# --- train --------------------------------------------------------------


def cmd_train(args) -> int:
    started = _now_iso()
    clips = audio.load_manifest_clips(args.manifest)
    cfg = nn.TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        dropout_rate=args.dropout,
        seed=args.seed,
    )
    params, history = nn.train(clips, cfg, input_side=args.side)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nn.save_params(params, out)
    history_path = out.with_suffix(".history.csv")
    with open(history_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "lr"]
        )
        writer.writeheader()
        writer.writerows(history)
    _write_run_manifest(out.parent, "train", args, [str(out), str(history_path)], started)
    final = history[-1]
    print(
        f"trained {args.side}x{args.side} model on {len(clips)} clips: "
        f"train_acc={final['train_accuracy']:.4f} val_acc={final['val_accuracy']:.4f} -> {out}"
    )
    return EXIT_OK


# --- eval ---------------------------------------------------------------


def cmd_eval(args) -> int:
    started = _now_iso()
    clips = audio.load_manifest_clips(args.manifest)
    params = nn.load_params(args.model)
    report = nn.evaluate(params, clips)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _write_run_manifest(report_path.parent, "eval", args, [str(report_path)], started)
    print(
        f"accuracy={report.accuracy:.4f} fpr={report.false_positive_rate:.4f} "
        f"fnr={report.false_negative_rate:.4f} latency={report.mean_latency_ms:.2f}ms -> {report_path}"
    )
    return EXIT_OK


# --- infer --------------------------------------------------------------


def cmd_infer(args) -> int:
    started = _now_iso()
    clip = audio.resample(audio.load_wav(args.wav), audio.CANONICAL_RATE)
    params = nn.load_params(args.model)
    result = detector.run_session(clip, params)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        detector.write_trace_csv(result.trace, out)
        _write_run_manifest(out.parent, "infer", args, [str(out)], started)
        print(f"wrote {len(result.trace)} trace rows to {out}")
    else:
        detector.write_trace_csv(result.trace, sys.stdout)
    return EXIT_OK


# --- simulate -----------------------------------------------------------


def _control_request(send_once, policy, rng, sleep, expect: int, what: str) -> dict:
    response, _ = gateway.request_with_retry(send_once, policy, rng, sleep=sleep)
    if response.status_code != expect:
        raise NetworkError(f"{what} failed: http {response.status_code} {response.text[:200]}")
    return response.json()


def cmd_simulate(args) -> int:
    if not args.server:
        raise NetworkError("no server URL: pass --server or set KW_SERVER_URL")
    started = _now_iso()
    clip = audio.resample(audio.load_wav(args.wav), audio.CANONICAL_RATE)
    params = nn.load_params(args.model)

    result = detector.run_session(clip, params)

    http = requests.Session()
    if args.http_fault_rate > 0:
        http = gateway.FaultInjectingSession(http, args.http_fault_rate, seed=args.seed + 1)
    client = gateway.CloudClient(args.server, token=args.token, session=http)
    policy = gateway.UploadPolicy(
        batch_size=args.batch_size,
        backoff_base_s=args.backoff_base,
        max_attempts=args.http_retries,
        jitter_seed=args.seed + 2,
    )
    sleep = time.sleep
    control_rng = random.Random(args.seed + 3)

    created = _control_request(
        lambda: client.post_json("/api/v1/sessions", {"device_id": args.device_id, "started_at": _now_ms()}),
        policy,
        control_rng,
        sleep,
        201,
        "session create",
    )
    session_id = created["session_id"]

    ring = audio.RecentAudioRing(args.ring_seconds * 1000, clip.sample_rate)
    spool = gateway.Spool(args.spool_dir) if args.spool_dir else None
    gw = gateway.Gateway(
        args.device_id,
        client,
        session_id,
        spool=spool,
        policy=policy,
        ring=ring,
        sleep=sleep,
    )
    radio = link.SimulatedLink(drop_rate=args.loss, dup_rate=args.dup, seed=args.seed)

    fed = 0
    for msg in result.messages:
        target = (link.message_timestamp(msg) * clip.sample_rate) // 1000
        if target > fed:
            gw.feed_audio(clip.samples[fed:target])
            fed = target
        radio.send(msg)
        gw.drain_link(radio)
    if fed < clip.samples.size:
        gw.feed_audio(clip.samples[fed:])
    gw.drain_link(radio)

    upload = gw.flush_events()
    audio_uploads = gw.upload_episode_audio()
    _control_request(
        lambda: client.post_json(f"/api/v1/sessions/{session_id}/end", {}),
        policy,
        control_rng,
        sleep,
        200,
        "session end",
    )
    summary_resp, _ = gateway.request_with_retry(
        lambda: client.get(f"/api/v1/sessions/{session_id}/summary"), policy, control_rng, sleep=sleep
    )
    summary = summary_resp.json() if summary_resp.status_code == 200 else None

    stats = {
        "session_id": session_id,
        "server": args.server,
        "device": {
            "windows": len(result.trace),
            "messages_emitted": len(result.messages),
            "trace_snore_ms": detector.trace_snore_ms(result.trace),
        },
        "link": vars(radio.stats),
        "gateway": {
            "events_emitted": gw.stats.events_emitted,
            "decode_errors": gw.stats.decode_errors,
            "episodes_completed": len(gw.episodes),
            "episodes_clipped": gw.stats.episodes_clipped,
        },
        "upload": {
            "delivered": upload.delivered,
            "duplicates": upload.duplicates,
            "retries": upload.retries,
            "quarantined": upload.quarantined,
            "audio_uploads": audio_uploads,
        },
        "summary": summary,
    }
    if args.spool_dir:
        _write_run_manifest(args.spool_dir, "simulate", args, [], started)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


# --- serve --------------------------------------------------------------


def cmd_serve(args) -> int:
    started = _now_iso()
    try:
        server = service.CloudServer(args.port, args.data_dir, token=args.token, host=args.host)
    except OSError as exc:
        raise NetworkError(f"cannot bind {args.host}:{args.port}: {exc}") from exc
    _write_run_manifest(args.data_dir, "serve", args, [str(Path(args.data_dir))], started)

    def trigger_shutdown(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, trigger_shutdown)
    signal.signal(signal.SIGINT, trigger_shutdown)
    print(f"serving on http://{args.host}:{server.port} data_dir={args.data_dir}", flush=True)
    server.serve_forever()
    server.server_close()
    print("shut down cleanly")
    return EXIT_OK


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kw", description="snore detection pipeline")
    parser.add_argument("--version", action="version", version=f"kw {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, required=True, dest="per_class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=int, default=audio.CANONICAL_RATE, dest="sample_rate")
    p.add_argument("--clip-seconds", type=float, default=3.0, dest="clip_seconds")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--side", type=int, choices=(24, 64), default=24)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="weights file (.kwnn)")
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--dropout", type=float, default=0.25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="per-window trace for one WAV")
    p.add_argument("--wav", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="trace CSV path (default stdout)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="device+gateway simulation against a live server")
    p.add_argument("--wav", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--server", default=os.environ.get("KW_SERVER_URL"), help="server URL (or KW_SERVER_URL)")
    p.add_argument("--device-id", default="kw-sim-0", dest="device_id")
    p.add_argument("--batch-size", type=int, default=100, dest="batch_size")
    p.add_argument("--spool-dir", dest="spool_dir")
    p.add_argument("--loss", type=float, default=0.0, help="link frame drop rate")
    p.add_argument("--dup", type=float, default=0.0, help="link frame duplication rate")
    p.add_argument("--http-fault-rate", type=float, default=0.0, dest="http_fault_rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--token", default=os.environ.get("KW_TOKEN"))
    p.add_argument("--backoff-base", type=float, default=1.0, dest="backoff_base")
    p.add_argument("--http-retries", type=int, default=25, dest="http_retries")
    p.add_argument("--ring-seconds", type=int, default=60, dest="ring_seconds")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the sleep-session service")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--data-dir", required=True, dest="data_dir")
    p.add_argument("--token", default=os.environ.get("KW_TOKEN"))
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataError, FormatError, UnsupportedError, IoError, CorruptError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NetworkError, requests.RequestException) as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except SnoreWatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
