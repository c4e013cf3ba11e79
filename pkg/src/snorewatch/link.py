"""Wire protocol for the five published characteristics, plus a simulated link.

Byte layouts are fixed and little-endian; `decode(encode(m)) == m` for every
valid message, and decoding validates every field so a corrupted payload
either errors or visibly changes the message. The link itself is an
in-process FIFO with seeded drop/duplication/corruption injection standing
in for a radio.
"""

from __future__ import annotations

import random
import struct
import zlib
from collections import deque
from dataclasses import dataclass
from enum import Enum

from .audio import Label
from .errors import LengthError, ProtocolError, UnknownCharError

CLASS_CODES = {Label.NON_SNORING: 0, Label.SNORING: 1}
CODE_CLASSES = {v: k for k, v in CLASS_CODES.items()}


class EnvKind(Enum):
    TEMPERATURE = "temperature"
    HUMIDITY = "humidity"
    PRESSURE = "pressure"


# characteristic ids on the wire
CHAR_ACTIVITY_INSTANTANEOUS = 0x01
CHAR_ACTIVITY_SUMMARY = 0x02
CHAR_ENV_TEMPERATURE = 0x03
CHAR_ENV_HUMIDITY = 0x04
CHAR_ENV_PRESSURE = 0x05
CHAR_ALERTING = 0x06

_ENV_CHAR_IDS = {
    EnvKind.TEMPERATURE: CHAR_ENV_TEMPERATURE,
    EnvKind.HUMIDITY: CHAR_ENV_HUMIDITY,
    EnvKind.PRESSURE: CHAR_ENV_PRESSURE,
}
_ENV_KINDS = {v: k for k, v in _ENV_CHAR_IDS.items()}

# fixed-point scale divisor per environment kind (value / divisor = unit value)
ENV_SCALE = {
    EnvKind.TEMPERATURE: 100,  # 0.01 degC, signed 16-bit
    EnvKind.HUMIDITY: 100,  # 0.01 %, unsigned 16-bit
    EnvKind.PRESSURE: 10,  # 0.1 Pa, unsigned 32-bit
}


@dataclass(frozen=True)
class ActivityInstantaneous:
    """Raw per-window class probabilities in basis points (sum = 10000)."""

    timestamp_ms: int
    p_snore_bp: int
    p_non_snore_bp: int

    def __post_init__(self):
        if self.p_snore_bp + self.p_non_snore_bp != 10000:
            raise ProtocolError("probabilities must sum to 10000 basis points")
        if not (0 <= self.p_snore_bp <= 10000):
            raise ProtocolError("basis points out of range")


@dataclass(frozen=True)
class ActivitySummary:
    """Smoothed class over a window span, with the running episode count."""

    window_start_ms: int
    window_end_ms: int
    inferred_class: Label
    episode_count: int

    def __post_init__(self):
        if self.window_end_ms <= self.window_start_ms:
            raise ProtocolError("window_end_ms must exceed window_start_ms")


@dataclass(frozen=True)
class Environment:
    """One environment reading as a fixed-point integer (see ENV_SCALE)."""

    kind: EnvKind
    timestamp_ms: int
    value_raw: int

    @property
    def value(self) -> float:
        return self.value_raw / ENV_SCALE[self.kind]

    def __post_init__(self):
        if self.kind == EnvKind.HUMIDITY and not (0 <= self.value_raw <= 10000):
            raise ProtocolError("humidity outside 0..100%")
        if self.kind == EnvKind.PRESSURE and self.value_raw <= 0:
            raise ProtocolError("pressure must be positive")
        if self.kind == EnvKind.TEMPERATURE and not (-(1 << 15) <= self.value_raw < (1 << 15)):
            raise ProtocolError("temperature outside sint16 range")


@dataclass(frozen=True)
class Alerting:
    """Haptic alert status; intensity_byte = round(intensity * 255)."""

    timestamp_ms: int
    active: bool
    intensity_byte: int

    def __post_init__(self):
        if not (0 <= self.intensity_byte <= 255):
            raise ProtocolError("intensity_byte out of range")
        if not self.active and self.intensity_byte != 0:
            raise ProtocolError("inactive alert must carry zero intensity")


CharacteristicMessage = ActivityInstantaneous | ActivitySummary | Environment | Alerting

PAYLOAD_SIZES = {
    CHAR_ACTIVITY_INSTANTANEOUS: 12,
    CHAR_ACTIVITY_SUMMARY: 21,
    CHAR_ENV_TEMPERATURE: 13,
    CHAR_ENV_HUMIDITY: 13,
    CHAR_ENV_PRESSURE: 15,
    CHAR_ALERTING: 10,
}


def message_timestamp(msg: CharacteristicMessage) -> int:
    """Stream-time stamp of any message (summaries use their window start)."""
    if isinstance(msg, ActivitySummary):
        return msg.window_start_ms
    return msg.timestamp_ms


def char_id_for(msg: CharacteristicMessage) -> int:
    if isinstance(msg, ActivityInstantaneous):
        return CHAR_ACTIVITY_INSTANTANEOUS
    if isinstance(msg, ActivitySummary):
        return CHAR_ACTIVITY_SUMMARY
    if isinstance(msg, Environment):
        return _ENV_CHAR_IDS[msg.kind]
    if isinstance(msg, Alerting):
        return CHAR_ALERTING
    raise TypeError(f"not a characteristic message: {msg!r}")


def encode(msg: CharacteristicMessage) -> bytes:
    """Fixed little-endian payload for one message."""
    if isinstance(msg, ActivityInstantaneous):
        return struct.pack("<QHH", msg.timestamp_ms, msg.p_snore_bp, msg.p_non_snore_bp)
    if isinstance(msg, ActivitySummary):
        return struct.pack(
            "<QQBI",
            msg.window_start_ms,
            msg.window_end_ms,
            CLASS_CODES[msg.inferred_class],
            msg.episode_count,
        )
    if isinstance(msg, Environment):
        kind_code = char_id_for(msg)
        value_fmt = {EnvKind.TEMPERATURE: "h", EnvKind.HUMIDITY: "H", EnvKind.PRESSURE: "I"}[msg.kind]
        return struct.pack(
            "<BQH" + value_fmt, kind_code, msg.timestamp_ms, ENV_SCALE[msg.kind], msg.value_raw
        )
    if isinstance(msg, Alerting):
        return struct.pack("<QBB", msg.timestamp_ms, 1 if msg.active else 0, msg.intensity_byte)
    raise TypeError(f"not a characteristic message: {msg!r}")


def decode(char_id: int, payload: bytes) -> CharacteristicMessage:
    """Strictly decode a payload; every invalid field raises."""
    if char_id not in PAYLOAD_SIZES:
        raise UnknownCharError(f"unknown characteristic id 0x{char_id:02x}")
    if len(payload) != PAYLOAD_SIZES[char_id]:
        raise LengthError(
            f"characteristic 0x{char_id:02x} payload must be {PAYLOAD_SIZES[char_id]} bytes, got {len(payload)}"
        )
    if char_id == CHAR_ACTIVITY_INSTANTANEOUS:
        ts, p_snore, p_non = struct.unpack("<QHH", payload)
        return ActivityInstantaneous(ts, p_snore, p_non)
    if char_id == CHAR_ACTIVITY_SUMMARY:
        start, end, code, episodes = struct.unpack("<QQBI", payload)
        if code not in CODE_CLASSES:
            raise ProtocolError(f"unknown class code {code}")
        return ActivitySummary(start, end, CODE_CLASSES[code], episodes)
    if char_id in _ENV_KINDS:
        kind = _ENV_KINDS[char_id]
        value_fmt = {EnvKind.TEMPERATURE: "h", EnvKind.HUMIDITY: "H", EnvKind.PRESSURE: "I"}[kind]
        kind_code, ts, scale, value = struct.unpack("<BQH" + value_fmt, payload)
        if kind_code != char_id:
            raise ProtocolError(f"payload kind byte 0x{kind_code:02x} does not match characteristic")
        if scale != ENV_SCALE[kind]:
            raise ProtocolError(f"unexpected scale divisor {scale}")
        return Environment(kind, ts, value)
    active_b = payload[8]
    if active_b not in (0, 1):
        raise ProtocolError(f"alerting active byte must be 0 or 1, got {active_b}")
    ts, _, intensity = struct.unpack("<QBB", payload)
    return Alerting(ts, bool(active_b), intensity)


# --- frames -------------------------------------------------------------
#
# char_id u8 | seq u32 | payload_len u16 | payload | crc32 over all prior bytes


def build_frame(char_id: int, seq: int, payload: bytes) -> bytes:
    head = struct.pack("<BIH", char_id, seq, len(payload)) + payload
    return head + struct.pack("<I", zlib.crc32(head))


def parse_frame(frame: bytes) -> tuple[int, int, bytes]:
    """Split a frame into (char_id, seq, payload); CRC mismatch raises."""
    if len(frame) < 11:
        raise LengthError("frame shorter than fixed header + crc")
    char_id, seq, payload_len = struct.unpack_from("<BIH", frame, 0)
    if len(frame) != 7 + payload_len + 4:
        raise LengthError("frame length does not match payload_len")
    payload = frame[7 : 7 + payload_len]
    (crc,) = struct.unpack_from("<I", frame, 7 + payload_len)
    if zlib.crc32(frame[: 7 + payload_len]) != crc:
        raise ProtocolError("frame crc mismatch")
    return char_id, seq, payload


@dataclass
class LinkStats:
    sent: int = 0
    injected_drops: int = 0
    injected_duplicates: int = 0
    crc_drops: int = 0
    duplicates_discarded: int = 0
    gap_total: int = 0
    delivered: int = 0


class SimulatedLink:
    """Peripheral-to-central FIFO with seeded fault injection.

    Per frame sent, the injector draws (in order) one uniform for drop and
    one for duplication, so a replay with the same seed reproduces the same
    fault pattern. The receiver drops CRC failures, discards duplicate
    sequence numbers, and counts gaps.
    """

    def __init__(
        self,
        drop_rate: float = 0.0,
        dup_rate: float = 0.0,
        corrupt_rate: float = 0.0,
        seed: int | None = None,
    ):
        for rate in (drop_rate, dup_rate, corrupt_rate):
            if not (0.0 <= rate < 1.0):
                raise ValueError("fault rates must be in [0, 1)")
        self.drop_rate = drop_rate
        self.dup_rate = dup_rate
        self.corrupt_rate = corrupt_rate
        self._rng = random.Random(seed)
        self._queue: deque[bytes] = deque()
        self._next_seq = 0
        self._last_delivered_seq = -1
        self.stats = LinkStats()

    def send(self, msg: CharacteristicMessage) -> int:
        """Encode and enqueue one message; returns its frame seq."""
        seq = self._next_seq
        self._next_seq += 1
        frame = build_frame(char_id_for(msg), seq, encode(msg))
        self.stats.sent += 1
        dropped = self._rng.random() < self.drop_rate
        duplicated = self._rng.random() < self.dup_rate
        if self.corrupt_rate and self._rng.random() < self.corrupt_rate:
            bit = self._rng.randrange(len(frame) * 8)
            corrupted = bytearray(frame)
            corrupted[bit // 8] ^= 1 << (bit % 8)
            frame = bytes(corrupted)
        if dropped:
            self.stats.injected_drops += 1
            return seq
        self._queue.append(frame)
        if duplicated:
            self.stats.injected_duplicates += 1
            self._queue.append(frame)
        return seq

    def recv(self) -> tuple[int, CharacteristicMessage] | None:
        """Next in-order (seq, message), or None when the queue is empty."""
        while self._queue:
            frame = self._queue.popleft()
            try:
                char_id, seq, payload = parse_frame(frame)
            except (LengthError, ProtocolError):
                self.stats.crc_drops += 1
                continue
            if seq <= self._last_delivered_seq:
                self.stats.duplicates_discarded += 1
                continue
            msg = decode(char_id, payload)
            self.stats.gap_total += seq - self._last_delivered_seq - 1
            self._last_delivered_seq = seq
            self.stats.delivered += 1
            return seq, msg
        return None

    def recv_all(self) -> list[tuple[int, CharacteristicMessage]]:
        out = []
        while (item := self.recv()) is not None:
            out.append(item)
        return out
