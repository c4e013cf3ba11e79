"""Device-side streaming loop: capture, classify, smooth, alert, publish.

Audio arrives through a hop-sized DoubleBuffer; every completed window is
classified by the CNN, smoothed by a majority vote, and turned into
characteristic messages. A hysteresis policy drives the simulated haptic
(PWM frequency maps linearly to intensity), and a simulated environment
sensor contributes periodic temperature/humidity/pressure readings.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from io import TextIOBase

import numpy as np

from .audio import AudioClip, DoubleBuffer, FrameWindow, Label
from .features import SpectrogramConfig, extract
from .link import (
    ActivityInstantaneous,
    ActivitySummary,
    Alerting,
    CharacteristicMessage,
    Environment,
    EnvKind,
)
from .nn import ModelParams, Prediction, forward

TRACE_COLUMNS = ("t_ms", "p_snore", "raw_class", "smoothed_class", "alert_active", "pwm_freq_hz")


@dataclass(frozen=True)
class DetectorConfig:
    """Streaming, smoothing, alerting, and environment cadence settings.

    window_len_ms must be a multiple of hop_ms so that hop-sized capture
    banks tile analysis windows exactly.
    """

    window_len_ms: int = 999
    hop_ms: int = 333
    smoothing_k: int = 3
    alert_on_count: int = 9
    alert_off_count: int = 15
    pwm_freq_min: float = 50.0
    pwm_freq_max: float = 250.0
    intensity_ramp_step: float = 10.0
    env_period_ms: int = 60_000

    def __post_init__(self):
        if not (self.window_len_ms >= self.hop_ms > 0):
            raise ValueError("need window_len_ms >= hop_ms > 0")
        if self.smoothing_k < 1 or self.smoothing_k % 2 == 0:
            raise ValueError("smoothing_k must be odd and >= 1")
        if self.alert_on_count < 1 or self.alert_off_count < 1:
            raise ValueError("alert on/off counts must be >= 1")
        if not (self.pwm_freq_min < self.pwm_freq_max):
            raise ValueError("need pwm_freq_min < pwm_freq_max")
        if self.intensity_ramp_step <= 0:
            raise ValueError("intensity_ramp_step must be positive")
        if self.env_period_ms <= 0:
            raise ValueError("env_period_ms must be positive")


@dataclass(frozen=True)
class AlertState:
    active: bool
    pwm_freq_hz: float
    intensity: float
    since_ms: int


class AlertPolicy:
    """Hysteresis: M consecutive snore windows arm, N non-snore windows disarm.

    While active, each further snore window ramps the PWM frequency up by one
    step until it saturates at the maximum; intensity is the linear position
    of the frequency inside [min, max].
    """

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        self.state = AlertState(active=False, pwm_freq_hz=0.0, intensity=0.0, since_ms=0)
        self._consec_snore = 0
        self._consec_non = 0

    def _intensity(self, pwm: float) -> float:
        span = self.cfg.pwm_freq_max - self.cfg.pwm_freq_min
        return float(np.clip((pwm - self.cfg.pwm_freq_min) / span, 0.0, 1.0))

    def update(self, smoothed: Label, t_ms: int) -> tuple[AlertState, Alerting | None]:
        """Advance one window; returns the new state and a message if the
        alert activated, deactivated, or changed drive frequency."""
        cfg = self.cfg
        message = None
        if not self.state.active:
            if smoothed == Label.SNORING:
                self._consec_snore += 1
                if self._consec_snore >= cfg.alert_on_count:
                    intensity = self._intensity(cfg.pwm_freq_min)
                    self.state = AlertState(True, cfg.pwm_freq_min, intensity, t_ms)
                    self._consec_non = 0
                    message = Alerting(t_ms, True, round(intensity * 255))
            else:
                self._consec_snore = 0
        else:
            if smoothed == Label.SNORING:
                self._consec_non = 0
                new_pwm = min(self.state.pwm_freq_hz + cfg.intensity_ramp_step, cfg.pwm_freq_max)
                if new_pwm != self.state.pwm_freq_hz:
                    self.state = AlertState(True, new_pwm, self._intensity(new_pwm), self.state.since_ms)
                    message = Alerting(t_ms, True, round(self.state.intensity * 255))
            else:
                self._consec_non += 1
                if self._consec_non >= cfg.alert_off_count:
                    self.state = AlertState(False, 0.0, 0.0, t_ms)
                    self._consec_snore = 0
                    self._consec_non = 0
                    message = Alerting(t_ms, False, 0)
        return self.state, message


@dataclass(frozen=True)
class EnvSample:
    temperature_c: float
    humidity_pct: float
    pressure_pa: float
    timestamp_ms: int

    def __post_init__(self):
        if not (0.0 <= self.humidity_pct <= 100.0):
            raise ValueError("humidity out of range")
        if self.pressure_pa <= 0:
            raise ValueError("pressure must be positive")


@dataclass(frozen=True)
class EnvironmentSim:
    """Baseline + linear drift + seeded Gaussian noise for each sensor."""

    baseline_temp_c: float = 21.0
    baseline_humidity_pct: float = 45.0
    baseline_pressure_pa: float = 101_325.0
    temp_drift_c_per_h: float = -0.3
    humidity_drift_pct_per_h: float = 1.0
    pressure_drift_pa_per_h: float = -5.0
    noise_temp_c: float = 0.05
    noise_humidity_pct: float = 0.2
    noise_pressure_pa: float = 2.0
    seed: int = 0

    def sampler(self) -> "EnvSampler":
        return EnvSampler(self)


class EnvSampler:
    """Stateful sampler; successive calls consume one rng draw per sensor."""

    def __init__(self, sim: EnvironmentSim):
        self.sim = sim
        self._rng = np.random.default_rng(sim.seed)

    def sample(self, t_ms: int) -> EnvSample:
        sim = self.sim
        hours = t_ms / 3_600_000.0
        temp = sim.baseline_temp_c + sim.temp_drift_c_per_h * hours + self._rng.normal(0, 1) * sim.noise_temp_c
        hum = (
            sim.baseline_humidity_pct
            + sim.humidity_drift_pct_per_h * hours
            + self._rng.normal(0, 1) * sim.noise_humidity_pct
        )
        pres = (
            sim.baseline_pressure_pa
            + sim.pressure_drift_pa_per_h * hours
            + self._rng.normal(0, 1) * sim.noise_pressure_pa
        )
        return EnvSample(
            temperature_c=temp,
            humidity_pct=float(np.clip(hum, 0.0, 100.0)),
            pressure_pa=max(pres, 1e-6),
            timestamp_ms=t_ms,
        )


def env_messages(sample: EnvSample) -> list[Environment]:
    """Convert one reading into the three fixed-point environment messages."""
    temp_raw = int(np.clip(round(sample.temperature_c * 100), -(1 << 15), (1 << 15) - 1))
    hum_raw = int(np.clip(round(sample.humidity_pct * 100), 0, 10000))
    pres_raw = int(np.clip(round(sample.pressure_pa * 10), 1, (1 << 32) - 1))
    return [
        Environment(EnvKind.TEMPERATURE, sample.timestamp_ms, temp_raw),
        Environment(EnvKind.HUMIDITY, sample.timestamp_ms, hum_raw),
        Environment(EnvKind.PRESSURE, sample.timestamp_ms, pres_raw),
    ]


@dataclass(frozen=True)
class StepResult:
    prediction: Prediction
    raw_class: Label
    smoothed_class: Label
    messages: tuple[CharacteristicMessage, ...]


@dataclass(frozen=True)
class TraceRow:
    t_ms: int
    p_snore: float
    raw_class: Label
    smoothed_class: Label
    alert_active: bool
    pwm_freq_hz: float


class SnoreDetector:
    """Per-window classification with majority-vote smoothing and publishing.

    Every window yields an ActivityInstantaneous message; an ActivitySummary
    goes out for the first window and whenever the smoothed class changes,
    carrying the running count of completed snore episodes.
    """

    def __init__(
        self,
        params: ModelParams,
        cfg: DetectorConfig | None = None,
        spec_cfg: SpectrogramConfig | None = None,
    ):
        self.params = params
        self.cfg = cfg or DetectorConfig()
        self.spec_cfg = spec_cfg or SpectrogramConfig()
        self._raw_history: deque[Label] = deque(maxlen=self.cfg.smoothing_k)
        self._prev_smoothed: Label | None = None
        self._episode_open = False
        self.episode_count = 0

    def _vote(self) -> Label:
        snores = sum(1 for c in self._raw_history if c == Label.SNORING)
        return Label.SNORING if snores > len(self._raw_history) - snores else Label.NON_SNORING

    def step(self, window: FrameWindow) -> StepResult:
        image = extract(window, self.spec_cfg, self.params.input_side)
        pred = forward(self.params, image)
        self._raw_history.append(pred.inferred_class)
        smoothed = self._vote()

        t = window.start_time_ms
        p_snore_bp = round(pred.p_snore * 10000)
        messages: list[CharacteristicMessage] = [
            ActivityInstantaneous(t, p_snore_bp, 10000 - p_snore_bp)
        ]
        if smoothed != self._prev_smoothed:
            if smoothed == Label.SNORING:
                self._episode_open = True
            elif self._episode_open:
                self._episode_open = False
                self.episode_count += 1
            messages.append(
                ActivitySummary(t, t + self.cfg.window_len_ms, smoothed, self.episode_count)
            )
            self._prev_smoothed = smoothed
        return StepResult(pred, pred.inferred_class, smoothed, tuple(messages))


@dataclass(frozen=True)
class SessionResult:
    messages: tuple[CharacteristicMessage, ...]
    trace: tuple[TraceRow, ...]


def run_session(
    clip: AudioClip,
    params: ModelParams,
    cfg: DetectorConfig | None = None,
    spec_cfg: SpectrogramConfig | None = None,
    env: EnvironmentSim | None = None,
) -> SessionResult:
    """Stream a whole clip through capture, inference, alerting, and sensing.

    Messages come back in emission order, totally ordered by (timestamp,
    position); the trace has one row per analysis window.
    """
    cfg = cfg or DetectorConfig()
    if cfg.window_len_ms % cfg.hop_ms != 0:
        raise ValueError("window_len_ms must be a multiple of hop_ms for bank-aligned capture")
    env = env or EnvironmentSim()

    detector = SnoreDetector(params, cfg, spec_cfg)
    policy = AlertPolicy(cfg)
    sampler = env.sampler()

    bank_size = (cfg.hop_ms * clip.sample_rate) // 1000
    banks_per_window = cfg.window_len_ms // cfg.hop_ms
    buffer = DoubleBuffer(bank_size)
    recent: deque[np.ndarray] = deque(maxlen=banks_per_window)

    messages: list[CharacteristicMessage] = []
    trace: list[TraceRow] = []
    consumed = 0
    next_env_ms = 0

    def process_bank(bank: np.ndarray) -> None:
        nonlocal consumed, next_env_ms
        recent.append(bank)
        consumed += 1
        if consumed < banks_per_window:
            return
        window_index = consumed - banks_per_window
        t = window_index * cfg.hop_ms
        while next_env_ms <= t:
            messages.extend(env_messages(sampler.sample(next_env_ms)))
            next_env_ms += cfg.env_period_ms
        window = FrameWindow(np.concatenate(recent), start_time_ms=t, sample_rate=clip.sample_rate)
        result = detector.step(window)
        messages.extend(result.messages)
        state, alert_msg = policy.update(result.smoothed_class, t)
        if alert_msg is not None:
            messages.append(alert_msg)
        trace.append(
            TraceRow(
                t_ms=t,
                p_snore=result.prediction.p_snore,
                raw_class=result.raw_class,
                smoothed_class=result.smoothed_class,
                alert_active=state.active,
                pwm_freq_hz=state.pwm_freq_hz,
            )
        )

    # one writer and one reader interleaved in lockstep: each bank-sized
    # write is followed by a drain, so the writer can never block.
    for start in range(0, clip.samples.size, bank_size):
        buffer.write(clip.samples[start : start + bank_size])
        while (bank := buffer.take(block=False)) is not None:
            process_bank(bank)
    buffer.close()
    while (bank := buffer.take(block=False)) is not None:
        process_bank(bank)

    # the sensor loop keeps its own cadence to the end of the captured stream
    end_ms = consumed * cfg.hop_ms
    while trace and next_env_ms <= end_ms:
        messages.extend(env_messages(sampler.sample(next_env_ms)))
        next_env_ms += cfg.env_period_ms

    return SessionResult(tuple(messages), tuple(trace))


def trace_episodes(trace, hop_ms: int | None = None) -> list[tuple[int, int]]:
    """Snore intervals implied by the smoothed-class trace.

    A run of snoring windows spans from its first window start to the start
    of the next non-snoring window; a run still open at the end of the trace
    closes one hop after its last window.
    """
    if not trace:
        return []
    if hop_ms is None:
        hop_ms = trace[1].t_ms - trace[0].t_ms if len(trace) > 1 else DetectorConfig().hop_ms
    episodes = []
    open_start = None
    for row in trace:
        if row.smoothed_class == Label.SNORING and open_start is None:
            open_start = row.t_ms
        elif row.smoothed_class == Label.NON_SNORING and open_start is not None:
            episodes.append((open_start, row.t_ms))
            open_start = None
    if open_start is not None:
        episodes.append((open_start, trace[-1].t_ms + hop_ms))
    return episodes


def trace_snore_ms(trace, hop_ms: int | None = None) -> int:
    """Total snoring time implied by the smoothed-class trace."""
    return sum(end - start for start, end in trace_episodes(trace, hop_ms))


def write_trace_csv(trace, fh) -> None:
    """Write trace rows as CSV (`t_ms,p_snore,...`) to a path or text file."""
    owned = not isinstance(fh, TextIOBase)
    out = open(fh, "w", newline="") if owned else fh
    try:
        writer = csv.writer(out)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow(
                [
                    row.t_ms,
                    repr(row.p_snore),
                    row.raw_class.value,
                    row.smoothed_class.value,
                    int(row.alert_active),
                    repr(row.pwm_freq_hz),
                ]
            )
    finally:
        if owned:
            out.close()
