"""Simulate the sensor device over one stretch of night audio.

Hop-sized banks flow through the double buffer; each completed window is
classified, smoothed by majority vote, and published as characteristic
messages. The haptic alert arms after 9 consecutive smoothed snore windows
and ramps its PWM drive, then releases after 15 quiet ones.
"""

import numpy as np

from snorewatch.audio import AudioClip, Label, synth_corpus
from snorewatch.detector import DetectorConfig, run_session, trace_snore_ms
from snorewatch.link import ActivitySummary, Alerting
from snorewatch.nn import TrainConfig, train


def main():
    corpus = synth_corpus(seed=7, n_per_class=40, clip_seconds=3.0)
    print("training a quick model for the demo...")
    params, _ = train(corpus, TrainConfig(seed=1, epochs=25), input_side=24)

    fresh = synth_corpus(seed=99, n_per_class=8, clip_seconds=3.0)
    snores = [c.samples for c in fresh if c.label == Label.SNORING]
    others = [c.samples for c in fresh if c.label == Label.NON_SNORING]
    night = np.concatenate([others[0], others[1], *snores[:5], others[2], others[3]])
    clip = AudioClip(night, 16000)

    result = run_session(clip, params, DetectorConfig())
    print(f"\n{clip.duration_s:.0f} s stream -> {len(result.trace)} windows, "
          f"{len(result.messages)} messages, snoring {trace_snore_ms(result.trace) / 1000:.1f} s\n")

    print("summary / alerting message log:")
    for msg in result.messages:
        if isinstance(msg, ActivitySummary):
            print(f"  t={msg.window_start_ms / 1000:6.2f}s  summary  class={msg.inferred_class.value}"
                  f"  episodes={msg.episode_count}")
        elif isinstance(msg, Alerting):
            state = "ON " if msg.active else "off"
            print(f"  t={msg.timestamp_ms / 1000:6.2f}s  alert {state}  intensity={msg.intensity_byte}/255")

    peak = max((row.pwm_freq_hz for row in result.trace), default=0)
    print(f"\npeak PWM drive during the session: {peak:.0f} Hz")


if __name__ == "__main__":
    main()
