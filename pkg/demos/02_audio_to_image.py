"""Walk one analysis window through the audio-to-image front end.

Stages: Hann-windowed magnitude spectra, triangular mel filterbank,
log compression, corner-aligned bilinear resize, min-max normalization.
The result is the 24x24 (or 64x64) grayscale image the network consumes.
"""

from snorewatch.audio import stream_windows, synth_corpus
from snorewatch.features import SpectrogramConfig, extract, log_mel, write_pgm


def ascii_render(values, width=48):
    shades = " .:-=+*#%@"
    step = max(1, values.shape[1] // width)
    for row in values[::2]:
        print("".join(shades[int(v * (len(shades) - 1))] for v in row[::step]))


def main():
    cfg = SpectrogramConfig()
    print(f"front end: fft={cfg.fft_size} hop={cfg.frame_hop} mel_bands={cfg.mel_bands} "
          f"band=[{cfg.fmin:.0f}, {cfg.fmax:.0f}] Hz\n")

    snore, other = synth_corpus(seed=3, n_per_class=1, clip_seconds=2.0)
    for clip in (snore, other):
        window = stream_windows(clip, 999, 333)[0]
        mel = log_mel(window, cfg)
        image = extract(window, cfg, 24)
        print(f"{clip.label.value}: {len(window.samples)} samples -> log-mel {mel.shape} "
              f"-> image {image.side}x{image.side}")
        ascii_render(image.values)
        name = f"demo_{clip.label.value}.pgm"
        write_pgm(image, name)
        print(f"(saved {name}; low frequencies at the bottom)\n")


if __name__ == "__main__":
    main()
