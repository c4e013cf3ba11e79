"""Snore detection pipeline: audio front end, CNN, device/gateway/cloud simulation."""

from .audio import (
    AudioClip,
    DoubleBuffer,
    FrameWindow,
    Label,
    RecentAudioRing,
    load_wav,
    resample,
    save_wav,
    stream_windows,
    synth_corpus,
)
from .features import FeatureImage, SpectrogramConfig, extract
from .nn import (
    EvalReport,
    ModelParams,
    Prediction,
    TrainConfig,
    evaluate,
    forward,
    init_params,
    load_params,
    save_params,
    train,
)

__version__ = "0.1.0"
