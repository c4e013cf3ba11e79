"""The whole pipeline on loopback: device -> radio -> gateway -> cloud.

Starts the sleep-session service in-process, trains a quick model, then
replays a night of audio through the detector, a lossy link, and the
uploading gateway. Ends by asking the service for the session summary and
the device's trend line.
"""

import json
import tempfile

import numpy as np
import requests

from snorewatch import cli
from snorewatch.audio import AudioClip, Label, save_wav, synth_corpus
from snorewatch.nn import TrainConfig, save_params, train
from snorewatch.service import CloudServer


def main():
    workdir = tempfile.mkdtemp(prefix="kw-demo-")
    print(f"work dir: {workdir}")

    corpus = synth_corpus(seed=7, n_per_class=40, clip_seconds=3.0)
    print("training a quick model...")
    params, _ = train(corpus, TrainConfig(seed=1, epochs=25), input_side=24)
    model_path = f"{workdir}/model.kwnn"
    save_params(params, model_path)

    fresh = synth_corpus(seed=55, n_per_class=10, clip_seconds=3.0)
    snores = [c.samples for c in fresh if c.label == Label.SNORING]
    others = [c.samples for c in fresh if c.label == Label.NON_SNORING]
    pieces = [(snores if i % 3 == 0 else others)[i % 10] for i in range(20)]
    wav_path = f"{workdir}/night.wav"
    save_wav(AudioClip(np.concatenate(pieces), 16000), wav_path)

    server = CloudServer(0, f"{workdir}/data")
    server.start_background()
    url = f"http://127.0.0.1:{server.port}"
    print(f"service listening on {url}\n")

    rc = cli.main(
        [
            "simulate",
            "--wav", wav_path,
            "--model", model_path,
            "--server", url,
            "--seed", "3",
            "--loss", "0.05",
            "--dup", "0.02",
            "--spool-dir", f"{workdir}/spool",
        ]
    )
    assert rc == 0

    device_id = "kw-sim-0"
    trends = requests.get(url + "/api/v1/trends", params={"device_id": device_id}).json()
    print("\ntrend report:")
    print(json.dumps(trends, indent=2))
    server.shutdown()


if __name__ == "__main__":
    main()
