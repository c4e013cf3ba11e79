import time

import pytest

from snorewatch import audio, nn, save_params


@pytest.fixture(scope="session")
def quick_corpus():
    """Small separable corpus shared by unit tests."""
    return audio.synth_corpus(seed=7, n_per_class=24, clip_seconds=2.0)


@pytest.fixture(scope="session")
def quick_model(quick_corpus):
    """Cheap but competent 24x24 model for detector/CLI tests."""
    cfg = nn.TrainConfig(seed=1, epochs=80)
    params, history = nn.train(quick_corpus, cfg, input_side=24)
    assert history[-1]["val_accuracy"] >= 0.9, "quick fixture model failed to learn"
    return params


@pytest.fixture(scope="session")
def quick_model_file(quick_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "quick.kwnn"
    save_params(quick_model, path)
    return path


@pytest.fixture(scope="session")
def full_train(tmp_path_factory):
    """The full CLI pipeline at acceptance scale: 400 clips, 30 epochs.

    Returns paths plus the measured train wall time so criteria can assert
    their runtime bounds.
    """
    from snorewatch import cli

    root = tmp_path_factory.mktemp("fulltrain")
    corpus_dir = root / "corpus"
    model_path = root / "model.kwnn"
    rc = cli.main(["synth", "--out", str(corpus_dir), "--per-class", "200", "--seed", "7"])
    assert rc == 0
    t0 = time.perf_counter()
    rc = cli.main(
        [
            "train",
            "--manifest",
            str(corpus_dir / "manifest.csv"),
            "--side",
            "24",
            "--epochs",
            "30",
            "--seed",
            "11",
            "--out",
            str(model_path),
        ]
    )
    train_seconds = time.perf_counter() - t0
    assert rc == 0
    return {
        "corpus_dir": corpus_dir,
        "manifest": corpus_dir / "manifest.csv",
        "model": model_path,
        "history": model_path.with_suffix(".history.csv"),
        "train_seconds": train_seconds,
    }
