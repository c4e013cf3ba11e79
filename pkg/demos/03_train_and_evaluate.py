"""Train the small CNN from scratch on a synthetic corpus and evaluate it.

Uses the fixed hyperparameters: three 3x3 conv layers with max pooling,
dense stack 16-32-64-128, dropout, batch 64, learning rate 0.0005 under
inverse-time decay. A couple of minutes on a laptop; entirely numpy.
"""

import time

from snorewatch.audio import synth_corpus
from snorewatch.nn import TrainConfig, evaluate, train


def main():
    clips = synth_corpus(seed=7, n_per_class=60, clip_seconds=3.0)
    cfg = TrainConfig(seed=11, epochs=20)
    print(f"training on {len(clips)} clips (80/20 stratified split), {cfg.epochs} epochs...")
    t0 = time.perf_counter()
    params, history = train(clips, cfg, input_side=24)
    print(f"done in {time.perf_counter() - t0:.0f}s, {params.n_params()} parameters\n")

    print("epoch  train_loss  train_acc  val_loss  val_acc      lr")
    for row in history[::4] + [history[-1]]:
        print(f"{row['epoch']:5d}  {row['train_loss']:10.4f}  {row['train_accuracy']:9.3f}"
              f"  {row['val_loss']:8.4f}  {row['val_accuracy']:7.3f}  {row['lr']:.6f}")

    report = evaluate(params, clips)
    print(f"\nwhole-corpus evaluation: accuracy {report.accuracy:.3f}, "
          f"FPR {report.false_positive_rate:.3f}, FNR {report.false_negative_rate:.3f}, "
          f"mean inference {report.mean_latency_ms:.2f} ms/window")


if __name__ == "__main__":
    main()
