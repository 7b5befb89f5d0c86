"""Generate a toy dataset, train for a few hundred iterations, evaluate.

A miniature of the full pipeline that finishes in about two minutes on a
laptop CPU.  Artifacts land under ./tiny_run/.
Run with: python3 demos/end_to_end_tiny_run.py
"""

import os

import numpy as np

from vq360 import data as data_io
from vq360 import metrics
from vq360.training import TrainConfig, score_video, train_loop


def main():
    root = "tiny_run"
    synth = data_io.SynthConfig(seed=7, contents=6, levels=3, frames=30,
                                height=32, width=64, family="gaussian_blur",
                                holdout_contents=2)
    manifest = data_io.synth_generate(synth, os.path.join(root, "data"))
    train_count = sum(e.split == "train" for e in manifest.entries)
    print(f"dataset: {len(manifest.entries)} videos, {train_count} for training")

    config = TrainConfig(channels=8, blocks_per_stage=(1, 1, 1), reduction=4,
                         embed_channels=4, batch_size=4, clip_count=2,
                         frame_interval=3, iterations=300, seed=0)
    result = train_loop(manifest, config, os.path.join(root, "run"))
    print(f"trained {len(result.losses)} iterations, "
          f"final batch MSE {result.losses[-1][1]:.4g}")
    print(f"checkpoint: {result.checkpoint_path}")

    held_out = [e for e in manifest.entries if e.split == "test"]
    predictions = [
        score_video(result.model, data_io.load_video(e).astype(np.float32),
                    config.clip_count, config.frame_interval)
        for e in held_out
    ]
    report, _ = metrics.evaluate_scores(predictions,
                                        [e.score / 100.0 for e in held_out])
    print(f"\nheld-out contents ({len(held_out)} videos):")
    for entry, pred in zip(held_out, predictions):
        print(f"  {entry.id}  predicted {pred:.3f}  subjective {entry.score / 100.0:.3f}")
    srocc = "undefined" if report.srocc is None else f"{report.srocc:+.3f}"
    print(f"rank correlation on unseen contents: {srocc}")


if __name__ == "__main__":
    main()
