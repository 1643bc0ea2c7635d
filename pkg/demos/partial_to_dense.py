"""Walk one query/reference pair from a synthetic scene to a dense quality map.

Run: python3 demos/partial_to_dense.py [--iterations 300]
"""

import argparse

import numpy as np
import torch

from priqa.completion import NetConfig
from priqa.evalharness import plcc, srcc
from priqa.featuremetrics import ToyFeatureProvider, build_partial_map
from priqa.scenekit import CorruptionRecipe, corrupt_frame, generate_planar_scene
from priqa.trainer import TrainConfig, make_tuples, predict, target_map, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=300)
    args = ap.parse_args()
    torch.set_num_threads(1)

    scene = generate_planar_scene(0, 8, resolution=(64, 64))
    provider = ToyFeatureProvider()

    # a degraded query next to a clean reference two views away
    query = corrupt_frame(scene[3], CorruptionRecipe(blur=0.8, noise=0.5, shuffle=1.0), seed=1).frame
    reference = scene[5]
    partial = build_partial_map(query, reference, provider)
    truth = target_map("ssim", query, scene[3], provider)
    print(f"partial map covers {partial.valid.mean():.1%} of the query")

    tuples = make_tuples(scene, provider, seed=0)
    print(f"training on {len(tuples)} tuples for {args.iterations} iterations")
    model, log = train(TrainConfig.toy(iterations=args.iterations), tuples, NetConfig.toy())
    print(f"total loss {log[0]['total']:.3f} -> {log[-1]['total']:.3f}")

    dense = predict(model, query, reference, provider)
    hidden = ~partial.valid
    print(f"dense map over all pixels: PLCC {plcc(dense.values.ravel(), truth.values.ravel()):.3f}, "
          f"SRCC {srcc(dense.values.ravel(), truth.values.ravel()):.3f}")
    if hidden.any():
        err = np.abs(dense.values[hidden] - truth.values[hidden]).mean()
        print(f"mean abs error where the partial map had no support: {err:.3f}")


if __name__ == "__main__":
    main()
