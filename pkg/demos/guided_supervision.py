"""Pick a pseudo ground truth among candidates and build its supervision mask.

Run: python3 demos/guided_supervision.py
"""

import numpy as np

from priqa.featuremetrics import ToyFeatureProvider, build_partial_map
from priqa.gsguide import Candidate, CandidateSet, masked_recon_loss, percentile_mask, select_pseudo_gt, soft_mask
from priqa.scenekit import CorruptionRecipe, corrupt_frame, generate_planar_scene


def main():
    scene = generate_planar_scene(2, 5, resolution=(48, 48))
    provider = ToyFeatureProvider()
    left, view, right = scene[1], scene[2], scene[3]

    # candidates of increasing damage stand in for generated novel views
    candidates = []
    for k, strength in enumerate((0.0, 0.4, 0.8, 1.0)):
        recipe = CorruptionRecipe(blur=strength, noise=strength, shuffle=strength)
        frame = corrupt_frame(view, recipe, seed=k).frame
        maps = (build_partial_map(frame, left, provider), build_partial_map(frame, right, provider))
        candidates.append(Candidate(frame.image, maps))

    chosen = select_pseudo_gt(CandidateSet(view.name, candidates, (left.name, right.name)))
    print("candidate scores:", ", ".join(f"{s:.3f}" for s in chosen.scores))
    print(f"selected candidate {chosen.index}")

    rendered = np.clip(view.image + np.random.default_rng(0).normal(scale=0.05, size=view.image.shape), 0, 1)
    for tau in (30, 50, 70):
        mask = percentile_mask(chosen.consolidated, tau)
        loss, parts = masked_recon_loss(rendered, chosen.pseudo_gt, mask)
        print(f"tau {tau}: keeps {mask.mask.mean():.1%} of pixels, loss {loss:.4f} (L1 {parts['l1']:.4f})")
    loss, _ = masked_recon_loss(rendered, chosen.pseudo_gt, soft_mask(chosen.consolidated))
    print(f"soft mask loss {loss:.4f}")


if __name__ == "__main__":
    main()
