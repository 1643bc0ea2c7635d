"""Quality-aware supervision for splatting trainers.

Candidate consolidation and pseudo ground-truth selection, percentile and soft
masks, the masked reconstruction loss, and export of the resulting artifacts
(PNG images plus a JSON manifest) for an external trainer to consume.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import formats
from .errors import EmptySupportError
from .featuremetrics import ssim_index
from .types import QualityMap

log = logging.getLogger(__name__)

DEFAULT_TAU = 50.0
DEFAULT_LAMBDA_DSSIM = 0.2
MASK_KINDS = ("binary", "soft", "all_ones")
SCORE_TIE_TOL = 1e-12

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "views"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": 1},
        "views": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["view_id", "pseudo_gt_path", "mask_path", "score", "tau", "kind", "references"],
                "additionalProperties": False,
                "properties": {
                    "view_id": {"type": "string"},
                    "pseudo_gt_path": {"type": "string"},
                    "mask_path": {"type": "string"},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                    "tau": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 100},
                    "kind": {"enum": list(MASK_KINDS)},
                    "references": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class Candidate:
    image: np.ndarray
    maps: tuple[QualityMap, QualityMap]


@dataclass(frozen=True)
class CandidateSet:
    view_id: str
    candidates: tuple[Candidate, ...]
    references: tuple[str, str] = ("", "")

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "references", tuple(self.references))
        if not self.candidates:
            raise ValueError("a candidate set needs at least one candidate")
        shape = self.candidates[0].image.shape
        for c in self.candidates:
            if c.image.shape != shape or any(m.shape != shape[:2] for m in c.maps):
                raise ValueError("candidate images and maps must share one resolution")


@dataclass(frozen=True)
class SelectionResult:
    view_id: str
    index: int
    pseudo_gt: np.ndarray
    consolidated: QualityMap
    score: float
    scores: tuple[float, ...]
    references: tuple[str, ...] = ()


@dataclass(frozen=True)
class SupervisionMask:
    mask: np.ndarray
    tau: float | None
    kind: str

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        m = np.asarray(self.mask, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("mask must be a 2-D grid")
        if self.kind != "soft" and not np.isin(m, (0.0, 1.0)).all():
            raise ValueError("binary masks may only contain 0 and 1")
        if m.min(initial=0.0) < 0 or m.max(initial=0.0) > 1:
            raise ValueError("mask weights must lie in [0, 1]")
        object.__setattr__(self, "mask", m)


def consolidate(q1: QualityMap, q2: QualityMap) -> QualityMap:
    """Pixelwise max where both are valid; the valid one where only one is."""
    if q1.shape != q2.shape:
        raise ValueError(f"map shapes differ: {q1.shape} vs {q2.shape}")
    a = np.where(q1.valid, q1.values, -np.inf)
    b = np.where(q2.valid, q2.values, -np.inf)
    valid = q1.valid | q2.valid
    return QualityMap(np.where(valid, np.maximum(a, b), 0.0), valid)


def image_score(q: QualityMap) -> float:
    if not q.valid.any():
        raise EmptySupportError("quality map has no valid pixels")
    return float(q.values[q.valid].mean())


def select_pseudo_gt(cset: CandidateSet) -> SelectionResult:
    """Keep the candidate whose consolidated map has the highest mean; ties go to the lowest index."""
    merged = [consolidate(*c.maps) for c in cset.candidates]
    scores = tuple(image_score(q) for q in merged)
    # scores within rounding of the maximum count as tied, so the lowest index wins
    best = int(np.flatnonzero(np.asarray(scores) >= max(scores) - SCORE_TIE_TOL)[0])
    return SelectionResult(
        cset.view_id, best, cset.candidates[best].image, merged[best], scores[best], scores, cset.references
    )


def percentile_mask(q: QualityMap, tau: float = DEFAULT_TAU) -> SupervisionMask:
    """Keep valid pixels at or above the (100 - tau)-th percentile of valid values."""
    if not 0 < tau <= 100:
        raise ValueError(f"tau must lie in (0, 100], got {tau}")
    if not q.valid.any():
        raise EmptySupportError("quality map has no valid pixels")
    threshold = np.percentile(q.values[q.valid], 100.0 - tau, method="linear")
    return SupervisionMask((q.valid & (q.values >= threshold)).astype(np.float64), float(tau), "binary")


def soft_mask(q: QualityMap) -> SupervisionMask:
    return SupervisionMask(np.where(q.valid, q.values, 0.0), None, "soft")


def all_ones_mask(shape: tuple[int, int]) -> SupervisionMask:
    """Mask for real input frames, which are supervised everywhere."""
    return SupervisionMask(np.ones(shape), None, "all_ones")


def masked_recon_loss(
    rendered: np.ndarray,
    target: np.ndarray,
    mask: SupervisionMask,
    lambda_dssim: float = DEFAULT_LAMBDA_DSSIM,
    mask_dssim: bool = False,
) -> tuple[float, dict[str, float]]:
    """Mask-weighted L1 mixed with D-SSIM.

    The L1 term is normalized by the total mask weight, so binary and soft
    masks share one formula.  D-SSIM covers the whole frame unless
    ``mask_dssim`` is set, in which case the SSIM map is mask-weighted too.
    """
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"image shapes differ: {r.shape} vs {t.shape}")
    if r.ndim == 2:
        r, t = r[..., None], t[..., None]
    w = mask.mask
    if w.shape != r.shape[:2]:
        raise ValueError(f"mask shape {w.shape} does not match image {r.shape[:2]}")
    wsum = w.sum()
    per_pixel = np.abs(r - t).mean(axis=2)
    if wsum > 0:
        l1 = float((w * per_pixel).sum() / wsum)
    else:
        log.warning("mask has zero total weight; L1 term set to 0")
        l1 = 0.0
    ssim_px = ssim_index(r, t).mean(axis=2)
    if mask_dssim and wsum > 0:
        ssim_mean = float((w * ssim_px).sum() / wsum)
    else:
        ssim_mean = float(ssim_px.mean())
    dssim = 1.0 - ssim_mean
    total = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim
    return total, {"l1": l1, "dssim": dssim, "total": total}


def unmasked_recon_loss(rendered, target, lambda_dssim: float = DEFAULT_LAMBDA_DSSIM) -> float:
    """Standard splatting photometric loss: (1 - lambda) * mean L1 + lambda * (1 - mean SSIM)."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return float((1.0 - lambda_dssim) * np.abs(r - t).mean() + lambda_dssim * (1.0 - ssim_index(r, t).mean()))


def _safe_name(view_id: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in view_id)
    return keep or "view"


def export_guidance(
    entries: Sequence[tuple[SelectionResult, SupervisionMask]], out_dir
) -> Path:
    """Write pseudo-GT PNGs, 8-bit mask PNGs and ``manifest.json``; return the manifest path."""
    out = Path(out_dir)
    views = []
    try:
        (out / "pseudo_gt").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        seen = set()
        for sel, mask in entries:
            name = _safe_name(sel.view_id)
            if name in seen:
                raise ValueError(f"duplicate view id {sel.view_id!r}")
            seen.add(name)
            gt_rel = f"pseudo_gt/{name}.png"
            mask_rel = f"masks/{name}.png"
            formats.write_rgb_png(out / gt_rel, sel.pseudo_gt)
            formats.write_gray8_png(out / mask_rel, mask.mask)
            views.append(
                {
                    "view_id": sel.view_id,
                    "pseudo_gt_path": gt_rel,
                    "mask_path": mask_rel,
                    "score": round(float(sel.score), 10),
                    "tau": mask.tau,
                    "kind": mask.kind,
                    "references": [str(r) for r in sel.references],
                }
            )
        manifest = out / "manifest.json"
        tmp = manifest.with_suffix(".json.tmp")
        tmp.write_text(json.dumps({"version": 1, "views": views}, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, manifest)
    except OSError as exc:
        raise OSError(f"failed to export guidance to {out}: {exc}") from exc
    return manifest


def load_mask(path) -> np.ndarray:
    return formats.read_gray8_png(path)
