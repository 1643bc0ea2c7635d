"""Map-level correlation metrics, multi-reference fusion, FPR in non-overlap regions, reports."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import EmptySupportError
from .types import QualityMap

log = logging.getLogger(__name__)

DEGENERATE_VAR = 1e-12
FUSION_MODES = ("max", "min", "mean", "median")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two values")
    return x, y


def plcc(x, y) -> float:
    """Pearson correlation; 0 when either side has variance below 1e-12."""
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx / x.size < DEGENERATE_VAR or syy / y.size < DEGENERATE_VAR:
        return 0.0
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def srcc(x, y) -> float:
    """Spearman correlation as the Pearson correlation of average-tie ranks."""
    x, y = _pair(x, y)
    return plcc(rankdata(x, method="average"), rankdata(y, method="average"))


def fuse_maps(maps: Sequence[QualityMap], mode: str = "max") -> QualityMap:
    """Pixelwise fusion over the maps valid at each pixel; valid where any input is."""
    if not maps:
        raise ValueError("fuse_maps needs at least one map")
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("all maps must share a resolution")
    values = np.stack([m.values for m in maps])
    valid = np.stack([m.valid for m in maps])
    any_valid = valid.any(axis=0)
    masked = np.where(valid, values, np.nan)
    out = np.zeros(shape, dtype=np.float64)
    if any_valid.any():
        reducer = {"max": np.nanmax, "min": np.nanmin, "mean": np.nanmean, "median": np.nanmedian}[mode]
        out[any_valid] = reducer(masked[:, any_valid], axis=0)
    return QualityMap(out, any_valid)


def fpr_at_top(pred: QualityMap, target: QualityMap, overlap: np.ndarray, x_percent: float) -> float:
    """False-positive rate among the top ``x_percent`` (a fraction) of non-overlap predictions.

    A selected pixel counts as a false positive when its target lies strictly
    below the non-overlap median target.  Ties at the selection threshold are
    all selected.
    """
    overlap = np.asarray(overlap, dtype=bool)
    if pred.shape != target.shape or overlap.shape != pred.shape:
        raise ValueError("pred, target and overlap must share a shape")
    if not 0 < x_percent <= 1:
        raise ValueError(f"x_percent must be a fraction in (0, 1], got {x_percent}")
    region = ~overlap
    if not region.any():
        raise EmptySupportError("no non-overlapping pixels")
    p = pred.values[region]
    t = target.values[region]
    k = max(1, math.ceil(x_percent * p.size))
    cutoff = np.sort(p)[::-1][k - 1]
    selected = p >= cutoff
    low = t < np.median(t)
    return float(np.count_nonzero(selected & low) / np.count_nonzero(selected))


@dataclass(frozen=True)
class EvalRecord:
    scene_id: str
    frame_id: str
    method: str
    target_metric: str
    plcc: float
    srcc: float
    support: int

    def __post_init__(self):
        if self.support <= 0:
            raise ValueError("support must be positive")
        for v in (self.plcc, self.srcc):
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"correlation {v} outside [-1, 1]")


@dataclass(frozen=True)
class Aggregate:
    scene_id: str  # "*" for the overall row
    method: str
    target_metric: str
    plcc: float
    srcc: float
    n_frames: int


def evaluate(
    outputs: Mapping[tuple[str, str], QualityMap],
    targets: Mapping[tuple[str, str], QualityMap],
    method: str = "method",
    target_metric: str = "ssim",
    valid_only: bool = False,
) -> tuple[list[EvalRecord], list[Aggregate]]:
    """Per-frame PLCC/SRCC, then unweighted means per scene and overall.

    Keys are ``(scene_id, frame_id)``.  Support is the intersection of the two
    validity grids; with ``valid_only`` false the prediction is treated as
    dense (its validity ignored).
    """
    if set(outputs) != set(targets):
        raise ValueError("method outputs and targets cover different frames")
    records = []
    for key in sorted(outputs):
        pred, tgt = outputs[key], targets[key]
        if pred.shape != tgt.shape:
            raise ValueError(f"shape mismatch for frame {key}")
        support = tgt.valid & (pred.valid if valid_only else True)
        n = int(np.count_nonzero(support))
        if n < 2:
            log.warning("frame %s/%s has no evaluable support; skipped", *key)
            continue
        x, y = pred.values[support], tgt.values[support]
        records.append(EvalRecord(key[0], key[1], method, target_metric, plcc(x, y), srcc(x, y), n))
    return records, aggregate(records)


def aggregate(records: Sequence[EvalRecord]) -> list[Aggregate]:
    rows = []
    by_scene: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_scene.setdefault(r.scene_id, []).append(r)
    for sid in sorted(by_scene):
        rs = by_scene[sid]
        rows.append(_mean_row(sid, rs))
    if records:
        rows.append(_mean_row("*", records))
    return rows


def _mean_row(scene_id: str, rs: Sequence[EvalRecord]) -> Aggregate:
    return Aggregate(
        scene_id,
        rs[0].method,
        rs[0].target_metric,
        float(np.mean([r.plcc for r in rs])),
        float(np.mean([r.srcc for r in rs])),
        len(rs),
    )


def regular_subset(n_available: int, n_ref: int) -> list[int]:
    """Deterministic, evenly spread subset of reference indices, nested in ``n_ref``.

    Greedy farthest-point order along the index line starting from 0, so the
    first ``n`` picks are spread at roughly regular intervals and the subset for
    ``n`` always contains the subset for ``n - 1``.
    """
    if not 1 <= n_ref <= n_available:
        raise ValueError(f"n_ref={n_ref} outside [1, {n_available}]")
    chosen = [0]
    idx = np.arange(n_available)
    while len(chosen) < n_ref:
        dist = np.min(np.abs(idx[:, None] - np.asarray(chosen)[None, :]), axis=1)
        chosen.append(int(np.argmax(dist)))  # argmax takes the lowest index on ties
    return sorted(chosen)


@dataclass(frozen=True)
class SweepPoint:
    n_ref: int
    plcc: float
    srcc: float
    mean_support: float


def reference_sweep(
    frames: Sequence[str],
    references: Sequence[str] | Mapping[str, Sequence[str]],
    predict_fn: Callable[[str, str], QualityMap],
    targets: Mapping[str, QualityMap],
    n_ref_range: Sequence[int],
    mode: str = "max",
    valid_only: bool = False,
    scene_id: str = "scene",
) -> list[SweepPoint]:
    """Fuse predictions from ``n`` regularly spaced references for each ``n`` in the range.

    ``references`` is either one ordered list shared by all frames or a
    per-frame mapping.  ``predict_fn(frame, reference)`` is called at most
    once per pair.
    """
    refs_of = references if isinstance(references, Mapping) else {f: references for f in frames}
    n_ref_range = list(n_ref_range)
    available = min((len(refs_of[f]) for f in frames), default=0)
    if not n_ref_range or min(n_ref_range) < 1 or max(n_ref_range) > available:
        raise ValueError(f"n_ref range {n_ref_range} exceeds the {available} available references")
    cache: dict[tuple[str, str], QualityMap] = {}

    def get(f, r):
        if (f, r) not in cache:
            cache[(f, r)] = predict_fn(f, r)
        return cache[(f, r)]

    curve = []
    for n in n_ref_range:
        fused = {}
        for f in frames:
            refs = refs_of[f]
            fused[(scene_id, f)] = fuse_maps([get(f, refs[i]) for i in regular_subset(len(refs), n)], mode)
        _, rows = evaluate(fused, {(scene_id, f): targets[f] for f in frames}, valid_only=valid_only)
        overall = rows[-1] if rows else None
        curve.append(
            SweepPoint(
                n,
                overall.plcc if overall else float("nan"),
                overall.srcc if overall else float("nan"),
                float(np.mean([m.valid.sum() for m in fused.values()])),
            )
        )
    return curve


# -- reports ----------------------------------------------------------------------


def records_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    fields = list(EvalRecord.__dataclass_fields__)
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in records:
        row = asdict(r)
        row["plcc"] = f"{r.plcc:.6f}"
        row["srcc"] = f"{r.srcc:.6f}"
        w.writerow(row)
    return buf.getvalue()


def summary_markdown(rows: Sequence[Aggregate]) -> str:
    lines = [
        "| scene | method | target | PLCC | SRCC | frames |",
        "|---|---|---|---|---|---|",
    ]
    for a in rows:
        scene = "all" if a.scene_id == "*" else a.scene_id
        lines.append(f"| {scene} | {a.method} | {a.target_metric} | {a.plcc:.4f} | {a.srcc:.4f} | {a.n_frames} |")
    return "\n".join(lines) + "\n"


def sweep_csv(curve: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    buf.write("n_ref,plcc,srcc,mean_support\n")
    for p in curve:
        buf.write(f"{p.n_ref},{p.plcc:.6f},{p.srcc:.6f},{p.mean_support:.1f}\n")
    return buf.getvalue()
