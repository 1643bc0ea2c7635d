"""Training-tuple construction, the optimization loop, and inference."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .completion import (
    CompletionNet,
    NetConfig,
    build_model,
    complete,
    load_checkpoint,
    prepare_inputs,
    save_checkpoint,
)
from .errors import ConfigError, EmptySupportError, NumericError
from .featuremetrics import (
    DEFAULT_DROP_FRACTION,
    FeatureProvider,
    build_partial_map,
    feature_similarity_map,
    ssim_map,
)
from .losses import LossWeights, total_loss
from .scenekit import DEFAULT_RECIPES, CorruptionRecipe, corrupt_frame
from .types import Dataset, Frame, QualityMap

log = logging.getLogger(__name__)

TARGET_METRICS = ("dinov2_sim", "ssim")

# Full-scale schedule; desk defaults below are much shorter.
FULL_SCALE_ITERATIONS = 270_000
FULL_SCALE_RESTART_PERIOD = 135_000
FULL_SCALE_BATCH_SIZE = 12
FULL_SCALE_RESOLUTION = (294, 518)
FULL_SCALE_REF_OFFSETS = (-20, -10, 10, 20)
DESK_REF_OFFSETS = (-4, -2, 2, 4)


@dataclass(frozen=True)
class TrainTuple:
    query: Frame
    reference: Frame
    partial: QualityMap
    target: QualityMap
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainConfig:
    target_metric: str = "ssim"
    iterations: int = 2000
    batch_size: int = 4
    lr_initial: float = 1e-4
    lr_floor: float = 1e-6
    restart_period: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    resolution: tuple[int, int] = (64, 64)
    checkpoint_every: int = 500
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.target_metric not in TARGET_METRICS:
            raise ConfigError(f"target_metric must be one of {TARGET_METRICS}, got {self.target_metric!r}")
        if self.iterations <= 0 or self.batch_size <= 0 or self.restart_period <= 0:
            raise ConfigError("iterations, batch_size and restart_period must be positive")
        if not self.lr_initial > self.lr_floor > 0:
            raise ConfigError("need lr_initial > lr_floor > 0")
        object.__setattr__(self, "resolution", tuple(self.resolution))
        object.__setattr__(self, "betas", tuple(self.betas))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    @classmethod
    def full_scale(cls, target_metric: str = "dinov2_sim") -> "TrainConfig":
        return cls(
            target_metric=target_metric,
            iterations=FULL_SCALE_ITERATIONS,
            batch_size=FULL_SCALE_BATCH_SIZE,
            restart_period=FULL_SCALE_RESTART_PERIOD,
            resolution=FULL_SCALE_RESOLUTION,
            checkpoint_every=5000,
        )

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Single-CPU learning check: 32x32 inputs, a higher peak rate, one cosine cycle."""
        base = dict(iterations=2000, batch_size=4, lr_initial=1e-3, restart_period=2000, resolution=(32, 32))
        base.update(overrides)
        if "restart_period" not in overrides and "iterations" in overrides:
            base["restart_period"] = overrides["iterations"]
        return cls(**base)

    def to_json(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def cosine_restart_lr(iteration: int, initial: float, floor: float, period: int) -> float:
    """Cosine annealing from ``initial`` to ``floor``, restarting every ``period`` iterations."""
    phase = (iteration % period) / period
    return floor + 0.5 * (initial - floor) * (1.0 + math.cos(math.pi * phase))


# -- tuples -----------------------------------------------------------------------


def target_map(metric: str, corrupted: Frame, clean: Frame, provider: FeatureProvider) -> QualityMap:
    if metric == "ssim":
        return ssim_map(corrupted.image, clean.image)
    if metric == "dinov2_sim":
        return feature_similarity_map(provider(corrupted), provider(clean))
    raise ConfigError(f"unknown target metric {metric!r}")


def _query_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_query(dataset: Dataset, index: int, recipes: Sequence[CorruptionRecipe], seed: int):
    """The corrupted query for frame ``index``: recipe ``index mod len(recipes)``, seed derived from both."""
    recipe = recipes[index % len(recipes)]
    return corrupt_frame(dataset[index], recipe, _query_seed(seed, index)), recipe


def make_tuples(
    dataset: Dataset,
    provider: FeatureProvider,
    recipes: Sequence[CorruptionRecipe] = DEFAULT_RECIPES,
    ref_offsets: Sequence[int] = DESK_REF_OFFSETS,
    seed: int = 0,
    target_metric: str = "ssim",
    drop_fraction: float = DEFAULT_DROP_FRACTION,
    jobs: int = 1,
) -> list[TrainTuple]:
    """Corrupt each frame into a query and pair it with clean references at ``ref_offsets``.

    Query ``i`` uses recipe ``i mod len(recipes)`` and is shared by all its
    pairs.  Offsets that leave the sequence are skipped, never wrapped.
    """
    if not recipes:
        raise ValueError("need at least one corruption recipe")
    n = len(dataset)
    pairs = [(i, i + o) for i in range(n) for o in ref_offsets if o != 0 and 0 <= i + o < n]
    if not pairs:
        raise EmptySupportError(f"no in-range query/reference pairs for offsets {list(ref_offsets)} over {n} frames")

    def build_query(i):
        cf, recipe = make_query(dataset, i, recipes, seed)
        return cf, recipe, target_map(target_metric, cf.frame, dataset[i], provider)

    def build_pair(pair, queries):
        i, j = pair
        cf, recipe, target = queries[i]
        partial = build_partial_map(cf.frame, dataset[j], provider, drop_fraction)
        meta = {
            "scene_id": dataset.scene_id,
            "query_view": dataset[i].name or str(i),
            "reference_view": dataset[j].name or str(j),
            "recipe_id": recipe.recipe_id,
        }
        return TrainTuple(cf.frame, dataset[j], partial, target, meta)

    used = sorted({i for i, _ in pairs})
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        queries = dict(zip(used, pool.map(build_query, used)))
        return list(pool.map(lambda p: build_pair(p, queries), pairs))


# -- training -------------------------------------------------------------------


def _stack_tuples(tuples: Sequence[TrainTuple], net_config: NetConfig):
    qs, rs, ps, ts = [], [], [], []
    hw = net_config.input_hw
    for t in tuples:
        q, r, p = prepare_inputs(net_config, t.query.image, t.reference.image, t.partial)
        tgt = torch.from_numpy(t.target.values)[None, None].float()
        if tuple(tgt.shape[-2:]) != tuple(hw):
            tgt = F.interpolate(tgt, size=tuple(hw), mode="bilinear", align_corners=False).clamp(0, 1)
        qs.append(q)
        rs.append(r)
        ps.append(p)
        ts.append(tgt)
    return torch.cat(qs), torch.cat(rs), torch.cat(ps), torch.cat(ts)


def round_robin_order(scene_ids: Sequence[str], rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each scene, then interleave scenes one sample at a time."""
    groups: dict[str, list[int]] = {}
    for idx, sid in enumerate(scene_ids):
        groups.setdefault(sid, []).append(idx)
    queues = [list(rng.permutation(groups[k])) for k in sorted(groups)]
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(int(q.pop(0)))
    return np.asarray(order, dtype=np.int64)


class BatchSchedule:
    """Batch ``k`` is a pure function of ``k``, so resumed runs see the same data."""

    def __init__(self, scene_ids: Sequence[str], batch_size: int, seed: int):
        self.scene_ids = list(scene_ids)
        self.n = len(self.scene_ids)
        self.batch_size = batch_size
        self.seed = seed
        self._orders: dict[int, np.ndarray] = {}

    def _order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            self._orders[epoch] = round_robin_order(self.scene_ids, np.random.default_rng([self.seed, epoch]))
        return self._orders[epoch]

    def batch(self, iteration: int) -> np.ndarray:
        start = iteration * self.batch_size
        return np.array([self._order(p // self.n)[p % self.n] for p in range(start, start + self.batch_size)])


def _param_groups(model: CompletionNet, weight_decay: float):
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        # biases and norm scales are 1-D
        (no_decay if p.ndim <= 1 else decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def _optimizer_tensors(model: CompletionNet, opt: torch.optim.Optimizer) -> tuple[dict, int]:
    tensors, step = {}, 0
    for name, p in model.named_parameters():
        state = opt.state.get(p)
        if state:
            tensors[f"adam/{name}/exp_avg"] = state["exp_avg"]
            tensors[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"]
            step = int(state["step"])
    return tensors, step


def _restore_optimizer(model: CompletionNet, opt: torch.optim.Optimizer, tensors: dict, step: int) -> None:
    for name, p in model.named_parameters():
        if f"adam/{name}/exp_avg" in tensors:
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": tensors[f"adam/{name}/exp_avg"].clone(),
                "exp_avg_sq": tensors[f"adam/{name}/exp_avg_sq"].clone(),
            }


def _round(x: float) -> float:
    return float(f"{x:.10g}")


def train(
    config: TrainConfig,
    tuples: Sequence[TrainTuple],
    net_config: NetConfig,
    out_dir=None,
    resume_from=None,
    progress=None,
) -> tuple[CompletionNet, list[dict]]:
    """Optimize the completion network on ``tuples``.

    Writes ``train_log.jsonl`` and ``model.ckpt`` into ``out_dir`` when given.
    With ``resume_from`` the iteration count, weights and optimizer moments are
    restored from a checkpoint and training continues to ``config.iterations``.
    """
    if not tuples:
        raise EmptySupportError("no training tuples")
    if tuple(net_config.input_hw) != tuple(config.resolution):
        net_config = replace(net_config, input_hw=tuple(config.resolution))
    torch.manual_seed(config.seed)
    start = 0
    resumed_tensors: dict = {}
    adam_step = 0
    if resume_from is not None:
        model, meta, resumed_tensors = load_checkpoint(resume_from)
        net_config = model.config
        start = int(meta.get("iteration", 0))
        adam_step = int(meta.get("adam_step", 0))
    else:
        model = build_model(net_config, seed=config.seed)
    model.train()
    opt = torch.optim.AdamW(
        _param_groups(model, config.weight_decay), lr=config.lr_initial, betas=config.betas
    )
    if resumed_tensors:
        _restore_optimizer(model, opt, resumed_tensors, adam_step)

    data = _stack_tuples(tuples, net_config)
    schedule = BatchSchedule([t.meta.get("scene_id", "") for t in tuples], config.batch_size, config.seed)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume_from is not None else "w")

    def checkpoint(iteration):
        if out is None:
            return
        tensors, step = _optimizer_tensors(model, opt)
        save_checkpoint(
            out / "model.ckpt",
            model,
            meta={"iteration": iteration, "adam_step": step, "train_config": config.to_json()},
            extra_tensors=tensors,
        )

    records: list[dict] = []
    try:
        for it in range(start, config.iterations):
            lr = cosine_restart_lr(it, config.lr_initial, config.lr_floor, config.restart_period)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = torch.from_numpy(schedule.batch(it))
            q, r, p, tgt = (d[idx] for d in data)
            pred = model(q, r, p)
            loss, parts = total_loss(pred, tgt, config.weights)
            if not math.isfinite(parts["total"]):
                raise NumericError(f"non-finite loss at iteration {it}; last good checkpoint kept")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec = {"iter": it, "lr": _round(lr)} | {k: _round(parts[k]) for k in ("l1", "jsd", "plcc", "total")}
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if progress is not None:
                progress(rec)
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                checkpoint(it + 1)
        checkpoint(config.iterations)
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, records


# -- inference ------------------------------------------------------------------


def predict(
    model: CompletionNet,
    query: Frame,
    reference: Frame,
    provider: FeatureProvider,
    drop_fraction: float = DEFAULT_DROP_FRACTION,
) -> QualityMap:
    """Partial map, then completion, resized back to the query resolution."""
    partial = build_partial_map(query, reference, provider, drop_fraction)
    dense = complete(model, query.image, reference.image, partial)
    if dense.shape != query.shape:
        t = torch.from_numpy(dense.values)[None, None]
        t = F.interpolate(t, size=query.shape, mode="bilinear", align_corners=False).clamp(0, 1)
        dense = QualityMap.dense(t[0, 0].numpy())
    return dense


@torch.no_grad()
def predict_tuple(model: CompletionNet, t: TrainTuple) -> QualityMap:
    """Completion output for a prepared tuple, at the model's input resolution."""
    return complete(model, t.query.image, t.reference.image, t.partial)
