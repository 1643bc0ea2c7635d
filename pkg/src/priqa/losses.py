"""Training objective: L1 + temperature-softmax JSD + Pearson loss.

All functions take prediction/target tensors shaped ``(B, 1, H, W)``,
``(B, H, W)`` or ``(H, W)``; per-sample losses are averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import NumericError
from .types import QualityMap

DEGENERATE_VAR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_iqa: float = 0.5
    lambda_jsd: float = 1.0
    lambda_plcc: float = 0.25
    jsd_temperature: float = 0.2
    clamp_eps: float = 1e-6

    def __post_init__(self):
        if min(self.lambda_iqa, self.lambda_jsd, self.lambda_plcc) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.jsd_temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")

    def to_json(self) -> dict:
        return asdict(self)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, QualityMap):
        return torch.from_numpy(x.values)
    if isinstance(x, np.ndarray):
        return torch.from_numpy(x)
    return x


def _flatten(pred, target) -> tuple[torch.Tensor, torch.Tensor]:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 2:
        pred, target = pred[None], target[None]
    return pred.reshape(pred.shape[0], -1), target.reshape(target.shape[0], -1)


def l1_quality_loss(pred, target) -> torch.Tensor:
    p, t = _flatten(pred, target)
    return (p - t).abs().mean()


def _logit_softmax(x: torch.Tensor, temperature: float, eps: float) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return torch.softmax(torch.logit(x) / temperature, dim=-1)


def jsd_loss(pred, target, temperature: float = 0.2, clamp_eps: float = 1e-6) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log) between temperature-softmaxed logit maps."""
    p, t = _flatten(pred, target)
    if not (torch.isfinite(p).all() and torch.isfinite(t).all()):
        raise NumericError("non-finite values passed to jsd_loss")
    P = _logit_softmax(p, temperature, clamp_eps)
    G = _logit_softmax(t, temperature, clamp_eps)
    M = 0.5 * (P + G)
    # xlogy gives 0 * log(0 / m) = 0
    kl_pm = (torch.special.xlogy(P, P) - torch.special.xlogy(P, M)).sum(-1)
    kl_gm = (torch.special.xlogy(G, G) - torch.special.xlogy(G, M)).sum(-1)
    return (0.5 * kl_pm + 0.5 * kl_gm).mean()


def pearson_r(p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Row-wise Pearson correlation; rows with variance < 1e-12 give r = 0."""
    pc = p - p.mean(-1, keepdim=True)
    tc = t - t.mean(-1, keepdim=True)
    ssp = (pc * pc).sum(-1)
    sst = (tc * tc).sum(-1)
    n = p.shape[-1]
    degenerate = (ssp / n < DEGENERATE_VAR) | (sst / n < DEGENERATE_VAR)
    denom = torch.sqrt(torch.where(degenerate, torch.ones_like(ssp), ssp * sst))
    r = (pc * tc).sum(-1) / denom
    return torch.where(degenerate, torch.zeros_like(r), r)


def plcc_loss(pred, target) -> torch.Tensor:
    p, t = _flatten(pred, target)
    return (1.0 - pearson_r(p, t)).mean()


def total_loss(pred, target, weights: LossWeights = LossWeights()) -> tuple[torch.Tensor, dict[str, float]]:
    l1 = l1_quality_loss(pred, target)
    jsd = jsd_loss(pred, target, weights.jsd_temperature, weights.clamp_eps)
    pl = plcc_loss(pred, target)
    total = weights.lambda_iqa * l1 + weights.lambda_jsd * jsd + weights.lambda_plcc * pl
    breakdown = {"l1": l1.item(), "jsd": jsd.item(), "plcc": pl.item(), "total": total.item()}
    return total, breakdown


JSD_UPPER_BOUND = math.log(2.0)
