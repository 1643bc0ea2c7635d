"""Reference-conditioned quality-completion network.

Three encoder streams run in lockstep over a multi-scale pyramid:

* reference stream: self-attention blocks over the reference image,
* query stream: the same blocks (shared weights) in cross-attention mode,
  attending to the same-stage reference features,
* partial stream: independent cross-attention blocks over the partial map
  (value and validity channels).

After every stage the query and partial streams are merged with a 1x1
convolution and the merged features continue down the query stream.  A
mirror decoder with skip connections produces a dense map through a
logistic head.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, FormatError, NumericError
from .types import QualityMap

CKPT_MAGIC = b"PRQCKPT1"


@dataclass(frozen=True)
class NetConfig:
    input_hw: tuple[int, int] = (224, 224)
    enc_channels: tuple[int, ...] = (48, 96, 192, 384)
    enc_blocks: tuple[int, ...] = (2, 3, 3, 4)
    enc_heads: tuple[int, ...] = (1, 2, 4, 8)
    dec_channels: tuple[int, ...] = (192, 96, 96)
    dec_blocks: tuple[int, ...] = (3, 3, 2)
    dec_heads: tuple[int, ...] = (4, 2, 1)
    ffn_expand: float = 4.0
    window_sizes: tuple[int, ...] = (8, 8, 0, 0)
    pe_kind: str = "sinusoidal"
    qkv_kernel: int = 3
    ca_reduction: int = 8
    share_query_reference: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        self.validate()

    @classmethod
    def full_scale(cls, input_hw=(224, 224)) -> "NetConfig":
        return cls(input_hw=tuple(input_hw))

    @classmethod
    def toy(cls, input_hw=(64, 64), **overrides) -> "NetConfig":
        base = dict(
            input_hw=tuple(input_hw),
            enc_channels=(16, 32, 64, 128),
            enc_blocks=(1, 1, 1, 1),
            enc_heads=(1, 2, 4, 8),
            dec_channels=(64, 32, 32),
            dec_blocks=(1, 1, 1),
            dec_heads=(4, 2, 1),
            ffn_expand=2.0,
            window_sizes=(8, 8, 0, 0),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def n_stages(self) -> int:
        return len(self.enc_channels)

    def validate(self) -> None:
        s = self.n_stages
        if s < 1:
            raise ConfigError("need at least one encoder stage")
        for name in ("enc_blocks", "enc_heads", "window_sizes"):
            if len(getattr(self, name)) != s:
                raise ConfigError(f"{name} must have {s} entries")
        for name in ("dec_channels", "dec_blocks", "dec_heads"):
            if len(getattr(self, name)) != s - 1:
                raise ConfigError(f"{name} must have {s - 1} entries")
        for c, h in zip(self.enc_channels + self.dec_channels, self.enc_heads + self.dec_heads):
            if h < 1 or c % h:
                raise ConfigError(f"{c} channels not divisible by {h} heads")
        H, W = self.input_hw
        if H % 2 ** (s - 1) or W % 2 ** (s - 1):
            raise ConfigError(f"input {H}x{W} not divisible by 2^{s - 1}")
        for lvl, ws in enumerate(self.window_sizes):
            if ws < 0 or (ws and ((H >> lvl) % ws or (W >> lvl) % ws)):
                raise ConfigError(f"window {ws} does not divide stage {lvl} size {(H >> lvl, W >> lvl)}")
        if self.pe_kind not in ("sinusoidal", "none"):
            raise ConfigError(f"unknown pe_kind {self.pe_kind!r}")
        if self.qkv_kernel < 1 or self.qkv_kernel % 2 == 0:
            raise ConfigError("qkv_kernel must be a positive odd integer")
        if self.ffn_expand <= 0:
            raise ConfigError("ffn_expand must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown NetConfig fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# -- building blocks -----------------------------------------------------------


class LayerNorm2d(nn.Module):
    """Layer normalization over the channel axis at every pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        xc = x - x.mean(1, keepdim=True)
        x = xc / torch.sqrt((xc * xc).mean(1, keepdim=True) + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ChannelAttention(nn.Module):
    """Per-channel sigmoid gate from a shared MLP over average- and max-pooled features."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1, bias=False)
        self.fc2 = nn.Conv2d(hidden, channels, 1, bias=False)

    def mlp(self, x):
        return self.fc2(F.gelu(self.fc1(x)))

    def forward(self, x):
        avg = x.mean(dim=(2, 3), keepdim=True)
        mx = x.amax(dim=(2, 3), keepdim=True)
        return x * torch.sigmoid(self.mlp(avg) + self.mlp(mx))


def _to_windows(x, ws):
    # (B, C, H, W) -> (B * nW, ws*ws, C)
    B, C, H, W = x.shape
    x = x.view(B, C, H // ws, ws, W // ws, ws)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, C)


def _from_windows(t, B, C, H, W, ws):
    t = t.view(B, H // ws, W // ws, ws, ws, C)
    return t.permute(0, 5, 1, 3, 2, 4).reshape(B, C, H, W)


class SpatialAttention(nn.Module):
    """Multi-head attention over pixels; queries from ``x``, keys/values from ``context``.

    ``window > 0`` restricts attention to aligned, non-overlapping windows.
    """

    def __init__(self, channels: int, heads: int, window: int = 0, qkv_kernel: int = 1):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        pad = qkv_kernel // 2
        self.heads = heads
        self.window = window
        self.q = nn.Conv2d(channels, channels, qkv_kernel, padding=pad)
        self.k = nn.Conv2d(channels, channels, qkv_kernel, padding=pad)
        self.v = nn.Conv2d(channels, channels, qkv_kernel, padding=pad)
        self.proj = nn.Conv2d(channels, channels, 1)

    def attend(self, q, k, v):
        """Scaled dot-product attention on (B, C, H, W) grids that are already projected."""
        B, C, H, W = q.shape
        ws = self.window if self.window else None
        if ws:
            q, k, v = (_to_windows(t, ws) for t in (q, k, v))
        else:
            q, k, v = (t.flatten(2).transpose(1, 2) for t in (q, k, v))
        n, L, _ = q.shape
        d = C // self.heads
        q, k, v = (t.view(n, L, self.heads, d).transpose(1, 2) for t in (q, k, v))
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(n, L, C)
        if ws:
            return _from_windows(out, B, C, H, W, ws)
        return out.transpose(1, 2).reshape(B, C, H, W)

    def forward(self, x, context=None):
        context = x if context is None else context
        if context.shape != x.shape:
            raise ValueError(f"context shape {tuple(context.shape)} != {tuple(x.shape)}")
        return self.proj(self.attend(self.q(x), self.k(context), self.v(context)))


class FeedForward(nn.Module):
    def __init__(self, channels: int, expand: float):
        super().__init__()
        hidden = max(1, int(round(channels * expand)))
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class DualGatedBlock(nn.Module):
    """Channel attention, then self/cross spatial attention, then FFN; pre-norm residuals."""

    def __init__(self, channels, heads, window=0, ffn_expand=4.0, qkv_kernel=1, ca_reduction=8):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.channel_attn = ChannelAttention(channels, ca_reduction)
        self.norm2 = LayerNorm2d(channels)
        self.spatial_attn = SpatialAttention(channels, heads, window, qkv_kernel)
        self.norm3 = LayerNorm2d(channels)
        self.ffn = FeedForward(channels, ffn_expand)

    def forward(self, x, context=None):
        """Self mode takes keys/values from the block input, so ``context=x`` is the same call."""
        if context is None:
            context = x
        elif context.shape != x.shape:
            raise ValueError(f"context shape {tuple(context.shape)} != {tuple(x.shape)}")
        x = x + self.channel_attn(self.norm1(x))
        x = x + self.spatial_attn(self.norm2(x), self.norm2(context))
        return x + self.ffn(self.norm3(x))


def conv_fuse(f_hat_q: torch.Tensor, f_p: torch.Tensor, mixer: nn.Conv2d) -> torch.Tensor:
    """Concatenate along channels, then mix 2C -> C with a 1x1 convolution."""
    if f_hat_q.shape != f_p.shape:
        raise ValueError(f"fuse inputs differ: {tuple(f_hat_q.shape)} vs {tuple(f_p.shape)}")
    return mixer(torch.cat([f_hat_q, f_p], dim=1))


_PE_CACHE: dict = {}


def sinusoidal_pe(channels: int, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding, (1, C, H, W): first half encodes rows, second half columns."""
    key = (channels, height, width, dtype)
    if key not in _PE_CACHE:
        quarter = channels // 4
        pe = torch.zeros(channels, height, width, dtype=torch.float64)
        if quarter:
            freq = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
            ys = torch.arange(height, dtype=torch.float64)[:, None] * freq[None]  # (H, q)
            xs = torch.arange(width, dtype=torch.float64)[:, None] * freq[None]  # (W, q)
            pe[0:quarter] = torch.sin(ys).T[:, :, None].expand(quarter, height, width)
            pe[quarter:2 * quarter] = torch.cos(ys).T[:, :, None].expand(quarter, height, width)
            pe[2 * quarter:3 * quarter] = torch.sin(xs).T[:, None, :].expand(quarter, height, width)
            pe[3 * quarter:4 * quarter] = torch.cos(xs).T[:, None, :].expand(quarter, height, width)
        _PE_CACHE[key] = pe[None].to(dtype)
    return _PE_CACHE[key]


class Encoder(nn.Module):
    """Stem, space-to-depth downsampling between stages, dual-gated blocks per stage."""

    def __init__(self, cfg: NetConfig, in_channels: int):
        super().__init__()
        ch = cfg.enc_channels
        self.pe = cfg.pe_kind == "sinusoidal"
        self.stem = nn.Conv2d(in_channels, ch[0], 3, padding=1)
        self.downs = nn.ModuleList(nn.Conv2d(4 * ch[s - 1], ch[s], 1) for s in range(1, len(ch)))
        self.stages = nn.ModuleList(
            nn.ModuleList(
                DualGatedBlock(ch[s], cfg.enc_heads[s], cfg.window_sizes[s], cfg.ffn_expand, cfg.qkv_kernel,
                               cfg.ca_reduction)
                for _ in range(cfg.enc_blocks[s])
            )
            for s in range(len(ch))
        )

    def embed(self, s: int, x):
        x = self.stem(x) if s == 0 else self.downs[s - 1](F.pixel_unshuffle(x, 2))
        if self.pe:
            x = x + sinusoidal_pe(x.shape[1], x.shape[2], x.shape[3], x.dtype)
        return x

    def run_stage(self, s: int, x, context=None):
        for block in self.stages[s]:
            x = block(x, context)
        return x


@dataclass
class StageFeatures:
    """Per-stage feature grids of the three streams."""

    f_r: list = field(default_factory=list)
    f_hat_q: list = field(default_factory=list)
    f_p: list = field(default_factory=list)
    f_q: list = field(default_factory=list)
    valid: list = field(default_factory=list)


def _check_finite(x, where: str):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activation at {where}")


class CompletionNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.config = cfg
        self.query_encoder = Encoder(cfg, 3)
        self.reference_encoder = self.query_encoder if cfg.share_query_reference else Encoder(cfg, 3)
        self.partial_encoder = Encoder(cfg, 2)
        self.fuse = nn.ModuleList(nn.Conv2d(2 * c, c, 1) for c in cfg.enc_channels)
        S = cfg.n_stages
        self.reduce = nn.ModuleList()
        self.dec_stages = nn.ModuleList()
        prev = cfg.enc_channels[-1]
        for i in range(S - 1):
            lvl = S - 2 - i
            c = cfg.dec_channels[i]
            self.reduce.append(nn.Conv2d(prev + cfg.enc_channels[lvl], c, 1))
            self.dec_stages.append(nn.ModuleList(
                DualGatedBlock(c, cfg.dec_heads[i], cfg.window_sizes[lvl], cfg.ffn_expand, cfg.qkv_kernel,
                               cfg.ca_reduction)
                for _ in range(cfg.dec_blocks[i])
            ))
            prev = c
        self.head = nn.Conv2d(prev, 1, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self):
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif ".norm" in name:
                nn.init.ones_(p)
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)

    def forward(self, i_q, i_r, q_hat, return_stages: bool = False):
        """``i_q``, ``i_r``: (B, 3, H, W); ``q_hat``: (B, 2, H, W) values + validity."""
        cfg = self.config
        if i_q.shape[1] != 3 or i_r.shape != i_q.shape or q_hat.shape[1] != 2 or q_hat.shape[2:] != i_q.shape[2:]:
            raise ConfigError(f"bad input shapes {tuple(i_q.shape)}, {tuple(i_r.shape)}, {tuple(q_hat.shape)}")
        if tuple(i_q.shape[2:]) != tuple(cfg.input_hw):
            raise ConfigError(f"input {tuple(i_q.shape[2:])} != configured {cfg.input_hw}")
        feats = StageFeatures()
        r, q, p = i_r, i_q, q_hat
        valid = q_hat[:, 1:2]
        for s in range(cfg.n_stages):
            if s:
                valid = F.max_pool2d(valid, 2)
            r = self.reference_encoder.run_stage(s, self.reference_encoder.embed(s, r))
            q_hat_s = self.query_encoder.run_stage(s, self.query_encoder.embed(s, q), r)
            p = self.partial_encoder.run_stage(s, self.partial_encoder.embed(s, p), r)
            q = conv_fuse(q_hat_s, p, self.fuse[s])
            _check_finite(q, f"encoder stage {s}")
            feats.f_r.append(r)
            feats.f_hat_q.append(q_hat_s)
            feats.f_p.append(p)
            feats.f_q.append(q)
            feats.valid.append(valid)
        x = q
        for i, blocks in enumerate(self.dec_stages):
            lvl = cfg.n_stages - 2 - i
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.reduce[i](torch.cat([x, feats.f_q[lvl]], dim=1))
            for block in blocks:
                x = block(x)
            _check_finite(x, f"decoder stage {lvl}")
        out = torch.sigmoid(self.head(x))
        return (out, feats) if return_stages else out


def param_count(config: NetConfig) -> int:
    """Exact number of trainable scalars (shared tensors counted once)."""
    with torch.device("meta"):
        model = CompletionNet(config)
    return sum(p.numel() for p in model.parameters())


def build_model(config: NetConfig, seed: int = 0, dtype=torch.float32) -> CompletionNet:
    torch.manual_seed(seed)
    return CompletionNet(config).to(dtype)


# -- numpy-level inference ------------------------------------------------------


def _resize(x: torch.Tensor, hw) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(hw):
        return x
    return F.interpolate(x, size=tuple(hw), mode="bilinear", align_corners=False)


def prepare_inputs(config: NetConfig, i_q: np.ndarray, i_r: np.ndarray, q_hat: QualityMap, dtype=torch.float32):
    """Numpy (H, W, 3) images and a partial map -> batched tensors at ``config.input_hw``."""
    q = torch.from_numpy(np.ascontiguousarray(i_q.transpose(2, 0, 1)))[None].to(dtype)
    r = torch.from_numpy(np.ascontiguousarray(i_r.transpose(2, 0, 1)))[None].to(dtype)
    p = torch.from_numpy(np.stack([q_hat.values, q_hat.valid.astype(np.float64)]))[None].to(dtype)
    hw = config.input_hw
    q, r = _resize(q, hw), _resize(r, hw)
    if tuple(p.shape[-2:]) != tuple(hw):
        # validity stays binary
        p = torch.cat([_resize(p[:, :1], hw), F.interpolate(p[:, 1:], size=tuple(hw), mode="nearest")], dim=1)
    return q, r, p


@torch.no_grad()
def complete(model: CompletionNet, i_q: np.ndarray, i_r: np.ndarray, q_hat: QualityMap) -> QualityMap:
    """Dense quality map at ``model.config.input_hw``."""
    dtype = next(model.parameters()).dtype
    q, r, p = prepare_inputs(model.config, i_q, i_r, q_hat, dtype)
    was_training = model.training
    model.eval()
    out = model(q, r, p)[0, 0].double().numpy()
    model.train(was_training)
    return QualityMap.dense(out)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, model: CompletionNet, meta: dict | None = None,
                    extra_tensors: dict[str, torch.Tensor] | None = None) -> Path:
    """Write ``PRQCKPT1`` | u32 header length | JSON header | float32 payload."""
    tensors = {name: p.detach() for name, p in model.named_parameters()}
    for name, t in (extra_tensors or {}).items():
        tensors[f"extra/{name}"] = t.detach()
    index, offset, chunks = [], 0, []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"config": model.config.to_json(), "meta": meta or {}, "tensors": index}, sort_keys=True
    ).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def load_checkpoint(path, dtype=torch.float32) -> tuple[CompletionNet, dict, dict[str, torch.Tensor]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a PRQCKPT1 checkpoint")
    (hlen,) = struct.unpack("<I", buf[8:12])
    try:
        header = json.loads(buf[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    base = 12 + hlen
    config = NetConfig.from_json(header["config"])
    model = CompletionNet(config).to(dtype)
    params = dict(model.named_parameters())
    extra = {}
    seen = set()
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=base + entry["offset"]).reshape(entry["shape"])
        t = torch.from_numpy(arr.copy())
        name = entry["name"]
        if name.startswith("extra/"):
            extra[name[len("extra/"):]] = t
        elif name in params:
            with torch.no_grad():
                params[name].copy_(t.to(dtype))
            seen.add(name)
        else:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
    missing = set(params) - seen
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:5]}")
    return model, header.get("meta", {}), extra
