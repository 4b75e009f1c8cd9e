"""3-D patch transformer encoder with intermediate-layer taps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .layers import Initializer, Params
from .tensor import ConfigError, DimensionError, Tensor


@dataclass
class EncoderConfig:
    resolution: tuple = (32, 32, 32)  # (D, H, W) voxels
    patch: int = 8
    in_channels: int = 1
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    tap_layers: Optional[tuple] = None
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.resolution, int):
            self.resolution = (self.resolution,) * 3
        self.resolution = tuple(int(r) for r in self.resolution)
        if len(self.resolution) != 3:
            raise ConfigError(f"resolution needs three extents, got {self.resolution}")
        if any(r % self.patch for r in self.resolution):
            raise ConfigError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.tap_layers is None:
            self.tap_layers = default_taps(self.num_layers)
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        L = self.num_layers
        spacing = L // 4
        if (L % 4 or len(self.tap_layers) != 4 or self.tap_layers[-1] != L
                or any(b - a != spacing for a, b in zip((0,) + self.tap_layers, self.tap_layers))):
            raise ConfigError(f"tap_layers must be 4 layers spaced {L}/4 apart ending at {L}; got {self.tap_layers}")

    @property
    def grid(self) -> tuple:
        return tuple(r // self.patch for r in self.resolution)

    @property
    def num_tokens(self) -> int:
        g = self.grid
        return g[0] * g[1] * g[2]

    @property
    def token_dim(self) -> int:
        return self.patch ** 3 * self.in_channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


def default_taps(num_layers: int) -> tuple:
    if num_layers % 4:
        raise ConfigError(f"num_layers must be a multiple of 4 to place four equally spaced taps, got {num_layers}")
    step = num_layers // 4
    return tuple(step * i for i in range(1, 5))


# --- patching ----------------------------------------------------------------

def patchify(volume: Tensor, P: int) -> Tensor:
    """(C,D,H,W) -> (N, C*P^3); patches in (z,y,x) grid order, tokens channel-major."""
    if volume.ndim != 4:
        raise DimensionError(f"patchify expects (C,D,H,W), got {volume.shape}")
    C, D, H, W = volume.shape
    if D % P or H % P or W % P:
        raise ConfigError(f"volume extents {(D, H, W)} not divisible by patch size {P}")
    gd, gh, gw = D // P, H // P, W // P
    x = ops.reshape(volume, (C, gd, P, gh, P, gw, P))
    x = ops.permute(x, (1, 3, 5, 0, 2, 4, 6))
    return ops.reshape(x, (gd * gh * gw, C * P ** 3))


def unpatchify(tokens: Tensor, P: int, channels: int, grid: tuple) -> Tensor:
    gd, gh, gw = grid
    x = ops.reshape(tokens, (gd, gh, gw, channels, P, P, P))
    x = ops.permute(x, (3, 0, 4, 1, 5, 2, 6))
    return ops.reshape(x, (channels, gd * P, gh * P, gw * P))


def embed(tokens: Tensor, projection: Tensor, pos_table: Tensor) -> Tensor:
    if tokens.ndim != 2 or projection.ndim != 2 or tokens.shape[1] != projection.shape[0]:
        raise ConfigError(f"embed: tokens {tokens.shape} do not fit projection {projection.shape}")
    if pos_table.shape != (tokens.shape[0], projection.shape[1]):
        raise ConfigError(f"embed: positional table {pos_table.shape} != {(tokens.shape[0], projection.shape[1])}")
    return ops.add(ops.matmul(tokens, projection), pos_table)


# --- transformer -------------------------------------------------------------

def multi_head_attention(x: Tensor, p: Params, prefix: str, heads: int, return_weights: bool = False):
    N, K = x.shape
    d = K // heads

    def split(t):
        return ops.permute(ops.reshape(t, (N, heads, d)), (1, 0, 2))

    q = split(ops.linear(x, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"]))
    # no key bias: it shifts every score in a row equally and cancels in the softmax
    k = split(ops.matmul(x, p[f"{prefix}.k.w"]))
    v = split(ops.linear(x, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"]))
    scores = ops.mul_scalar(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(d))
    attn = ops.softmax(scores, axis=-1)
    ctx = ops.reshape(ops.permute(ops.matmul(attn, v), (1, 0, 2)), (N, K))
    out = ops.linear(ctx, p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])
    return (out, attn) if return_weights else out


def transformer_layer(x: Tensor, p: Params, prefix: str, heads: int, eps: float = 1e-5) -> Tensor:
    """Pre-norm block: x + MSA(LN(x)), then + MLP(LN(.))."""
    h = ops.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], -1, eps)
    x = ops.add(x, multi_head_attention(h, p, f"{prefix}.attn", heads))
    h = ops.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], -1, eps)
    h = ops.gelu(ops.linear(h, p[f"{prefix}.mlp1.w"], p[f"{prefix}.mlp1.b"]))
    return ops.add(x, ops.linear(h, p[f"{prefix}.mlp2.w"], p[f"{prefix}.mlp2.b"]))


def init_layer_params(init: Initializer, p: Params, prefix: str, K: int, hidden: int) -> None:
    init.layer_norm(p, f"{prefix}.ln1", K)
    init.linear(p, f"{prefix}.attn.q", K, K)
    init.linear(p, f"{prefix}.attn.k", K, K, bias=False)
    init.linear(p, f"{prefix}.attn.v", K, K)
    init.linear(p, f"{prefix}.attn.o", K, K)
    init.layer_norm(p, f"{prefix}.ln2", K)
    init.linear(p, f"{prefix}.mlp1", K, hidden)
    init.linear(p, f"{prefix}.mlp2", hidden, K)


def init_encoder_params(cfg: EncoderConfig, init: Initializer, prefix: str = "enc") -> Params:
    p: Params = {}
    p[f"{prefix}.patch_proj"] = init.normal((cfg.token_dim, cfg.embed_dim), 1.0 / math.sqrt(cfg.token_dim))
    p[f"{prefix}.pos_embed"] = init.normal((cfg.num_tokens, cfg.embed_dim), 0.02)
    for i in range(cfg.num_layers):
        init_layer_params(init, p, layer_prefix(prefix, i + 1), cfg.embed_dim, cfg.mlp_hidden)
    return p


def layer_prefix(prefix: str, layer: int) -> str:
    return f"{prefix}.layer{layer:02d}"


def encode(volume: Tensor, cfg: EncoderConfig, p: Params, prefix: str = "enc") -> dict:
    """Run patchify -> embed -> layer stack; return {tap layer: (N, K) features}."""
    if volume.shape != (cfg.in_channels,) + cfg.resolution:
        raise DimensionError(f"encoder expects {(cfg.in_channels,) + cfg.resolution}, got {volume.shape}")
    x = embed(patchify(volume, cfg.patch), p[f"{prefix}.patch_proj"], p[f"{prefix}.pos_embed"])
    taps = {}
    for i in range(1, cfg.num_layers + 1):
        x = transformer_layer(x, p, layer_prefix(prefix, i), cfg.num_heads, cfg.ln_eps)
        if i in cfg.tap_layers:
            taps[i] = x
    return taps


def reshape_tap(f: Tensor, cfg: EncoderConfig) -> Tensor:
    """(N, K) tokens -> (K, D/P, H/P, W/P) feature map in patch-grid order."""
    if f.shape != (cfg.num_tokens, cfg.embed_dim):
        raise DimensionError(f"reshape_tap: expected {(cfg.num_tokens, cfg.embed_dim)}, got {f.shape}")
    return ops.reshape(ops.transpose(f), (cfg.embed_dim,) + cfg.grid)


def flatten_tap(fmap: Tensor) -> Tensor:
    K = fmap.shape[0]
    return ops.transpose(ops.reshape(fmap, (K, -1)))
