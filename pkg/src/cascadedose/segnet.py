"""Transformer encoder + multiscale convolutional decoder for OAR segmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .layers import Initializer, Params, conv, deconv
from .tensor import ConfigError, DimensionError, Tensor
from .vit import EncoderConfig, encode, init_encoder_params, reshape_tap

CLASS_NAMES = ("background", "brainstem", "spinal_cord", "right_parotid", "left_parotid",
               "esophagus", "larynx", "mandible")
OAR_NAMES = CLASS_NAMES[1:]
NUM_CLASSES = 8


def num_up_stages(patch: int) -> int:
    n = int(round(math.log2(patch)))
    if 2 ** n != patch:
        raise ConfigError(f"patch size {patch} must be a power of two")
    return n


@dataclass
class SegConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        resolution=32, patch=8, in_channels=1, embed_dim=64, num_layers=8, num_heads=4))
    decoder_channels: tuple = (64, 48, 32, 16)
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes is fixed at {NUM_CLASSES}")
        if self.encoder.in_channels != 1:
            raise ConfigError("segmentation encoder takes a single CT channel")
        validate_decoder(self.encoder, self.decoder_channels)


def validate_decoder(enc: EncoderConfig, widths: tuple) -> None:
    stages = num_up_stages(enc.patch)
    if len(widths) != stages + 1:
        raise ConfigError(f"patch {enc.patch} needs {stages + 1} decoder widths (bottleneck + {stages} stages), "
                          f"got {len(widths)}")
    if any(b >= a for a, b in zip(widths, widths[1:])):
        raise ConfigError(f"decoder widths must be strictly decreasing, got {widths}")
    if any(c % 2 for c in widths[1:]):
        raise ConfigError(f"multiscale blocks need even widths, got {widths}")


@dataclass
class SegOutput:
    logits: Tensor
    probs: Tensor


# --- decoder blocks ----------------------------------------------------------

def multiscale_block(x: Tensor, p: Params, prefix: str) -> Tensor:
    """Parallel 3^3 and 7^3 convolutions (half the channels each), concatenated, then Mish."""
    a = conv(p, f"{prefix}.k3", x)
    b = conv(p, f"{prefix}.k7", x)
    return ops.mish(ops.concat([a, b], axis=0))


def init_multiscale(init: Initializer, p: Params, prefix: str, c_in: int, c_out: int) -> None:
    if c_out % 2:
        raise ConfigError(f"multiscale block output width must be even, got {c_out}")
    init.conv(p, f"{prefix}.k3", c_in, c_out // 2, 3)
    init.conv(p, f"{prefix}.k7", c_in, c_out // 2, 7)


def skip_path(tap_map: Tensor, p: Params, prefix: str, n_up: int) -> Tensor:
    """Bring a (K, g, g, g) tap to the decoder scale via ``n_up`` stride-2 deconvolutions."""
    x = tap_map
    for j in range(n_up):
        x = ops.mish(deconv(p, f"{prefix}.up{j}", x))
    return x


def decoder_stage(skip: Tensor, below: Tensor, p: Params, prefix: str) -> Tensor:
    if tuple(2 * s for s in below.shape[1:]) != skip.shape[1:]:
        raise ConfigError(f"decoder stage {prefix}: lower map {below.shape} is not half of skip {skip.shape}")
    up = deconv(p, f"{prefix}.up", below)
    sk = ops.mish(conv(p, f"{prefix}.skip", skip))
    return multiscale_block(ops.concat([up, sk], axis=0), p, f"{prefix}.ms")


def init_decoder(init: Initializer, p: Params, prefix: str, enc: EncoderConfig, widths: tuple) -> None:
    K = enc.embed_dim
    init.conv(p, f"{prefix}.bottleneck", K, widths[0], 3)
    for i in range(1, len(widths)):
        sp = f"{prefix}.stage{i}"
        if i <= 3:
            c = K
            for j in range(i):
                init.deconv(p, f"{sp}.skip_path.up{j}", c, widths[i])
                c = widths[i]
            init.conv(p, f"{sp}.skip", widths[i], widths[i], 3)
        init.deconv(p, f"{sp}.up", widths[i - 1], widths[i])
        init_multiscale(init, p, f"{sp}.ms", 2 * widths[i] if i <= 3 else widths[i], widths[i])


def level_shapes(enc: EncoderConfig, widths: tuple) -> list:
    """(channels, d, h, w) of the bottleneck and of every decoder stage, without running anything."""
    validate_decoder(enc, widths)
    g = enc.grid
    return [(c,) + tuple(n * 2 ** i for n in g) for i, c in enumerate(widths)]


def output_shape(cfg: "SegConfig") -> tuple:
    return (NUM_CLASSES,) + cfg.encoder.resolution


def run_decoder(taps: dict, enc: EncoderConfig, p: Params, prefix: str, widths: tuple, on_level=None) -> Tensor:
    """Deepest tap seeds the decoder; remaining taps join coarse -> fine.

    ``on_level(level_index, feature_map)`` is called on the bottleneck and after
    every stage (used for the dose pyramid heads).
    """
    order = sorted(taps, reverse=True)  # L, 3L/4, L/2, L/4
    x = ops.mish(conv(p, f"{prefix}.bottleneck", reshape_tap(taps[order[0]], enc)))
    if on_level is not None:
        on_level(0, x)
    for i in range(1, len(widths)):
        sp = f"{prefix}.stage{i}"
        if i <= 3:
            skip = skip_path(reshape_tap(taps[order[i]], enc), p, f"{sp}.skip_path", i)
            x = decoder_stage(skip, x, p, sp)
        else:
            x = multiscale_block(deconv(p, f"{sp}.up", x), p, f"{sp}.ms")
        if on_level is not None:
            on_level(i, x)
    return x


# --- network -----------------------------------------------------------------

def init_params(cfg: SegConfig, seed: int = 0, dtype=np.float32) -> Params:
    init = Initializer(seed, dtype)
    p = init_encoder_params(cfg.encoder, init, "seg.enc")
    init_decoder(init, p, "seg.dec", cfg.encoder, cfg.decoder_channels)
    init.conv(p, "seg.head", cfg.decoder_channels[-1], cfg.num_classes, 1, gain=1.0)
    return p


def forward(ct: Tensor, cfg: SegConfig, p: Params) -> SegOutput:
    if ct.shape != (1,) + cfg.encoder.resolution:
        raise DimensionError(f"segmentation input must be {(1,) + cfg.encoder.resolution}, got {ct.shape}")
    taps = encode(ct, cfg.encoder, p, "seg.enc")
    x = run_decoder(taps, cfg.encoder, p, "seg.dec", cfg.decoder_channels)
    logits = conv(p, "seg.head", x)
    return SegOutput(logits, ops.softmax(logits, axis=0))


def predict_masks(out) -> np.ndarray:
    """Per-voxel argmax (ties to the lower class) as an (8, D, H, W) boolean one-hot."""
    probs = out.probs.data if isinstance(out, SegOutput) else np.asarray(out.data if isinstance(out, Tensor) else out)
    labels = np.argmax(probs, axis=0)
    return labels[None] == np.arange(probs.shape[0]).reshape(-1, 1, 1, 1)


def labels_to_onehot(oar_masks: np.ndarray) -> np.ndarray:
    """(7, D, H, W) disjoint OAR masks -> (8, D, H, W) one-hot with background first."""
    oar = np.asarray(oar_masks, dtype=bool)
    bg = ~oar.any(axis=0)
    return np.concatenate([bg[None], oar], axis=0)


class SegNet:
    def __init__(self, cfg: SegConfig, seed: int = 0, dtype=np.float32, params: Params | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)

    def __call__(self, ct: Tensor) -> SegOutput:
        return forward(ct, self.cfg, self.params)


def paper_config() -> SegConfig:
    """Full-size layout: 128^3 input, 16^3 patches, K=768, 12 layers, 12 heads (shape checks only)."""
    return SegConfig(EncoderConfig(128, 16, 1, 768, 12, 12), (256, 128, 64, 32, 16))
