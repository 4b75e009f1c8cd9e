"""Cascade dose predictor: frozen U-Net stage, then transformer encoder with a pyramid decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops, segnet
from .layers import Initializer, Params, conv, deconv
from .tensor import ConfigError, DimensionError, Tensor
from .vit import EncoderConfig, encode, init_encoder_params

DOSE_INPUT_CHANNELS = 9  # CT, 7 OARs, PTV
PYRAMID_LEVELS = 4


@dataclass
class DoseConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        resolution=32, patch=8, in_channels=DOSE_INPUT_CHANNELS + 1, embed_dim=48, num_layers=8, num_heads=6))
    decoder_channels: tuple = (48, 32, 24, 16)
    unet_channels: tuple = (8, 16, 32)
    freeze_stage1: bool = True

    def __post_init__(self):
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.unet_channels = tuple(int(c) for c in self.unet_channels)
        if self.encoder.in_channels != DOSE_INPUT_CHANNELS + 1:
            raise ConfigError(f"stage-2 encoder takes {DOSE_INPUT_CHANNELS + 1} channels "
                              f"(dose input + stage-1 estimate), got {self.encoder.in_channels}")
        segnet.validate_decoder(self.encoder, self.decoder_channels)
        if len(self.decoder_channels) != PYRAMID_LEVELS:
            raise ConfigError(f"pyramid has {PYRAMID_LEVELS} levels; need patch 8 and 4 decoder widths")
        if len(self.unet_channels) != 3:
            raise ConfigError("stage-1 U-Net has three levels")
        if any(r % 4 for r in self.encoder.resolution):
            raise ConfigError("stage-1 U-Net needs extents divisible by 4")

    @property
    def resolution(self) -> tuple:
        return self.encoder.resolution


@dataclass
class DosePyramid:
    levels: list  # coarse -> fine, each (1, d, h, w)

    @property
    def final(self) -> Tensor:
        return self.levels[-1]


def pyramid_shapes(cfg: DoseConfig) -> list:
    """Output shape of every pyramid level, coarse to fine, without running the network."""
    return [(1,) + shp[1:] for shp in segnet.level_shapes(cfg.encoder, cfg.decoder_channels)]


def assemble_input(ct: Tensor, oars: Tensor, ptv: Tensor) -> Tensor:
    """Concatenate CT (1), OAR channels (7) and PTV (1) into the 9-channel dose input."""
    if ct.shape[0] != 1 or oars.shape[0] != 7 or ptv.shape[0] != 1:
        raise DimensionError(f"dose input expects 1+7+1 channels, got {ct.shape[0]}+{oars.shape[0]}+{ptv.shape[0]}")
    return ops.concat([ct, oars, ptv], axis=0)


# --- stage 1 -----------------------------------------------------------------

def init_stage1(init: Initializer, p: Params, c: tuple) -> None:
    c1, c2, c3 = c
    init.conv(p, "dose.s1.enc1", DOSE_INPUT_CHANNELS, c1, 3)
    init.conv(p, "dose.s1.down1", c1, c2, 2)
    init.conv(p, "dose.s1.enc2", c2, c2, 3)
    init.conv(p, "dose.s1.down2", c2, c3, 2)
    init.conv(p, "dose.s1.mid", c3, c3, 3)
    init.deconv(p, "dose.s1.up2", c3, c2)
    init.conv(p, "dose.s1.dec2", 2 * c2, c2, 3)
    init.deconv(p, "dose.s1.up1", c2, c1)
    init.conv(p, "dose.s1.dec1", 2 * c1, c1, 3)
    init.conv(p, "dose.s1.head", c1, 1, 1, gain=1.0)


def stage1_forward(x_cop: Tensor, p: Params) -> Tensor:
    """Three-level U-Net emitting a one-channel coarse dose estimate at input resolution."""
    if x_cop.ndim != 4 or x_cop.shape[0] != DOSE_INPUT_CHANNELS:
        raise DimensionError(f"stage-1 input must be ({DOSE_INPUT_CHANNELS}, D, H, W), got {x_cop.shape}")
    m = ops.mish
    e1 = m(conv(p, "dose.s1.enc1", x_cop))
    e2 = m(conv(p, "dose.s1.enc2", m(conv(p, "dose.s1.down1", e1, stride=2))))
    b = m(conv(p, "dose.s1.mid", m(conv(p, "dose.s1.down2", e2, stride=2))))
    d2 = m(conv(p, "dose.s1.dec2", ops.concat([m(deconv(p, "dose.s1.up2", b)), e2], axis=0)))
    d1 = m(conv(p, "dose.s1.dec1", ops.concat([m(deconv(p, "dose.s1.up1", d2)), e1], axis=0)))
    return conv(p, "dose.s1.head", d1)


def stage1_names(p: Params) -> list:
    return sorted(k for k in p if k.startswith("dose.s1."))


# --- stage 2 -----------------------------------------------------------------

def init_params(cfg: DoseConfig, seed: int = 0, dtype=np.float32) -> Params:
    init = Initializer(seed, dtype)
    p: Params = {}
    init_stage1(init, p, cfg.unet_channels)
    p.update(init_encoder_params(cfg.encoder, init, "dose.enc"))
    segnet.init_decoder(init, p, "dose.dec", cfg.encoder, cfg.decoder_channels)
    for level, c in enumerate(cfg.decoder_channels):
        init.conv(p, f"dose.head{level + 1}", c, 1, 1, gain=1.0)
    set_stage1_frozen(p, cfg.freeze_stage1)
    return p


def set_stage1_frozen(p: Params, frozen: bool) -> None:
    for k in stage1_names(p):
        p[k].requires_grad = not frozen


def forward(x_cop: Tensor, cfg: DoseConfig, p: Params) -> DosePyramid:
    if x_cop.shape != (DOSE_INPUT_CHANNELS,) + cfg.resolution:
        raise DimensionError(f"dose input must be {(DOSE_INPUT_CHANNELS,) + cfg.resolution}, got {x_cop.shape}")
    coarse = stage1_forward(x_cop, p)
    x2 = ops.concat([x_cop, coarse], axis=0)
    taps = encode(x2, cfg.encoder, p, "dose.enc")
    levels = []

    def head(i, fmap):
        levels.append(conv(p, f"dose.head{i + 1}", fmap))

    segnet.run_decoder(taps, cfg.encoder, p, "dose.dec", cfg.decoder_channels, on_level=head)
    return DosePyramid(levels)


def cascade_input(ct: Tensor, ptv: Tensor, seg_out, hard: bool = False) -> Tensor:
    """Dose input from segmentation output: OAR channels are class probabilities 1..7.

    ``seg_out`` may be a SegOutput or an (8, D, H, W) tensor of probabilities.
    With ``hard`` the argmax one-hot masks are used (no gradient).
    """
    probs = seg_out.probs if isinstance(seg_out, segnet.SegOutput) else seg_out
    if hard:
        oars = Tensor(segnet.predict_masks(probs)[1:].astype(ct.dtype))
    else:
        oars = ops.index(probs, slice(1, 8))
    return assemble_input(ct, oars, ptv)


def cascade_forward(ct: Tensor, ptv: Tensor, seg_cfg, seg_params: Params, cfg: DoseConfig,
                    dose_params: Params, hard: bool = False):
    seg_out = segnet.forward(ct, seg_cfg, seg_params)
    return forward(cascade_input(ct, ptv, seg_out, hard), cfg, dose_params), seg_out


def predict_dose(pyramid: DosePyramid) -> np.ndarray:
    return np.maximum(pyramid.final.data, 0)


class DoseNet:
    def __init__(self, cfg: DoseConfig, seed: int = 0, dtype=np.float32, params: Params | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)

    def __call__(self, x_cop: Tensor) -> DosePyramid:
        return forward(x_cop, self.cfg, self.params)


def paper_config() -> DoseConfig:
    """Full-size layout: 128^3 input, 8 layers, 6 heads; patch 8 so the pyramid keeps four levels."""
    return DoseConfig(EncoderConfig(128, 8, DOSE_INPUT_CHANNELS + 1, 768, 8, 6), (256, 128, 64, 32), (16, 32, 64))
