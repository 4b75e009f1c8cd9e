"""Flat ``key = value`` run configuration with fixed, documented keys.

Lines are ``key = value``; ``#`` starts a comment; lists are comma separated;
an empty value means "unset" (use the mode default). Unknown keys are errors.
"""
from __future__ import annotations

from pathlib import Path

from . import dosenet, segnet
from .losses import LossWeights
from .phantom import PhantomConfig
from .train import AugmentationConfig, TrainConfig
from .vit import EncoderConfig

# key: (default, type, description)
KEYS = {
    "phantom.resolution": (16, int, "cubic volume extent in voxels (power of two >= 16)"),
    "phantom.spacing": ((3.0, 3.0, 3.0), (float,), "voxel spacing z,y,x in mm"),
    "phantom.seed": (0, int, "phantom generator seed"),
    "phantom.prescriptions": ((70.0, 63.0, 56.0), (float,), "PTV prescription levels in Gy, decreasing"),
    "phantom.falloff_mm": (15.0, float, "exponential dose fall-off length outside the PTV"),
    "phantom.noise_sigma": (0.02, float, "CT noise standard deviation"),
    "phantom.organ_radius_scale": (1.0, float, "multiplier on the default organ radii"),
    "model.seed": (0, int, "parameter initialisation seed"),
    "seg.patch": (8, int, "patch edge P"),
    "seg.embed_dim": (64, int, "token width K"),
    "seg.num_layers": (8, int, "transformer layers L (multiple of 4)"),
    "seg.num_heads": (4, int, "attention heads"),
    "seg.mlp_ratio": (4.0, float, "MLP hidden width / K"),
    "seg.decoder_channels": ((32, 24, 16, 8), (int,), "decoder widths, bottleneck first"),
    "dose.patch": (8, int, "patch edge P"),
    "dose.embed_dim": (48, int, "token width K"),
    "dose.num_layers": (8, int, "transformer layers L"),
    "dose.num_heads": (6, int, "attention heads"),
    "dose.mlp_ratio": (4.0, float, "MLP hidden width / K"),
    "dose.decoder_channels": ((32, 24, 16, 8), (int,), "pyramid decoder widths, bottleneck first"),
    "dose.unet_channels": ((8, 16, 32), (int,), "stage-1 U-Net widths per level"),
    "train.batch_size": (2, int, "subjects per optimiser step"),
    "train.seed": (0, int, "training/augmentation seed"),
    "train.beta1": (0.9, float, "AdamW first-moment decay"),
    "train.beta2": (0.999, float, "AdamW second-moment decay"),
    "train.eps": (1e-8, float, "AdamW denominator epsilon"),
    "seg.lr": (None, float, "learning rate (unset: 1e-4)"),
    "seg.weight_decay": (None, float, "weight decay (unset: 1e-5)"),
    "seg.steps": (200, int, "optimiser steps"),
    "seg.fan_in_ref": (None, float, "per-weight rate scale min(1, ref/fan_in) (unset: off)"),
    "seg.warmup_steps": (0, int, "linear warmup steps"),
    "dose1.lr": (None, float, "stage-1 learning rate (unset: 6.131e-4)"),
    "dose1.weight_decay": (None, float, "stage-1 weight decay (unset: 1.63e-4)"),
    "dose1.steps": (150, int, "stage-1 optimiser steps"),
    "dose1.fan_in_ref": (None, float, "stage-1 per-weight rate scale min(1, ref/fan_in) (unset: off)"),
    "dose1.warmup_steps": (0, int, "stage-1 linear warmup steps"),
    "dose2.lr": (None, float, "stage-2 learning rate (unset: 6.131e-4)"),
    "dose2.weight_decay": (None, float, "stage-2 weight decay (unset: 1.63e-4)"),
    "dose2.steps": (300, int, "stage-2 optimiser steps"),
    "dose2.fan_in_ref": (None, float, "stage-2 per-weight rate scale min(1, ref/fan_in) (unset: off)"),
    "dose2.warmup_steps": (0, int, "stage-2 linear warmup steps"),
    "e2e.lr": (None, float, "end-to-end learning rate (unset: 6.131e-4)"),
    "e2e.weight_decay": (None, float, "end-to-end weight decay (unset: 1.63e-4)"),
    "e2e.steps": (50, int, "end-to-end optimiser steps"),
    "e2e.fan_in_ref": (None, float, "end-to-end per-weight rate scale min(1, ref/fan_in) (unset: off)"),
    "e2e.warmup_steps": (0, int, "end-to-end linear warmup steps"),
    "e2e.fine_tune_seg": (True, bool, "update the segmentation network end to end"),
    "e2e.hard_masks": (False, bool, "feed argmax masks instead of probabilities"),
    "loss.lambda1": (10.0, float, "final-output L1 weight"),
    "loss.lambda2": (8.0, float, "deep-supervision L1 weight"),
    "aug.intensity_shift_range": (0.1, float, "max |CT shift|"),
    "aug.intensity_prob": (0.0, float, "probability of an intensity shift"),
    "aug.flip_prob": (0.0, float, "per-axis flip probability"),
    "aug.rot90_prob": (0.0, float, "probability of an axial 90-degree rotation"),
    "aug.crop_size": (None, int, "random crop edge (unset: no crop)"),
    "aug.crop_prob": (0.0, float, "probability of cropping"),
    "eval.dvh_bins": (101, int, "thresholds per DVH curve"),
    "eval.isodose_levels": (10, int, "isodose thresholds (fractions of the max prescription)"),
}

MODE_PREFIX = {"seg": "seg", "dose_stage1": "dose1", "dose_stage2": "dose2", "end_to_end": "e2e"}


class RunConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    default, typ, _ = KEYS[key]
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if isinstance(typ, tuple):
            return tuple(typ[0](v.strip()) for v in raw.split(",") if v.strip())
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return typ(raw)
    except ValueError as e:
        raise RunConfigError(f"bad value for {key}: {raw!r}") from e


class RunConfig(dict):
    """Mapping of every known key to its value (defaults filled in)."""

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: v[0] for k, v in KEYS.items()})

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls.defaults()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise RunConfigError(f"line {lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in KEYS:
                raise RunConfigError(f"line {lineno}: unknown key {key!r}")
            cfg[key] = _parse_value(key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls.defaults()
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = []
        for k, (_, _, doc) in KEYS.items():
            v = self[k]
            if v is None:
                s = ""
            elif isinstance(v, tuple):
                s = ", ".join(str(x) for x in v)
            else:
                s = str(v)
            lines.append(f"{k} = {s}  # {doc}")
        return "\n".join(lines) + "\n"

    # --- typed views ---------------------------------------------------------
    def phantom(self) -> PhantomConfig:
        return PhantomConfig(resolution=self["phantom.resolution"], spacing=self["phantom.spacing"],
                             seed=self["phantom.seed"], prescriptions=self["phantom.prescriptions"],
                             falloff_mm=self["phantom.falloff_mm"], noise_sigma=self["phantom.noise_sigma"],
                             organ_radius_scale=self["phantom.organ_radius_scale"])

    def seg(self, resolution: int | None = None) -> segnet.SegConfig:
        r = resolution or self["phantom.resolution"]
        enc = EncoderConfig(r, self["seg.patch"], 1, self["seg.embed_dim"], self["seg.num_layers"],
                            self["seg.num_heads"], mlp_ratio=self["seg.mlp_ratio"])
        return segnet.SegConfig(enc, self["seg.decoder_channels"])

    def dose(self, resolution: int | None = None) -> dosenet.DoseConfig:
        r = resolution or self["phantom.resolution"]
        enc = EncoderConfig(r, self["dose.patch"], dosenet.DOSE_INPUT_CHANNELS + 1, self["dose.embed_dim"],
                            self["dose.num_layers"], self["dose.num_heads"], mlp_ratio=self["dose.mlp_ratio"])
        return dosenet.DoseConfig(enc, self["dose.decoder_channels"], self["dose.unet_channels"])

    def train(self, mode: str) -> TrainConfig:
        pre = MODE_PREFIX[mode]
        aug = AugmentationConfig(intensity_shift_range=self["aug.intensity_shift_range"],
                                 intensity_prob=self["aug.intensity_prob"], flip_prob=self["aug.flip_prob"],
                                 rot90_prob=self["aug.rot90_prob"], crop_size=self["aug.crop_size"],
                                 crop_prob=self["aug.crop_prob"])
        return TrainConfig(mode=mode, lr=self[f"{pre}.lr"], weight_decay=self[f"{pre}.weight_decay"],
                           beta1=self["train.beta1"], beta2=self["train.beta2"], eps=self["train.eps"],
                           steps=self[f"{pre}.steps"], batch_size=self["train.batch_size"], seed=self["train.seed"],
                           loss_weights=LossWeights(self["loss.lambda1"], self["loss.lambda2"]), augmentation=aug,
                           fine_tune_seg=self["e2e.fine_tune_seg"], hard_masks=self["e2e.hard_masks"],
                           warmup_steps=self[f"{pre}.warmup_steps"], fan_in_ref=self[f"{pre}.fan_in_ref"])
