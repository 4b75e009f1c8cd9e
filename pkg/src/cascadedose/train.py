"""AdamW optimisation, joint augmentation and the four training modes."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import dosenet, losses, ops, segnet
from .fileio import Checkpoint, load_params_into
from .layers import fan_in
from .phantom import Subject
from .tensor import ConfigError, Tensor
from .vit import EncoderConfig

log = logging.getLogger(__name__)

MODES = ("seg", "dose_stage1", "dose_stage2", "end_to_end")
PAPER_RATES = {  # (lr, weight decay)
    "seg": (1e-4, 1e-5),
    "dose": (6.131e-4, 1.63e-4),
}


class TrainingError(RuntimeError):
    pass


@dataclass
class AugmentationConfig:
    intensity_shift_range: float = 0.1
    intensity_prob: float = 0.5
    flip_axes: tuple = (0, 1, 2)  # spatial axes z, y, x
    flip_prob: float = 0.5
    rot90_axes: tuple = ((1, 2),)
    rot90_prob: float = 0.5
    crop_size: int | None = None
    crop_prob: float = 0.0

    def __post_init__(self):
        self.flip_axes = tuple(int(a) for a in self.flip_axes)
        self.rot90_axes = tuple(tuple(int(a) for a in pair) for pair in self.rot90_axes)
        for name in ("intensity_prob", "flip_prob", "rot90_prob", "crop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def off(cls) -> "AugmentationConfig":
        return cls(intensity_prob=0.0, flip_prob=0.0, rot90_prob=0.0, crop_prob=0.0)


@dataclass
class TrainConfig:
    mode: str = "seg"
    lr: float | None = None  # None -> the paper's rate for the mode
    weight_decay: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 200
    batch_size: int = 2
    seed: int = 0
    loss_weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig.off)
    fine_tune_seg: bool = True  # end_to_end: also update the segmentation network
    hard_masks: bool = False  # end_to_end: feed argmax masks instead of probabilities
    warmup_steps: int = 0  # linear learning-rate ramp over the first updates; 0 = constant rate
    fan_in_ref: float | None = None  # weights with fan-in f > ref step at lr * ref / f; None = uniform rate

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        family = "seg" if self.mode == "seg" else "dose"
        if self.lr is None:
            self.lr = PAPER_RATES[family][0]
        if self.weight_decay is None:
            self.weight_decay = PAPER_RATES[family][1]
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.fan_in_ref is not None and self.fan_in_ref <= 0:
            raise ConfigError(f"fan_in_ref must be positive, got {self.fan_in_ref}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = losses.LossWeights(**self.loss_weights)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)


# --- optimiser ---------------------------------------------------------------

@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, state: OptimState, cfg: TrainConfig, names=None) -> None:
    """One AdamW update of every grad-requiring parameter (all of ``names`` if given).

    Decoupled decay p <- p - lr*wd*p, then the bias-corrected Adam step. With
    ``cfg.fan_in_ref`` set, ``lr`` is scaled per parameter by ``rate_scale``.
    """
    state.step += 1
    t = state.step
    base_lr = learning_rate(cfg, t)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params if names is None else names):
        p = params[name]
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name} at optimiser step {t}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        lr = base_lr * rate_scale(name, p.shape, cfg.fan_in_ref)
        p.data = (p.data * (1.0 - lr * cfg.weight_decay) - lr * update).astype(p.data.dtype)


def rate_scale(name: str, shape: tuple, ref: float | None) -> float:
    """min(1, ref / fan_in) for weight matrices and kernels, 1 otherwise.

    Adam moves every weight by about lr per step regardless of gradient size, so a
    coherent step changes a unit's pre-activation by roughly lr * fan_in. Scaling by
    1/fan_in keeps that change comparable across the 1x1 head and the 7^3 kernels.
    """
    if ref is None:
        return 1.0
    f = fan_in(name, shape)
    return 1.0 if f is None else min(1.0, ref / f)


def learning_rate(cfg: TrainConfig, t: int) -> float:
    """Rate for update ``t`` (1-based): cfg.lr, ramped linearly over the warmup."""
    if cfg.warmup_steps and t < cfg.warmup_steps:
        return cfg.lr * t / cfg.warmup_steps
    return cfg.lr


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


# --- augmentation ------------------------------------------------------------

def augment(s: Subject, cfg: AugmentationConfig, rng: np.random.Generator) -> Subject:
    """Apply one random spatial transform jointly to every volume; shift CT intensity only.

    Draws happen in a fixed order: intensity, flips (per axis), rotation, crop.
    """
    vols = {"ct": s.ct, "oar": s.oar_masks, "ptv": s.ptv[None], "body": s.body[None], "dose": s.dose}
    ct_shift = 0.0
    if rng.random() < cfg.intensity_prob:
        ct_shift = rng.uniform(-cfg.intensity_shift_range, cfg.intensity_shift_range)
    for ax in cfg.flip_axes:
        if rng.random() < cfg.flip_prob:
            vols = {k: np.flip(v, axis=1 + ax) for k, v in vols.items()}
    for a, b in cfg.rot90_axes:
        if rng.random() < cfg.rot90_prob:
            k = int(rng.integers(1, 4))
            vols = {key: np.rot90(v, k=k, axes=(1 + a, 1 + b)) for key, v in vols.items()}
    if cfg.crop_size is not None:
        n = cfg.crop_size
        if any(n > e for e in s.shape):
            raise ConfigError(f"crop size {n} larger than volume {s.shape}")
        if rng.random() < cfg.crop_prob:
            o = [int(rng.integers(0, e - n + 1)) for e in s.shape]
            sl = (slice(None), slice(o[0], o[0] + n), slice(o[1], o[1] + n), slice(o[2], o[2] + n))
            vols = {k: v[sl] for k, v in vols.items()}
    vols = {k: np.ascontiguousarray(v) for k, v in vols.items()}
    ct = vols["ct"]
    if ct_shift:
        ct = np.clip(ct + np.float32(ct_shift), 0.0, 1.0).astype(s.ct.dtype)
    return dataclasses.replace(s, ct=ct, oar_masks=vols["oar"], ptv=vols["ptv"][0], body=vols["body"][0],
                               dose=vols["dose"])


# --- per-mode losses ---------------------------------------------------------

def seg_sample_loss(model, s: Subject):
    out = model(Tensor(s.ct.astype(_dtype(model))))
    loss = losses.dice_ce_loss(out.probs, s.onehot().astype(_dtype(model)))
    return loss, {"dice_ce": loss.item()}


def stage1_sample_loss(model, s: Subject):
    x = Tensor(s.dose_input(_dtype(model)))
    pred = dosenet.stage1_forward(x, model.params)
    loss = ops.mean(ops.abs(ops.sub(pred, Tensor(s.dose.astype(_dtype(model))))))
    return loss, {"l1": loss.item()}


def stage2_sample_loss(model, s: Subject, w: losses.LossWeights):
    pyr = model(Tensor(s.dose_input(_dtype(model))))
    target = losses.build_gt_pyramid(Tensor(s.dose.astype(_dtype(model))), len(pyr.levels))
    total, l_out, l_ds = losses.dose_loss_terms(pyr, target, w)
    return total, {"l_out": l_out.item(), "l_ds": l_ds.item()}


def e2e_sample_loss(seg_model, dose_model, s: Subject, w: losses.LossWeights, hard: bool = False):
    dt = _dtype(dose_model)
    pyr, seg_out = dosenet.cascade_forward(Tensor(s.ct.astype(dt)), Tensor(s.ptv[None].astype(dt)), seg_model.cfg,
                                           seg_model.params, dose_model.cfg, dose_model.params, hard)
    l_seg = losses.dice_ce_loss(seg_out.probs, s.onehot().astype(dt))
    target = losses.build_gt_pyramid(Tensor(s.dose.astype(dt)), len(pyr.levels))
    total_d, l_out, l_ds = losses.dose_loss_terms(pyr, target, w)
    return ops.add(l_seg, total_d), {"dice_ce": l_seg.item(), "l_out": l_out.item(), "l_ds": l_ds.item()}


def _dtype(model):
    return next(iter(model.params.values())).data.dtype


# --- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list  # dicts: step, total, components...
    state: OptimState


def trainable_names(mode: str, seg_model=None, dose_model=None, fine_tune_seg: bool = True) -> list:
    if mode == "seg":
        return sorted(seg_model.params)
    s1 = set(dosenet.stage1_names(dose_model.params))
    if mode == "dose_stage1":
        return sorted(s1)
    names = sorted(k for k in dose_model.params if k not in s1)
    if mode == "end_to_end" and fine_tune_seg:
        names = sorted(seg_model.params) + names
    return names


def config_fingerprint(meta: dict) -> str:
    return hashlib.sha256(json.dumps(meta, sort_keys=True, default=str).encode()).hexdigest()[:16]


def train(subjects: list, cfg: TrainConfig, seg_model=None, dose_model=None, state: OptimState | None = None,
          callback=None) -> TrainResult:
    """Train for ``cfg.steps`` updates; the trace has steps + 1 rows (row k: loss after k updates)."""
    mode = cfg.mode
    if mode in ("seg", "end_to_end") and seg_model is None:
        raise ConfigError(f"mode {mode} needs a segmentation model")
    if mode != "seg" and dose_model is None:
        raise ConfigError(f"mode {mode} needs a dose model")
    if not subjects:
        raise ConfigError("no training subjects")

    if dose_model is not None:
        dosenet.set_stage1_frozen(dose_model.params, frozen=(mode != "dose_stage1"))
        if mode == "dose_stage1":
            for k, t in dose_model.params.items():
                if not k.startswith("dose.s1."):
                    t.requires_grad = False
        else:
            for k, t in dose_model.params.items():
                if not k.startswith("dose.s1."):
                    t.requires_grad = True
    if seg_model is not None:
        train_seg = mode == "seg" or (mode == "end_to_end" and cfg.fine_tune_seg)
        for t in seg_model.params.values():
            t.requires_grad = train_seg

    names = trainable_names(mode, seg_model, dose_model, cfg.fine_tune_seg)
    params = {}
    if seg_model is not None:
        params.update(seg_model.params)
    if dose_model is not None:
        params.update(dose_model.params)
    state = state or OptimState()
    rng = np.random.default_rng([cfg.seed, 0xA06])
    aug = cfg.augmentation
    n = len(subjects)

    def batch_loss(step: int, backward: bool):
        comps, total = {}, 0.0
        for j in range(cfg.batch_size):
            s = subjects[(step * cfg.batch_size + j) % n]
            s = augment(s, aug, rng)
            if mode == "seg":
                loss, c = seg_sample_loss(seg_model, s)
            elif mode == "dose_stage1":
                loss, c = stage1_sample_loss(dose_model, s)
            elif mode == "dose_stage2":
                loss, c = stage2_sample_loss(dose_model, s, cfg.loss_weights)
            else:
                loss, c = e2e_sample_loss(seg_model, dose_model, s, cfg.loss_weights, cfg.hard_masks)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}")
            if backward:
                ops.mul_scalar(loss, 1.0 / cfg.batch_size).backward()
            total += value / cfg.batch_size
            for k, v in c.items():
                comps[k] = comps.get(k, 0.0) + v / cfg.batch_size
        return total, comps

    trace = []
    for step in range(cfg.steps + 1):
        zero_grads(params)
        last = step == cfg.steps
        total, comps = batch_loss(step, backward=not last)
        trace.append({"step": step, "total": total, **comps})
        if callback is not None:
            callback(step, total, comps)
        if not last:
            adamw_step(params, state, cfg, names)
    zero_grads(params)
    return TrainResult(make_checkpoint(params, state, cfg, seg_model, dose_model), trace, state)


# --- checkpoint plumbing -----------------------------------------------------

def config_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def seg_config_from_dict(d: dict) -> segnet.SegConfig:
    d = dict(d)
    return segnet.SegConfig(encoder=EncoderConfig(**d.pop("encoder")), **d)


def dose_config_from_dict(d: dict) -> dosenet.DoseConfig:
    d = dict(d)
    return dosenet.DoseConfig(encoder=EncoderConfig(**d.pop("encoder")), **d)


def make_checkpoint(params: dict, state: OptimState, cfg: TrainConfig, seg_model=None, dose_model=None) -> Checkpoint:
    meta = {"mode": cfg.mode, "train": config_dict(cfg)}
    if seg_model is not None:
        meta["seg_config"] = config_dict(seg_model.cfg)
    if dose_model is not None:
        meta["dose_config"] = config_dict(dose_model.cfg)
    meta["frozen"] = sorted(k for k, t in params.items() if not t.requires_grad)
    meta["fingerprint"] = config_fingerprint({k: v for k, v in meta.items() if k != "frozen"})
    return Checkpoint(
        params={k: params[k].data for k in sorted(params)},
        opt_m={k: state.m[k] for k in sorted(state.m)},
        opt_v={k: state.v[k] for k in sorted(state.v)},
        step=state.step,
        meta=meta,
    )


def models_from_checkpoint(ck: Checkpoint, dtype=np.float32):
    """Rebuild (seg_model or None, dose_model or None) with the stored weights."""
    seg_model = dose_model = None
    if "seg_config" in ck.meta:
        seg_model = segnet.SegNet(seg_config_from_dict(ck.meta["seg_config"]), dtype=dtype)
        load_params_into(seg_model.params, {k: v for k, v in ck.params.items() if k.startswith("seg.")})
    if "dose_config" in ck.meta:
        dose_model = dosenet.DoseNet(dose_config_from_dict(ck.meta["dose_config"]), dtype=dtype)
        load_params_into(dose_model.params, {k: v for k, v in ck.params.items() if k.startswith("dose.")})
    return seg_model, dose_model


def state_from_checkpoint(ck: Checkpoint) -> OptimState:
    return OptimState({k: v.copy() for k, v in ck.opt_m.items()}, {k: v.copy() for k, v in ck.opt_v.items()}, ck.step)
