"""Seeded overfit runs on two phantoms: the training recipes and their scores.

Used by ``scripts/overfit.py`` and the acceptance suite. Each run builds its own
models from ``seed`` so runs are independent and reproducible.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dosenet, metrics, segnet
from .config import RunConfig
from .phantom import PhantomConfig, Subject, generate
from .tensor import Tensor, no_grad
from .train import TrainConfig, train

SUBJECTS = 2

# toy-scale overrides on the run-config defaults; also shipped as scripts/recipe.cfg
RECIPE = """\
seg.embed_dim = 128
seg.lr = 5e-3
seg.fan_in_ref = 32
seg.warmup_steps = 30
dose1.lr = 2e-3
dose1.steps = 100
dose2.lr = 2e-3
dose2.fan_in_ref = 32
e2e.lr = 3e-4
e2e.fan_in_ref = 32
"""


def recipe() -> RunConfig:
    return RunConfig.parse(RECIPE)


def subjects_for(seed: int, resolution: int = 16) -> list:
    cfg = PhantomConfig(resolution=resolution, seed=seed)
    return [generate(cfg, i) for i in range(SUBJECTS)]


def _train_cfg(mode: str, seed: int) -> TrainConfig:
    cfg = recipe().train(mode)
    cfg.seed = seed
    return cfg


def train_dice(model: segnet.SegNet, subjects: list) -> float:
    """Dice of argmax masks, averaged over the classes present in each subject, then over subjects."""
    per_subject = []
    with no_grad():
        for s in subjects:
            pred = segnet.predict_masks(model(Tensor(s.ct.astype(_dtype(model)))))
            truth = segnet.labels_to_onehot(s.oar_masks)
            present = [c for c in range(segnet.NUM_CLASSES) if truth[c].any()]
            per_subject.append(np.mean([metrics.dice(truth[c], pred[c]) for c in present]))
    return float(np.mean(per_subject))


def body_mae(dose_model: dosenet.DoseNet, subjects: list, seg_model: segnet.SegNet | None = None) -> float:
    """Mean over subjects of the body-mask MAE; cascades through ``seg_model`` when given."""
    scores = []
    with no_grad():
        for s in subjects:
            dt = _dtype(dose_model)
            ct, ptv = Tensor(s.ct.astype(dt)), Tensor(s.ptv[None].astype(dt))
            if seg_model is None:
                pyr = dose_model(Tensor(s.dose_input(dt)))
            else:
                pyr, _ = dosenet.cascade_forward(ct, ptv, seg_model.cfg, seg_model.params, dose_model.cfg,
                                                 dose_model.params)
            scores.append(metrics.dose_score(s.dose[0], dosenet.predict_dose(pyr)[0], s.body))
    return float(np.mean(scores))


def _dtype(model):
    return next(iter(model.params.values())).data.dtype


@dataclass
class OverfitResult:
    seed: int
    seg_dice: float = float("nan")
    stage2_mae: float = float("nan")
    e2e_mae: float = float("nan")
    max_prescription: float = float("nan")
    seconds: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    @property
    def e2e_ratio(self) -> float:
        return self.e2e_mae / self.stage2_mae


def run_seg(seed: int, subjects: list | None = None, res: OverfitResult | None = None):
    subjects = subjects or subjects_for(seed)
    res = res or OverfitResult(seed)
    t = time.perf_counter()
    model = segnet.SegNet(recipe().seg(subjects[0].shape[0]), seed=seed)
    out = train(subjects, _train_cfg("seg", seed), seg_model=model)
    res.seg_dice = train_dice(model, subjects)
    res.seconds["seg"] = time.perf_counter() - t
    res.traces["seg"] = out.trace
    return model, res


def run_dose(seed: int, subjects: list | None = None, res: OverfitResult | None = None):
    subjects = subjects or subjects_for(seed)
    res = res or OverfitResult(seed)
    t = time.perf_counter()
    model = dosenet.DoseNet(recipe().dose(subjects[0].shape[0]), seed=seed)
    s1 = train(subjects, _train_cfg("dose_stage1", seed), dose_model=model)
    s2 = train(subjects, _train_cfg("dose_stage2", seed), dose_model=model)
    res.stage2_mae = body_mae(model, subjects)
    res.max_prescription = max(PhantomConfig().prescriptions)
    res.seconds["dose"] = time.perf_counter() - t
    res.traces["dose_stage1"], res.traces["dose_stage2"] = s1.trace, s2.trace
    return model, res


def run_e2e(seed: int, seg_model, dose_model, subjects: list | None = None, res: OverfitResult | None = None):
    subjects = subjects or subjects_for(seed)
    res = res or OverfitResult(seed)
    t = time.perf_counter()
    out = train(subjects, _train_cfg("end_to_end", seed), seg_model=seg_model, dose_model=dose_model)
    res.e2e_mae = body_mae(dose_model, subjects, seg_model)
    res.seconds["e2e"] = time.perf_counter() - t
    res.traces["e2e"] = out.trace
    return res


def run_all(seed: int) -> OverfitResult:
    """seg, then dose stage 1 and 2, then end-to-end fine-tuning of both, on the same two phantoms."""
    subjects = subjects_for(seed)
    seg_model, res = run_seg(seed, subjects)
    dose_model, res = run_dose(seed, subjects, res)
    return run_e2e(seed, seg_model, dose_model, subjects, res)
