"""Segmentation and dosimetric evaluation: Dice, HD95, DVH criteria, dose/DVH scores, t-test."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, special

log = logging.getLogger(__name__)

OAR_CRITERIA = ("D0.1cc", "Dmean")
PTV_CRITERIA = ("D1%", "D95%", "D99%")


class UndefinedMetricError(ValueError):
    """The metric has no value for these inputs (e.g. an empty mask)."""


class DegenerateStatisticError(ValueError):
    """Test statistic undefined (zero variance)."""


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


@dataclass(frozen=True)
class SpacingGrid:
    spacing: tuple = (1.0, 1.0, 1.0)  # mm along z, y, x

    def __post_init__(self):
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", sp)

    @property
    def voxel_volume(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]


def as_spacing(s) -> SpacingGrid:
    return s if isinstance(s, SpacingGrid) else SpacingGrid(tuple(s))


@dataclass(frozen=True)
class RoiSpec:
    name: str
    kind: str  # "OAR" or "PTV"

    def __post_init__(self):
        if self.kind not in ("OAR", "PTV"):
            raise ValueError(f"ROI kind must be OAR or PTV, got {self.kind!r}")

    @property
    def criteria(self) -> tuple:
        return OAR_CRITERIA if self.kind == "OAR" else PTV_CRITERIA


# --- overlap -----------------------------------------------------------------

def dice(g, p) -> float:
    g = _arr(g).astype(np.float64)
    p = _arr(p).astype(np.float64)
    if g.shape != p.shape:
        raise ValueError(f"dice: shapes {g.shape} and {p.shape} differ")
    den = (g * g).sum() + (p * p).sum()
    if den == 0:
        return 1.0
    return float(2.0 * (g * p).sum() / den)


def surface(mask) -> np.ndarray:
    m = _arr(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(3, 1), border_value=0)


def directed_surface_distances(a, b, spacing) -> np.ndarray:
    """Distance (mm) from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dt = ndimage.distance_transform_edt(~sb, sampling=as_spacing(spacing).spacing)
    return dt[sa]


def hd95(g, p, spacing=(1.0, 1.0, 1.0)) -> float:
    g, p = _arr(g).astype(bool), _arr(p).astype(bool)
    if g.shape != p.shape:
        raise ValueError(f"hd95: shapes {g.shape} and {p.shape} differ")
    if not g.any() or not p.any():
        raise UndefinedMetricError("hd95 is undefined when either mask is empty")
    d_gp = directed_surface_distances(g, p, spacing)
    d_pg = directed_surface_distances(p, g, spacing)
    return float(max(np.percentile(d_gp, 95), np.percentile(d_pg, 95)))


# --- DVH ---------------------------------------------------------------------

def _rank_percent(x: float, n: int) -> int:
    r = math.ceil(Fraction(str(x)) * n / 100)
    return min(max(r, 1), n)


def cc_rank(cc: float, voxel_volume_mm3: float, n: int) -> int:
    """1-based descending rank of the hottest ``cc`` cubic centimetres."""
    r = max(1, int(math.floor(cc * 1000.0 / voxel_volume_mm3 + 0.5)))
    return min(r, n)


def dvh_criteria(dose, mask, spacing, roi: RoiSpec) -> dict:
    d = _arr(dose).reshape(_arr(mask).shape) if _arr(dose).size == _arr(mask).size else _arr(dose)
    m = _arr(mask).astype(bool)
    if d.shape != m.shape:
        raise ValueError(f"dvh_criteria: dose {d.shape} vs mask {m.shape}")
    vals = d[m].astype(np.float64)
    n = vals.size
    if n == 0:
        raise UndefinedMetricError(f"ROI {roi.name} is empty")
    desc = np.sort(vals)[::-1]
    out = {}
    for c in roi.criteria:
        if c == "Dmean":
            out[c] = float(vals.mean())
        elif c == "D0.1cc":
            out[c] = float(desc[cc_rank(0.1, as_spacing(spacing).voxel_volume, n) - 1])
        else:
            out[c] = float(desc[_rank_percent(float(c[1:-1]), n) - 1])
    return out


@dataclass
class DvhCurve:
    thresholds: np.ndarray
    fraction: np.ndarray


def dvh_curve(dose, mask, bins: int = 100, max_dose: float | None = None) -> DvhCurve:
    d = _arr(dose).reshape(_arr(mask).shape)
    m = _arr(mask).astype(bool)
    if not m.any():
        raise UndefinedMetricError("dvh_curve: empty mask")
    if bins < 2:
        raise ValueError("dvh_curve needs at least two bins")
    vals = np.sort(d[m].astype(np.float64))
    if max_dose is None:
        max_dose = float(vals[-1])
    t = np.linspace(0.0, max_dose, bins)
    frac = (vals.size - np.searchsorted(vals, t, side="left")) / vals.size
    return DvhCurve(t, frac)


# --- scores ------------------------------------------------------------------

def dose_score(g, p, region) -> float:
    g, p, r = _arr(g), _arr(p), _arr(region).astype(bool)
    g = g.reshape(r.shape) if g.size == r.size else g
    p = p.reshape(r.shape) if p.size == r.size else p
    if g.shape != p.shape or g.shape != r.shape:
        raise ValueError(f"dose_score: shapes {g.shape}, {p.shape}, {r.shape}")
    if not r.any():
        raise UndefinedMetricError("dose_score: empty region")
    return float(np.abs(g[r].astype(np.float64) - p[r].astype(np.float64)).mean())


def mean_dose_score(cases: Iterable[tuple]) -> float:
    """Mean over subjects of the per-subject dose score; ``cases`` yields (g, p, region)."""
    scores = [dose_score(*c) for c in cases]
    return float(np.mean(scores))


@dataclass
class DvhSubject:
    gt: np.ndarray
    pred: np.ndarray
    rois: dict  # name -> (mask, RoiSpec)
    spacing: object = (1.0, 1.0, 1.0)
    name: str = ""


@dataclass
class DvhReport:
    criteria_gt: dict = field(default_factory=dict)  # (subject, roi, criterion) -> Gy
    criteria_pred: dict = field(default_factory=dict)
    differences: dict = field(default_factory=dict)  # (subject, roi, criterion) -> |gt - pred|
    dose_score: float = float("nan")
    dvh_score: float = float("nan")
    skipped: list = field(default_factory=list)


def dvh_differences(subjects: Sequence[DvhSubject]) -> DvhReport:
    rep = DvhReport()
    for i, s in enumerate(subjects):
        sid = s.name or str(i)
        for roi_name, (mask, roi) in s.rois.items():
            try:
                cg = dvh_criteria(s.gt, mask, s.spacing, roi)
                cp = dvh_criteria(s.pred, mask, s.spacing, roi)
            except UndefinedMetricError as e:
                log.warning("skipping ROI %s of subject %s: %s", roi_name, sid, e)
                rep.skipped.append((sid, roi_name))
                continue
            for c in roi.criteria:
                key = (sid, roi_name, c)
                rep.criteria_gt[key] = cg[c]
                rep.criteria_pred[key] = cp[c]
                rep.differences[key] = abs(cg[c] - cp[c])
    if rep.differences:
        rep.dvh_score = float(sum(rep.differences.values()) / len(rep.differences))
    return rep


def dvh_score(subjects: Sequence[DvhSubject]) -> float:
    """Sum of |D_c(G) - D_c(P)| over subjects, ROIs and criteria, over the criterion count."""
    rep = dvh_differences(subjects)
    if not rep.differences:
        raise UndefinedMetricError("dvh_score: no ROI produced a defined criterion")
    return rep.dvh_score


def isodose_dice_curve(g, p, thresholds) -> list:
    g, p = _arr(g), _arr(p)
    if g.shape != p.shape:
        raise ValueError(f"isodose_dice_curve: shapes {g.shape} and {p.shape} differ")
    return [(float(t), dice(g >= t, p >= t)) for t in thresholds]


# --- statistics --------------------------------------------------------------

def paired_t_test(a, b) -> tuple:
    """Two-sided paired Student t-test. Returns (t, p)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_t_test needs two equal-length sequences of at least two values")
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateStatisticError("differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    p = special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return float(t), float(p)
