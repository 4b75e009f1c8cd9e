"""Deterministic synthetic head-and-neck subjects with an analytic dose.

Geometry is stylised: an ellipsoidal body holding seven OARs (two tubes, a
bilateral parotid pair, ellipsoids) and one ellipsoidal PTV next to them.
Voxel coordinates are measured from the volume centre, (z, y, x) =
(superior->inferior, anterior->posterior, right->left), and all default
sizes scale with resolution / 16.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .metrics import SpacingGrid, UndefinedMetricError, as_spacing
from .segnet import OAR_NAMES


class GenerationError(RuntimeError):
    """Structures could not be placed without overlap."""


# canonical centre (z, y, x) and radius ranges (voxels at resolution 16)
_ELLIPSOIDS = {
    "brainstem": ((-4.5, 2.0, 0.0), ((1.8, 1.4, 1.4), (2.3, 1.8, 1.8))),
    "right_parotid": ((-2.5, 0.3, -3.9), ((1.6, 1.6, 1.3), (2.0, 2.0, 1.7))),
    "left_parotid": ((-2.5, 0.3, 3.9), ((1.6, 1.6, 1.3), (2.0, 2.0, 1.7))),
    "larynx": ((2.0, -2.6, 0.0), ((1.4, 1.4, 1.4), (1.8, 1.8, 1.8))),
    "mandible": ((-1.5, -4.3, 0.0), ((1.3, 1.2, 3.2), (1.6, 1.5, 3.8))),
}
# tubes along z: (y, x) centre, z range, radius range
_TUBES = {
    "spinal_cord": ((3.9, 0.0), (-1.0, 6.8), (1.2, 1.5)),
    "esophagus": ((0.9, 0.0), (2.6, 6.8), (1.1, 1.4)),
}
_INTENSITY = {
    "body": 0.40, "brainstem": 0.52, "spinal_cord": 0.60, "right_parotid": 0.33, "left_parotid": 0.33,
    "esophagus": 0.25, "larynx": 0.15, "mandible": 0.90, "ptv": 0.47,
}


@dataclass
class PhantomConfig:
    resolution: int = 32
    spacing: tuple = (3.0, 3.0, 3.0)
    seed: int = 0
    organ_radius_scale: float = 1.0
    organ_radii: dict | None = None  # name -> ((lo z,y,x), (hi z,y,x)) in voxels; default scales with resolution
    prescriptions: tuple = (70.0, 63.0, 56.0)
    falloff_mm: float = 15.0
    noise_sigma: float = 0.02
    jitter: float = 0.6  # voxels at resolution 16
    max_retries: int = 200

    def __post_init__(self):
        r = int(self.resolution)
        if r < 16 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 16, got {r}")
        self.resolution = r
        self.spacing = as_spacing(self.spacing).spacing
        self.prescriptions = tuple(float(p) for p in self.prescriptions)
        if any(b >= a for a, b in zip(self.prescriptions, self.prescriptions[1:])):
            raise ValueError(f"prescriptions must be strictly decreasing, got {self.prescriptions}")
        if self.falloff_mm <= 0:
            raise ValueError("falloff_mm must be positive")
        if self.organ_radii is None:
            f = self.scale * self.organ_radius_scale
            radii = {k: (tuple(f * v for v in lo), tuple(f * v for v in hi)) for k, (_, (lo, hi)) in _ELLIPSOIDS.items()}
            radii.update({k: ((f * lo,) * 3, (f * hi,) * 3) for k, (_, _, (lo, hi)) in _TUBES.items()})
            self.organ_radii = radii

    @property
    def scale(self) -> float:
        return self.resolution / 16.0


@dataclass
class Subject:
    ct: np.ndarray  # (1, D, H, W) float32 in [0, 1]
    oar_masks: np.ndarray  # (7, D, H, W) bool, class order of segnet.OAR_NAMES
    ptv: np.ndarray  # (D, H, W) bool
    body: np.ndarray  # (D, H, W) bool
    dose: np.ndarray  # (1, D, H, W) float32, Gy
    spacing: SpacingGrid
    prescription: float = 70.0
    index: int = 0
    seed: int = 0

    @property
    def shape(self) -> tuple:
        return self.body.shape

    def onehot(self) -> np.ndarray:
        from .segnet import labels_to_onehot
        return labels_to_onehot(self.oar_masks)

    def dose_input(self, dtype=np.float32) -> np.ndarray:
        """(9, D, H, W): CT, seven OAR masks, PTV."""
        return np.concatenate([self.ct, self.oar_masks, self.ptv[None]], axis=0).astype(dtype)


def _grid(n: int):
    c = (n - 1) / 2.0
    ax = np.arange(n) - c
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _ellipsoid(Z, Y, X, centre, radii) -> np.ndarray:
    return (((Z - centre[0]) / radii[0]) ** 2 + ((Y - centre[1]) / radii[1]) ** 2
            + ((X - centre[2]) / radii[2]) ** 2) <= 1.0


def _tube(Z, Y, X, yx, zrange, radius) -> np.ndarray:
    return (((Y - yx[0]) ** 2 + (X - yx[1]) ** 2) <= radius ** 2) & (Z >= zrange[0]) & (Z <= zrange[1])


def distance_to_set(mask, spacing) -> np.ndarray:
    """Exact Euclidean distance (mm) from every voxel centre to the nearest voxel of ``mask``."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise UndefinedMetricError("distance_to_set: empty mask")
    return ndimage.distance_transform_edt(~m, sampling=as_spacing(spacing).spacing)


def _smooth_field(rng, Z, Y, X, n, amplitude=0.03, terms=3) -> np.ndarray:
    f = np.zeros_like(Z)
    for _ in range(terms):
        k = rng.normal(0.0, 1.0, 3) * (np.pi / n)
        f += np.cos(k[0] * Z + k[1] * Y + k[2] * X + rng.uniform(0, 2 * np.pi))
    return amplitude * f / terms


def generate(cfg: PhantomConfig, index: int = 0) -> Subject:
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    n = cfg.resolution
    f = cfg.scale
    Z, Y, X = _grid(n)

    body_r = np.array([7.3, 6.2, 6.0]) * f * rng.uniform(0.97, 1.0, 3)
    body = _ellipsoid(Z, Y, X, (0.0, 0.0, 0.0), body_r)
    occupied = np.zeros_like(body)
    jit = cfg.jitter * f

    def place(name, make):
        nonlocal occupied
        for _ in range(cfg.max_retries):
            m = make() & body
            # one-voxel gap keeps neighbouring organs from touching
            if m.any() and not (ndimage.binary_dilation(m) & occupied).any():
                occupied = occupied | m
                return m
        raise GenerationError(f"could not place {name} without overlap (seed={cfg.seed}, index={index})")

    masks = {}
    for name in OAR_NAMES:
        lo, hi = (np.asarray(v) for v in cfg.organ_radii[name])
        if name in _TUBES:
            (cy, cx), (z0, z1), _ = _TUBES[name]

            def make(cy=cy, cx=cx, z0=z0, z1=z1, lo=lo, hi=hi):
                r = rng.uniform(lo[0], hi[0])
                off = rng.uniform(-jit, jit, 2)
                return _tube(Z, Y, X, (cy * f + off[0], cx * f + off[1]), (z0 * f, z1 * f), r)
        else:
            centre = np.asarray(_ELLIPSOIDS[name][0]) * f

            def make(centre=centre, lo=lo, hi=hi):
                return _ellipsoid(Z, Y, X, centre + rng.uniform(-jit, jit, 3), rng.uniform(lo, hi))
        masks[name] = place(name, make)

    oar_union = occupied.copy()
    gap_mm = 2.5 * max(cfg.spacing)

    def make_ptv():
        centre = rng.uniform((-3.0, -3.0, -4.0), (4.0, 2.0, 4.0)) * f
        return _ellipsoid(Z, Y, X, centre, rng.uniform(1.5, 2.1, 3) * f)

    for _ in range(cfg.max_retries):
        ptv = place("ptv", make_ptv)
        if distance_to_set(ptv, cfg.spacing)[oar_union].min() <= gap_mm:
            break
        occupied = occupied & ~ptv
    else:
        raise GenerationError(f"PTV not adjacent to any OAR (seed={cfg.seed}, index={index})")

    prescription = float(rng.choice(cfg.prescriptions))
    dist = distance_to_set(ptv, cfg.spacing)
    dose = np.where(body, prescription * np.exp(-dist / cfg.falloff_mm), 0.0)
    dose[ptv] = prescription

    ct = np.zeros_like(Z)
    ct[body] = _INTENSITY["body"]
    for name, m in masks.items():
        ct[m] = _INTENSITY[name]
    ct[ptv] = _INTENSITY["ptv"]
    ct = ct + body * _smooth_field(rng, Z, Y, X, n)
    ct = ct + rng.normal(0.0, cfg.noise_sigma, ct.shape) * body
    ct = np.clip(ct, 0.0, 1.0)

    return Subject(
        ct=ct[None].astype(np.float32),
        oar_masks=np.stack([masks[k] for k in OAR_NAMES]),
        ptv=ptv,
        body=body,
        dose=dose[None].astype(np.float32),
        spacing=SpacingGrid(cfg.spacing),
        prescription=prescription,
        index=int(index),
        seed=int(cfg.seed),
    )


def generate_many(cfg: PhantomConfig, count: int, start: int = 0) -> list:
    return [generate(cfg, i) for i in range(start, start + count)]
