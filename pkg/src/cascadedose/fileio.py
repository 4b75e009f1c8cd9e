"""VOL1 volume files and CKPT1 checkpoint files.

VOL1:  b"VOL1\\n", one JSON header line, then C*D*H*W little-endian float32
       values, channel-major then z, y, x row-major.
CKPT1: b"CKPT1\\n", one JSON manifest line {names, shapes, offsets, checksum, ...},
       then the float32 little-endian payload in manifest order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOL_MAGIC = b"VOL1\n"
CKPT_MAGIC = b"CKPT1\n"
VOL_KINDS = ("ct", "dose", "mask", "probs")


class FormatError(ValueError):
    """File does not follow the VOL1/CKPT1 layout or fails its checksum."""


class ManifestError(ValueError):
    """Checkpoint parameters do not match the target architecture."""


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode() + b"\n"


# --- VOL1 --------------------------------------------------------------------

@dataclass
class Volume:
    data: np.ndarray  # (C, D, H, W) float32
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: str = "ct"
    names: list | None = None

    def header(self) -> dict:
        C, D, H, W = self.data.shape
        h = {"shape": [D, H, W], "channels": C, "spacing_mm": [float(s) for s in self.spacing],
             "dtype": "f32le", "kind": self.kind}
        if self.names is not None:
            h["names"] = list(self.names)
        return h


def write_vol1(path, vol: Volume) -> None:
    data = np.asarray(vol.data)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise FormatError(f"VOL1 holds (C, D, H, W) data, got shape {data.shape}")
    if vol.kind not in VOL_KINDS:
        raise FormatError(f"unknown VOL1 kind {vol.kind!r}")
    payload = np.ascontiguousarray(data, dtype="<f4")
    if vol.kind == "mask" and not np.isin(payload, (0.0, 1.0)).all():
        raise FormatError("mask volumes must contain only 0.0 and 1.0")
    v = Volume(payload, vol.spacing, vol.kind, vol.names)
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        fh.write(_dumps(v.header()))
        fh.write(payload.tobytes())


def read_vol1(path) -> Volume:
    raw = Path(path).read_bytes()
    if not raw.startswith(VOL_MAGIC):
        raise FormatError(f"{path}: missing VOL1 magic")
    nl = raw.index(b"\n", len(VOL_MAGIC))
    try:
        h = json.loads(raw[len(VOL_MAGIC):nl])
        D, H, W = (int(n) for n in h["shape"])
        C = int(h["channels"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad VOL1 header") from e
    if h.get("dtype") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {h.get('dtype')!r}")
    payload = raw[nl + 1:]
    if len(payload) != 4 * C * D * H * W:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {4 * C * D * H * W}")
    data = np.frombuffer(payload, dtype="<f4").reshape(C, D, H, W).astype(np.float32)
    kind = h.get("kind", "ct")
    if kind == "mask" and not np.isin(data, (0.0, 1.0)).all():
        raise FormatError(f"{path}: mask volume with values other than 0/1")
    return Volume(data, tuple(h.get("spacing_mm", (1.0, 1.0, 1.0))), kind, h.get("names"))


# --- CKPT1 -------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict  # name -> ndarray
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)  # model configs, fingerprint, frozen names

    def tensors(self) -> dict:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"opt_m/{k}": v for k, v in self.opt_m.items()})
        out.update({f"opt_v/{k}": v for k, v in self.opt_v.items()})
        return out

    @property
    def parameter_count(self) -> int:
        return int(sum(np.asarray(v).size for v in self.params.values()))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = ckpt.tensors()
    names = sorted(tensors)
    blobs, offsets, shapes, off = [], [], [], 0
    for n in names:
        b = np.ascontiguousarray(tensors[n], dtype="<f4").tobytes()
        blobs.append(b)
        offsets.append(off)
        shapes.append(list(np.shape(tensors[n])))
        off += len(b)
    payload = b"".join(blobs)
    manifest = {"names": names, "shapes": shapes, "offsets": offsets,
                "checksum": hashlib.sha256(payload).hexdigest(), "step": int(ckpt.step), "meta": ckpt.meta}
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(_dumps(manifest))
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: missing CKPT1 magic")
    try:
        nl = raw.index(b"\n", len(CKPT_MAGIC))
        man = json.loads(raw[len(CKPT_MAGIC):nl])
        names, shapes, offsets = man["names"], man["shapes"], man["offsets"]
    except (ValueError, KeyError) as e:
        raise FormatError(f"{path}: corrupt CKPT1 manifest") from e
    payload = raw[nl + 1:]
    if hashlib.sha256(payload).hexdigest() != man.get("checksum"):
        raise FormatError(f"{path}: payload checksum mismatch")
    ck = Checkpoint({}, step=int(man.get("step", 0)), meta=man.get("meta", {}))
    for n, s, o in zip(names, shapes, offsets):
        count = int(np.prod(s)) if s else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=o).reshape(s).astype(np.float32)
        group, key = n.split("/", 1)
        {"param": ck.params, "opt_m": ck.opt_m, "opt_v": ck.opt_v}[group][key] = arr
    return ck


def load_params_into(params: dict, arrays: dict, allow_missing: bool = False) -> None:
    """Copy checkpoint arrays into live parameter tensors, checking names and shapes."""
    problems = []
    for k, t in params.items():
        if k not in arrays:
            if not allow_missing:
                problems.append(f"missing {k} {t.shape}")
        elif tuple(np.shape(arrays[k])) != t.shape:
            problems.append(f"{k}: checkpoint {tuple(np.shape(arrays[k]))} vs model {t.shape}")
    extra = sorted(set(arrays) - set(params))
    problems += [f"unexpected {k}" for k in extra]
    if problems:
        raise ManifestError("checkpoint does not match model: " + "; ".join(problems))
    for k, t in params.items():
        if k in arrays:
            t.data = np.array(arrays[k], dtype=t.data.dtype)
