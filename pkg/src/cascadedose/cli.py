"""``cascadedose`` command line: phantom, train, predict, eval, gradcheck, config.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import dosenet, gradsuite, metrics, segnet, train as T
from .config import RunConfig, RunConfigError
from .fileio import (Checkpoint, FormatError, ManifestError, Volume, load_checkpoint, read_vol1,
                     save_checkpoint, write_vol1)
from .losses import ContractError
from .phantom import GenerationError, Subject, generate
from .tensor import ConfigError, DimensionError, NumericalError, Tensor, no_grad

log = logging.getLogger("cascadedose")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
KINDS = ("ct", "masks", "ptv", "body", "dose")
CLI_MODES = {"seg": "seg", "dose1": "dose_stage1", "dose2": "dose_stage2", "e2e": "end_to_end"}
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- subject directories -------------------------------------------------------

def subject_path(directory, index: int, kind: str) -> Path:
    return Path(directory) / f"subject_{index:03d}_{kind}.vol1"


def write_subject(directory, s: Subject) -> list:
    sp = metrics.as_spacing(s.spacing).spacing
    vols = {
        "ct": Volume(s.ct, sp, "ct", ["ct"]),
        "masks": Volume(s.oar_masks.astype(np.float32), sp, "mask", list(segnet.OAR_NAMES)),
        "ptv": Volume(s.ptv[None].astype(np.float32), sp, "mask", ["ptv"]),
        "body": Volume(s.body[None].astype(np.float32), sp, "mask", ["body"]),
        "dose": Volume(s.dose, sp, "dose", ["dose"]),
    }
    paths = []
    for kind in KINDS:
        p = subject_path(directory, s.index, kind)
        write_vol1(p, vols[kind])
        paths.append(p)
    return paths


def _read(path, kind=None) -> Volume:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    vol = read_vol1(path)
    if kind is not None and vol.kind != kind:
        raise DataError(f"{path}: expected a {kind} volume, found {vol.kind}")
    return vol


def read_manifest(directory) -> dict:
    p = Path(directory) / MANIFEST
    if not p.exists():
        raise DataError(f"{directory}: no {MANIFEST}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{p}: {e}") from e


def subject_indices(directory) -> list:
    out = []
    for p in sorted(Path(directory).glob("subject_*_dose.vol1")):
        try:
            out.append(int(p.name.split("_")[1]))
        except ValueError:
            continue
    return out


def load_subject(directory, index: int, prescription: float | None = None) -> Subject:
    ct = _read(subject_path(directory, index, "ct"), "ct")
    masks = _read(subject_path(directory, index, "masks"), "mask")
    ptv = _read(subject_path(directory, index, "ptv"), "mask")
    body = _read(subject_path(directory, index, "body"), "mask")
    dose = _read(subject_path(directory, index, "dose"), "dose")
    shapes = {v.data.shape[1:] for v in (ct, masks, ptv, body, dose)}
    if len(shapes) != 1 or masks.data.shape[0] != len(segnet.OAR_NAMES):
        raise DataError(f"subject {index}: inconsistent volume shapes")
    ptv_mask = ptv.data[0] > 0.5
    if prescription is None:
        prescription = float(dose.data[0][ptv_mask].max()) if ptv_mask.any() else 0.0
    return Subject(ct=ct.data, oar_masks=masks.data > 0.5, ptv=ptv_mask, body=body.data[0] > 0.5, dose=dose.data,
                   spacing=metrics.as_spacing(ct.spacing), prescription=prescription, index=index)


def load_subjects(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    man = read_manifest(directory)
    presc = {int(e["index"]): float(e["prescription"]) for e in man.get("subjects", [])}
    idx = subject_indices(directory)
    if not idx:
        raise DataError(f"{directory}: no subject_*_dose.vol1 files")
    return [load_subject(directory, i, presc.get(i)) for i in idx]


# --- commands -----------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = RunConfig.load(args.config)
    pcfg = cfg.phantom()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        s = generate(pcfg, i)
        files = write_subject(out, s)
        entries.append({"index": i, "seed": [pcfg.seed, i], "prescription": s.prescription,
                        "files": [p.name for p in files]})
    man = {"generator": "cascadedose.phantom", "config": json.loads(json.dumps(dataclasses.asdict(pcfg))),
           "subjects": entries}
    (out / MANIFEST).write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    print(f"wrote {args.count} subjects to {out}")
    return EXIT_OK


def _merge_checkpoints(paths) -> Checkpoint:
    merged = Checkpoint({}, meta={})
    for p in paths or []:
        if not Path(p).exists():
            raise UsageError(f"checkpoint {p} does not exist")
        ck = load_checkpoint(p)
        clash = set(ck.params) & set(merged.params)
        if clash:
            raise ManifestError(f"{p}: parameters {sorted(clash)[:3]}... appear in more than one checkpoint")
        merged.params.update(ck.params)
        merged.opt_m.update(ck.opt_m)
        merged.opt_v.update(ck.opt_v)
        merged.step = max(merged.step, ck.step)
        for key in ("seg_config", "dose_config"):
            if key in ck.meta:
                merged.meta[key] = ck.meta[key]
    return merged


def write_trace(path, trace: list) -> None:
    comps = sorted({k for row in trace for k in row} - {"step", "total"})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total"] + comps)
        for row in trace:
            w.writerow([row["step"], repr(float(row["total"]))] + [repr(float(row.get(c, float("nan")))) for c in comps])


def trace_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + "_trace.csv")


def cmd_train(args) -> int:
    mode = CLI_MODES[args.mode]
    cfg = RunConfig.load(args.config)
    subjects = load_subjects(args.data_dir)
    res = subjects[0].shape
    init = _merge_checkpoints(args.init)
    seg_model, dose_model = T.models_from_checkpoint(init) if args.init else (None, None)

    if mode == "seg" and seg_model is None:
        seg_model = segnet.SegNet(cfg.seg(res), seed=cfg["model.seed"])
    if mode == "dose_stage1" and dose_model is None:
        dose_model = dosenet.DoseNet(cfg.dose(res), seed=cfg["model.seed"])
    if mode == "dose_stage2" and dose_model is None:
        raise UsageError("dose2 needs --init with a dose1 checkpoint (its stage-1 network is frozen and reused)")
    if mode == "end_to_end" and (seg_model is None or dose_model is None):
        raise UsageError("e2e needs --init with a seg checkpoint and a dose2 checkpoint (give --init twice)")
    if mode in ("seg", "dose_stage1", "dose_stage2"):
        # train only what the mode owns; the other network is not written out
        seg_model = seg_model if mode == "seg" else None
        dose_model = dose_model if mode != "seg" else None

    tcfg = cfg.train(mode)
    if args.steps is not None:
        tcfg.steps = args.steps

    def progress(step, total, comps):
        if step % max(1, tcfg.steps // 10) == 0 or step == tcfg.steps:
            log.info("step %d/%d loss %.5f", step, tcfg.steps, total)

    result = T.train(subjects, tcfg, seg_model=seg_model, dose_model=dose_model, callback=progress)
    save_checkpoint(result.checkpoint, args.out)
    tp = Path(args.trace) if args.trace else trace_path(args.out)
    write_trace(tp, result.trace)
    print(f"{args.mode}: loss {result.trace[0]['total']:.5f} -> {result.trace[-1]['total']:.5f}; "
          f"wrote {args.out} and {tp}")
    return EXIT_OK


def masks_path_for(out) -> Path:
    out = Path(out)
    if out.name.endswith("_dose.vol1"):
        return out.with_name(out.name[: -len("_dose.vol1")] + "_masks.vol1")
    return out.with_name(out.stem + "_masks.vol1")


def predict_volume(ck: Checkpoint, ct: np.ndarray, ptv: np.ndarray, oar: np.ndarray | None = None):
    """Run the dose network (cascade when ``oar`` is None). Returns (dose, predicted OAR masks or None)."""
    seg_model, dose_model = T.models_from_checkpoint(ck)
    if dose_model is None:
        raise ManifestError("checkpoint holds no dose network")
    if ct.shape[1:] != dose_model.cfg.resolution:
        raise ManifestError(f"input shape {ct.shape[1:]} does not match the checkpoint's {dose_model.cfg.resolution}")
    with no_grad():
        if oar is None:
            if seg_model is None:
                raise ManifestError("cascade prediction (no --oar) needs a checkpoint holding the segmentation network")
            seg_out = segnet.forward(Tensor(ct), seg_model.cfg, seg_model.params)
            masks = segnet.predict_masks(seg_out)[1:]
            pyr = dosenet.forward(dosenet.cascade_input(Tensor(ct), Tensor(ptv), seg_out), dose_model.cfg,
                                  dose_model.params)
        else:
            masks = None
            pyr = dosenet.forward(dosenet.assemble_input(Tensor(ct), Tensor(oar), Tensor(ptv)), dose_model.cfg,
                                  dose_model.params)
    dose = dosenet.predict_dose(pyr)
    if not np.isfinite(dose).all():
        raise NumericalError("prediction contains non-finite values")
    return dose, masks


def cmd_predict(args) -> int:
    ck = _merge_checkpoints(args.checkpoint)
    ct = _read(args.ct, "ct")
    ptv = _read(args.ptv, "mask")
    oar = _read(args.oar, "mask").data if args.oar else None
    if oar is not None and oar.shape[0] != len(segnet.OAR_NAMES):
        raise ManifestError(f"{args.oar}: expected {len(segnet.OAR_NAMES)} OAR channels, got {oar.shape[0]}")
    if ptv.data.shape[1:] != ct.data.shape[1:] or (oar is not None and oar.shape[1:] != ct.data.shape[1:]):
        raise ManifestError("CT, PTV and OAR volumes differ in shape")
    dose, masks = predict_volume(ck, ct.data, ptv.data, oar)
    write_vol1(args.out, Volume(dose.astype(np.float32), ct.spacing, "dose", ["dose"]))
    msg = f"wrote {args.out}"
    if masks is not None:
        mp = masks_path_for(args.out)
        write_vol1(mp, Volume(masks.astype(np.float32), ct.spacing, "mask", list(segnet.OAR_NAMES)))
        msg += f" and {mp}"
    print(msg)
    return EXIT_OK


# --- eval ---------------------------------------------------------------------

REPORT_COLUMNS = ("section", "subject", "roi", "criterion", "gt", "pred", "value")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def roi_table(s: Subject) -> dict:
    rois = {name: (s.oar_masks[i], metrics.RoiSpec(name, "OAR")) for i, name in enumerate(segnet.OAR_NAMES)}
    ptv_name = f"PTV{s.prescription:g}"
    rois[ptv_name] = (s.ptv, metrics.RoiSpec(ptv_name, "PTV"))
    return rois


def evaluate(pred_dir, gt_dir, curves_dir=None, baseline_dir=None, dvh_bins: int = 101, isodose_levels: int = 10):
    """Compute report rows (header excluded). Raises DataError listing missing predictions."""
    gts = load_subjects(gt_dir)
    missing = [subject_path(pred_dir, s.index, "dose").name for s in gts
               if not subject_path(pred_dir, s.index, "dose").exists()]
    if baseline_dir is not None:
        missing += [f"baseline:{subject_path(baseline_dir, s.index, 'dose').name}" for s in gts
                    if not subject_path(baseline_dir, s.index, "dose").exists()]
    if missing:
        raise DataError("missing predictions: " + ", ".join(missing))

    detail, dvh_subjects, scores, base_subjects, base_scores = [], [], [], [], []
    dice_vals, hd_vals, hd_undefined = [], [], 0
    for s in gts:
        sid = f"subject_{s.index:03d}"
        pred = _read(subject_path(pred_dir, s.index, "dose"), "dose").data
        if pred.shape != s.dose.shape:
            raise DataError(f"{sid}: predicted dose {pred.shape} vs ground truth {s.dose.shape}")
        rois = roi_table(s)
        dvh_subjects.append(metrics.DvhSubject(s.dose[0], pred[0], rois, s.spacing, sid))
        scores.append(metrics.dose_score(s.dose[0], pred[0], s.body))
        if baseline_dir is not None:
            base = _read(subject_path(baseline_dir, s.index, "dose"), "dose").data
            base_subjects.append(metrics.DvhSubject(s.dose[0], base[0], rois, s.spacing, sid))
            base_scores.append(metrics.dose_score(s.dose[0], base[0], s.body))
        mp = subject_path(pred_dir, s.index, "masks")
        if mp.exists():
            pm = _read(mp, "mask").data > 0.5
            for i, name in enumerate(segnet.OAR_NAMES):
                d = metrics.dice(s.oar_masks[i], pm[i])
                dice_vals.append(d)
                detail.append(("seg", sid, name, "Dice", None, None, d))
                try:
                    h = metrics.hd95(s.oar_masks[i], pm[i], s.spacing)
                except metrics.UndefinedMetricError as e:
                    log.warning("%s %s: HD95 undefined (%s)", sid, name, e)
                    hd_undefined += 1
                    continue
                hd_vals.append(h)
                detail.append(("seg", sid, name, "HD95", None, None, h))
        if curves_dir is not None:
            _write_curves(Path(curves_dir), sid, s, pred[0], rois, dvh_bins, isodose_levels)

    rep = metrics.dvh_differences(dvh_subjects)
    for (sid, roi, c), diff in rep.differences.items():
        detail.append(("dvh", sid, roi, c, rep.criteria_gt[(sid, roi, c)], rep.criteria_pred[(sid, roi, c)], diff))
    detail.sort(key=lambda r: (r[1], r[2], r[3], r[0]))

    summary = [("summary", "ALL", "ALL", "dose_score", None, None, float(np.mean(scores))),
               ("summary", "ALL", "ALL", "dvh_score", None, None, rep.dvh_score)]
    if dice_vals:
        summary.append(("summary", "ALL", "OAR", "Dice", None, None, float(np.mean(dice_vals))))
        if hd_vals:
            summary.append(("summary", "ALL", "OAR", "HD95", None, None, float(np.mean(hd_vals))))
        summary.append(("summary", "ALL", "OAR", "HD95_undefined", None, None, float(hd_undefined)))

    tests = []
    if baseline_dir is not None:
        brep = metrics.dvh_differences(base_subjects)
        keys = sorted(set(rep.differences) & set(brep.differences))
        pairs = {"dose_score": (scores, base_scores),
                 "dvh_abs_diff": ([rep.differences[k] for k in keys], [brep.differences[k] for k in keys])}
        for name, (a, b) in pairs.items():
            try:
                t, p = metrics.paired_t_test(a, b)
            except (metrics.DegenerateStatisticError, ValueError) as e:
                log.warning("t-test on %s not computable: %s", name, e)
                t = p = float("nan")
            tests.append(("ttest", "ALL", "ALL", f"{name}:t", None, None, t))
            tests.append(("ttest", "ALL", "ALL", f"{name}:p", None, None, p))
    return detail + summary + tests


def _write_curves(d: Path, sid: str, s: Subject, pred: np.ndarray, rois: dict, bins: int, levels: int) -> None:
    d.mkdir(parents=True, exist_ok=True)
    top = float(max(s.dose.max(), pred.max(), 1e-6))
    for name, (mask, _) in rois.items():
        if not mask.any():
            continue
        cg = metrics.dvh_curve(s.dose[0], mask, bins, top)
        cp = metrics.dvh_curve(pred, mask, bins, top)
        with open(d / f"{sid}_{name}_dvh.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dose_gy", "volume_fraction_gt", "volume_fraction_pred"])
            for t, a, b in zip(cg.thresholds, cg.fraction, cp.fraction):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
    thresholds = [s.prescription * (i + 1) / levels for i in range(levels)]
    with open(d / f"{sid}_isodose_dice.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold_gy", "dice"])
        for t, v in metrics.isodose_dice_curve(s.dose[0], pred, thresholds):
            w.writerow([repr(t), repr(v)])


def write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for sec, sid, roi, crit, g, p, v in rows:
            w.writerow([sec, sid, roi, crit, _fmt(g), _fmt(p), _fmt(v)])


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    rows = evaluate(args.pred_dir, args.gt_dir, args.curves_dir, args.baseline_dir, cfg["eval.dvh_bins"],
                    cfg["eval.isodose_levels"])
    write_report(args.out, rows)
    for r in rows:
        if r[0] == "summary":
            print(f"{r[3]:>16s} {r[6]:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gradsuite.run(args.scope, instances=args.instances, seed=args.seed)
    print(f"{'op':<40s} {'max rel err':>10s} {'elements':>8s}  status")
    for r in reports:
        print(r.row())
    failed = [r for r in reports if not r.passed]
    for r in failed:
        print(f"FAILED {r.op_name}: max relative error {r.max_relative_error:.3e}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(RunConfig.load(args.config).dumps())
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cascadedose", description="Cascade transformer dose prediction toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate synthetic subjects")
    p.add_argument("--config")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--mode", choices=sorted(CLI_MODES), required=True)
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="output checkpoint (CKPT1)")
    p.add_argument("--init", action="append", help="initial checkpoint; repeat for e2e (seg + dose2)")
    p.add_argument("--trace", help="loss-trace CSV (default: <out stem>_trace.csv)")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict a dose volume")
    p.add_argument("--checkpoint", action="append", required=True, help="repeat to combine seg and dose checkpoints")
    p.add_argument("--ct", required=True)
    p.add_argument("--ptv", required=True)
    p.add_argument("--oar", help="OAR mask bundle; omitted: cascade through the segmentation network")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--curves-dir")
    p.add_argument("--baseline-dir")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=gradsuite.SCOPES, required=True)
    p.add_argument("--instances", type=int, default=gradsuite.DEFAULT_INSTANCES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("config", help="print every configuration key with its value and meaning")
    p.add_argument("--config")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse exits on --help (0) and on bad arguments (1)
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, RunConfigError, ConfigError) as e:
        print(f"cascadedose: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ManifestError, DimensionError, ContractError, GenerationError,
            metrics.UndefinedMetricError, OSError) as e:
        print(f"cascadedose: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, T.TrainingError, FloatingPointError) as e:
        print(f"cascadedose: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
