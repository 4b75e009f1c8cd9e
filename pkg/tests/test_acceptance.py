"""Acceptance criteria 1-7, one PASS/FAIL line each (see the terminal summary).

Slow: about 20 minutes on one core, most of it the overfit runs of criterion 5.
"""
import csv
import math
import subprocess
import sys
import time

import numpy as np
import pytest

import oracles
from acceptance_log import record
from cascadedose import dosenet, experiments, fileio, gradsuite, losses, metrics, segnet, vit
from cascadedose.cli import subject_path
from cascadedose.config import RunConfig
from cascadedose.metrics import RoiSpec
from cascadedose.phantom import PhantomConfig, generate
from cascadedose.tensor import Tensor
from cascadedose.train import TrainConfig, train

pytestmark = pytest.mark.slow

OVERFIT_SEEDS = (0, 1, 2, 3, 4)


# --- 1. gradient suite ---------------------------------------------------------

def test_criterion_1_gradient_suite():
    t = time.perf_counter()
    reports = [r for scope in gradsuite.SCOPES for r in gradsuite.run(scope, instances=10, tol=1e-4)]
    secs = time.perf_counter() - t
    worst = max(reports, key=lambda r: r.max_relative_error)
    failed = [r.op_name for r in reports if not r.passed]
    ok = not failed and secs < 600
    record(1, ok, f"{len(reports)} checks x 10 instances, worst {worst.op_name} rel err {worst.max_relative_error:.2e}, "
                  f"{secs:.0f}s" + (f", failed {failed}" if failed else ""))
    assert ok


# --- 2. metric oracles ---------------------------------------------------------

def _shape(r):
    return tuple(int(n) for n in r.integers(1, 13, 3))


def _mask(r, shape):
    m = r.random(shape) < r.uniform(0.05, 0.7)
    if not m.any():
        m[tuple(r.integers(0, n) for n in shape)] = True
    return m


def _spacing(r):
    return tuple(float(x) for x in r.uniform(0.5, 3.0, 3))


def _err_dice(r):
    s = _shape(r)
    g, p = r.random(s) < 0.4, r.random(s) < 0.4
    return abs(metrics.dice(g, p) - oracles.dice(g, p))


def _err_hd95(r):
    s = _shape(r)
    g, p, sp = _mask(r, s), _mask(r, s), _spacing(r)
    return abs(metrics.hd95(g, p, sp) - oracles.hd95(g, p, sp))


def _err_dvh_criteria(r):
    s = _shape(r)
    d, m, sp = np.round(r.random(s) * 70, 1), _mask(r, s), _spacing(r)
    kind = ("OAR", "PTV")[int(r.integers(0, 2))]
    got, want = metrics.dvh_criteria(d, m, sp, RoiSpec("r", kind)), oracles.dvh_criteria(d, m, sp, kind)
    return max(abs(got[k] - want[k]) for k in want) if got.keys() == want.keys() else math.inf


def _err_dose_score(r):
    s = _shape(r)
    g, p, m = r.random(s) * 70, r.random(s) * 70, _mask(r, s)
    return abs(metrics.dose_score(g, p, m) - oracles.dose_score(g, p, m))


def _err_dvh_score(r):
    subjects, ref = [], []
    for _ in range(int(r.integers(1, 3))):
        s, sp = _shape(r), _spacing(r)
        g, p = r.random(s) * 70, r.random(s) * 70
        rois = [(_mask(r, s), kind) for kind in ("PTV", "OAR", "OAR")[: int(r.integers(1, 4))]]
        subjects.append(metrics.DvhSubject(g, p, {f"r{j}": (m, RoiSpec(f"r{j}", k)) for j, (m, k) in enumerate(rois)},
                                           sp))
        ref.append((g, p, rois, sp))
    return abs(metrics.dvh_score(subjects) - oracles.dvh_score(ref))


def _err_dvh_curve(r):
    s = _shape(r)
    d, m = np.round(r.random(s) * 70, 1), _mask(r, s)
    c = metrics.dvh_curve(d, m, bins=int(r.integers(2, 30)))
    return max(abs(f - oracles.dvh_fraction(d, m, t)) for t, f in zip(c.thresholds, c.fraction))


def _err_isodose(r):
    s = _shape(r)
    g, p = r.random(s) * 70, r.random(s) * 70
    th = list(np.linspace(0, 75, 10))
    pairs = zip(metrics.isodose_dice_curve(g, p, th), oracles.isodose_dice(g, p, th))
    return max(abs(v1 - v2) if t1 == t2 else math.inf for (t1, v1), (t2, v2) in pairs)


METRIC_ORACLES = {"dice": _err_dice, "hd95": _err_hd95, "dvh_criteria": _err_dvh_criteria,
                  "dose_score": _err_dose_score, "dvh_score": _err_dvh_score, "dvh_curve": _err_dvh_curve,
                  "isodose_dice_curve": _err_isodose}


def test_criterion_2_metric_oracles():
    worst = {}
    for j, (name, err) in enumerate(METRIC_ORACLES.items()):
        r = np.random.default_rng([2, j])
        worst[name] = max(err(r) for _ in range(100))
    ok = all(v <= 1e-9 for v in worst.values())
    record(2, ok, "100 instances each, max |err| " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# --- 3. architecture contracts -------------------------------------------------

def _bottleneck_fits(p, prefix, enc, shapes_by_level, widths):
    """The bottleneck conv maps K tap channels to the first decoder width; level widths follow the config."""
    w = p[f"{prefix}.dec.bottleneck.w"]
    return w.shape == (widths[0], enc.embed_dim, 3, 3, 3) and [s[0] for s in shapes_by_level] == list(widths)


def test_criterion_3_architecture_contracts():
    checks = {}
    checks["patches(128^3, P=16) = 512"] = vit.EncoderConfig(128, 16, 1, 768, 12, 12).num_tokens == 512
    checks["taps L=12"] = vit.default_taps(12) == (3, 6, 9, 12)
    checks["taps L=8"] = vit.default_taps(8) == (2, 4, 6, 8)
    checks["dose input 9 ch"] = dosenet.DOSE_INPUT_CHANNELS == 9 and dosenet.assemble_input(
        Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((7, 2, 2, 2))), Tensor(np.zeros((1, 2, 2, 2)))).shape[0] == 9

    seg_cfg = experiments.recipe().seg()
    seg = segnet.SegNet(seg_cfg, seed=0)
    out = seg(Tensor(np.zeros((1,) + seg_cfg.encoder.resolution, np.float32)))
    checks["seg output 8 ch"] = out.probs.shape == (8,) + seg_cfg.encoder.resolution == segnet.output_shape(seg_cfg)

    dose_cfg = experiments.recipe().dose()
    pyr = dosenet.DoseNet(dose_cfg, seed=0)(Tensor(np.zeros((9,) + dose_cfg.resolution, np.float32)))
    got = [lv.shape for lv in pyr.levels]
    checks["pyramid 4 levels, x2 law"] = (len(got) == 4 and got == dosenet.pyramid_shapes(dose_cfg)
                                          and all(tuple(2 * n for n in a[1:]) == b[1:] for a, b in zip(got, got[1:])))

    ps = segnet.paper_config()
    shapes = segnet.level_shapes(ps.encoder, ps.decoder_channels)
    params = segnet.init_params(ps, seed=0)
    checks["paper seg config"] = (ps.encoder.num_tokens == 512 and segnet.output_shape(ps) == (8, 128, 128, 128)
                                  and shapes[-1][1:] == (128, 128, 128)
                                  and _bottleneck_fits(params, "seg", ps.encoder, shapes, ps.decoder_channels)
                                  and params["seg.head.w"].shape == (8, ps.decoder_channels[-1], 1, 1, 1))
    del params
    pd = dosenet.paper_config()
    pshapes = dosenet.pyramid_shapes(pd)
    params = dosenet.init_params(pd, seed=0)
    checks["paper dose config"] = ([s[1] for s in pshapes] == [16, 32, 64, 128]
                                   and params["dose.s1.enc1.w"].shape[1] == 9
                                   and _bottleneck_fits(params, "dose", pd.encoder,
                                                        segnet.level_shapes(pd.encoder, pd.decoder_channels),
                                                        pd.decoder_channels))
    del params
    ok = all(checks.values())
    record(3, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# --- 4. loss contracts ---------------------------------------------------------

def test_criterion_4_loss_contracts():
    lab = np.arange(512).reshape(8, 8, 8) % 8
    Y = (lab[None] == np.arange(8).reshape(-1, 1, 1, 1)).astype(np.float64)
    perfect = losses.dice_ce_loss(Tensor(Y), Y).item()
    perfect_limit = losses.dice_ce_loss(Tensor(Y), Y, eps=1e-14).item()

    r = np.random.default_rng(4)
    target = losses.build_gt_pyramid(Tensor(r.random((1, 16, 16, 16)) * 70), 4)
    cfg = RunConfig.defaults()
    w = cfg.train("dose_stage2").loss_weights
    worst = 0.0
    for c in r.uniform(-20, 20, 10):
        got = losses.dose_loss([Tensor(t.data + c) for t in target], target, w).item()
        worst = max(worst, abs(got - (w.lambda1 + w.lambda2) * abs(c)) / ((w.lambda1 + w.lambda2) * abs(c)))
    ok = (abs(perfect) < 1e-4 and abs(perfect_limit) < 1e-9 and worst < 1e-9
          and (cfg["loss.lambda1"], cfg["loss.lambda2"]) == (10.0, 8.0) == (w.lambda1, w.lambda2))
    record(4, ok, f"dice+CE at perfect prediction {perfect:.1e} (eps 1e-5) / {perfect_limit:.1e} (eps 1e-14), "
                  f"uniform-offset rel err {worst:.1e}, lambdas from config ({w.lambda1}, {w.lambda2})")
    assert ok


# --- 5. overfit ----------------------------------------------------------------

def test_criterion_5_overfit():
    t = time.perf_counter()
    results = [experiments.run_all(seed) for seed in OVERFIT_SEEDS]
    secs = time.perf_counter() - t
    seg = [r.seg_dice >= 0.90 for r in results]
    dose = [r.stage2_mae <= 0.1 * r.max_prescription for r in results]
    e2e = [r.e2e_ratio <= 1.2 for r in results]
    ok = sum(seg) >= 4 and sum(dose) >= 4 and sum(e2e) >= 4 and secs < 1200
    record(5, ok, f"seg Dice {[round(r.seg_dice, 3) for r in results]} ({sum(seg)}/5 >= 0.90); "
                  f"stage-2 MAE Gy {[round(r.stage2_mae, 2) for r in results]} ({sum(dose)}/5 <= 7.0); "
                  f"e2e/stage-2 {[round(r.e2e_ratio, 3) for r in results]} ({sum(e2e)}/5 <= 1.2); {secs:.0f}s")
    assert ok


# --- 6. determinism and formats --------------------------------------------------

def _tiny_run(tmp_path, tag):
    cfg = PhantomConfig(resolution=16, seed=6)
    subjects = [generate(cfg, i) for i in range(2)]
    seg = segnet.SegNet(gradsuite.tiny_seg_config(16, 8), seed=6)
    s = train(subjects, TrainConfig(mode="seg", lr=1e-3, steps=3, seed=6), seg_model=seg)
    dose = dosenet.DoseNet(gradsuite.tiny_dose_config(), seed=6)
    d1 = train(subjects, TrainConfig(mode="dose_stage1", lr=1e-3, steps=3, seed=6), dose_model=dose)
    before = {k: dose.params[k].data.tobytes() for k in dosenet.stage1_names(dose.params)}
    d2 = train(subjects, TrainConfig(mode="dose_stage2", lr=1e-3, steps=3, seed=6), dose_model=dose)
    frozen = all(dose.params[k].data.tobytes() == v for k, v in before.items())
    paths = []
    for name, res in (("seg", s), ("d1", d1), ("d2", d2)):
        paths.append(tmp_path / f"{tag}_{name}.ckpt1")
        fileio.save_checkpoint(res.checkpoint, paths[-1])
    return subjects, [s.trace, d1.trace, d2.trace], [p.read_bytes() for p in paths], paths, frozen


def test_criterion_6_determinism_and_formats(tmp_path):
    sa, ta, ca, paths, frozen_a = _tiny_run(tmp_path, "a")
    sb, tb, cb, _, frozen_b = _tiny_run(tmp_path, "b")
    phantoms = all(x.ct.tobytes() == y.ct.tobytes() and x.dose.tobytes() == y.dose.tobytes()
                   and x.oar_masks.tobytes() == y.oar_masks.tobytes() and x.ptv.tobytes() == y.ptv.tobytes()
                   for x, y in zip(sa, sb))
    traces = ta == tb
    ckpts = ca == cb

    vol = fileio.Volume(sa[0].dose.astype(np.float32), (3.0, 2.5, 2.0), "dose")
    fileio.write_vol1(tmp_path / "v.vol1", vol)
    back = fileio.read_vol1(tmp_path / "v.vol1")
    fileio.write_vol1(tmp_path / "w.vol1", back)
    vol_rt = (back.data.tobytes() == vol.data.tobytes() and back.spacing == vol.spacing
              and (tmp_path / "v.vol1").read_bytes() == (tmp_path / "w.vol1").read_bytes())
    ck = fileio.load_checkpoint(paths[2])
    fileio.save_checkpoint(ck, tmp_path / "again.ckpt1")
    ckpt_rt = (tmp_path / "again.ckpt1").read_bytes() == paths[2].read_bytes()

    ok = phantoms and traces and ckpts and vol_rt and ckpt_rt and frozen_a and frozen_b
    record(6, ok, f"phantoms {phantoms}, traces {traces}, checkpoints {ckpts}, VOL1 round trip {vol_rt}, "
                  f"CKPT1 round trip {ckpt_rt}, stage-1 frozen through dose_stage2 {frozen_a and frozen_b}")
    assert ok


# --- 7. CLI walkthrough ----------------------------------------------------------

def _cli(*argv):
    return subprocess.run([sys.executable, "-m", "cascadedose", *map(str, argv)], capture_output=True, text=True)


def _summary(report):
    with open(report) as fh:
        rows = list(csv.DictReader(fh))
    return rows, {r["criterion"]: float(r["value"]) for r in rows if r["section"] == "summary"}


def test_criterion_7_cli_walkthrough(tmp_path):
    cfg = tmp_path / "recipe.cfg"
    cfg.write_text(experiments.RECIPE)
    data, pred, zero = tmp_path / "data", tmp_path / "pred", tmp_path / "zero"
    steps = [
        ("phantom", "--config", cfg, "--count", 2, "--out-dir", data),
        ("train", "--mode", "seg", "--config", cfg, "--data-dir", data, "--out", tmp_path / "seg.ckpt1"),
        ("train", "--mode", "dose1", "--config", cfg, "--data-dir", data, "--out", tmp_path / "dose1.ckpt1"),
        ("train", "--mode", "dose2", "--config", cfg, "--data-dir", data, "--out", tmp_path / "dose2.ckpt1",
         "--init", tmp_path / "dose1.ckpt1"),
    ]
    for i in range(2):
        steps.append(("predict", "--checkpoint", tmp_path / "seg.ckpt1", "--checkpoint", tmp_path / "dose2.ckpt1",
                      "--ct", subject_path(data, i, "ct"), "--ptv", subject_path(data, i, "ptv"),
                      "--out", subject_path(pred, i, "dose")))
    steps.append(("eval", "--pred-dir", pred, "--gt-dir", data, "--out", tmp_path / "report.csv",
                  "--curves-dir", tmp_path / "curves", "--config", cfg))
    pred.mkdir()
    codes = []
    for argv in steps:
        p = _cli(*argv)
        codes.append(p.returncode)
        if p.returncode:
            break

    zero.mkdir()
    for i in range(2):
        gt = fileio.read_vol1(subject_path(data, i, "dose"))
        fileio.write_vol1(subject_path(zero, i, "dose"), fileio.Volume(np.zeros_like(gt.data), gt.spacing, "dose"))
    zero_code = _cli("eval", "--pred-dir", zero, "--gt-dir", data, "--out", tmp_path / "zero.csv").returncode

    all_zero = all(c == 0 for c in codes) and len(codes) == len(steps) and zero_code == 0
    rows, summary = _summary(tmp_path / "report.csv") if all_zero else ([], {})
    finite = bool(rows) and all(math.isfinite(float(r["value"])) for r in rows)
    ds, ds_zero = summary.get("dose_score", math.nan), _summary(tmp_path / "zero.csv")[1]["dose_score"] if all_zero \
        else math.nan
    ok = all_zero and finite and ds < ds_zero
    record(7, ok, f"exit codes {codes} (zero-prediction eval {zero_code}), {len(rows)} report rows all finite "
                  f"{finite}, dose score {ds:.3f} vs all-zero {ds_zero:.3f}")
    assert ok
