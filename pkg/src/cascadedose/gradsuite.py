"""Randomised gradient-check suites for the primitive ops and the three networks.

Each suite returns one :class:`GradCheckReport` per checked function. A report
aggregates ``instances`` random draws (shapes, values and, for the networks,
parameters) and keeps the worst relative error seen.

The dose-side network checks read the pyramid out through a fixed random
projection instead of the L1 loss: a central difference that straddles one of
the loss's kinks is not a gradient error. The L1 loss itself is checked in the
op suite with residuals kept away from zero.
"""
from __future__ import annotations

import numpy as np

from . import conv as C
from . import dosenet, losses, ops, segnet, vit
from .gradcheck import GradCheckReport, grad_check
from .layers import Initializer
from .tensor import Tensor

SCOPES = ("op", "seg", "dose", "e2e")
DEFAULT_INSTANCES = 10
NET_COORDS_PER_TENSOR = 1


def _t(rng, shape, grad=True, away_from_zero=False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return Tensor(x, requires_grad=grad)


def _merge(name: str, reports: list) -> GradCheckReport:
    worst = max(r.max_relative_error for r in reports)
    return GradCheckReport(name, worst, sum(r.element_count for r in reports), all(r.passed for r in reports))


# --- op instances: each takes an rng and returns (f, inputs) -------------------

def _conv_case(backend, stride):
    def case(rng):
        k = int(rng.choice([1, 2, 3] if stride > 1 else [1, 3, 5]))
        pad = int(rng.integers(0, k // 2 + 1))
        n = int(rng.integers(k + 1, 7))
        while (n + 2 * pad - k) % stride:
            n += 1
        ci, co = (int(v) for v in rng.integers(1, 4, size=2))
        x, w, b = _t(rng, (ci, n, n, n)), _t(rng, (co, ci, k, k, k)), _t(rng, (co,))

        def f(x, w, b):
            C.set_conv_backend(backend)
            try:
                return C.conv3d(x, w, b, stride=stride, padding=pad)
            finally:
                C.set_conv_backend("auto")
        return f, [x, w, b]
    return case


def _deconv_case(rng):
    s = int(rng.choice([1, 2]))
    k = int(rng.choice([s, 2, 3]))
    ci, co = (int(v) for v in rng.integers(1, 4, size=2))
    n = int(rng.integers(2, 5))
    x, w, b = _t(rng, (ci, n, n, n)), _t(rng, (ci, co, k, k, k)), _t(rng, (co,))
    return (lambda x, w, b: C.conv_transpose3d(x, w, b, stride=s)), [x, w, b]


def _resize_case(rng):
    c = int(rng.integers(1, 3))
    src = tuple(int(v) for v in rng.integers(2, 6, size=3))
    dst = tuple(int(v) for v in rng.integers(2, 8, size=3))
    return (lambda x: C.trilinear_resize(x, dst)), [_t(rng, (c,) + src)]


def _unary(fn, away=False):
    def case(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        return fn, [_t(rng, shape, away_from_zero=away)]
    return case


def _binary(fn, positive_second=False):
    def case(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        a, b = _t(rng, shape), _t(rng, shape)
        if positive_second:
            b.data = 0.5 + np.abs(b.data)
        return fn, [a, b]
    return case


def _log_case(rng):
    x = Tensor(0.2 + rng.random((3, 4)), requires_grad=True)
    return (lambda x: ops.log(x, 1e-5)), [x]


def _matmul_case(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, size=3))
    if rng.random() < 0.5:
        return ops.matmul, [_t(rng, (m, k)), _t(rng, (k, n))]
    h = int(rng.integers(1, 4))
    return ops.matmul, [_t(rng, (h, m, k)), _t(rng, (h, k, n))]


def _softmax_case(rng):
    shape = tuple(int(v) for v in rng.integers(2, 5, size=3))
    axis = int(rng.integers(0, 3))
    return (lambda x: ops.softmax(x, axis=axis)), [_t(rng, shape)]


def _layer_norm_case(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    return (lambda x, g, s: ops.layer_norm(x, g, s)), [_t(rng, (n, k)), _t(rng, (k,)), _t(rng, (k,))]


def _attention_case(rng):
    heads = int(rng.integers(1, 4))
    K = heads * int(rng.integers(1, 4))
    n = int(rng.integers(1, 6))
    names = ["q.w", "q.b", "k.w", "v.w", "v.b", "o.w", "o.b"]
    shapes = [(K, K), (K,), (K, K), (K, K), (K,), (K, K), (K,)]
    p = {f"a.{nm}": _t(rng, s) for nm, s in zip(names, shapes)}
    x = _t(rng, (n, K))
    keys = sorted(p)

    def f(x, *ws):
        return vit.multi_head_attention(x, dict(zip(keys, ws)), "a", heads)
    return f, [x] + [p[k] for k in keys]


def _patch_case(rng):
    P = int(rng.choice([1, 2]))
    c = int(rng.integers(1, 3))
    g = tuple(int(v) for v in rng.integers(1, 3, size=3))
    x = _t(rng, (c,) + tuple(P * v for v in g))
    return (lambda x: vit.unpatchify(ops.mul(vit.patchify(x, P), vit.patchify(x, P)), P, c, g)), [x]


def _dice_ce_case(rng):
    J = int(rng.integers(2, 5))
    shape = (J,) + tuple(int(v) for v in rng.integers(2, 4, size=3))
    labels = rng.integers(0, J, size=shape[1:])
    Y = (labels[None] == np.arange(J).reshape(-1, 1, 1, 1)).astype(np.float64)
    logits = _t(rng, shape)
    return (lambda z: losses.dice_ce_loss(ops.softmax(z, axis=0), Y)), [logits]


def _dose_loss_case(rng):
    S = int(rng.integers(2, 5))
    n = 2 ** (S - 1) * int(rng.integers(1, 3))
    target = losses.build_gt_pyramid(Tensor(rng.random((1, n, n, n)) * 10), S)
    preds = [Tensor(t.data + np.sign(rng.standard_normal(t.shape)) * (0.1 + rng.random(t.shape)), requires_grad=True)
             for t in target]
    w = losses.LossWeights(*(float(v) for v in rng.uniform(0.5, 10, size=2)))
    return (lambda *ps: losses.dose_loss(list(ps), target, w)), preds


def _scalar_case(rng):
    c = float(rng.uniform(-3, 3))
    return (lambda x: ops.add_scalar(ops.mul_scalar(x, c), c)), [_t(rng, (3, int(rng.integers(1, 5))))]


def _add_bias_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    axis = int(rng.integers(0, 4))
    return (lambda x, b: ops.add_bias(x, b, axis=axis)), [_t(rng, shape), _t(rng, (shape[axis],))]


def _concat_case(rng):
    axis = int(rng.integers(0, 3))
    base = [int(v) for v in rng.integers(1, 4, size=3)]
    xs = []
    for _ in range(int(rng.integers(2, 4))):
        shape = list(base)
        shape[axis] = int(rng.integers(1, 4))
        xs.append(_t(rng, tuple(shape)))
    return (lambda *xs: ops.concat(list(xs), axis=axis)), xs


def _reshape_permute_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=3))
    axes = tuple(int(v) for v in rng.permutation(3))
    return (lambda x: ops.reshape(ops.permute(x, axes), (-1,))), [_t(rng, shape)]


def _index_case(rng):
    n = int(rng.integers(2, 6))
    idx = slice(int(rng.integers(0, n - 1)), n, int(rng.integers(1, 3)))
    return (lambda x: ops.index(x, idx)), [_t(rng, (n, 3))]


def _linear_case(rng):
    n, a, b = (int(v) for v in rng.integers(1, 5, size=3))
    return ops.linear, [_t(rng, (n, a)), _t(rng, (a, b)), _t(rng, (b,))]


# --- block instances: small float64 parameter sets, jittered off their init -----

def _block(rng, init_fn, fwd, input_shapes):
    p = {}
    init_fn(Initializer(int(rng.integers(1 << 30)), np.float64), p)
    _jitter(p, rng)
    keys = sorted(p)
    xs = [_t(rng, s) for s in input_shapes]

    def f(*args):
        return fwd(*args[:len(xs)], dict(zip(keys, args[len(xs):])))
    return f, xs + [p[k] for k in keys]


def _transformer_case(rng):
    # width >= 4: a two-feature layer norm outputs +-1 and is a smoothed sign function,
    # too ill-conditioned near ties for a difference quotient
    heads = int(rng.integers(1, 4))
    K, n = heads * (4 if heads == 1 else int(rng.integers(2, 4))), int(rng.integers(2, 6))
    return _block(rng, lambda i, p: vit.init_layer_params(i, p, "b", K, 2 * K),
                  lambda x, p: vit.transformer_layer(x, p, "b", heads), [(n, K)])


def _encoder_case(rng):
    cfg = vit.EncoderConfig(4, 2, 1, 6, 4, 2)
    return _block(rng, lambda i, p: p.update(vit.init_encoder_params(cfg, i, "e")),
                  lambda x, p: _flat_levels([vit.reshape_tap(t, cfg) for t in vit.encode(x, cfg, p, "e").values()]),
                  [(1, 4, 4, 4)])


def _multiscale_case(rng):
    # edge >= 4 so every 7^3 tap overlaps real voxels; an all-padding tap has an
    # exactly zero gradient and the difference quotient returns pure roundoff
    ci, co, n = int(rng.integers(1, 4)), 2 * int(rng.integers(1, 3)), int(rng.integers(4, 6))
    return _block(rng, lambda i, p: segnet.init_multiscale(i, p, "m", ci, co),
                  lambda x, p: segnet.multiscale_block(x, p, "m"), [(ci, n, n, n)])


def _decoder_stage_case(rng):
    cs, cb, co = int(rng.integers(1, 4)), int(rng.integers(1, 4)), 2 * int(rng.integers(1, 3))
    n = 2  # skip edge 4, as in the multiscale case

    def init(i, p):
        i.deconv(p, "d.up", cb, co)
        i.conv(p, "d.skip", cs, co, 3)
        segnet.init_multiscale(i, p, "d.ms", 2 * co, co)
    return _block(rng, init, lambda skip, below, p: segnet.decoder_stage(skip, below, p, "d"),
                  [(cs, 2 * n, 2 * n, 2 * n), (cb, n, n, n)])


def _skip_path_case(rng):
    K, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))

    def init(i, p):
        i.deconv(p, "s.up0", K, co)
        i.deconv(p, "s.up1", co, co)
    return _block(rng, init, lambda x, p: segnet.skip_path(x, p, "s", 2), [(K, 1, 1, 1)])


def _stage1_case(rng):
    c = tuple(int(v) for v in rng.integers(1, 4, size=3))
    return _block(rng, lambda i, p: dosenet.init_stage1(i, p, c), lambda x, p: dosenet.stage1_forward(x, p),
                  [(dosenet.DOSE_INPUT_CHANNELS, 4, 4, 4)])


OP_CASES = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_second=True),
    "square": _unary(ops.square),
    "abs": _unary(ops.abs, away=True),
    "relu": _unary(ops.relu, away=True),
    "exp": _unary(ops.exp),
    "log": _log_case,
    "gelu": _unary(ops.gelu),
    "mish": _unary(ops.mish),
    "sigmoid": _unary(ops.sigmoid),
    "sum/mean": _unary(lambda x: ops.add(ops.sum(x, axis=0), ops.mean(x, axis=0))),
    "matmul": _matmul_case,
    "softmax": _softmax_case,
    "layer_norm": _layer_norm_case,
    "attention": _attention_case,
    "patchify/unpatchify": _patch_case,
    "conv3d[direct]": _conv_case("direct", 1),
    "conv3d[direct,stride2]": _conv_case("direct", 2),
    "conv3d[fft]": _conv_case("fft", 1),
    "conv_transpose3d": _deconv_case,
    "trilinear_resize": _resize_case,
    "dice_ce_loss": _dice_ce_case,
    "dose_loss": _dose_loss_case,
    "mul_scalar/add_scalar": _scalar_case,
    "add_bias": _add_bias_case,
    "concat": _concat_case,
    "reshape/permute": _reshape_permute_case,
    "index": _index_case,
    "linear": _linear_case,
    "block: transformer layer": _transformer_case,
    "block: encoder + tap reshape": _encoder_case,
    "block: multiscale conv": _multiscale_case,
    "block: decoder stage": _decoder_stage_case,
    "block: skip path": _skip_path_case,
    "block: stage-1 U-Net": _stage1_case,
}


def op_suite(instances: int = DEFAULT_INSTANCES, seed: int = 0, tol: float = 1e-4) -> list:
    out = []
    for j, (name, case) in enumerate(OP_CASES.items()):
        reps = []
        for i in range(instances):
            rng = np.random.default_rng([seed, j, i])
            f, inputs = case(rng)
            reps.append(grad_check(f, inputs, tol=tol, name=name, max_elements=24, seed=i))
        out.append(_merge(name, reps))
    return out


# --- network suites -------------------------------------------------------------

def tiny_seg_config(resolution: int = 8, patch: int = 4) -> segnet.SegConfig:
    widths = (8, 6, 4, 2)[-(int(np.log2(patch)) + 1):]
    return segnet.SegConfig(vit.EncoderConfig(resolution, patch, 1, 12, 4, 3), widths)


def tiny_dose_config() -> dosenet.DoseConfig:
    return dosenet.DoseConfig(vit.EncoderConfig(16, 8, dosenet.DOSE_INPUT_CHANNELS + 1, 12, 4, 3), (8, 6, 4, 2),
                              (2, 3, 4))


def _jitter(params: dict, rng) -> None:
    """Move parameters off their structured init (zero biases, unit gains)."""
    for t in params.values():
        t.data = t.data.astype(np.float64) + 0.02 * rng.standard_normal(t.shape)
        t.requires_grad = True


def _onehot(rng, J, shape):
    labels = rng.integers(0, J, size=shape)
    return (labels[None] == np.arange(J).reshape((-1,) + (1,) * len(shape))).astype(np.float64)


def _flat_levels(levels) -> Tensor:
    return ops.concat([ops.reshape(t, (-1,)) for t in levels], axis=0)


def _net_check(name, f, params, extra, tol, seed):
    keys = sorted(params)
    inputs = [params[k] for k in keys] + extra
    return grad_check(lambda *_: f(), inputs, tol=tol, name=name, max_elements=NET_COORDS_PER_TENSOR, seed=seed)


def seg_suite(instances: int = DEFAULT_INSTANCES, seed: int = 0, tol: float = 1e-4) -> list:
    cfg = tiny_seg_config()
    reps = []
    for i in range(instances):
        rng = np.random.default_rng([seed, 101, i])
        p = segnet.init_params(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        _jitter(p, rng)
        ct = _t(rng, (1,) + cfg.encoder.resolution)
        Y = _onehot(rng, segnet.NUM_CLASSES, cfg.encoder.resolution)

        def f(ct=ct, p=p, Y=Y):
            return losses.dice_ce_loss(segnet.forward(ct, cfg, p).probs, Y)
        reps.append(_net_check("segmentation network", f, p, [ct], tol, i))
    return [_merge("segmentation network", reps)]


def dose_suite(instances: int = DEFAULT_INSTANCES, seed: int = 0, tol: float = 1e-4) -> list:
    cfg = tiny_dose_config()
    reps = []
    for i in range(instances):
        rng = np.random.default_rng([seed, 202, i])
        p = dosenet.init_params(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        _jitter(p, rng)  # stage 1 included: its gradients are checked even though training freezes it
        x = _t(rng, (dosenet.DOSE_INPUT_CHANNELS,) + cfg.resolution)

        def f(x=x, p=p):
            return _flat_levels(dosenet.forward(x, cfg, p).levels)
        reps.append(_net_check("dose network", f, p, [x], tol, i))
    return [_merge("dose network", reps)]


def e2e_suite(instances: int = DEFAULT_INSTANCES, seed: int = 0, tol: float = 1e-4) -> list:
    scfg, dcfg = tiny_seg_config(16, 8), tiny_dose_config()
    reps = []
    for i in range(instances):
        rng = np.random.default_rng([seed, 303, i])
        sp = segnet.init_params(scfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        dp = dosenet.init_params(dcfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        _jitter(sp, rng)
        _jitter(dp, rng)
        dosenet.set_stage1_frozen(dp, True)
        ct = _t(rng, (1,) + dcfg.resolution)
        ptv = Tensor((rng.random((1,) + dcfg.resolution) < 0.3).astype(np.float64))
        Y = _onehot(rng, segnet.NUM_CLASSES, dcfg.resolution)

        def f(ct=ct, ptv=ptv, sp=sp, dp=dp, Y=Y):
            pyr, so = dosenet.cascade_forward(ct, ptv, scfg, sp, dcfg, dp)
            seg_loss = ops.reshape(losses.dice_ce_loss(so.probs, Y), (1,))
            return ops.concat([seg_loss, _flat_levels(pyr.levels)], axis=0)
        params = {**sp, **dp}
        reps.append(_net_check("cascade (end to end)", f, params, [ct], tol, i))
    return [_merge("cascade (end to end)", reps)]


SUITES = {"op": op_suite, "seg": seg_suite, "dose": dose_suite, "e2e": e2e_suite}


def run(scope: str, instances: int = DEFAULT_INSTANCES, seed: int = 0, tol: float = 1e-4) -> list:
    return SUITES[scope](instances=instances, seed=seed, tol=tol)
