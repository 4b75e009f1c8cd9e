import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadedose import phantom
from cascadedose.phantom import PhantomConfig, generate


def test_same_seed_index_bitwise_identical():
    a, b = generate(PhantomConfig(16, seed=9), 2), generate(PhantomConfig(16, seed=9), 2)
    for f in ("ct", "oar_masks", "ptv", "body", "dose"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert a.prescription == b.prescription


def test_index_changes_subject():
    a, b = generate(PhantomConfig(16, seed=9), 0), generate(PhantomConfig(16, seed=9), 1)
    assert a.ct.tobytes() != b.ct.tobytes()


def _check_invariants(s, cfg):
    m = s.oar_masks
    assert m.shape == (7,) + s.shape and m.dtype == bool
    assert all(m[i].any() for i in range(7)) and s.ptv.any()
    structures = list(m) + [s.ptv]
    for a, b in itertools.combinations(structures, 2):
        assert not (a & b).any()
    assert all(not (x & ~s.body).any() for x in structures)
    assert s.dose.min() >= 0 and (s.dose[0][~s.body] == 0).all()
    assert (s.dose[0][s.ptv] == np.float32(s.prescription)).all()
    assert s.prescription in cfg.prescriptions
    assert 0 <= s.ct.min() and s.ct.max() <= 1


def test_invariants_over_100_seeds():
    for seed in range(100):
        cfg = PhantomConfig(16, seed=seed)
        _check_invariants(generate(cfg, seed % 3), cfg)


def test_invariants_at_32():
    cfg = PhantomConfig(32, seed=4)
    _check_invariants(generate(cfg, 0), cfg)


def test_ptv_adjacent_to_an_oar():
    s = generate(PhantomConfig(16, seed=3), 0)
    d = phantom.distance_to_set(s.ptv, s.spacing.spacing)
    assert d[s.oar_masks.any(0)].min() <= 2.5 * 3.0


def test_dose_monotone_in_distance():
    s = generate(PhantomConfig(16, seed=5), 0)
    d = phantom.distance_to_set(s.ptv, s.spacing.spacing)
    inside = s.body & ~s.ptv
    order = np.argsort(d[inside], kind="stable")
    dose = s.dose[0][inside][order]
    assert np.all(np.diff(dose) <= 1e-5)


def test_distance_examples():
    m = np.zeros((1, 1, 5), bool)
    m[0, 0, 0] = True
    d = phantom.distance_to_set(m, (1, 1, 2))
    assert d[0, 0, 0] == 0 and d[0, 0, 3] == 6.0


@settings(max_examples=20)
@given(st.integers(0, 2 ** 31 - 1))
def test_distance_matches_all_pairs(seed):
    r = np.random.default_rng(seed)
    m = r.random((8, 8, 8)) < 0.05
    m[tuple(r.integers(0, 8, 3))] = True
    sp = r.uniform(0.5, 3, 3)
    got = phantom.distance_to_set(m, tuple(sp))
    pts = np.argwhere(m) * sp
    allpts = np.argwhere(np.ones_like(m)) * sp
    want = np.sqrt(((allpts[:, None] - pts[None]) ** 2).sum(-1)).min(1).reshape(m.shape)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_distance_empty_mask_errors():
    with pytest.raises(ValueError):
        phantom.distance_to_set(np.zeros((3, 3, 3), bool), (1, 1, 1))


def test_config_validation():
    for bad in (dict(resolution=24), dict(resolution=8), dict(prescriptions=(56, 63)), dict(falloff_mm=0)):
        with pytest.raises(ValueError):
            PhantomConfig(**bad)


def test_generation_error_names_seed():
    cfg = PhantomConfig(16, seed=11, organ_radius_scale=2.5, max_retries=3)
    with pytest.raises(phantom.GenerationError, match="seed=11"):
        generate(cfg, 0)


def test_dose_input_layout():
    s = generate(PhantomConfig(16, seed=1), 0)
    x = s.dose_input()
    assert x.shape == (9, 16, 16, 16)
    np.testing.assert_array_equal(x[1:8], s.oar_masks)
    np.testing.assert_array_equal(x[8], s.ptv)
