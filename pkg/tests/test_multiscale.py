"""Scale-set validation, fusion arithmetic, and multi-scale prediction."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liverseg.cascade import CascadeModel, cascade_predict
from liverseg.multiscale import (
    FusionError, ScaleSet, desk_scale_set, full_scale_set, fuse,
    multiscale_predict,
)
from liverseg.network import ProbabilityMap, desk_spec


def _pm(values, kind="liver"):
    return ProbabilityMap(np.asarray(values, dtype=np.float64), kind)


# -- ScaleSet ----------------------------------------------------------------

def test_full_scale_set_is_the_five_paper_extents():
    s = full_scale_set()
    assert s.base == 512
    assert s.scales == (512, 544, 576, 608, 640)


def test_desk_scale_set_mirrors_in_steps_of_eight():
    s = desk_scale_set()
    assert s.base == 64
    assert s.scales == (64, 72, 80, 88, 96)


def test_scale_set_validation():
    with pytest.raises(FusionError):
        ScaleSet(64, ())
    with pytest.raises(FusionError):
        ScaleSet(64, (64, 60))
    with pytest.raises(FusionError):
        ScaleSet(64, (64, 64))
    with pytest.raises(FusionError):
        ScaleSet(64, (96, 64))
    with pytest.raises(FusionError):
        ScaleSet(60, (64,))


# -- fuse --------------------------------------------------------------------

def test_fuse_single_map_is_identity():
    m = _pm(np.random.default_rng(0).random((8, 8)))
    out = fuse([m])
    assert (out.values == m.values).all()
    assert out.values is not m.values


def test_fuse_constant_stub_means():
    maps = [_pm(np.full((4, 4), v)) for v in (0.2, 0.2, 0.6, 0.6)]
    out = fuse(maps)
    np.testing.assert_allclose(out.values, 0.4, atol=1e-12)


def test_fuse_zeros_and_ones():
    out = fuse([_pm(np.zeros((3, 3))), _pm(np.ones((3, 3)))])
    np.testing.assert_array_equal(out.values, 0.5)


def test_fuse_permutation_invariant_bitwise():
    rng = np.random.default_rng(1)
    maps = [_pm(rng.random((6, 6))) for _ in range(5)]
    reference = fuse(maps).values
    for perm in itertools.islice(itertools.permutations(maps), 1, 12):
        assert (fuse(list(perm)).values == reference).all()


def test_fuse_rejects_bad_inputs():
    with pytest.raises(FusionError):
        fuse([])
    with pytest.raises(FusionError):
        fuse([_pm(np.zeros((4, 4))), _pm(np.zeros((5, 5)))])
    with pytest.raises(FusionError):
        fuse([_pm(np.zeros((4, 4)), "liver"), _pm(np.zeros((4, 4)), "lesion")])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_fuse_bounded_by_pointwise_extremes(n, seed):
    rng = np.random.default_rng(seed)
    stack = rng.random((n, 5, 5))
    out = fuse([_pm(s) for s in stack]).values
    assert (out >= stack.min(axis=0) - 1e-15).all()
    assert (out <= stack.max(axis=0) + 1e-15).all()


# -- multiscale_predict ------------------------------------------------------

def test_single_scale_set_matches_direct_prediction_bitwise():
    model = CascadeModel.build(desk_spec(), seed=0)
    plane = np.random.default_rng(2).random((32, 32))
    direct_liver, direct_lesion = cascade_predict(model, plane)
    liver, lesion = multiscale_predict(model, plane, ScaleSet(32, (32,)))
    assert (liver.values == direct_liver.values).all()
    assert (lesion.values == direct_lesion.values).all()


def test_constant_stub_fuses_to_mean():
    calls = []

    def stub(model, plane):
        v = 0.2 if len(calls) < 2 else 0.6
        calls.append(plane.shape)
        c = np.full(plane.shape, v)
        return _pm(c, "liver"), _pm(c, "lesion")

    liver, lesion = multiscale_predict(
        None, np.zeros((16, 16)), ScaleSet(16, (16, 24, 32, 40)), stub)
    np.testing.assert_allclose(liver.values, 0.4, atol=1e-12)
    np.testing.assert_allclose(lesion.values, 0.4, atol=1e-12)
    assert calls == [(16, 16), (24, 24), (32, 32), (40, 40)]


def test_resolution_invariant_stub_collapses_to_single_scale():
    def stub(model, plane):
        c = np.full(plane.shape, 0.37)
        return _pm(c, "liver"), _pm(c, "lesion")

    plane = np.random.default_rng(3).random((16, 16))
    multi = multiscale_predict(None, plane, ScaleSet(16, (16, 24, 32)), stub)
    single = multiscale_predict(None, plane, ScaleSet(16, (16,)), stub)
    assert (multi[0].values == single[0].values).all()
    assert (multi[1].values == single[1].values).all()


def test_multiscale_output_extent_and_range():
    model = CascadeModel.build(desk_spec(), seed=1)
    plane = np.random.default_rng(4).random((24, 24))
    liver, lesion = multiscale_predict(model, plane, ScaleSet(24, (24, 32)))
    for m in (liver, lesion):
        assert m.values.shape == (24, 24)
        assert m.values.min() >= 0.0 and m.values.max() <= 1.0


def test_multiscale_rejects_mismatched_base():
    with pytest.raises(FusionError):
        multiscale_predict(None, np.zeros((16, 16)), ScaleSet(24, (24,)))
    with pytest.raises(FusionError):
        multiscale_predict(None, np.zeros((3, 16, 16)), ScaleSet(16, (16,)))
