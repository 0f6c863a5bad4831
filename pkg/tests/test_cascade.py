"""Stacking contract, two-phase training, and checkpoint round-trips."""

import numpy as np
import pytest

from liverseg.cascade import (
    CascadeConfig, CascadeError, CascadeModel, CheckpointError,
    cascade_predict, load_model, load_network, save_model, save_network,
    stack_cascade_input, stacked_samples, train_cascade,
)
from liverseg.engine import Tensor
from liverseg.network import ProbabilityMap, build_network, desk_spec
from liverseg.preprocess import SliceSample
from liverseg.training import TrainConfig


def _spec():
    return desk_spec()


def _samples(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        liver = np.zeros((size, size), dtype=np.uint8)
        liver[8:24, 8:24] = 1
        lesion = np.zeros_like(liver)
        lesion[12:18, 12:18] = 1
        out.append(SliceSample(rng.random((size, size)), liver, lesion,
                               ("synthetic", i)))
    return out


def _cfg(stage1_epochs=1, stage2_epochs=1, seed=0):
    mk = lambda e: TrainConfig(epochs=e, batch_size=4, crop_size=16, seed=seed)
    return CascadeConfig(_spec(), mk(stage1_epochs), mk(stage2_epochs), seed)


# -- stacking ----------------------------------------------------------------

def test_stack_recovers_planes_bit_exact():
    rng = np.random.default_rng(0)
    img = Tensor(rng.random((1, 1, 16, 16)))
    lesion = ProbabilityMap(rng.random((16, 16)), "lesion")
    liver = ProbabilityMap(rng.random((16, 16)), "liver")
    x = stack_cascade_input(img, lesion, liver)
    assert x.shape == (1, 3, 16, 16)
    assert (x.data[0, 0] == img.data[0, 0]).all()
    assert (x.data[0, 1] == lesion.values).all()
    assert (x.data[0, 2] == liver.values).all()


def test_stack_zero_maps_give_zero_channels():
    img = Tensor(np.random.default_rng(1).random((1, 1, 8, 8)))
    zero = ProbabilityMap(np.zeros((8, 8)), "lesion")
    x = stack_cascade_input(img, zero, ProbabilityMap(np.zeros((8, 8)), "liver"))
    assert (x.data[0, 1:] == 0).all()


def test_stack_rejects_extent_mismatch():
    img = Tensor(np.zeros((1, 1, 16, 16)))
    small = ProbabilityMap(np.zeros((8, 8)), "lesion")
    ok = ProbabilityMap(np.zeros((16, 16)), "liver")
    with pytest.raises(CascadeError):
        stack_cascade_input(img, small, ok)
    with pytest.raises(CascadeError):
        stack_cascade_input(Tensor(np.zeros((2, 1, 8, 8))), small, small)


# -- model assembly ----------------------------------------------------------

def test_build_wires_channel_counts():
    model = CascadeModel.build(_spec(), seed=0)
    assert model.stage1_liver.spec.input_channels == 1
    assert model.stage2_liver.spec.input_channels == 3
    assert model.stage2_lesion.spec.input_channels == 3


def test_model_rejects_wrong_channels():
    one = build_network(_spec().with_input_channels(1), seed=0)
    three = build_network(_spec().with_input_channels(3), seed=0)
    with pytest.raises(CascadeError):
        CascadeModel(one, one, one, three)
    with pytest.raises(CascadeError):
        CascadeModel(three, one, three, three)


def test_model_rejects_mixed_architectures():
    one = build_network(_spec().with_input_channels(1), seed=0)
    other = build_network(
        _spec().with_width_multiplier(0.125).with_input_channels(3), seed=0)
    three = build_network(_spec().with_input_channels(3), seed=0)
    with pytest.raises(CascadeError):
        CascadeModel(one, one, other, three)


# -- training ----------------------------------------------------------------

def test_zero_phase_b_leaves_stage2_at_init():
    cfg = _cfg(stage1_epochs=1, stage2_epochs=0)
    model = train_cascade(_samples(4), cfg)
    fresh = CascadeModel.build(cfg.arch, cfg.seed)
    for got, init in ((model.stage2_liver, fresh.stage2_liver),
                      (model.stage2_lesion, fresh.stage2_lesion)):
        a, b = dict(got.named_parameters()), dict(init.named_parameters())
        assert all((a[k].data == b[k].data).all() for k in a)


def test_phase_b_freezes_stage1():
    samples = _samples(4)
    cfg = _cfg(stage1_epochs=1, stage2_epochs=0)
    reference = train_cascade(samples, cfg)
    cfg2 = _cfg(stage1_epochs=1, stage2_epochs=1)
    refined = train_cascade(samples, cfg2)
    for role in ("stage1_liver", "stage1_lesion"):
        a = dict(getattr(reference, role).named_parameters())
        b = dict(getattr(refined, role).named_parameters())
        assert all((a[k].data == b[k].data).all() for k in a), role


def test_stacked_samples_are_deterministic():
    model = CascadeModel.build(_spec(), seed=3)
    samples = _samples(3, size=16)
    a = stacked_samples(model, samples)
    b = stacked_samples(model, samples)
    for sa, sb, src in zip(a, b, samples):
        assert (sa.planes == sb.planes).all()
        assert sa.planes.shape == (3, 16, 16)
        assert (sa.planes[0] == src.image).all()
        assert sa.source == src.source


def test_train_cascade_is_deterministic():
    samples = _samples(4)
    a = train_cascade(samples, _cfg())
    b = train_cascade(samples, _cfg())
    for (_, na), (_, nb) in zip(a.networks(), b.networks()):
        pa, pb = dict(na.named_parameters()), dict(nb.named_parameters())
        assert all((pa[k].data == pb[k].data).all() for k in pa)


# -- prediction --------------------------------------------------------------

def test_cascade_predict_contract():
    model = CascadeModel.build(_spec(), seed=1)
    plane = np.random.default_rng(2).random((24, 24))
    liver, lesion = cascade_predict(model, plane)
    liver2, lesion2 = cascade_predict(model, plane)
    for m in (liver, lesion):
        assert m.values.shape == (24, 24)
        assert m.values.min() >= 0.0 and m.values.max() <= 1.0
    assert (liver.values == liver2.values).all()
    assert (lesion.values == lesion2.values).all()
    assert liver.kind == "liver" and lesion.kind == "lesion"


def test_cascade_predict_rejects_non_2d():
    model = CascadeModel.build(_spec(), seed=1)
    with pytest.raises(CascadeError):
        cascade_predict(model, np.zeros((1, 24, 24)))


# -- checkpoints -------------------------------------------------------------

def test_network_checkpoint_roundtrip_bitwise(tmp_path):
    net = build_network(_spec(), seed=9)
    # move stats off init to prove they are persisted
    for _, state in net.bn_states():
        state.mean[:] = np.random.default_rng(0).random(state.mean.shape)
        break
    path = tmp_path / "net.net"
    save_network(net, path)
    again = load_network(path)
    a, b = dict(net.named_parameters()), dict(again.named_parameters())
    assert all((a[k].data == b[k].data).all() for k in a)
    sa, sb = dict(net.bn_states()), dict(again.bn_states())
    assert all((sa[k].mean == sb[k].mean).all()
               and (sa[k].var == sb[k].var).all() for k in sa)
    assert again.spec == net.spec


def test_checkpoint_rejects_corruption(tmp_path):
    net = build_network(_spec(), seed=0)
    path = tmp_path / "net.net"
    save_network(net, path)
    raw = path.read_bytes()
    (tmp_path / "magic.net").write_bytes(b"XXXXXX\n" + raw[7:])
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "magic.net")
    (tmp_path / "short.net").write_bytes(raw[:-16])
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "short.net")
    (tmp_path / "long.net").write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "long.net")


def test_model_roundtrip_preserves_predictions(tmp_path):
    model = CascadeModel.build(_spec(), seed=4)
    plane = np.random.default_rng(5).random((16, 16))
    liver, lesion = cascade_predict(model, plane)
    save_model(model, tmp_path / "ckpt")
    again = load_model(tmp_path / "ckpt")
    liver2, lesion2 = cascade_predict(again, plane)
    assert (liver.values == liver2.values).all()
    assert (lesion.values == lesion2.values).all()


def test_load_model_requires_all_roles(tmp_path):
    model = CascadeModel.build(_spec(), seed=4)
    save_model(model, tmp_path / "ckpt")
    (tmp_path / "ckpt" / "stage2_lesion.net").unlink()
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "ckpt")
