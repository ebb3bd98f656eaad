import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2i3d.fileio import (
    BadMagicError,
    ShapeMismatchError,
    SpecMismatchError,
    TruncatedFileError,
    VersionMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from i2i3d.layers import side_output
from i2i3d.nets import HED3D, I2I3D, NetworkSpec, build_hed3d, build_i2i3d, build_network, path_of
from i2i3d.tensor import Tape, Tensor
from i2i3d.train import build_label_pyramid, multiscale_loss

DESK = 1 / 16


def _input(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((1, 1, *shape)).astype(np.float32))


def _randomize_classifiers(net, seed=0):
    rng = np.random.default_rng(seed)
    for name, t in net.params.tensors().items():
        if "/out" in name or "/fuse" in name:
            t.data = rng.standard_normal(t.shape).astype(t.dtype)


def test_default_hed_layer_counts():
    counts = build_hed3d(NetworkSpec(HED3D)).layer_counts()
    assert counts["f2c_conv"] == 10
    assert counts["pool"] == 3
    assert counts["side"] == 4
    assert counts["fusion"] == 1


def test_i2i_layer_counts():
    counts = build_i2i3d(NetworkSpec(I2I3D, width_multiplier=DESK)).layer_counts()
    assert counts == {"f2c_conv": 10, "pool": 3, "side": 4, "fusion": 0, "mix": 3, "c2f_conv": 6}


def test_desk_width_channels():
    assert NetworkSpec(width_multiplier=DESK).channels() == [[2, 2], [8, 8], [16, 16, 16], [32, 32, 32]]


@pytest.mark.parametrize(
    "kwargs, match",
    [
        ({"stage_channels": ((8,), (8,), (8,))}, "4 stages"),
        ({"width_multiplier": 0.0}, "width_multiplier"),
        ({"width_multiplier": 1.5}, "width_multiplier"),
        ({"variant": "unet"}, "variant"),
        ({"side_supervision": "upsampled"}, "HED-3D"),
    ],
)
def test_invalid_spec_names_constraint(kwargs, match):
    with pytest.raises(ValueError, match=match):
        NetworkSpec(**kwargs)


def test_builders_reject_wrong_variant():
    with pytest.raises(ValueError):
        build_hed3d(NetworkSpec(I2I3D))
    with pytest.raises(ValueError):
        build_i2i3d(NetworkSpec(HED3D))


def test_hed_shapes_16():
    net = build_hed3d(NetworkSpec(HED3D, width_multiplier=DESK))
    out = net(_input((16, 16, 16)))
    assert [a.shape[2:] for a in out.activations] == [(2, 2, 2), (4, 4, 4), (8, 8, 8), (16, 16, 16)]
    assert all(u.shape == (1, 1, 16, 16, 16) for u in out.upsampled)
    assert out.fused.shape == (1, 1, 16, 16, 16)


@pytest.mark.parametrize("shape", [(16, 16, 16), (32, 32, 32), (32, 32, 16)])
def test_shape_contract(shape):
    i2i = build_i2i3d(NetworkSpec(I2I3D, width_multiplier=DESK))
    hed = build_hed3d(NetworkSpec(HED3D, width_multiplier=DESK))
    x = _input(shape)
    out = i2i(x)
    for m, a in enumerate(out.activations, start=1):
        assert a.shape[2:] == tuple(e // 2 ** (4 - m) for e in shape)
    assert out.top.shape[2:] == shape
    assert hed(x).fused.shape[2:] == shape


def test_forward_rejects_indivisible_extents():
    net = build_i2i3d(NetworkSpec(width_multiplier=DESK))
    with pytest.raises(ValueError, match="divisible by 8"):
        net(_input((16, 16, 12)))


@settings(max_examples=8)
@given(st.sampled_from([1 / 16, 1 / 8, 0.25]), st.integers(0, 1000), st.sampled_from([(16, 16, 16), (16, 8, 24)]))
def test_identity_init_theorem(wm, seed, shape):
    net = build_i2i3d(NetworkSpec(I2I3D, width_multiplier=wm), seed)
    _randomize_classifiers(net, seed)
    out = net(_input(shape, seed))
    f = out.features
    for s in (1, 2, 3):
        np.testing.assert_array_equal(f[f"c2f{s}"].data, f[f"f2c{s}"].data)
    for m, s in zip(range(1, 5), range(4, 0, -1)):
        expected = side_output(f[f"f2c{s}"], net.params[f"c2f/out{m}"]).data
        np.testing.assert_array_equal(out.activations[m - 1].data, expected)


@pytest.mark.parametrize("variant", [HED3D, I2I3D])
def test_zero_classifiers_give_half(variant):
    out = build_network(NetworkSpec(variant, width_multiplier=DESK))(_input((16, 16, 16)))
    for p in out.probabilities:
        assert np.all(p == 0.5)
    assert np.all(out.top == 0.5)


def test_forward_bit_identical_over_runs():
    spec = NetworkSpec(I2I3D, width_multiplier=DESK)
    runs = []
    for _ in range(5):
        net = build_network(spec, 11)
        _randomize_classifiers(net, 3)
        runs.append([a.data.tobytes() for a in net(_input((16, 16, 16), 5)).activations])
    assert all(r == runs[0] for r in runs)


def test_receptive_field_default_spec():
    net = build_i2i3d(NetworkSpec(I2I3D), 0)
    _randomize_classifiers(net, 1)
    x = _input((32, 32, 32), 2)
    base = net(x).activations[0].data[0, 0]
    x.data[0, 0, 16, 16, 16] = 0.0
    changed = np.argwhere(net(x).activations[0].data[0, 0] != base)
    assert len(changed)
    # coarse voxels span 8 input voxels each
    diameter = (changed.max(axis=0) - changed.min(axis=0) + 1).max() * 8
    assert diameter >= 15 > 3


@pytest.mark.parametrize("variant", [HED3D, I2I3D])
def test_parameter_completeness(variant):
    net = build_network(NetworkSpec(variant, width_multiplier=DESK), 0)
    # away from initialization: zero passthrough blocks would cut the coarse stages off the top loss
    rng = np.random.default_rng(0)
    for t in net.params.tensors().values():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape).astype(t.dtype)
    x = _input((16, 16, 16))
    labels = np.random.default_rng(0).random((16, 16, 16)) < 0.2
    active = (4,) if variant == I2I3D else (1, 2, 3, 4, "fused")
    with Tape() as tape:
        report = multiscale_loss(net(x), build_label_pyramid(labels, 4), active)
    named = net.params.tensors()
    grads = tape.backward(report.loss, named.values())
    reached = {n for n, t in named.items() if np.any(grads[t] != 0)}
    if variant == I2I3D:
        # only the top output is supervised: coarser classifiers are outside the graph
        assert reached == set(named) - {f"c2f/out{m}.{k}" for m in (1, 2, 3) for k in ("weight", "bias")}
    else:
        assert reached == set(named)


def test_path_of():
    assert path_of("f2c/stage2/conv1") == "f2c"
    assert path_of("c2f/out4") == "c2f"


def test_checkpoint_round_trip(tmp_path):
    spec = NetworkSpec(I2I3D, width_multiplier=DESK)
    net = build_network(spec, 4)
    _randomize_classifiers(net, 4)
    save_checkpoint(net.params, tmp_path / "a.ckpt", spec)
    loaded = load_checkpoint(tmp_path / "a.ckpt", spec)
    for name, arr in net.params.arrays().items():
        assert loaded.params.arrays()[name].tobytes() == arr.tobytes()
    save_checkpoint(loaded.params, tmp_path / "b.ckpt", spec)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    spec = NetworkSpec(I2I3D, width_multiplier=DESK)
    path = tmp_path / "c.ckpt"
    save_checkpoint(build_network(spec).params, path, spec)
    raw = path.read_bytes()

    (tmp_path / "magic").write_bytes(b"X" + raw[1:])
    with pytest.raises(BadMagicError, match="bad magic"):
        load_checkpoint(tmp_path / "magic", spec)

    (tmp_path / "version").write_bytes(raw[:9] + (7).to_bytes(4, "little") + raw[13:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "version", spec)

    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(tmp_path / "short", spec)

    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, NetworkSpec(I2I3D, width_multiplier=DESK, in_channels=1, stage_channels=((32, 32), (128, 128), (256, 256, 256), (512, 512, 511))))


def test_checkpoint_shape_mismatch_names_first_layer(tmp_path):
    full = NetworkSpec(I2I3D, width_multiplier=1.0)
    path = tmp_path / "full.ckpt"
    save_checkpoint(build_network(full).params, path, full)
    with pytest.raises(ShapeMismatchError, match="f2c/stage1/conv1.weight"):
        load_checkpoint(path, NetworkSpec(I2I3D, width_multiplier=DESK))
