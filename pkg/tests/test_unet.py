import dataclasses

import numpy as np
import pytest

from segforge import tensor as T
from segforge import unet as U

from oracles import analytic_param_count, numeric_grad, rel_err

MICRO = U.UNetConfig(num_classes=3, encoder_widths=[2, 3, 2, 3], bottleneck_width=4)

CONFIGS = [
    U.UNetConfig(),
    U.SMOKE_SCALE,
    U.PAPER_SCALE,
    MICRO,
    U.UNetConfig(in_channels=1, num_classes=2, encoder_widths=[5, 7, 9, 11], bottleneck_width=13, convs_per_block=3),
    U.UNetConfig(num_classes=6, encoder_widths=[4, 4, 4, 4], bottleneck_width=8, kernel_size=5, convs_per_block=1),
]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.encoder_widths}-{c.bottleneck_width}")
def test_param_count_matches_formula(cfg):
    model = U.build(cfg, 0)
    want = analytic_param_count(cfg.in_channels, cfg.encoder_widths, cfg.bottleneck_width, cfg.num_classes,
                                cfg.kernel_size, cfg.convs_per_block)
    assert U.count_params(model) == want


def test_single_conv_closed_forms():
    assert U.conv_param_count(3, 8, 3) == 224
    assert U.conv_flops(1, 1, 4, 4, 3) == 288


def test_scale_presets():
    assert U.count_params(U.build(U.SMOKE_SCALE)) == 82_432
    paper = U.count_params(U.build(U.PAPER_SCALE))
    assert abs(paper - 42.9e6) / 42.9e6 < 0.02


def test_doubling_widths_roughly_quadruples_params():
    base = U.UNetConfig()
    wide = dataclasses.replace(base, encoder_widths=[2 * w for w in base.encoder_widths],
                               bottleneck_width=2 * base.bottleneck_width)
    ratio = U.count_params(U.build(wide)) / U.count_params(U.build(base))
    assert abs(ratio - 4) / 4 < 0.10


def test_build_determinism():
    a, b, c = U.build(MICRO, 0), U.build(MICRO, 0), U.build(MICRO, 1)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
        if name.endswith("bias"):
            assert np.all(a.params[name].data == 0)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_invalid_config_rejected():
    with pytest.raises(U.ConfigError):
        U.build(U.UNetConfig(encoder_widths=[8, 16, 32]))
    with pytest.raises(U.ConfigError):
        U.build(U.UNetConfig(bottleneck_width=0))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_shape_and_determinism():
    model = U.build(U.UNetConfig(), 0)
    x = np.random.default_rng(0).standard_normal((1, 3, 64, 64))
    out = U.forward(model, x)
    assert out.shape == (1, 4, 64, 64)
    zeros = np.zeros((1, 3, 32, 32))
    assert U.forward(model, zeros).data.tobytes() == U.forward(model, zeros).data.tobytes()
    assert U.predict(model, x).shape == (1, 64, 64)


def test_indivisible_extent_rejected():
    with pytest.raises(T.ShapeError):
        U.forward(U.build(MICRO), np.zeros((1, 3, 24, 16)))
    with pytest.raises(U.ConfigError):
        U.estimate_flops(MICRO, 24)


def test_exactly_four_skip_connections():
    model = U.build(MICRO, 0)
    out = U.forward(model, T.parameter(np.zeros((1, 3, 16, 16))))
    ops = [n.op for n in T.topological_order(out.sum())]
    assert ops.count("concat") == 4
    assert ops.count("conv2d_transpose") == 4
    assert ops.count("maxpool2d") == 4


def test_whole_network_gradient():
    model = U.build(MICRO, 3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 16, 16))
    proj = rng.standard_normal((1, 3, 16, 16))
    names = ["enc0.conv0.weight", "bottleneck.conv1.bias", "up2.weight", "dec0.conv1.weight", "head.weight"]

    def scalar(*arrays):
        saved = {n: model.params[n] for n in names}
        for n, a in zip(names, arrays):
            model.params[n] = T.Tensor(a)
        try:
            return float((U.forward(model, x).data * proj).sum())
        finally:
            model.params.update(saved)

    T.backward((U.forward(model, x) * T.Tensor(proj)).sum())
    arrays = [model.params[n].data.copy() for n in names]
    for i, n in enumerate(names):
        num = numeric_grad(scalar, [a.copy() for a in arrays], i)
        assert rel_err(model.params[n].grad, num) < 1e-3, n


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

def instrumented_flops(model, size):
    """Count FLOPs by intercepting every op the forward pass actually executes."""
    counter = {"flops": 0}
    orig = {name: getattr(T, name) for name in ("conv2d", "conv2d_transpose", "relu", "maxpool2d")}

    def conv2d(x, k, b=None, stride=1, padding=0):
        out = orig["conv2d"](x, k, b, stride, padding)
        _, cin, kh, kw = k.shape
        counter["flops"] += 2 * out.size * cin * kh * kw
        return out

    def conv2d_transpose(x, k, b=None, stride=1, padding=0):
        out = orig["conv2d_transpose"](x, k, b, stride, padding)
        _, cout, kh, kw = k.shape
        counter["flops"] += 2 * x.size * cout * kh * kw
        return out

    def relu(x):
        out = orig["relu"](x)
        counter["flops"] += out.size
        return out

    def maxpool2d(x, window=2, stride=None):
        out = orig["maxpool2d"](x, window, stride)
        counter["flops"] += out.size * (window * window - 1)
        return out

    patched = dict(conv2d=conv2d, conv2d_transpose=conv2d_transpose, relu=relu, maxpool2d=maxpool2d)
    try:
        for name, fn in patched.items():
            setattr(T, name, fn)
        U.forward(model, np.zeros((1, model.cfg.in_channels, size, size)))
    finally:
        for name, fn in orig.items():
            setattr(T, name, fn)
    return counter["flops"]


@pytest.mark.parametrize("cfg,size", [(U.SMOKE_SCALE, 64), (U.UNetConfig(), 64), (MICRO, 32)])
def test_flops_match_instrumented_forward(cfg, size):
    assert U.estimate_flops(cfg, size) == instrumented_flops(U.build(cfg), size)


def test_flops_scale_with_area():
    cfg = U.UNetConfig()
    assert U.estimate_flops(cfg, 128) == 4 * U.estimate_flops(cfg, 64)
    assert U.estimate_flops(cfg, (32, 64)) == 2 * U.estimate_flops(cfg, 32)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_byte_round_trip(tmp_path):
    model = U.build(MICRO, 9)
    extra = {"adam.m.head.weight": np.random.default_rng(0).standard_normal((3, 2, 1, 1)), "scalar": np.array(2.5)}
    path = tmp_path / "m.ckpt"
    U.save_checkpoint(path, model, {"note": "x"}, extra)
    raw = path.read_bytes()
    assert raw[:4] == b"SGFG"
    loaded, meta, rest = U.load_checkpoint(path)
    assert meta["note"] == "x" and meta["unet"]["encoder_widths"] == [2, 3, 2, 3]
    U.save_checkpoint(tmp_path / "again.ckpt", loaded, {"note": "x"}, rest)
    assert (tmp_path / "again.ckpt").read_bytes() == raw
    meta2, tensors = U.decode_checkpoint(raw)
    assert U.encode_checkpoint(meta2, tensors) == raw


def test_checkpoint_layout():
    blob = U.encode_checkpoint({"a": 1}, {"w": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"SGFG"
    assert int.from_bytes(blob[4:8], "little") == 1
    n = int.from_bytes(blob[8:12], "little")
    assert blob[12:12 + n] == b'{"a":1}'
    rest = blob[12 + n:]
    assert int.from_bytes(rest[:4], "little") == 1 and rest[4:5] == b"w"
    assert int.from_bytes(rest[5:9], "little") == 2
    assert np.frombuffer(rest[9:25], "<u8").tolist() == [1, 2]
    assert np.frombuffer(rest[25:], "<f8").tolist() == [1.0, 2.0]


def test_checkpoint_errors(tmp_path):
    good = U.encode_checkpoint({"unet": dataclasses.asdict(MICRO)}, {})
    with pytest.raises(U.CheckpointError):
        U.decode_checkpoint(b"XXXX" + good[4:])
    with pytest.raises(U.CheckpointError):
        U.decode_checkpoint(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(U.CheckpointError):
        U.decode_checkpoint(U.encode_checkpoint({}, {"w": np.ones(4)})[:-3])
    path = tmp_path / "empty.ckpt"
    path.write_bytes(good)
    with pytest.raises(U.CheckpointError, match="missing parameter"):
        U.load_checkpoint(path)
