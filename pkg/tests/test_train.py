import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from segforge import augment as A
from segforge import data as D
from segforge import loss as L
from segforge import tensor as T
from segforge import train as TR
from segforge import unet as U

from oracles import brute_force_scores

MICRO = U.UNetConfig(num_classes=4, encoder_widths=[3, 4, 4, 5], bottleneck_width=6)
AUG16 = A.AugmentConfig(output_size=16)


def tiny_data(n=6, seed=0):
    spec = D.SyntheticSpec(num_train=n, num_val=3, side=16, seed=seed)
    return D.generate_samples(spec, "train", n), D.generate_samples(spec, "val", 3)


def fixed_batch(n=8, side=16, seed=0):
    rng = np.random.default_rng(seed)
    return [D.ImageSample(rng.random((side, side, 3)), rng.integers(0, 4, size=(side, side)), f"f{i}")
            for i in range(n)]


# ---------------------------------------------------------------------------
# clipping
# ---------------------------------------------------------------------------

def test_clip_closed_form():
    out = TR.clip_gradients({"g": np.array([3.0, 4.0])}, 3.0)
    np.testing.assert_allclose(out["g"], [1.8, 2.4], atol=1e-15)


def test_clip_pass_through_is_bit_identical():
    g = {"a": np.array([0.1, -0.2]), "b": np.array([[1.0]])}
    out = TR.clip_gradients(g, 3.0)
    assert all(out[k].tobytes() == g[k].tobytes() for k in g)


def test_clip_random_maps_keep_direction():
    rng = np.random.default_rng(0)
    for _ in range(100):
        g = {f"p{i}": rng.standard_normal(rng.integers(1, 20, size=2)) * rng.uniform(0.01, 10) for i in range(3)}
        out = TR.clip_gradients(g, 3.0)
        assert TR.global_norm(out) <= 3.0 + 1e-9
        flat_in = np.concatenate([g[k].ravel() for k in g])
        flat_out = np.concatenate([out[k].ravel() for k in g])
        cos = flat_in @ flat_out / (np.linalg.norm(flat_in) * np.linalg.norm(flat_out))
        assert abs(cos - 1.0) < 1e-12


def test_clip_rejects_non_finite():
    with pytest.raises(TR.NumericalError, match="'w'"):
        TR.clip_gradients({"w": np.array([1.0, np.nan])}, 3.0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    p = {"w": T.parameter(np.zeros(3))}
    TR.adam_step(p, {"w": np.array([0.5, -2.0, 7.0])}, TR.AdamState(), TR.TrainConfig())
    np.testing.assert_allclose(p["w"].data, [-1e-3, 1e-3, -1e-3], rtol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = {"w": T.parameter(np.ones(3))}
    state = TR.AdamState()
    TR.adam_step(p, {"w": np.zeros(3)}, state, TR.TrainConfig())
    assert state.t == 1 and np.array_equal(p["w"].data, np.ones(3))
    assert np.all(state.v["w"] >= 0)


def test_adam_minimises_quadratic():
    p = {"t": T.parameter(np.array(1.0))}
    state, cfg = TR.AdamState(), TR.TrainConfig(learning_rate=0.1)
    for _ in range(100):
        TR.adam_step(p, {"t": 2 * p["t"].data}, state, cfg)
    assert abs(p["t"].item()) < 1e-2


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        TR.adam_step({"w": T.parameter(np.ones(3))}, {"w": np.ones(2)}, TR.AdamState(), TR.TrainConfig())


# ---------------------------------------------------------------------------
# accumulation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("split", [[4, 4], [3, 3, 2], [1] * 8])
def test_accumulation_matches_large_batch(split):
    model = U.build(MICRO, 1)
    batch = [A.prepare_eval(s, AUG16) for s in fixed_batch()]
    cfg = L.LossConfig()
    whole, stats_whole = TR.accumulate_gradients(model, [batch], cfg)
    chunks, start = [], 0
    for n in split:
        chunks.append(batch[start:start + n])
        start += n
    acc, stats_acc = TR.accumulate_gradients(model, chunks, cfg)
    for name in whole:
        np.testing.assert_allclose(acc[name], whole[name], rtol=0, atol=1e-10)
    assert stats_acc["L"] == pytest.approx(stats_whole["L"], abs=1e-12)


def test_single_step_accumulation_is_plain_stepping():
    train, _ = tiny_data(6)
    cfg = TR.TrainConfig(micro_batch=2, accumulation_steps=1)
    lcfg = L.LossConfig()
    model = U.build(MICRO, 2)
    TR.train_epoch(model, train, lcfg, cfg, AUG16, 1, TR.AdamState())

    ref = U.build(MICRO, 2)
    state = TR.AdamState()
    order = TR.epoch_order(len(train), cfg.seed, 1)
    samples = [A.augment_pair(train[i], 1, AUG16) for i in order]
    for start in range(0, len(samples), 2):
        images, masks = TR.stack_batch(samples[start:start + 2])
        T.backward(L.loss_from_logits(U.forward(ref, images), masks, lcfg).total)
        grads = {n: p.grad for n, p in ref.params.items()}
        for p in ref.params.values():
            p.zero_grad()
        TR.adam_step(ref.params, TR.clip_gradients(grads, 3.0), state, cfg)
    for name in model.params:
        assert model.params[name].data.tobytes() == ref.params[name].data.tobytes()


def test_one_step_per_effective_batch():
    train, _ = tiny_data(6)
    state = TR.AdamState()
    cfg = TR.TrainConfig(micro_batch=2, accumulation_steps=2)
    TR.train_epoch(U.build(MICRO), train, L.LossConfig(), cfg, AUG16, 1, state)
    assert state.t == 2  # groups of 4 then 2


def test_workers_do_not_change_results():
    train, _ = tiny_data(4)
    outs = []
    for workers in (1, 3):
        model = U.build(MICRO, 0)
        TR.train_epoch(model, train, L.LossConfig(), TR.TrainConfig(micro_batch=2, workers=workers), AUG16, 1)
        outs.append(b"".join(p.data.tobytes() for p in model.params.values()))
    assert outs[0] == outs[1]


def test_non_finite_loss_reports_samples():
    train, _ = tiny_data(2)
    model = U.build(MICRO)
    model.params["head.bias"].data[:] = np.nan
    with pytest.raises(TR.NumericalError, match="train_00000"):
        TR.train_epoch(model, train, L.LossConfig(), TR.TrainConfig(micro_batch=2), AUG16, 1)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_validate_perfect_and_all_background(monkeypatch):
    _, val = tiny_data()
    truth = iter([s.mask for s in val])
    monkeypatch.setattr(U, "predict", lambda model, images: np.stack([next(truth) for _ in range(len(images))]))
    ev = TR.validate(U.build(MICRO), val, AUG16)
    assert ev.miou == 1.0 and ev.mdice == 1.0
    monkeypatch.setattr(U, "predict", lambda model, images: np.zeros((len(images),) + images.shape[2:], int))
    ev = TR.validate(U.build(MICRO), val, AUG16)
    assert all(v == 0.0 for v in ev.iou[1:] if v is not None)


def test_validate_matches_brute_force():
    _, val = tiny_data(seed=3)
    model = U.build(MICRO, 5)
    ev = TR.validate(model, val[:3] + val[:1], AUG16, batch=2)
    preds = TR.predict_masks(model, val[:3] + val[:1], AUG16)
    iou, dice = brute_force_scores([(s.mask, p) for s, p in zip(val[:3] + val[:1], preds)], 4)
    assert ev.iou == iou and ev.dice == dice


# ---------------------------------------------------------------------------
# fit, logging, resume
# ---------------------------------------------------------------------------

def test_zero_epochs_only_validates(tmp_path):
    train, val = tiny_data()
    model = U.build(MICRO, 0)
    before = {n: p.data.copy() for n, p in model.params.items()}
    res = TR.fit(model, train, val, L.LossConfig(), TR.TrainConfig(epochs=0), AUG16, out_dir=tmp_path)
    assert len(res.history) == 1 and res.history[0]["epoch"] == 0
    assert all(np.array_equal(before[n], p.data) for n, p in res.model.params.items())
    with open(tmp_path / "log.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "L", "L_iou", "L_dice", "L_ce", "mIoU", "mDice"]


def test_resume_reproduces_trajectory(tmp_path):
    train, val = tiny_data()
    lcfg, cfg = L.LossConfig(), TR.TrainConfig(epochs=3, micro_batch=2, accumulation_steps=2)
    full = TR.fit(U.build(MICRO, 0), train, val, lcfg, cfg, AUG16, out_dir=tmp_path / "a", emit_plot_data=True)

    TR.fit(U.build(MICRO, 0), train, val, lcfg, replace(cfg, epochs=2), AUG16, out_dir=tmp_path / "b")
    resumed = TR.fit(U.build(MICRO, 99), train, val, lcfg, cfg, AUG16, out_dir=tmp_path / "c",
                     resume_from=tmp_path / "b" / "last.ckpt")
    for name in full.model.params:
        assert full.model.params[name].data.tobytes() == resumed.model.params[name].data.tobytes()
    assert resumed.history == full.history
    assert (tmp_path / "a" / "per_class.csv").exists() and not (tmp_path / "c" / "per_class.csv").exists()
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "c" / "log.csv").read_bytes()
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "c" / "last.ckpt").read_bytes()


def test_best_checkpoint_tracks_best_miou(tmp_path):
    train, val = tiny_data()
    res = TR.fit(U.build(MICRO, 0), train, val, L.LossConfig(), TR.TrainConfig(epochs=2, micro_batch=3),
                 AUG16, out_dir=tmp_path)
    _, meta, _ = U.load_checkpoint(tmp_path / "best.ckpt")
    best = max(r["mIoU"] for r in res.history if r["mIoU"] is not None)
    assert meta["state"]["best_miou"] == best == res.best_miou


def test_train_config_validation():
    for bad in [dict(learning_rate=0), dict(accumulation_steps=0), dict(clip_threshold=0), dict(validate_every=2)]:
        with pytest.raises(TR.TrainConfigError):
            replace(TR.TrainConfig(), **bad).validate()
    assert TR.TrainConfig(micro_batch=8, accumulation_steps=4).effective_batch == 32


# ---------------------------------------------------------------------------
# inference timing
# ---------------------------------------------------------------------------

def test_measure_inference_report():
    model = U.build(MICRO)
    rep = TR.measure_inference(model, np.zeros((6, 3, 16, 16)), repetitions=2)
    assert rep.images == 6 and rep.params == U.count_params(model)
    assert rep.flops_per_image == U.estimate_flops(MICRO, 16)
    assert rep.flops_per_batch == 6 * rep.flops_per_image
    assert rep.mean_seconds > 0 and math.isfinite(rep.mean_seconds)


def test_timing_grows_with_pixels():
    model = U.build(U.SMOKE_SCALE)
    small = [TR.measure_inference(model, np.zeros((1, 3, 16, 16)), 1).mean_seconds for _ in range(5)]
    large = [TR.measure_inference(model, np.zeros((1, 3, 128, 128)), 1).mean_seconds for _ in range(5)]
    assert np.median(large) >= np.median(small)
