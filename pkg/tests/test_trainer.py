import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssmaf.checkpoint import Checkpoint, CheckpointError, decode_checkpoint, encode_checkpoint
from ssmaf.config import ExperimentConfig, load_config, parse_overrides
from ssmaf.engine import Tape, TensorND
from ssmaf.losses import total_loss
from ssmaf.metrics import evaluate_maps
from ssmaf.model import ModelConfig, ParamStore, Variant, build_model
from ssmaf.synth import Dataset, SynthParams, generate_dataset
from ssmaf.trainer import (OptimizerState, TrainConfig, TrainingDiverged, evaluate, lr_mask, make_batch,
                           poly_lr, read_state, sgd_step, train)

TINY = ModelConfig(base_width=4, depth=2, fusion_dim=8, sr_hidden=8)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SynthParams(hr_size=(32, 32)), 3, 2)


# -- schedule and optimiser ------------------------------------------------

def test_poly_lr_examples():
    assert poly_lr(0, 100) == 0.01
    assert poly_lr(100, 100) == 0.0
    assert poly_lr(50, 100) == pytest.approx(0.01 * 0.5 ** 0.9, rel=1e-15)
    with pytest.raises(ValueError):
        poly_lr(101, 100)
    with pytest.raises(ValueError):
        poly_lr(-1, 100)


@given(st.integers(2, 10 ** 6), st.floats(0.1, 3.0))
def test_poly_lr_strictly_decreasing(max_iter, power):
    cfg = TrainConfig(power=power)
    its = sorted({1, max_iter // 3, max_iter // 2, max_iter - 1})
    vals = [poly_lr(i, max_iter, cfg) for i in its]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_train_config_validation():
    for bad in (dict(init_lr=0), dict(momentum=1.0), dict(epochs=0), dict(batch_size=0), dict(seed=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def scalar_store(value=1.0, decay=True):
    store = ParamStore()
    store.add("w", np.array([value]), decay=decay)
    return store


def test_sgd_hand_unrolled():
    store = scalar_store()
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
    state = OptimizerState(store)
    p = store["w"]
    p.grad = np.array([1.0])
    sgd_step(store, state, 0.1, cfg)
    assert state.velocity["w"][0] == 1.0 and p.data[0] == pytest.approx(0.9, abs=1e-15)
    p.grad = np.array([1.0])
    sgd_step(store, state, 0.1, cfg)
    assert state.velocity["w"][0] == pytest.approx(1.9, abs=1e-15)
    assert p.data[0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_zero_grad_and_decay():
    store = scalar_store()
    store["w"].grad = np.zeros(1)
    sgd_step(store, OptimizerState(store), 0.1, TrainConfig(weight_decay=0.0))
    assert store["w"].data[0] == 1.0
    sgd_step(store, OptimizerState(store), 0.1, TrainConfig(weight_decay=1e-4, momentum=0.0))
    assert store["w"].data[0] == 1 - 0.1 * 1e-4
    nodecay = scalar_store(decay=False)
    nodecay["w"].grad = np.zeros(1)
    sgd_step(nodecay, OptimizerState(nodecay), 0.1, TrainConfig(weight_decay=1e-4, momentum=0.0))
    assert nodecay["w"].data[0] == 1.0


def test_sgd_missing_grad():
    store = scalar_store()
    with pytest.raises(ValueError, match="'w'"):
        sgd_step(store, OptimizerState(store), 0.1, TrainConfig())


def test_shared_heads_single_velocity_and_identity():
    store, net = build_model(TINY, 0)
    state = OptimizerState(store)
    assert set(state.velocity) == set(store.names())
    assert not any(k.startswith("maf.seg_head") for k in state.velocity)
    for k, v in state.velocity.items():
        assert v.shape == store[k].shape


# -- batches ---------------------------------------------------------------

def test_batches_use_variant_resolution(data):
    x, y, hr = make_batch(data.train[:2], Variant.BASELINE)
    assert x.shape == (2, 3, 16, 16) and y.shape == (2, 2, 16, 16) and hr.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(y[:, 1], np.stack([lr_mask(s.hr_mask) for s in data.train[:2]]))
    _, y, _ = make_batch(data.train[:2], Variant.INTERP)
    assert y.shape == (2, 2, 32, 32)
    np.testing.assert_array_equal(y.sum(axis=1), 1.0)


def test_lr_mask_half_rule():
    m = np.zeros((4, 4))
    m[0, 0] = m[0, 1] = 1  # half of the top-left block
    m[2, 2] = 1  # a quarter of the bottom-right block
    np.testing.assert_array_equal(lr_mask(m), [[1, 0], [0, 0]])


# -- training loop ---------------------------------------------------------

def test_one_step_for_one_epoch(data):
    two = Dataset(data.train[:2], [])
    _, net = build_model(TINY, 0)
    r = train(net, two, TrainConfig(epochs=1, batch_size=2))
    assert r.iteration == r.max_iter == 1 and len(r.history) == 1
    assert r.history[0]["lr"] == 0.01


def test_log_records_and_checkpoints(tmp_path, data):
    _, net = build_model(TINY, 0)
    cfg = TrainConfig(epochs=2, batch_size=2, eval_every=2, checkpoint_every=3)
    r = train(net, data, cfg, out_dir=tmp_path)
    assert r.max_iter == 4
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert [rec["iter"] for rec in recs] == [1, 2, 3, 4]
    for rec in recs:
        assert tuple(rec) == ("iter", "lr", "loss_total", "loss_cbce", "loss_mse", "loss_maf",
                              "dice", "iou", "recall", "auc_pr")
    assert recs[0]["dice"] is None and recs[1]["dice"] is not None and recs[3]["dice"] is not None
    assert (tmp_path / "ckpt_000003.ssmaf").exists() and (tmp_path / "final.ssmaf").exists()
    state = read_state(tmp_path / "final.ssmaf")
    assert state.iteration == 4 and state.model_cfg == TINY and state.train_cfg == cfg
    assert any(k.startswith("velocity/") for k in state.arrays)


def test_resume_bit_exact(tmp_path, data):
    cfg = TrainConfig(epochs=2, batch_size=2, eval_every=2, checkpoint_every=1)
    _, net = build_model(TINY, 0)
    train(net, data, cfg, out_dir=tmp_path / "full")
    _, net = build_model(TINY, 0)
    train(net, data, cfg, out_dir=tmp_path / "part", stop_after=3)
    _, net = build_model(TINY, 0)
    train(net, data, cfg, out_dir=tmp_path / "part", resume=tmp_path / "part" / "ckpt_000002.ssmaf")
    for f in ("metrics.jsonl", "final.ssmaf", "ckpt_000004.ssmaf"):
        assert (tmp_path / "full" / f).read_bytes() == (tmp_path / "part" / f).read_bytes()


def test_resume_rejects_other_config(tmp_path, data):
    _, net = build_model(TINY, 0)
    train(net, data, TrainConfig(epochs=1), out_dir=tmp_path)
    _, net = build_model(TINY, 0)
    with pytest.raises(ValueError):
        train(net, data, TrainConfig(epochs=2), resume=tmp_path / "final.ssmaf")
    _, other = build_model(ModelConfig(**{**TINY.to_dict(), "variant": "interp"}), 0)
    with pytest.raises(ValueError):
        train(other, data, TrainConfig(epochs=1), resume=tmp_path / "final.ssmaf")


def test_seed_changes_parameters(data):
    finals = []
    for seed in (0, 1):
        _, net = build_model(TINY, seed)
        train(net, data, TrainConfig(epochs=1, seed=seed))
        finals.append(np.concatenate([p.data.ravel() for p in net.parameters()]))
    assert finals[0].shape == finals[1].shape and not np.array_equal(*finals)


def test_nan_loss_aborts_with_dump(tmp_path, data):
    store, net = build_model(TINY, 0)
    store["seg_head.bias"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="iteration 1"):
        train(net, data, TrainConfig(epochs=1), out_dir=tmp_path)
    dump = (tmp_path / "diverged.txt").read_text()
    assert "iteration=1" in dump and "batch_index=0" in dump


def test_empty_training_split():
    _, net = build_model(TINY, 0)
    with pytest.raises(ValueError, match="empty training split"):
        train(net, Dataset([], []), TrainConfig())


def test_fixed_batch_loss_decreases():
    data = generate_dataset(SynthParams(hr_size=(32, 32)), 2, 0)
    x, y, hr = make_batch(data.train, TINY.variant)
    wins = 0
    for seed in range(10):
        store, net = build_model(TINY, seed)
        state = OptimizerState(store)
        cfg = TrainConfig()
        losses = []
        for _ in range(11):
            with Tape() as tape:
                loss = total_loss(net.forward_train(x), y, hr, TINY.variant).total
                tape.backward(loss, store.tensors())
            losses.append(loss.item())
            sgd_step(store, state, cfg.init_lr, cfg)
        wins += all(b < a for a, b in zip(losses, losses[1:]))
    assert wins >= 9


# -- evaluation ------------------------------------------------------------

class MaskNet:
    """Stand-in network whose inference output is a given foreground map."""

    def __init__(self, maps, variant=Variant.INTERP):
        self.maps, self.variant, self.i = maps, variant, 0

    def forward_infer(self, x):
        m = self.maps[self.i]
        self.i += 1
        return TensorND(np.stack([1 - m, m])[None])


def test_evaluate_ground_truth_is_perfect(data):
    gts = [s.hr_mask for s in data.test]
    rep = evaluate(MaskNet(gts), data.test)
    assert (rep.dice, rep.iou, rep.recall, rep.auc_pr) == (1.0, 1.0, 1.0, 1.0)
    rep = evaluate(MaskNet([np.zeros_like(g) for g in gts]), data.test)
    assert rep.recall == 0.0
    with pytest.raises(ValueError):
        evaluate(MaskNet([]), [])


def test_evaluate_composes_metrics(data):
    _, net = build_model(TINY, 0)
    rep = evaluate(net, data.test, 0.4)
    maps = [net.forward_infer(s.lr_image[None]).data[0, 1] for s in data.test]
    ref = evaluate_maps(maps, [s.hr_mask for s in data.test], 0.4, [s.name for s in data.test])
    assert rep.summary() == ref.summary()


# -- checkpoint container and config ---------------------------------------

def test_checkpoint_round_trip_and_errors():
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(2.5), "c": np.zeros((0, 4))}
    data = encode_checkpoint(Checkpoint("[state]\niteration = 3\n", arrays))
    assert data[:6] == b"SSMAF\0" and data[6:10] == (1).to_bytes(4, "little")
    back = decode_checkpoint(data)
    assert back.config_text == "[state]\niteration = 3\n" and list(back.arrays) == ["a", "b", "c"]
    for k, v in arrays.items():
        np.testing.assert_array_equal(back.arrays[k], v)
        assert back.arrays[k].shape == v.shape
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXXXX" + data[6:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:-3])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(data[:6] + (7).to_bytes(4, "little") + data[10:])


def test_config_round_trip_and_overrides(tmp_path):
    cfg = ExperimentConfig()
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg
    cfg2 = load_config(path, ["model.variant=baseline", "train.epochs=7", "synth.hr_size=64,32", "rmi.eps=1e-3"])
    assert cfg2.model.variant is Variant.BASELINE and cfg2.train.epochs == 7
    assert cfg2.synth.hr_size == (64, 32) and cfg2.rmi.eps == 1e-3
    assert math.isclose(load_config(None, ["cbce.beta=0.99"]).cbce.beta, 0.99)


@pytest.mark.parametrize("override", ["model.nope=1", "nosection.x=1", "train.epochs=abc", "epochs=3", "train.epochs"])
def test_config_rejects_bad_overrides(override):
    with pytest.raises((KeyError, ValueError)):
        load_config(None, [override])


def test_parse_overrides():
    assert parse_overrides(["a.b=1", "a.c=x=y"]) == {"a": {"b": "1", "c": "x=y"}}
