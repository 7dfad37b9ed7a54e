import csv
import math

import numpy as np
import pytest

from pgnet import checkpoint
from pgnet import tensor as T
from pgnet.data import SyntheticSpec, domain_dataset, make_dataset
from pgnet.errors import BadCheckpoint, MissingGrad, OutOfRange
from pgnet.generator import PGN, IIPBaseline
from pgnet.tensor import Parameter, Tensor
from pgnet.training import (Classifier, OptimState, PromptedModel, Schedule, TrainConfig, evaluate, fit,
                            frozen_digest, label_offsets, lr_at, sgd_step, train_joint, write_metrics_csv)

SPEC = SyntheticSpec(train_size=64, test_size=32, image_size=16, seed=5)


def tiny_model(enc, source="pgn", classes=10, seed=0):
    if source == "pgn":
        src = PGN.create(4, 8, 48, input_resolution=16, seed=seed)
    elif source == "iip":
        src = IIPBaseline(4, 48, seed=seed)
    else:
        src = None
    return PromptedModel(enc, src, Classifier(classes, 48, seed=seed))


class TestSchedule:
    sched = Schedule(0.1, 10, 100)

    def test_start_is_zero(self):
        assert lr_at(self.sched, 0) == 0.0

    def test_warmup_endpoint(self):
        assert lr_at(self.sched, 10) == 0.1

    def test_warmup_is_linear(self):
        assert lr_at(self.sched, 5) == pytest.approx(0.05, abs=1e-15)

    def test_cosine_midpoint(self):
        assert lr_at(self.sched, 55) == pytest.approx(0.05, abs=1e-15)

    def test_ends_at_zero(self):
        assert lr_at(self.sched, 100) == 0.0

    def test_monotone_after_warmup(self):
        vals = [lr_at(self.sched, e) for e in np.linspace(10, 100, 200)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            lr_at(self.sched, 101)
        with pytest.raises(OutOfRange):
            lr_at(self.sched, -0.5)
        with pytest.raises(OutOfRange):
            Schedule(0.1, 10, 10)


class TestSGD:
    def test_single_step(self):
        p = Parameter(np.zeros(3, np.float64))
        p.grad = np.ones(3)
        sgd_step(OptimState(0.1, 0.9), [p], 0.1)
        np.testing.assert_allclose(p.data, -0.1, rtol=1e-15)

    def test_two_steps(self):
        p = Parameter(np.zeros(1, np.float64))
        opt = OptimState(0.1, 0.9)
        for _ in range(2):
            p.grad = np.ones(1)
            sgd_step(opt, [p], 0.1)
        np.testing.assert_allclose(p.data, -0.29, rtol=1e-14)

    def test_heavy_ball_closed_form(self):
        """Constant gradient g: v_t = g (1 - m^t) / (1 - m), so p_T = -lr g sum_t (1 - m^t) / (1 - m)."""
        m, lr, g = 0.9, 0.05, np.array([1.0, -2.0, 0.5])
        p = Parameter(np.zeros(3))
        opt = OptimState(lr, m)
        for _ in range(100):
            p.grad = g.copy()
            sgd_step(opt, [p], lr)
        steps = sum((1 - m ** t) / (1 - m) for t in range(1, 101))
        np.testing.assert_allclose(p.data, -lr * g * steps, rtol=1e-6)

    def test_frozen_unchanged(self):
        p = Parameter(np.ones(2, np.float32), frozen=True)
        p.grad = np.ones(2, np.float32)
        sgd_step(OptimState(), [p], 0.1)
        np.testing.assert_array_equal(p.data, 1.0)

    def test_missing_grad(self):
        with pytest.raises(MissingGrad):
            sgd_step(OptimState(), [Parameter(np.ones(2, np.float32))], 0.1)


class TestClassifier:
    def test_rows_orthonormal(self):
        w = Classifier(10, 48, seed=3).weight.data.astype(np.float64)
        np.testing.assert_allclose(w @ w.T, np.eye(10), atol=1e-6)

    def test_modes(self):
        assert Classifier(10, 48).weight.frozen
        assert not Classifier(10, 48, "trainable").weight.frozen
        with pytest.raises(ValueError):
            Classifier(10, 48, "learned")
        with pytest.raises(ValueError):
            Classifier(50, 48)

    def test_logits_shape(self, rng):
        out = Classifier(5, 48)(Tensor(rng.standard_normal((3, 48)).astype(np.float32)))
        assert out.shape == (3, 5)


class ConstantModel:
    def logits(self, images):
        out = np.zeros((len(images), 10), np.float32)
        out[:, 4] = 1.0
        return Tensor(out)


class TestEvaluate:
    def test_constant_prediction_gives_chance(self):
        ds = make_dataset(SyntheticSpec(train_size=10, test_size=200, image_size=16), "test")
        assert evaluate(ConstantModel(), ds) == 0.10

    def test_deterministic(self, small_enc):
        model = tiny_model(small_enc)
        ds = make_dataset(SPEC, "test")
        assert evaluate(model, ds) == evaluate(model, ds)

    def test_label_offset(self):
        ds = make_dataset(SyntheticSpec(train_size=10, test_size=200, image_size=16), "test")
        assert evaluate(ConstantModel(), ds.subset(np.flatnonzero(ds.labels == 0)), label_offset=4) == 1.0


class TestTrainingLoop:
    cfg = TrainConfig(epochs=2, warmup=1, batch_size=16, seed=9)

    def test_loss_decreases_and_frozen_untouched(self, small_enc):
        model = tiny_model(small_enc)
        before = frozen_digest(model)
        lib_before = model.source.lib.L.data.copy()
        rows = fit(model, make_dataset(SPEC, "train"), make_dataset(SPEC, "test"),
                   TrainConfig(epochs=4, warmup=1, batch_size=16, lr=0.1))
        assert frozen_digest(model) == before
        assert not np.array_equal(model.source.lib.L.data, lib_before)
        assert rows[-1]["train_loss"] < rows[0]["train_loss"]
        assert all(r["eval_acc"] is not None for r in rows)

    def test_same_seed_same_bytes(self, small_enc):
        a, b = tiny_model(small_enc), tiny_model(small_enc)
        ra = fit(a, make_dataset(SPEC, "train"), None, self.cfg)
        rb = fit(b, make_dataset(SPEC, "train"), None, self.cfg)
        assert ra == rb
        assert checkpoint.dumps(a.checkpoint_tensors()) == checkpoint.dumps(b.checkpoint_tensors())

    def test_lr_column_follows_schedule(self, small_enc):
        rows = fit(tiny_model(small_enc, "iip"), make_dataset(SPEC, "train"), None, self.cfg)
        assert [r["lr"] for r in rows] == [lr_at(self.cfg.schedule(), e) for e in range(2)]

    def test_library_gets_gradient_when_generator_zeroed(self, small_enc):
        model = tiny_model(small_enc)
        ds = make_dataset(SPEC, "train")
        loss = T.cross_entropy_with_logits(model.logits(ds.images[:4]), ds.labels[:4])
        loss.backward()
        for p in model.source.gen.parameters():
            p.grad = np.zeros_like(p.data)
        assert np.abs(model.source.lib.L.grad).sum() > 0

    def test_no_source_trains_nothing_but_fixed_head(self, small_enc):
        model = tiny_model(small_enc, None)
        assert model.trainable() == []

    def test_csv(self, small_enc, tmp_path):
        rows = fit(tiny_model(small_enc, "iip"), make_dataset(SPEC, "train"), make_dataset(SPEC, "test"), self.cfg)
        write_metrics_csv(tmp_path / "m.csv", rows)
        with open(tmp_path / "m.csv") as f:
            got = list(csv.DictReader(f))
        assert list(got[0]) == ["epoch", "lr", "train_loss", "train_acc", "eval_acc"]
        assert len(got) == 2 and math.isclose(float(got[1]["train_loss"]), rows[1]["train_loss"], rel_tol=1e-7)


class TestCheckpointing:
    def test_save_load_round_trip(self, small_enc, tmp_path):
        a = tiny_model(small_enc, seed=1)
        a.source.lib.L.data = a.source.lib.L.data + 1
        a.save(tmp_path / "m.ckpt")
        b = tiny_model(small_enc, seed=2)
        b.load_entries(checkpoint.load(tmp_path / "m.ckpt"))
        assert checkpoint.dumps(a.checkpoint_tensors()) == checkpoint.dumps(b.checkpoint_tensors())

    def test_mismatch_rejected(self, small_enc, tmp_path):
        tiny_model(small_enc, "iip").save(tmp_path / "iip.ckpt")
        with pytest.raises(BadCheckpoint):
            tiny_model(small_enc, "pgn").load_entries(checkpoint.load(tmp_path / "iip.ckpt"))

    def test_names(self, small_enc):
        names = set(tiny_model(small_enc).checkpoint_tensors())
        assert "cls.weight" in names and "lib.L" in names
        assert any(n.startswith("enc.") for n in names)
        assert not any(n.startswith("pgn.") for n in tiny_model(small_enc).checkpoint_tensors(False))


class TestJoint:
    spec = SyntheticSpec(num_classes=5, num_domains=2, train_size=40, test_size=20, image_size=16)

    def test_offsets(self):
        sets = [domain_dataset(self.spec, "train", d) for d in (0, 1)]
        assert label_offsets(sets) == [0, 5]

    def test_joint_head_has_ten_outputs(self, small_enc):
        trains = [domain_dataset(self.spec, "train", d) for d in (0, 1)]
        tests = [domain_dataset(self.spec, "test", d) for d in (0, 1)]
        model = tiny_model(small_enc, "iip", classes=10)
        out = train_joint(model, trains, tests, TrainConfig(epochs=1, warmup=0, batch_size=16))
        assert model.logits(trains[0].images[:2]).shape == (2, 10)
        assert len(out["per_dataset"]) == 2 and len(out["history"]) == 1

    def test_head_size_checked(self, small_enc):
        trains = [domain_dataset(self.spec, "train", d) for d in (0, 1)]
        with pytest.raises(ValueError):
            train_joint(tiny_model(small_enc, "iip", classes=5), trains, trains, TrainConfig(epochs=1, warmup=0))


def test_frozen_digest_sees_frozen_changes(small_enc):
    model = tiny_model(small_enc.astype(np.float32))
    d0 = frozen_digest(model)
    model.source.lib.L.data = model.source.lib.L.data + 1  # trainable: ignored
    assert frozen_digest(model) == d0
    p = model.enc.parameters()[0]
    p.data = p.data + 1
    assert frozen_digest(model) != d0


def test_trained_generator_is_input_dependent(small_enc):
    model = tiny_model(small_enc)
    ds = make_dataset(SPEC, "train")
    fit(model, ds, None, TrainConfig(epochs=1, warmup=0, batch_size=16))
    gen = model.source.gen
    assert not np.allclose(gen.generate_logits(ds.images[0]).data, gen.generate_logits(ds.images[1]).data)
