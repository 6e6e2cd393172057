import hashlib
import math

import numpy as np
import pytest

from aae.curriculum import alpha_at
from aae.dataio import generate_synthetic, load_checkpoint, load_pgm, save_pgm, scan_dataset
from aae.excitation import FIELDS_BUILT
from aae.metrics import CSV_HEADER
from aae.training import (HISTORY_HEADER, TrainConfig, TrainingError, evaluate, load_model, predict, train,
                          with_overrides)

# saliency of the reference image under the reference checkpoint (see ``reference`` fixture)
GOLDEN_PREDICT_SUM = 123.39415963228693


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    generate_synthetic(5, 10, 16, root)
    return root


def tiny_config(root, tmp, **kw):
    base = dict(dataset_root=str(root), stages=2, base_width=4, epochs=3, seed=1,
                checkpoint_out=str(tmp / "model.ckpt"), metrics_out=str(tmp / "history.csv"))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def reference(data_root, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ref")
    config = tiny_config(data_root, tmp, epochs=4)
    history, _ = train(config)
    return config, history


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"epochs": 0}, {"learning_rate": 0.0}, {"optimizer": "rmsprop"}, {"zero_from": 40},
        {"encoder_kind": "mlp"}, {"downscale_mode": "mean"}, {"schedule": "exp"}, {"ae_sites": ("enc_9",)},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()

    def test_disabled_forces_zero_alpha(self):
        c = TrainConfig(ae_enabled=False, alpha0=3.0)
        assert all(c.alpha(t) == 0.0 for t in range(c.epochs))

    def test_alpha_follows_schedule(self):
        c = TrainConfig(alpha0=2.0, schedule="linear", epochs=10, zero_from=5)
        assert [c.alpha(t) for t in range(10)] == [alpha_at(c.curriculum(), t) for t in range(10)]


class TestTrain:
    def test_history_rows_and_alpha_column(self, reference):
        config, history = reference
        assert [r.epoch for r in history.rows] == list(range(config.epochs))
        assert [r.alpha for r in history.rows] == [alpha_at(config.curriculum(), t) for t in range(config.epochs)]
        lines = open(config.metrics_out).read().splitlines()
        assert lines[0] == HISTORY_HEADER and len(lines) == config.epochs + 1
        assert lines[1].split(",")[1] == "1.000000"

    def test_checkpoint_written(self, reference):
        config, _ = reference
        store = load_checkpoint(config.checkpoint_out)
        assert "enc_1.conv_1.kernels" in store and "head.conv_1.bias" in store

    def test_smoke_one_epoch_two_samples(self, tmp_path):
        root = tmp_path / "d"
        generate_synthetic(2, 2, 16, root)
        (root / "splits.txt").write_text("s0000 train\ns0001 train\n")
        history, _ = train(tiny_config(root, tmp_path, epochs=1))
        assert len(history.rows) == 1
        assert math.isnan(history.rows[0].val_f_beta)

    def test_disabled_equals_zero_alpha0(self, data_root, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        ca = tiny_config(data_root, tmp_path / "a", ae_enabled=False)
        cb = tiny_config(data_root, tmp_path / "b", ae_enabled=True, alpha0=0.0)
        train(ca)
        train(cb)
        assert open(ca.checkpoint_out, "rb").read() == open(cb.checkpoint_out, "rb").read()
        assert open(ca.metrics_out).read() == open(cb.metrics_out).read()

    def test_excitation_changes_training(self, data_root, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        train(tiny_config(data_root, tmp_path / "a", ae_enabled=False, epochs=1))
        train(tiny_config(data_root, tmp_path / "b", ae_enabled=True, epochs=1))
        assert (tmp_path / "a" / "model.ckpt").read_bytes() != (tmp_path / "b" / "model.ckpt").read_bytes()

    def test_sgd_runs(self, data_root, tmp_path):
        history, _ = train(tiny_config(data_root, tmp_path, optimizer="sgd", learning_rate=0.01, epochs=1))
        assert math.isfinite(history.rows[0].train_loss)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_epoch(self, data_root, tmp_path):
        with pytest.raises(TrainingError, match="epoch 0"):
            train(tiny_config(data_root, tmp_path, alpha0=1e308, epochs=2))

    def test_channel_mismatch_before_training(self, data_root, tmp_path):
        with pytest.raises(TrainingError, match="channels"):
            train(tiny_config(data_root, tmp_path, in_channels=3))

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            train(tiny_config(tmp_path / "nowhere", tmp_path))


class TestEvaluate:
    def test_twice_identical_rows(self, reference, data_root, tmp_path):
        config, _ = reference
        csv = tmp_path / "m.csv"
        _, r1 = evaluate(config.checkpoint_out, data_root, "test", csv)
        _, r2 = evaluate(config.checkpoint_out, data_root, "test", csv)
        assert r1 == r2
        assert csv.read_text().splitlines() == [CSV_HEADER, r1, r2]

    def test_oracle_predictor(self, data_root):
        record, row = evaluate(None, data_root, "test", predictor=lambda s: s.mask)
        assert (record.precision, record.recall, record.f_beta, record.mae) == (1.0, 1.0, 1.0, 0.0)
        assert row == "test,1,1.000000,1.000000,1.000000,0.000000"

    def test_unknown_split(self, reference, data_root):
        with pytest.raises(ValueError):
            evaluate(reference[0].checkpoint_out, data_root, "holdout")

    def test_empty_split(self, reference, tmp_path):
        root = tmp_path / "d"
        generate_synthetic(0, 2, 16, root)
        (root / "splits.txt").write_text("s0000 train\ns0001 train\n")
        with pytest.raises(ValueError, match="empty"):
            evaluate(reference[0].checkpoint_out, root, "test")

    def test_load_model_rejects_foreign_checkpoint(self, tmp_path):
        from aae.dataio import CheckpointError, save_checkpoint
        from aae.autodiff import Tensor

        save_checkpoint({"w": Tensor(np.zeros(3))}, tmp_path / "x.ckpt")
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "x.ckpt")


class TestPredict:
    def test_values_and_determinism(self, reference, data_root, tmp_path):
        config, _ = reference
        image = data_root / "images" / "s0009.pgm"
        predict(config.checkpoint_out, image, tmp_path / "a.pgm")
        predict(config.checkpoint_out, image, tmp_path / "b.pgm")
        a = (tmp_path / "a.pgm").read_bytes()
        assert a == (tmp_path / "b.pgm").read_bytes()
        grid = load_pgm(tmp_path / "a.pgm")
        assert grid.shape == (16, 16) and grid.min() >= 0 and grid.max() <= 1

    def test_golden_output(self, reference, data_root, tmp_path):
        config, _ = reference
        saliency = predict(config.checkpoint_out, data_root / "images" / "s0009.pgm", tmp_path / "p.pgm")
        assert math.fsum(saliency.ravel()) == pytest.approx(GOLDEN_PREDICT_SUM, rel=1e-9)

    def test_indivisible_image(self, reference, tmp_path):
        save_pgm(np.zeros((10, 16)), tmp_path / "odd.pgm")
        with pytest.raises(ValueError, match="divisible by 4"):
            predict(reference[0].checkpoint_out, tmp_path / "odd.pgm", tmp_path / "o.pgm")


def test_inference_paths_build_no_excitation(reference, data_root, tmp_path):
    config, _ = reference
    FIELDS_BUILT.reset()
    for split in ("train", "val", "test"):
        evaluate(config.checkpoint_out, data_root, split)
    predict(config.checkpoint_out, data_root / "images" / "s0000.pgm", tmp_path / "o.pgm")
    assert FIELDS_BUILT.value == 0
    # the counter does see training
    train(with_overrides(config, epochs=1, checkpoint_out="", metrics_out=""))
    assert FIELDS_BUILT.value > 0


def test_reproducible_history(reference, data_root, tmp_path):
    config, history = reference
    again, _ = train(with_overrides(config, checkpoint_out=str(tmp_path / "c"), metrics_out=str(tmp_path / "h")))
    assert again.to_csv() == history.to_csv()
    assert hashlib.sha256((tmp_path / "c").read_bytes()).digest() == \
        hashlib.sha256(open(config.checkpoint_out, "rb").read()).digest()


def test_scan_matches_generator_split(data_root):
    m = scan_dataset(data_root)
    assert (len(m.ids("train")), len(m.ids("val")), len(m.ids("test"))) == (8, 1, 1)
