import numpy as np
import pytest

from vgs import data as D
from vgs import model as M
from vgs import train as T
from vgs.numcore import Parameter, ParamSet

from conftest import tiny_config


def scalar_params(x):
    return ParamSet([Parameter("x", np.array([x], dtype=np.float64))])


class TestAdam:
    def test_zero_grad_is_noop(self):
        params = M.init_params(tiny_config(), seed=0)
        before = {p.name: p.value.copy() for p in params}
        state = T.AdamState.zeros(params)
        cfg = T.TrainConfig(learning_rate=1e-2)
        for _ in range(3):
            T.adam_step(params, {p.name: np.zeros(p.shape) for p in params}, state, cfg)
        for p in params:
            np.testing.assert_array_equal(p.value, before[p.name])

    @pytest.mark.parametrize("g", [0.3, -2e-3, 1.5])
    def test_first_step_scalar(self, g):
        params = scalar_params(1.0)
        cfg = T.TrainConfig(learning_rate=0.01, grad_clip_norm=None)
        state = T.AdamState.zeros(params)
        T.adam_step(params, {"x": np.array([g])}, state, cfg)
        # bias-corrected moments equal g and g^2 on the first step
        expect = 1.0 - 0.01 * g / (abs(g) + 1e-8)
        assert params["x"].value[0] == pytest.approx(expect, rel=1e-12)
        assert params["x"].value[0] == pytest.approx(1.0 - 0.01 * np.sign(g), rel=1e-5)
        assert state.step == 1

    def test_second_step_scalar(self):
        params = scalar_params(0.0)
        cfg = T.TrainConfig(learning_rate=0.1, grad_clip_norm=None)
        state = T.AdamState.zeros(params)
        T.adam_step(params, {"x": np.array([1.0])}, state, cfg)
        T.adam_step(params, {"x": np.array([3.0])}, state, cfg)
        m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
        mhat, vhat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
        assert params["x"].value[0] == pytest.approx(-0.1 / (1 + 1e-8) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8), rel=1e-12)

    def test_clipping(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        assert T.clip_grads(grads, 2.0) == pytest.approx(5.0)
        total = np.sqrt(sum(np.sum(g ** 2) for g in grads.values()))
        assert total == pytest.approx(2.0)
        np.testing.assert_allclose(grads["a"], [1.2, 0.0])

    def test_no_clip_below_norm(self):
        grads = {"a": np.array([0.3, 0.4])}
        T.clip_grads(grads, 2.0)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])

    def test_shape_mismatch(self):
        params = scalar_params(0.0)
        with pytest.raises(ValueError, match="shape"):
            T.adam_step(params, {"x": np.zeros(2)}, T.AdamState.zeros(params), T.TrainConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=1), dict(learning_rate=-1.0),
                                    dict(grad_clip_norm=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            T.TrainConfig(**kw)

    def test_round_trip(self):
        cfg = T.TrainConfig(epochs=3, seed=9, grad_clip_norm=None)
        assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_batches(self):
        cfg = T.TrainConfig(batch_size=4, seed=1)
        bs = T.epoch_batches(9, cfg, 1)
        # 9 = 4 + 4 + 1: the singleton batch is dropped
        assert [len(b) for b in bs] == [4, 4]
        assert [len(b) for b in T.epoch_batches(10, cfg, 1)] == [4, 4, 2]
        assert not np.array_equal(np.concatenate(T.epoch_batches(8, cfg, 1)),
                                  np.concatenate(T.epoch_batches(8, cfg, 2)))
        unshuffled = T.TrainConfig(batch_size=4, shuffle=False)
        assert np.concatenate(T.epoch_batches(8, unshuffled, 1)).tolist() == list(range(8))


def small_config():
    return tiny_config(image_dim=64, mfcc_dim=13, conv_kernel=6, conv_stride=2, embed_dim=8)


@pytest.fixture(scope="module")
def pairs(small_corpus):
    _, manifests = small_corpus
    return D.load_pairs(manifests["en"]["train"])


def subset(pairs, n):
    return D.PairedData(pairs.caption_ids[:n], pairs.image_ids[:n], pairs.feats[:n], pairs.image_feats[:n],
                        pairs.tokens[:n])


class TestTrain:
    def test_zero_lr(self, pairs):
        config = small_config()
        params = M.init_params(config, 0)
        before = params.copy()
        T.train(params, config, subset(pairs, 12), T.TrainConfig(epochs=3, batch_size=4, learning_rate=0.0))
        for p in params:
            np.testing.assert_array_equal(p.value, before[p.name].value)

    def test_determinism_four_pairs(self, pairs, tmp_path):
        config = small_config()
        data = subset(pairs, 4)
        cfg = T.TrainConfig(epochs=1, batch_size=2, learning_rate=1e-2, seed=3)
        for run in ("a", "b"):
            T.train(M.init_params(config, 1), config, data, cfg, out_dir=tmp_path / run)
        a = (tmp_path / "a" / T.CHECKPOINT_NAME).read_bytes()
        assert a == (tmp_path / "b" / T.CHECKPOINT_NAME).read_bytes()
        strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_time_s"} for r in recs]
        assert strip(T.read_trainlog(tmp_path / "a" / T.TRAINLOG_NAME)) == \
            strip(T.read_trainlog(tmp_path / "b" / T.TRAINLOG_NAME))

    def test_resume_is_bit_exact(self, pairs, tmp_path):
        config = small_config()
        data = subset(pairs, 16)
        full = T.TrainConfig(epochs=4, batch_size=4, learning_rate=5e-3, seed=2, checkpoint_every=2)
        T.train(M.init_params(config, 1), config, data, full, out_dir=tmp_path / "full")

        T.train(M.init_params(config, 1), config, data, T.TrainConfig(**{**full.to_dict(), "epochs": 2}),
                out_dir=tmp_path / "part")
        params, cfg2, state, epoch = T.load_training_checkpoint(tmp_path / "part" / T.CHECKPOINT_NAME)
        assert epoch == 2 and state.step == 8 and cfg2 == config
        T.train(params, config, data, full, out_dir=tmp_path / "part", state=state, start_epoch=epoch)

        assert (tmp_path / "full" / T.CHECKPOINT_NAME).read_bytes() == \
            (tmp_path / "part" / T.CHECKPOINT_NAME).read_bytes()
        logs = [T.read_trainlog(tmp_path / d / T.TRAINLOG_NAME) for d in ("full", "part")]
        assert [r["train_loss"] for r in logs[0]] == [r["train_loss"] for r in logs[1]]
        assert [r["epoch"] for r in logs[1]] == [1, 2, 3, 4]

    def test_validation_metrics_logged(self, pairs, small_corpus):
        _, manifests = small_corpus
        config = small_config()
        val = D.load_pairs(manifests["en"]["val"])
        _, recs = T.train(M.init_params(config, 0), config, subset(pairs, 8), T.TrainConfig(epochs=1, batch_size=4),
                          val=val)
        (r,) = recs
        assert {"epoch", "train_loss", "val_R@1", "val_R@5", "val_R@10", "val_median_rank", "wall_time_s"} <= set(r)
        assert 1 <= r["val_median_rank"] <= 5 and np.isfinite(r["train_loss"])

    def test_non_finite_aborts(self, pairs):
        config = small_config()
        params = M.init_params(config, 0)
        params["image.W"].value[0, 0] = np.nan
        with pytest.raises(T.TrainingError, match="batch 0"):
            T.train(params, config, subset(pairs, 4), T.TrainConfig(epochs=1, batch_size=4))

    def test_too_little_data(self, pairs):
        config = small_config()
        with pytest.raises(T.TrainingError):
            T.train(M.init_params(config, 0), config, subset(pairs, 1), T.TrainConfig(epochs=1))

    @pytest.mark.slow
    def test_loss_descends(self, tmp_path):
        spec = D.SynthSpec(n_concepts=12, n_images=40, splits={"train": 40}, seed=4)
        manifests = D.generate_synthetic(spec, tmp_path)
        data = D.load_pairs(manifests["en"]["train"])
        assert len(data) == 200
        config = small_config()
        _, recs = T.train(M.init_params(config, 0), config, data,
                          T.TrainConfig(epochs=30, batch_size=16, learning_rate=1e-3, seed=0))
        losses = [r["train_loss"] for r in recs]
        assert len(losses) == 30 and all(np.isfinite(losses))
        assert losses[-1] < losses[0]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])
