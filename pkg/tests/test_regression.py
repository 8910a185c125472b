import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metricforge.data import ScoredQuadruple, Segment
from metricforge.encoder import EncoderConfig, TokenizerConfig, encode, format_item
from metricforge.errors import ConfigError, DataFormatError, NonFiniteLossError
from metricforge.regression import (FULL_SCALE_FINETUNE, FULL_SCALE_PRETRAIN, RegressionHead, TrainConfig, checkpoint_bytes,
                                    checkpoint_from_bytes, gradient_errors, load_checkpoint, loss_and_grad, lr_at,
                                    mse_loss, new_bundle, predict, predict_many, read_descriptor, save_checkpoint,
                                    train, verify_gradients)
from metricforge.toydata import PlantedTask

TOK = TokenizerConfig(vocab_size=64)
ENC = EncoderConfig(hidden_size=8, max_tokens_nosrc=12, max_tokens_src=16, dropout=0.1)
ITEM = ScoredQuadruple("a b c", "a c d", 0.3, src="x y")


def _bundle(seed=0, with_src=False, enc=ENC):
    return new_bundle(TOK, enc, with_src=with_src, seed=seed)


def _items(n, seed=0):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(20)]
    return [Segment(f"i{k}", " ".join(rng.choice(words, 3)), " ".join(rng.choice(words, 3)),
                    human_score=float(rng.normal())) for k in range(n)]


class TestPredict:
    def test_constant_head(self):
        b = _bundle()
        b.head = RegressionHead(np.zeros(8), 0.7)
        assert set(predict_many(b, _items(5)).tolist()) == {0.7}

    def test_projection(self):
        b = _bundle()
        b.head = RegressionHead(np.eye(8)[0], 0.0)
        X = encode(format_item(ITEM, TOK, ENC, False), b.params)
        assert predict(b, ITEM) == X[0]

    def test_deterministic_and_order_invariant(self):
        b, items = _bundle(), _items(12)
        fwd = predict_many(b, items)
        assert np.array_equal(fwd, predict_many(b, items))
        assert np.array_equal(fwd[::-1], predict_many(b, items[::-1]))

    def test_src_usage(self):
        b = _bundle(with_src=True)
        assert predict(b, ITEM) != predict(b, ScoredQuadruple("a b c", "a c d", 0.3, src="z"))
        with pytest.raises(DataFormatError):
            predict(b, Segment("n", "a", "b"))


def test_mse_examples():
    assert mse_loss(0.5, 0.5) == 0
    assert mse_loss(1, 0) == 1
    assert mse_loss(-2, 1) == 9


class TestSchedule:
    cfg = TrainConfig(max_lr=2e-3, total_steps=100, warmup_steps=10)

    def test_endpoints(self):
        assert lr_at(0, self.cfg) == 0
        assert lr_at(10, self.cfg) == 2e-3
        assert lr_at(100, self.cfg) == 0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(101, self.cfg)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 500), st.data())
    def test_peak_and_piecewise_linear(self, total, data):
        warm = data.draw(st.integers(1, total - 1))
        cfg = TrainConfig(max_lr=1.0, total_steps=total, warmup_steps=warm)
        lrs = np.array([lr_at(s, cfg) for s in range(total + 1)])
        assert lrs.max() == 1.0 and int(np.argmax(lrs)) == warm
        slopes = np.diff(lrs)
        assert np.allclose(slopes[:warm], 1 / warm) and np.allclose(slopes[warm:], -1 / (total - warm))

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(total_steps=10, warmup_steps=10)
        with pytest.raises(ConfigError):
            TrainConfig(max_lr=-1)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="lamb")

    def test_full_scale_values_are_one_edit_away(self):
        cfg = TrainConfig(**FULL_SCALE_PRETRAIN)
        assert (cfg.total_steps, cfg.warmup_steps, cfg.max_lr) == (500_000, 50_000, 5e-6)
        assert TrainConfig(**FULL_SCALE_FINETUNE).batch_size == 16


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_verify_gradients(self, seed):
        assert verify_gradients(_bundle(seed, with_src=True), ITEM, 0.3, seed=seed) <= 1e-4

    def test_closed_form_at_zero_w(self):
        b = _bundle(enc=dataclasses.replace(ENC, dropout=0.0))
        b.head = RegressionHead(np.zeros(8), 0.4)
        X = encode(format_item(ITEM, TOK, b.encoder_cfg, False), b.params)
        _, grad, ghead, _ = loss_and_grad(b, ITEM, 1.5)
        assert np.allclose(ghead[:-1], 2 * (0.4 - 1.5) * X, rtol=1e-13, atol=0)
        assert not np.any(grad)  # no signal reaches the encoder through W = 0

    def test_bias_gradient(self):
        b = _bundle(3)
        _, _, ghead, _ = loss_and_grad(b, ITEM, -0.2, train_mode=False)
        assert ghead[-1] == pytest.approx(2 * (predict(b, ITEM) + 0.2), rel=1e-13)

    def test_gradient_errors_layout(self):
        b = _bundle()
        a, n, rel = gradient_errors(b, ITEM, 0.3, train_mode=False)
        assert a.shape == n.shape == rel.shape == (b.params.theta.size + 9,)
        assert np.allclose(rel, np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6))
        assert rel.max() <= 1e-4


class TestTrain:
    def test_zero_lr_frozen(self):
        b = _bundle()
        res = train(b, _items(20), TrainConfig(max_lr=0.0, total_steps=30, warmup_steps=3, batch_size=4))
        assert res.bundle.params == b.params
        assert np.array_equal(res.bundle.head.packed(), b.head.packed())

    def test_input_bundle_untouched(self):
        b = _bundle()
        before = b.params.theta.copy()
        train(b, _items(10), TrainConfig(total_steps=20, warmup_steps=2, batch_size=4))
        assert np.array_equal(b.params.theta, before)

    def test_single_item_interpolation(self):
        b = _bundle(enc=dataclasses.replace(ENC, dropout=0.0))
        item = _items(1)
        res = train(b, item, TrainConfig(max_lr=1e-2, total_steps=600, warmup_steps=20, batch_size=1))
        assert mse_loss(predict(res.bundle, item[0]), item[0].human_score) <= 1e-6

    def test_deterministic_trace(self):
        cfg = TrainConfig(total_steps=60, warmup_steps=6, batch_size=4, seed=5)
        a = train(_bundle(), _items(30), cfg)
        b = train(_bundle(), _items(30), cfg)
        assert np.array_equal(a.losses, b.losses)
        assert a.bundle.params == b.bundle.params

    def test_id_relabel_equivariance(self):
        items = _items(25)
        relabelled = [dataclasses.replace(s, id=f"other{k}") for k, s in enumerate(items)]
        cfg = TrainConfig(total_steps=40, warmup_steps=4, batch_size=4)
        a, b = train(_bundle(), items, cfg), train(_bundle(), relabelled, cfg)
        assert np.array_equal(a.losses, b.losses)

    def test_sgd(self):
        res = train(_bundle(), _items(20), TrainConfig(max_lr=1e-2, total_steps=50, warmup_steps=5, optimizer="sgd"))
        assert res.steps_run == 50 and np.all(np.isfinite(res.losses))

    def test_non_finite_loss_reports_step(self):
        items = [dataclasses.replace(s, human_score=1e200) for s in _items(4)]
        with pytest.raises(NonFiniteLossError) as exc:
            train(_bundle(), items, TrainConfig(total_steps=20, warmup_steps=2, batch_size=2))
        assert exc.value.step == 1

    def test_planted_loss_decreases(self):
        task = PlantedTask.create(seed=1, tokenizer=TOK, n_words=32)
        data = list(task.sample(300, seed=2))
        cfg = TrainConfig(total_steps=400, warmup_steps=40, batch_size=16)
        losses = train(_bundle(), data, cfg).losses
        tenth = len(losses) // 10
        assert losses[-tenth:].mean() < losses[:tenth].mean()

    def test_dev_selection_and_early_stop(self):
        task = PlantedTask.create(seed=1, tokenizer=TOK, n_words=32)
        data, dev = list(task.sample(200, seed=2)), list(task.sample(40, seed=3, prefix="d"))
        cfg = TrainConfig(total_steps=300, warmup_steps=30)
        res = train(_bundle(), data, cfg, dev, eval_every=50)
        steps = [s for s, _ in res.dev_history]
        assert steps == [0, 50, 100, 150, 200, 250, 300]
        assert res.best_dev == max(v for _, v in res.dev_history)
        stopped = train(_bundle(), data, cfg, dev, eval_every=50, stop_at_dev=-1.0)
        assert stopped.steps_run == 0

    def test_empty_data(self):
        with pytest.raises(DataFormatError):
            train(_bundle(), [], TrainConfig(total_steps=2, warmup_steps=1))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        b = _bundle(4, with_src=True)
        b.model_id = "m-rt"
        b.meta = {"stage": "test"}
        save_checkpoint(b, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        items = [ScoredQuadruple("a b", "c", 0.0, src="s t"), ITEM]
        assert np.array_equal(predict_many(b, items), predict_many(back, items))
        assert (back.model_id, back.with_src, back.meta) == ("m-rt", True, {"stage": "test"})
        assert checkpoint_bytes(back) == (tmp_path / "m.ckpt").read_bytes()

    def test_descriptor_block(self):
        blob = checkpoint_bytes(_bundle())
        desc = read_descriptor(blob)
        assert desc["encoder"]["hidden_size"] == 8 and desc["tokenizer"]["vocab_size"] == 64
        assert blob.startswith(b"MFRG1") and blob.endswith(b"MFRGDSC1")

    def test_corrupt_rejected(self):
        blob = checkpoint_bytes(_bundle())
        with pytest.raises(DataFormatError):
            checkpoint_from_bytes(blob[:-3])
        with pytest.raises(DataFormatError):
            checkpoint_from_bytes(blob[:100])
