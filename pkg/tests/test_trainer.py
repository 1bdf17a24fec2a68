"""Training loop: loss identities, freeze contracts, determinism, config."""

import numpy as np
import pytest

from scenecap.errors import ConfigError, NumericAbort
from scenecap.model import CaptionModel
from scenecap.text_encoder import CaptionSequence
from scenecap.trainer import (TrainConfig, batch_losses, configs_from_values, fit,
                              lambda_sweep, make_optimizer, parse_config,
                              sweep_table, train_step)

from conftest import TOY_CAPTIONS, make_toy_cloud, toy_model_config


def fresh(toy_dataset, **cfg_overrides):
    _, vocab, pairs = toy_dataset
    return CaptionModel(toy_model_config(**cfg_overrides), vocab), pairs


class TestTrainStep:
    def test_total_equals_con_plus_lambda_cap(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        tc = TrainConfig(lambda_=0.7, batch_size=4, epochs=2)
        opt = make_optimizer(model, tc)
        l_con, l_cap, l_total = train_step(model, pairs[:4], opt, tc, epoch=0)
        assert abs(l_total - (l_con + 0.7 * l_cap)) < 1e-9

    def test_lambda_zero_leaves_decoder_untouched(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        dec_before = {k: p.data.copy() for k, p in model.decoder.params.items()}
        tc = TrainConfig(lambda_=0.0, batch_size=4, epochs=2)
        opt = make_optimizer(model, tc)
        train_step(model, pairs[:4], opt, tc, epoch=0)
        for k, before in dec_before.items():
            np.testing.assert_array_equal(model.decoder.params[k].data, before)
        # alignment heads did move
        assert not np.array_equal(model.heads.log_tau.data,
                                  np.log([model.config.tau_init]))

    def test_single_pair_batch_total_is_cap_only(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        tc = TrainConfig(lambda_=1.0, batch_size=1, epochs=2)
        l_con, l_cap = batch_losses(model, pairs[:1], tc)
        assert l_con.item() == 0.0
        assert (l_con + tc.lambda_ * l_cap).item() == pytest.approx(l_cap.item())

    def test_frozen_weights_fixed_across_steps(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        frozen_before = {k: p.data.copy() for k, p in model.frozen_parameters().items()}
        tc = TrainConfig(batch_size=8, epochs=5)
        opt = make_optimizer(model, tc)
        for step in range(5):
            train_step(model, pairs, opt, tc, epoch=step)
        for k, before in frozen_before.items():
            assert model.parameters()[k].data.tobytes() == before.tobytes(), k

    def test_doubling_lambda_doubles_decoder_gradients(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        tc = TrainConfig(batch_size=4, epochs=2)

        def decoder_grads(lam):
            for p in model.trainable_parameters().values():
                p.grad = None
            l_con, l_cap = batch_losses(model, pairs[:4], tc)
            (l_con + lam * l_cap).backward()
            return {k: p.grad.copy() for k, p in model.decoder.params.items()}

        g1 = decoder_grads(0.5)
        g2 = decoder_grads(1.0)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2.0 * g1[k], rtol=1e-9, atol=1e-300)

    def test_empty_batch_rejected(self, toy_dataset):
        model, _ = fresh(toy_dataset)
        tc = TrainConfig()
        with pytest.raises(ValueError):
            batch_losses(model, [], tc)

    def test_non_finite_loss_aborts_with_component(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        tc = TrainConfig(batch_size=2, epochs=2)
        opt = make_optimizer(model, tc)
        model.decoder.out_proj.data[:] = np.inf
        with pytest.raises(NumericAbort, match=r"Cap.*step 3|step 3.*Cap"):
            train_step(model, pairs[:2], opt, tc, epoch=0, step_index=3)


class TestFit:
    def test_identical_seeds_identical_checkpoints(self, toy_dataset, tmp_path):
        _, vocab, pairs = toy_dataset
        for sub in ("a", "b"):
            model = CaptionModel(toy_model_config(), vocab)
            out = tmp_path / sub
            out.mkdir()
            fit(model, pairs, TrainConfig(batch_size=4, epochs=3, seed=9), out_dir=out)
        assert (tmp_path / "a/model.ckpt").read_bytes() == \
            (tmp_path / "b/model.ckpt").read_bytes()

    def test_one_epoch_logs_ceil_n_over_b_steps(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        log = fit(model, pairs, TrainConfig(batch_size=3, epochs=1))
        assert len(log.records) == -(-len(pairs) // 3)  # ceil(8/3) = 3

    def test_log_total_identity_every_record(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        tc = TrainConfig(lambda_=0.3, batch_size=4, epochs=2)
        log = fit(model, pairs, tc)
        for r in log.records:
            assert abs(r["l_total"] - (r["l_con"] + 0.3 * r["l_cap"])) < 1e-9

    def test_shuffling_deterministic_per_seed(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        logs = []
        for _ in range(2):
            m, _ = fresh(toy_dataset)
            log = fit(m, pairs, TrainConfig(batch_size=2, epochs=2, seed=5))
            logs.append([r["l_total"] for r in log.records])
        assert logs[0] == logs[1]

    def test_lr_follows_cosine_schedule(self, toy_dataset):
        model, pairs = fresh(toy_dataset)
        tc = TrainConfig(batch_size=8, epochs=4, lr=0.02)
        log = fit(model, pairs, tc)
        lrs = [r["lr"] for r in log.records]
        assert lrs[0] == pytest.approx(0.02)
        assert lrs[2] == pytest.approx(0.01)  # epoch E/2 -> half the base rate

    def test_checkpoint_interval_writes_epochs(self, toy_dataset, tmp_path):
        model, pairs = fresh(toy_dataset)
        fit(model, pairs, TrainConfig(batch_size=8, epochs=4, checkpoint_interval=2),
            out_dir=tmp_path)
        assert (tmp_path / "epoch2.ckpt").exists()
        assert (tmp_path / "epoch4.ckpt").exists()
        assert (tmp_path / "model.ckpt").exists()
        assert (tmp_path / "trainlog.csv").read_text().splitlines()[0] == \
            "step,l_con,l_cap,l_total,lr,wall_ms"

    def test_empty_dataset_rejected(self, toy_dataset):
        model, _ = fresh(toy_dataset)
        with pytest.raises(ValueError):
            fit(model, [], TrainConfig())


class TestConfigFile:
    GOOD = """
# toy config
lambda = 1.0
batch_size = 8
epochs = 5
lr = 0.001
seed = 3
d_model = 32
n_layers = 1
m_task = 2
k_neighbors = 4
m_patches = 8
loss_reduction = mean
"""

    def test_parse_round_trip(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(self.GOOD)
        values = parse_config(path)
        assert values["lambda"] == 1.0 and values["batch_size"] == 8
        mc, tc = configs_from_values(values)
        assert mc.d_model == 32 and tc.seed == 3 and tc.loss_reduction == "mean"

    def test_missing_key_names_it(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(self.GOOD.replace("seed = 3\n", ""))
        with pytest.raises(ConfigError, match="seed"):
            parse_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(self.GOOD + "warp_speed = 9\n")
        with pytest.raises(ConfigError, match="warp_speed"):
            parse_config(path)

    def test_bad_value_cites_line(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(self.GOOD.replace("epochs = 5", "epochs = five"))
        with pytest.raises(ConfigError, match="epochs"):
            parse_config(path)


class TestLambdaSweep:
    def test_degenerate_sweep_matches_single_fit(self, toy_dataset):
        clouds, vocab, pairs = toy_dataset
        eval_set = [(c, [t], {w for w in t.split() if len(w) > 2})
                    for c, t in zip(clouds[:4], TOY_CAPTIONS[:4])]
        tc = TrainConfig(batch_size=4, epochs=2, seed=2)

        def make_model():
            return CaptionModel(toy_model_config(), vocab)

        rows = lambda_sweep(make_model, pairs[:4], [1.0], eval_set, tc)
        assert len(rows) == 1
        assert set(rows[0]) == {"lambda", "C@0.25", "B-4@0.25", "M@0.25", "R@0.25"}
        table = sweep_table(rows)
        assert table.splitlines()[0] == "lambda\tC@0.25\tB-4@0.25\tM@0.25\tR@0.25"

    def test_empty_lambda_list_rejected(self, toy_dataset):
        with pytest.raises(ValueError):
            lambda_sweep(lambda: None, [], [], [], TrainConfig())
