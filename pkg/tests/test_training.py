"""Initialization, Adam, the training loop, and checkpoint round-trips."""

import os
from dataclasses import replace

import numpy as np
import pytest

from clinfuse.data import SynthSpec, slice_arrays, synth_generate
from clinfuse.model import (
    Variant,
    model_forward,
    named_parameters,
    named_running_stats,
    tiny_config,
)
from clinfuse.tensor import Tensor, cross_entropy_loss
from clinfuse.training import (
    AdamState,
    CheckpointError,
    ConfigError,
    OptimizerError,
    TrainConfig,
    TrainingAborted,
    adam_step,
    checkpoint_load,
    he_init,
    init_model_params,
    resume_training,
    train,
)


def overfit_fixture(n=8, seed=5):
    """Tiny, strongly separable synthetic set: n patients, one slice each."""
    spec = SynthSpec(n_patients=n, slices_per_patient=1, d_clin=6,
                     image_size=17, image_signal=3.0, clinical_signal=2.0,
                     shared_signal=0.3, noise_sigma=0.2, seed=seed)
    ds = synth_generate(spec)
    return slice_arrays(ds)


class TestHeInit:
    def test_sample_variance(self):
        rng = np.random.default_rng(0)
        t = he_init((100_000,), fan_in=50, rng=rng)
        var = t.data.var()
        assert abs(var - 0.04) / 0.04 < 0.05

    def test_fixed_seed_bit_identical(self):
        a = he_init((3, 4), 12, np.random.default_rng(7))
        b = he_init((3, 4), 12, np.random.default_rng(7))
        assert np.array_equal(a.data, b.data)

    def test_mean_near_zero(self):
        t = he_init((50_000,), fan_in=10, rng=np.random.default_rng(1))
        assert abs(t.data.mean()) < 0.01

    def test_model_biases_start_at_zero(self):
        params = init_model_params(tiny_config(), 0)
        for name, t in named_parameters(params):
            if name.endswith(".bias") or name.endswith(".beta"):
                np.testing.assert_array_equal(t.data, np.zeros_like(t.data))

    def test_fan_in_validation(self):
        with pytest.raises(ValueError):
            he_init((2, 2), 0, np.random.default_rng(0))


class TestAdam:
    def _setup(self, lr=0.01):
        config = tiny_config()
        params = init_model_params(config, 0)
        state = AdamState.init(params)
        cfg = TrainConfig(learning_rate=lr)
        return params, state, cfg

    def test_zero_gradient_zero_moments_no_move(self):
        params, state, cfg = self._setup()
        before = {n: t.data.copy() for n, t in named_parameters(params)}
        for _, t in named_parameters(params):
            t.grad = np.zeros_like(t.data)
        adam_step(params, state, cfg)
        for n, t in named_parameters(params):
            assert np.array_equal(t.data, before[n]), n
        assert state.step == 1

    def test_first_step_is_signed_learning_rate(self):
        params, state, cfg = self._setup(lr=0.01)
        grads = {}
        for n, t in named_parameters(params):
            g = np.where(np.random.default_rng(3).normal(size=t.data.shape) > 0,
                         1.0, -1.0)
            grads[n] = g
            t.grad = g.copy()
        before = {n: t.data.copy() for n, t in named_parameters(params)}
        adam_step(params, state, cfg)
        for n, t in named_parameters(params):
            update = t.data - before[n]
            # bias-corrected first step: update = -lr * sign(g) up to eps
            assert np.abs(update + cfg.learning_rate * np.sign(grads[n])).max() \
                < cfg.learning_rate * 1e-6

    def test_non_finite_gradient_aborts(self):
        params, state, cfg = self._setup()
        pairs = named_parameters(params)
        for _, t in pairs:
            t.grad = np.zeros_like(t.data)
        # poison one gradient after construction (bypasses Tensor checks)
        pairs[0][1].grad = np.full_like(pairs[0][1].data, np.nan)
        with pytest.raises(OptimizerError):
            adam_step(params, state, cfg)

    def test_two_runs_bit_identical(self):
        def run():
            arrays = overfit_fixture()
            config = tiny_config()
            params = init_model_params(config, 1)
            cfg = TrainConfig(learning_rate=5e-3, epochs=3, batch_size=4, seed=9)
            train(config, params, arrays.images, arrays.clinical,
                  arrays.labels, cfg)
            return {n: t.data.copy() for n, t in named_parameters(params)}

        a = run()
        b = run()
        for n in a:
            assert np.array_equal(a[n], b[n]), n


class TestTrainConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0).validate()

    def test_bad_lr_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0).validate()

    def test_unknown_optimizer_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="adagrad").validate()

    def test_defaults_follow_reference_setup(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-4
        assert cfg.epochs == 100
        assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)


class TestTrainLoop:
    def test_initial_loss_near_uniform_predictor(self):
        arrays = overfit_fixture(n=64, seed=3)
        config = tiny_config()
        params = init_model_params(config, 4)
        probs = model_forward(config, params, Tensor(arrays.images),
                              Tensor(arrays.clinical), train=True,
                              update_stats=False)
        loss = cross_entropy_loss(probs, arrays.labels)
        assert abs(float(loss.data) - np.log(2.0)) < 0.1

    def test_overfit_small_fixture(self):
        arrays = overfit_fixture()
        config = tiny_config()
        params = init_model_params(config, 2)
        cfg = TrainConfig(learning_rate=5e-3, epochs=200, batch_size=8, seed=1)
        result = train(config, params, arrays.images, arrays.clinical,
                       arrays.labels, cfg)
        accs = [h.accuracy for h in result.history]
        assert max(accs) == 1.0
        assert accs.index(1.0) < 200

    def test_loss_windowed_minimum_non_increasing(self):
        arrays = overfit_fixture()
        config = tiny_config()
        params = init_model_params(config, 2)
        cfg = TrainConfig(learning_rate=5e-3, epochs=60, batch_size=8, seed=1)
        result = train(config, params, arrays.images, arrays.clinical,
                       arrays.labels, cfg)
        losses = result.losses
        window = 20
        mins = [min(losses[i:i + window])
                for i in range(10, len(losses) - window + 1)]
        for earlier, later in zip(mins, mins[1:]):
            assert later <= earlier + 1e-9

    def test_empty_dataset_rejected(self):
        config = tiny_config()
        params = init_model_params(config, 0)
        with pytest.raises(ConfigError):
            train(config, params, np.zeros((0, 1, 17, 17)), np.zeros((0, 6)),
                  np.zeros(0, dtype=int), TrainConfig(epochs=1))

    def test_label_out_of_range_rejected(self):
        arrays = overfit_fixture()
        config = tiny_config()
        params = init_model_params(config, 0)
        bad = arrays.labels.copy()
        bad[0] = 5
        with pytest.raises(ConfigError):
            train(config, params, arrays.images, arrays.clinical, bad,
                  TrainConfig(epochs=1))

    def test_non_finite_loss_aborts_and_keeps_last_checkpoint(self, tmp_path):
        arrays = overfit_fixture()
        config = tiny_config()
        params = init_model_params(config, 0)
        ckpt = str(tmp_path / "model.ckpt")
        cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=8,
                          seed=0, checkpoint_every=1)
        train(config, params, arrays.images, arrays.clinical, arrays.labels,
              cfg, checkpoint_path=ckpt)
        good = {n: t.data.copy() for n, t in named_parameters(params)}

        # poison the stem norm scale so the next forward overflows to Inf
        params.stem_norm.gamma.data[:] = 1e308
        with np.errstate(over="ignore"), pytest.raises(TrainingAborted):
            train(config, params, arrays.images, arrays.clinical,
                  arrays.labels, replace(cfg, epochs=4),
                  checkpoint_path=ckpt)

        # the last good checkpoint is still intact
        loaded, _, _, epoch = checkpoint_load(ckpt, config)
        assert epoch == 2
        for n, t in named_parameters(loaded):
            assert np.array_equal(t.data, good[n]), n

    def test_log_lines_written(self, tmp_path):
        arrays = overfit_fixture()
        config = tiny_config()
        params = init_model_params(config, 0)
        log = tmp_path / "train.log"
        cfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=8, seed=0)
        train(config, params, arrays.images, arrays.clinical, arrays.labels,
              cfg, log_path=str(log))
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("epoch=1 loss=")
        assert "acc=" in lines[0] and "secs=" in lines[0]

    def test_sgd_switch(self):
        arrays = overfit_fixture()
        config = tiny_config()
        params = init_model_params(config, 2)
        cfg = TrainConfig(learning_rate=1e-2, epochs=5, batch_size=8,
                          seed=1, optimizer="sgd")
        result = train(config, params, arrays.images, arrays.clinical,
                       arrays.labels, cfg)
        assert result.history[-1].loss < result.history[0].loss


class TestCheckpoints:
    def _train_with_ckpt(self, tmp_path, epochs, every=2, seed=6):
        arrays = overfit_fixture()
        config = tiny_config()
        params = init_model_params(config, seed)
        os.makedirs(tmp_path, exist_ok=True)
        ckpt = str(tmp_path / "model.ckpt")
        cfg = TrainConfig(learning_rate=5e-3, epochs=epochs, batch_size=8,
                          seed=seed, checkpoint_every=every)
        result = train(config, params, arrays.images, arrays.clinical,
                       arrays.labels, cfg, checkpoint_path=ckpt)
        return config, params, cfg, ckpt, arrays, result

    def test_round_trip_equality(self, tmp_path):
        config, params, cfg, ckpt, _arrays, _ = self._train_with_ckpt(
            tmp_path, epochs=4)
        loaded, state, rng_state, epoch = checkpoint_load(ckpt, config)
        assert epoch == 4
        for (n1, t1), (n2, t2) in zip(named_parameters(params),
                                      named_parameters(loaded)):
            assert n1 == n2
            assert np.array_equal(t1.data, t2.data), n1
        for (n1, s1), (n2, s2) in zip(named_running_stats(params),
                                      named_running_stats(loaded)):
            assert np.array_equal(s1.mean, s2.mean), n1
            assert np.array_equal(s1.var, s2.var), n1

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        # straight run to 10 epochs
        _, _, _, _, arrays, straight = self._train_with_ckpt(
            tmp_path / "a", epochs=10, every=100)
        # interrupted at 5, then resumed to 10
        config, _, cfg, ckpt, arrays_b, first = self._train_with_ckpt(
            tmp_path / "b", epochs=5, every=5)
        cfg10 = replace(cfg, epochs=10)
        _params, resumed = resume_training(config, ckpt, arrays_b.images,
                                           arrays_b.clinical, arrays_b.labels,
                                           cfg10)
        straight_losses = straight.losses
        combined = first.losses + resumed.losses
        assert len(combined) == 10
        np.testing.assert_allclose(combined, straight_losses, atol=1e-10)

    def test_variant_mismatch_rejected(self, tmp_path):
        config, _, _, ckpt, _, _ = self._train_with_ckpt(tmp_path, epochs=2)
        other = tiny_config(Variant.IMAGE_ONLY)
        with pytest.raises(CheckpointError):
            checkpoint_load(ckpt, other)

    def test_truncated_file_rejected(self, tmp_path):
        config, _, _, ckpt, _, _ = self._train_with_ckpt(tmp_path, epochs=2)
        with open(ckpt, "rb") as fh:
            blob = fh.read()
        cut = tmp_path / "cut.ckpt"
        cut.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CheckpointError):
            checkpoint_load(str(cut), config)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            checkpoint_load(str(path), tiny_config())

    def test_shape_mismatch_rejected(self, tmp_path):
        config, _, _, ckpt, _, _ = self._train_with_ckpt(tmp_path, epochs=2)
        narrower = replace(config, stem_channels=8)
        with pytest.raises(CheckpointError):
            checkpoint_load(ckpt, narrower)
