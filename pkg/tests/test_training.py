import numpy as np
import pytest
import torch

from resnct.errors import ConfigError, ShapeError
from resnct.model import ResnctConfig, build_discriminator, build_generator
from resnct.training import (
    PhaseTriplet,
    TrainConfig,
    discriminator_loss,
    generator_loss,
    resume,
    sweep,
    train,
    triplets_from_volumes,
    _lr_factor,
)

TINY_MODEL = ResnctConfig(
    base_channels=4,
    bottleneck_blocks=1,
    transformer_dim=16,
    attention_heads=4,
    mlp_hidden_units=32,
    token_grid=8,
    image_size=32,
)


def make_triplets(n=6, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [PhaseTriplet(*(rng.random((size, size)) for _ in range(3))) for _ in range(n)]


class TestConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(lambda_p=-1.0)

    def test_defaults_match_training_protocol(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 2e-4
        assert cfg.epochs == 700
        assert cfg.lambda_p == cfg.lambda_r == cfg.lambda_adv == 100.0


class TestLosses:
    def test_perfect_prediction_zero(self):
        cfg = TrainConfig(epochs=1)
        target = torch.rand(1, 1, 16, 16)
        total, comps = generator_loss(target, target, torch.ones(1, 1, 2, 2), cfg)
        assert float(total) == pytest.approx(0.0, abs=1e-12)
        assert comps == {"adv": 0.0, "pixel": 0.0, "consistency": 0.0}

    def test_constant_offset_hand_value(self):
        cfg = TrainConfig(epochs=1, lambda_adv=0.0)
        target = torch.rand(1, 1, 16, 16)
        total, comps = generator_loss(target + 0.01, target, torch.zeros(1, 1, 2, 2), cfg)
        assert float(total) == pytest.approx(1.0, abs=1e-5)
        assert comps["consistency"] == pytest.approx(0.0, abs=1e-6)

    def test_lambda_linearity(self):
        target = torch.rand(1, 1, 16, 16)
        synth = torch.rand(1, 1, 16, 16)
        scores = torch.rand(1, 1, 2, 2)
        t1, _ = generator_loss(synth, target, scores, TrainConfig(epochs=1, lambda_adv=0, lambda_r=0, lambda_p=100))
        t2, _ = generator_loss(synth, target, scores, TrainConfig(epochs=1, lambda_adv=0, lambda_r=0, lambda_p=200))
        assert float(t2) == pytest.approx(2 * float(t1), rel=1e-6)

    def test_components_nonnegative_and_sum(self):
        cfg = TrainConfig(epochs=1)
        target = torch.rand(1, 1, 16, 16)
        synth = torch.rand(1, 1, 16, 16)
        scores = torch.rand(1, 1, 2, 2)
        total, comps = generator_loss(synth, target, scores, cfg)
        assert all(v >= 0 for v in comps.values())
        expected = 100 * (comps["adv"] + comps["pixel"] + comps["consistency"])
        assert float(total) == pytest.approx(expected, rel=1e-5)

    def test_shape_mismatch_rejected(self):
        cfg = TrainConfig(epochs=1)
        with pytest.raises(ShapeError):
            generator_loss(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 9, 9),
                           torch.rand(1, 1, 2, 2), cfg)

    def test_discriminator_hand_values(self):
        ones = torch.ones(1, 1, 3, 3)
        zeros = torch.zeros(1, 1, 3, 3)
        halves = torch.full((1, 1, 3, 3), 0.5)
        assert float(discriminator_loss(ones, zeros)) == pytest.approx(0.0)
        assert float(discriminator_loss(zeros, ones)) == pytest.approx(1.0)
        assert float(discriminator_loss(halves, halves)) == pytest.approx(0.25)

    def test_discriminator_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            discriminator_loss(torch.rand(1, 1, 3, 3), torch.rand(1, 1, 4, 4))


class TestSchedule:
    def test_constant_then_linear_decay(self):
        assert _lr_factor(0, 100) == 1.0
        assert _lr_factor(49, 100) == 1.0
        assert _lr_factor(50, 100) == 1.0
        assert _lr_factor(75, 100) == pytest.approx(0.5)
        assert _lr_factor(100, 100) == 0.0


class TestTrainLoop:
    def test_update_count_and_finite_log(self, tmp_path):
        triplets = make_triplets(6)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=0, checkpoint_every=2)
        g = build_generator(TINY_MODEL, 0)
        d = build_discriminator(TINY_MODEL, 1)
        log = train(g, d, triplets, cfg, checkpoint_dir=tmp_path)
        assert len(log.epochs) == 2
        assert all(rec["batches"] == 2 for rec in log.epochs)  # ceil(6/4)
        assert (tmp_path / "generator-00002.rnck").exists()
        log.save(tmp_path / "log.jsonl")
        assert (tmp_path / "log.jsonl").read_text().count("\n") == 2

    def test_empty_dataset_rejected(self):
        cfg = TrainConfig(epochs=1)
        g = build_generator(TINY_MODEL, 0)
        d = build_discriminator(TINY_MODEL, 1)
        with pytest.raises(ConfigError):
            train(g, d, [], cfg)

    def test_deterministic_rerun(self):
        triplets = make_triplets(4)
        cfg = TrainConfig(epochs=1, batch_size=2, seed=5)

        def run():
            torch.manual_seed(0)
            g = build_generator(TINY_MODEL, 0)
            d = build_discriminator(TINY_MODEL, 1)
            train(g, d, triplets, cfg)
            return g.state_dict()

        a, b = run(), run()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_resume_is_bit_exact(self, tmp_path):
        triplets = make_triplets(4)
        cfg = TrainConfig(epochs=2, batch_size=2, seed=1, checkpoint_every=1)
        g = build_generator(TINY_MODEL, 0)
        d = build_discriminator(TINY_MODEL, 1)
        train(g, d, triplets, cfg, checkpoint_dir=tmp_path)
        reference = g.state_dict()

        g2, d2, opt_state, epoch = resume(tmp_path, 1)
        train(g2, d2, triplets, cfg, start_epoch=epoch, optimizer_state=opt_state)
        resumed = g2.state_dict()
        assert all(torch.equal(reference[k], resumed[k]) for k in reference)

    def test_training_improves_over_untrained(self):
        # Constant target: even a few epochs beat the untrained output.
        from resnct.training import evaluate

        rng = np.random.default_rng(0)
        triplets = [
            PhaseTriplet(rng.random((32, 32)), np.full((32, 32), 0.5), rng.random((32, 32)))
            for _ in range(8)
        ]
        cfg = TrainConfig(epochs=5, batch_size=4, seed=0)
        g = build_generator(TINY_MODEL, 0)
        d = build_discriminator(TINY_MODEL, 1)
        before = evaluate(g, triplets)["psnr_db"]
        train(g, d, triplets, cfg)
        after = evaluate(g, triplets)["psnr_db"]
        assert after > before


class TestSweep:
    def test_grid_shape_and_best_flag(self):
        triplets = make_triplets(4)
        heldout = make_triplets(2, seed=9)
        rows = sweep(triplets, heldout, TINY_MODEL,
                     learning_rates=(2e-4,), epoch_counts=(1, 2))
        assert len(rows) == 2
        assert sum(r["best"] for r in rows) == 1
        assert {(r["learning_rate"], r["epochs"]) for r in rows} == {(2e-4, 1), (2e-4, 2)}

    def test_default_grid_is_nine_cells(self):
        from resnct.training import SWEEP_EPOCHS, SWEEP_LEARNING_RATES

        assert len(SWEEP_LEARNING_RATES) * len(SWEEP_EPOCHS) == 9

    def test_empty_grid_rejected(self):
        with pytest.raises(ConfigError):
            sweep([], [], TINY_MODEL, learning_rates=(), epoch_counts=(1,))


class TestTripletExtraction:
    def _volumes(self):
        from resnct.phantom import generate_phantom, randomized_config

        return generate_phantom(randomized_config(0))[0]

    def test_crop_window_applied_to_every_phase(self):
        from resnct.volume_io import Phase, WindowSpec, window_to_unit

        volumes = self._volumes()
        trips = triplets_from_volumes(volumes, (4, 6), crop=(32, 48, 64))
        assert len(trips) == 2
        assert trips[0].non_contrast.shape == (64, 64)
        expected = window_to_unit(
            volumes[Phase.NEPHROGRAPHIC].voxels[4, 32:96, 48:112], WindowSpec()
        )
        np.testing.assert_array_equal(trips[0].nephrographic, expected)

    def test_out_of_bounds_crop_rejected(self):
        volumes = self._volumes()
        with pytest.raises(ShapeError):
            triplets_from_volumes(volumes, (0, 2), crop=(0, 200, 128))
