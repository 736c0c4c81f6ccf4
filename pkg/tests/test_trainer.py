import csv
import json

import numpy as np
import pytest
import torch

from facemorph.data import generate_synthetic_faces
from facemorph.encoder import encoder_state_bytes
from facemorph.errors import ConfigError, NumericAbort
from facemorph.losses import LossWeights
from facemorph.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    init_run_state,
    make_batch,
    run_training,
    sample_alpha,
    train_step,
)


def tiny_config(**kw):
    base = dict(pretrain_epochs=1, finetune_epochs=1, batch_faces=8, identities_per_batch=4,
                gen_lr=1e-3, disc_lr=1e-4, channel_scale=16, disc_widths=(4, 4, 8, 8), batches_per_epoch=2)
    base.update(kw)
    return TrainConfig(**base)


def param_snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def changed(before, module):
    return any(not torch.equal(a, b) for a, b in zip(before, module.parameters()))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.pretrain_epochs, cfg.finetune_epochs) == (5, 10)
        assert (cfg.batch_faces, cfg.identities_per_batch) == (32, 16)
        assert (cfg.gen_lr, cfg.disc_lr) == (1e-4, 1e-5)
        assert cfg.disc_update_period == 4
        assert cfg.weights == LossWeights(1.0, 2.0, 0.5, 120.0)

    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == (1e-4, 1e-5)
        assert cfg.lr_at(3)[0] == pytest.approx(5e-5, rel=1e-12)
        assert cfg.lr_at(6)[0] == pytest.approx(2.5e-5, rel=1e-12)
        assert cfg.lr_at(2) == cfg.lr_at(0)

    @pytest.mark.parametrize("kw", [dict(batch_faces=30), dict(gen_lr=0), dict(disc_update_period=0),
                                    dict(alpha_mode="uniform"), dict(alpha_mean=1.5)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig.desk(seed=7)
        back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"bogus": 1})


class TestSampleAlpha:
    def test_fixed(self):
        rng = np.random.default_rng(0)
        assert all(sample_alpha("fixed_half", rng) == 0.5 for _ in range(10))

    def test_truncated_gaussian_monte_carlo(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_alpha("truncated_gaussian", rng) for _ in range(10_000)])
        assert draws.min() >= 0 and draws.max() <= 1
        assert abs(draws.mean() - 0.5) < 0.02
        # std of N(0.5, 0.2) truncated at +-2.5 sigma is about 0.195
        assert draws.std() == pytest.approx(0.2, abs=0.01)

    def test_deterministic(self):
        r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
        assert [sample_alpha("truncated_gaussian", r1) for _ in range(50)] == \
               [sample_alpha("truncated_gaussian", r2) for _ in range(50)]

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            sample_alpha("beta", np.random.default_rng(0))


class TestMakeBatch:
    def test_pretrain_pairs_are_identical(self, synth_index):
        rng = np.random.default_rng(0)
        for _ in range(20):
            batch = make_batch(synth_index, "pretrain", rng, 4)
            assert len(batch) == 4
            assert all(a == b for a, b in batch)
            assert len({synth_index.identity_of(a) for a, _ in batch}) == 4

    def test_finetune_pairs_cross_identity(self, synth_index):
        rng = np.random.default_rng(1)
        for _ in range(50):
            batch = make_batch(synth_index, "finetune", rng, 4)
            ids1 = [synth_index.identity_of(a) for a, _ in batch]
            ids2 = [synth_index.identity_of(b) for _, b in batch]
            assert all(x != y for x, y in zip(ids1, ids2))
            assert len(set(ids1) | set(ids2)) == 4
            # every identity fills exactly two of the 8 slots
            assert sorted(ids1 + ids2) == sorted(list(set(ids1)) * 2)

    def test_sixteen_identities_thirty_two_slots(self, tmp_path):
        index = generate_synthetic_faces(str(tmp_path / "d"), 18, 2, seed=0)
        rng = np.random.default_rng(2)
        for phase in ("pretrain", "finetune"):
            batch = make_batch(index, phase, rng, 16)
            slots = [p for pair in batch for p in pair]
            assert len(slots) == 32
            assert len({index.identity_of(p) for p in slots}) == 16

    def test_too_few_identities(self, synth_index):
        with pytest.raises(ConfigError):
            make_batch(synth_index, "finetune", np.random.default_rng(0), 16)


class TestTrainStep:
    def test_discriminator_updates_every_fourth_step(self, synth_index, tiny_encoder):
        state = init_run_state(tiny_config(), synth_index, tiny_encoder)
        rng = np.random.default_rng(0)
        changes = []
        for _ in range(8):
            before = param_snapshot(state.disc)
            train_step(state, make_batch(synth_index, "finetune", rng, 4), 0.5)
            changes.append(changed(before, state.disc))
        assert changes == [True, False, False, False, True, False, False, False]
        assert [r["disc_updated"] for r in state.history] == [int(c) for c in changes]

    def test_generator_updates_every_step(self, synth_index, tiny_encoder):
        state = init_run_state(tiny_config(), synth_index, tiny_encoder)
        rng = np.random.default_rng(0)
        for _ in range(3):
            before = param_snapshot(state.gen)
            train_step(state, make_batch(synth_index, "finetune", rng, 4), 0.5)
            assert changed(before, state.gen)

    def test_zero_weights_freeze_generator(self, synth_index, tiny_encoder):
        state = init_run_state(tiny_config(weights=LossWeights(0, 0, 0, 0)), synth_index, tiny_encoder)
        before = param_snapshot(state.gen)
        train_step(state, make_batch(synth_index, "finetune", np.random.default_rng(0), 4), 0.3)
        assert not changed(before, state.gen)

    def test_every_generator_tensor_receives_gradient(self, synth_index, tiny_encoder):
        state = init_run_state(tiny_config(), synth_index, tiny_encoder)
        train_step(state, make_batch(synth_index, "finetune", np.random.default_rng(0), 4), 0.4)
        for name, p in state.gen.named_parameters():
            assert p.grad is not None and bool((p.grad != 0).any()), name
        assert bool((state.gen.z.grad != 0).any())

    def test_encoder_untouched(self, synth_index, tiny_encoder):
        before = encoder_state_bytes(tiny_encoder)
        state = init_run_state(tiny_config(), synth_index, tiny_encoder)
        train_step(state, make_batch(synth_index, "finetune", np.random.default_rng(0), 4), 0.5)
        assert encoder_state_bytes(tiny_encoder) == before

    def test_non_finite_loss_aborts(self, synth_index, tiny_encoder):
        state = init_run_state(tiny_config(), synth_index, tiny_encoder)
        with torch.no_grad():
            state.gen.z.fill_(float("nan"))
        with pytest.raises(NumericAbort) as err:
            train_step(state, make_batch(synth_index, "finetune", np.random.default_rng(0), 4), 0.5)
        assert err.value.snapshot["global_step"] == 0


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestRunTraining:
    def test_artifacts_and_schedule(self, tmp_path, synth_index, tiny_encoder):
        cfg = tiny_config(pretrain_epochs=1, finetune_epochs=3, decay_interval=2, alpha_mode="truncated_gaussian")
        res = run_training(cfg, synth_index, tiny_encoder, str(tmp_path))
        for name in ("train_config.json", "seed.json", "loss_log.csv", "generator.pt", "generator.pt.json",
                     "discriminator.pt", "train_summary.json"):
            assert (tmp_path / name).exists(), name
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [
            f"epoch_{e:03d}_{n}.pt{s}" for e in range(3) for n in ("discriminator", "generator") for s in ("", ".json")]
        rows = read_log(res.log_path)
        assert tuple(rows[0].keys()) == LOG_COLUMNS
        assert len(rows) == 8
        for r in rows:
            e = int(r["epoch"])
            assert float(r["gen_lr"]) == pytest.approx(1e-3 * 0.5 ** (e // 2))
            assert 0 <= float(r["alpha"]) <= 1
            if r["phase"] == "pretrain":
                assert float(r["alpha"]) == 0.5 and r["n_self_pairs"] == "4"
            else:
                assert r["n_cross_identity_pairs"] == "4"

    def test_same_seed_same_log(self, tmp_path, synth_index, tiny_encoder):
        cfg = tiny_config(alpha_mode="truncated_gaussian")
        a = run_training(cfg, synth_index, tiny_encoder, str(tmp_path / "a"))
        b = run_training(cfg, synth_index, tiny_encoder, str(tmp_path / "b"))
        assert open(a.log_path).read() == open(b.log_path).read()
        assert a.summary["generator_hash"] == b.summary["generator_hash"]
        c = run_training(tiny_config(alpha_mode="truncated_gaussian", seed=1), synth_index, tiny_encoder,
                         str(tmp_path / "c"))
        assert open(a.log_path).read() != open(c.log_path).read()

    def test_abort_writes_snapshot(self, tmp_path, synth_index, tiny_encoder):
        cfg = tiny_config(gen_lr=1e30, adam_betas=(0.0, 0.0))
        try:
            run_training(cfg, synth_index, tiny_encoder, str(tmp_path))
        except NumericAbort:
            snap = json.loads((tmp_path / "abort_snapshot.json").read_text())
            assert "losses" in snap
        else:
            pytest.skip("training stayed finite at this learning rate")
