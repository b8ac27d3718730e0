import math

import numpy as np
import pytest

from gair.datagen import DataConfig, generate_records, make_batch
from gair.encoders import EncoderConfig, LocEncoderConfig
from gair.errors import FormatError
from gair.objectives import LossConfig, MemoryBank
from gair.tensor import Tensor
from gair.training import (
    AdamW,
    Model,
    TrainConfig,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
    train_step,
)


def tiny_model(seed=7, dim=8):
    return Model(
        EncoderConfig(channels=3, image_size=8, patch_size=4, dim=dim, depth=1, heads=2, ff_width=16),
        EncoderConfig(channels=1, image_size=8, patch_size=4, dim=dim, depth=1, heads=2, ff_width=16),
        LocEncoderConfig(freqs=16, sigma=10.0, hidden=16, dim=dim),
        seed=seed,
    )


def tiny_records(count=20, seed=7):
    cfg = DataConfig(count=count, seed=seed, rs_size=8, sv_size=8, temporal_variants=2)
    return generate_records(cfg)


def tiny_train_config(**kw):
    defaults = dict(batch_size=4, epochs=2, base_lr=1e-3, seed=7,
                    loss=LossConfig(tau=0.07, lambda_secl=1.0, bank_capacity=32))
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestSchedule:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 64 and cfg.epochs == 30
        assert cfg.base_lr == 1e-3 and cfg.warmup_fraction == 0.05
        assert cfg.beta1 == 0.9 and cfg.beta2 == 0.999 and cfg.weight_decay == 0.003
        assert cfg.grad_clip == 5.0 and cfg.schedule == "cosine"

    def test_warmup_is_linear(self):
        cfg = TrainConfig(base_lr=1.0, warmup_fraction=0.1)
        # 100 total steps -> 10 warmup steps
        assert lr_at(cfg, 0, 100) == 0.0
        assert lr_at(cfg, 5, 100) == pytest.approx(0.5)
        assert lr_at(cfg, 10, 100) == pytest.approx(1.0)

    def test_cosine_tail(self):
        cfg = TrainConfig(base_lr=2.0, warmup_fraction=0.0)
        assert lr_at(cfg, 0, 100) == pytest.approx(2.0)
        assert lr_at(cfg, 50, 100) == pytest.approx(1.0)
        assert lr_at(cfg, 100, 100) == pytest.approx(0.0, abs=1e-15)

    def test_constant_schedule(self):
        cfg = TrainConfig(base_lr=0.5, warmup_fraction=0.1, schedule="constant")
        assert lr_at(cfg, 50, 100) == 0.5
        assert lr_at(cfg, 100, 100) == 0.5

    def test_single_peak(self):
        cfg = TrainConfig(base_lr=1.0, warmup_fraction=0.05)
        lrs = [lr_at(cfg, s, 200) for s in range(201)]
        peak = int(np.argmax(lrs))
        assert all(lrs[i] <= lrs[i + 1] for i in range(peak))
        assert all(lrs[i] >= lrs[i + 1] for i in range(peak, 200))

    def test_out_of_range_step(self):
        with pytest.raises(ValueError):
            lr_at(TrainConfig(), 5, 4)


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        # with bias correction, |delta| ~= lr regardless of gradient scale
        cfg = TrainConfig(weight_decay=0.0)
        p = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
        p.grad = np.array([3.0, -0.5, 10.0, 1e-3], dtype=np.float32)
        opt = AdamW({"p": p}, cfg)
        opt.step(lr=0.1)
        expected = -0.1 * np.sign(p.grad) * (np.abs(p.grad) / (np.abs(p.grad) + cfg.eps))
        assert np.allclose(p.values, expected, atol=1e-6)

    def test_decoupled_weight_decay(self):
        # zero gradient: the only update is the decay term, lr * wd * theta
        cfg = TrainConfig(weight_decay=0.01)
        p = Tensor(np.full(3, 2.0, dtype=np.float32), requires_grad=True)
        p.grad = np.zeros(3, dtype=np.float32)
        opt = AdamW({"p": p}, cfg)
        opt.step(lr=0.1)
        assert np.allclose(p.values, 2.0 * (1.0 - 0.1 * 0.01), atol=1e-7)

    def test_nonfinite_gradient_aborts(self):
        p = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        p.grad = np.array([np.nan, 0.0], dtype=np.float32)
        opt = AdamW({"p": p}, TrainConfig())
        with pytest.raises(ArithmeticError, match="p"):
            opt.step(lr=0.1)

    def test_state_roundtrip(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=3).astype(np.float32), requires_grad=True)
        opt = AdamW({"p": p}, TrainConfig())
        for _ in range(3):
            p.grad = rng.normal(size=3).astype(np.float32)
            opt.step(1e-3)
        clone = AdamW({"p": p}, TrainConfig())
        clone.load_state(opt.state())
        assert clone.t == opt.t
        assert np.array_equal(clone.m["p"], opt.m["p"])


class TestModel:
    def test_mismatched_dims_rejected(self):
        with pytest.raises(ValueError):
            Model(
                EncoderConfig(dim=64),
                EncoderConfig(dim=32, channels=1, image_size=16),
                LocEncoderConfig(dim=64),
                seed=0,
            )

    def test_parameter_prefixes(self):
        params = tiny_model().parameters()
        prefixes = {name.split(".")[0] for name in params}
        assert prefixes == {"rs", "sv", "loc", "ftheta"}

    def test_same_seed_same_init(self):
        a = tiny_model(seed=3).parameters()
        b = tiny_model(seed=3).parameters()
        assert all(np.array_equal(a[k].values, b[k].values) for k in a)

    def test_localized_rs_unit_norm(self):
        model = tiny_model()
        recs = tiny_records()
        batch = make_batch(recs, [0, 1, 2], np.random.default_rng(0), augment=False)
        z = model.localized_rs(batch.rs, batch.local_uv).values
        assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)


class TestTrainStep:
    def test_metrics_and_bank_growth(self):
        model = tiny_model()
        recs = tiny_records()
        cfg = tiny_train_config()
        bank = MemoryBank(cfg.loss.bank_capacity)
        opt = AdamW(model.parameters(), cfg)
        batch = make_batch(recs, list(range(4)), np.random.default_rng(0))
        m = train_step(model, batch, bank, opt, cfg, lr=1e-3)
        assert set(m) >= {"incl", "secl", "total", "grad_norm", "grad_norm_loc"}
        assert m["total"] == pytest.approx(m["incl"] + m["secl"], rel=1e-6)
        assert len(bank) == 4
        m2 = train_step(model, batch, bank, opt, cfg, lr=1e-3)
        assert len(bank) == 8

    def test_lambda_zero_freezes_location_encoder(self):
        model = tiny_model()
        recs = tiny_records()
        cfg = tiny_train_config(loss=LossConfig(tau=0.07, lambda_secl=0.0, bank_capacity=32))
        bank = MemoryBank(cfg.loss.bank_capacity)
        opt = AdamW(model.parameters(), cfg)
        loc_before = {k: p.values.copy() for k, p in model.loc.params.items()}
        batch = make_batch(recs, list(range(4)), np.random.default_rng(0))
        m = train_step(model, batch, bank, opt, cfg, lr=1e-3)
        assert m["grad_norm_loc"] == 0.0
        # AdamW still applies decay, so compare against the pure-decay update
        for k, p in model.loc.params.items():
            expected = loc_before[k] * (1.0 - 1e-3 * cfg.weight_decay)
            assert np.allclose(p.values, expected, atol=1e-8)

    def test_gradient_clipping_bounds_update(self):
        model = tiny_model()
        recs = tiny_records()
        cfg = tiny_train_config(grad_clip=1e-6)
        bank = MemoryBank(cfg.loss.bank_capacity)
        opt = AdamW(model.parameters(), cfg)
        batch = make_batch(recs, list(range(4)), np.random.default_rng(0))
        m = train_step(model, batch, bank, opt, cfg, lr=1e-3)
        assert m["grad_norm"] > 1e-6  # pre-clip norm is reported
        total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                              for p in opt.params.values() if p.grad is not None))
        assert total <= 1e-6 * (1 + 1e-5)


class TestTrainLoop:
    def test_loss_decreases(self):
        model = tiny_model()
        recs = tiny_records(count=32)
        cfg = tiny_train_config(batch_size=8, epochs=8, base_lr=3e-3)
        _, _, _, log = train(model, recs, cfg)
        first = np.mean([m["total"] for m in log[:4]])
        last = np.mean([m["total"] for m in log[-4:]])
        assert last < first

    def test_bank_size_arithmetic(self):
        model = tiny_model()
        recs = tiny_records(count=20)
        cfg = tiny_train_config(batch_size=4, epochs=2)  # 10 steps x 4 = 40 pushes
        _, _, bank, log = train(model, recs, cfg)
        assert len(log) == 10
        assert len(bank) == min(32, 40)

    def test_rerun_is_bit_identical(self):
        cfg = tiny_train_config()
        recs = tiny_records()
        m1, _, _, log1 = train(tiny_model(), recs, cfg)
        m2, _, _, log2 = train(tiny_model(), recs, cfg)
        p1, p2 = m1.parameters(), m2.parameters()
        assert all(np.array_equal(p1[k].values, p2[k].values) for k in p1)
        assert [m["total"] for m in log1] == [m["total"] for m in log2]

    def test_dataset_smaller_than_batch_rejected(self):
        with pytest.raises(ValueError):
            train(tiny_model(), tiny_records(count=2), tiny_train_config(batch_size=4))

    def test_frozen_fourier_matrix_unchanged_by_training(self):
        model = tiny_model()
        b_before = model.loc.B.copy()
        train(model, tiny_records(), tiny_train_config())
        assert np.array_equal(model.loc.B, b_before)


class TestCheckpoint:
    def run_short(self, tmp_path, steps_cfg=None):
        model = tiny_model()
        recs = tiny_records()
        cfg = steps_cfg or tiny_train_config()
        model, opt, bank, _ = train(model, recs, cfg)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, model, opt, bank, cfg, step=10)
        return model, opt, bank, cfg, path

    def test_save_load_save_idempotent(self, tmp_path):
        model, opt, bank, cfg, path = self.run_short(tmp_path)
        loaded = load_checkpoint(path)
        path2 = tmp_path / "ckpt2.bin"
        save_checkpoint(path2, loaded["model"], loaded["optimizer"], loaded["bank"], loaded["config"], step=loaded["step"])
        assert path.read_bytes() == path2.read_bytes()

    def test_loaded_model_matches(self, tmp_path):
        model, opt, bank, cfg, path = self.run_short(tmp_path)
        loaded = load_checkpoint(path)
        p1, p2 = model.parameters(), loaded["model"].parameters()
        assert all(np.array_equal(p1[k].values, p2[k].values) for k in p1)
        assert np.array_equal(loaded["model"].loc.B, model.loc.B)
        assert np.array_equal(loaded["bank"].snapshot(), bank.snapshot())
        assert loaded["step"] == 10 and loaded["optimizer"].t == opt.t

    def test_resume_matches_uninterrupted(self, tmp_path):
        recs = tiny_records()
        cfg = tiny_train_config(epochs=4, eval_every=10)
        # uninterrupted run, 20 steps
        ref, _, _, _ = train(tiny_model(), recs, cfg)
        # interrupted run with periodic checkpoints, then resume from step 10
        train(tiny_model(), recs, cfg, checkpoint_dir=str(tmp_path))
        loaded = load_checkpoint(tmp_path / "ckpt_000010.bin")
        resumed, _, _, _ = train(loaded["model"], recs, loaded["config"],
                                 bank=loaded["bank"], optimizer=loaded["optimizer"],
                                 start_step=loaded["step"])
        p_ref, p_res = ref.parameters(), resumed.parameters()
        assert all(np.array_equal(p_ref[k].values, p_res[k].values) for k in p_ref)

    def test_bad_magic_rejected(self, tmp_path):
        _, _, _, _, path = self.run_short(tmp_path)
        data = bytearray(path.read_bytes())
        data[:8] = b"NOTACKPT"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        _, _, _, _, path = self.run_short(tmp_path)
        path.write_bytes(path.read_bytes()[:-64])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_config_hash_stable(self, tmp_path):
        _, _, _, _, path = self.run_short(tmp_path)
        h1 = load_checkpoint(path)["header"]["config_hash"]
        h2 = load_checkpoint(path)["header"]["config_hash"]
        assert h1 == h2 and len(h1) == 16
