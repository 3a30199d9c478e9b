import json
import math

import numpy as np
import pytest

from oracles import lars_update_direct
from pixpro.data import Dataset
from pixpro.numerics import Tensor
from pixpro.trainer import (
    LARS,
    Checkpoint,
    CheckpointError,
    ConfigError,
    NonFiniteGradientError,
    TrainingError,
    TrainRunConfig,
    TrainState,
    batch_indices,
    cosine_lr,
    effective_lr,
    embedding_std,
    from_bytes,
    load_checkpoint,
    load_config,
    load_model,
    momentum_schedule,
    read_metrics,
    run_pretrain,
    save_checkpoint,
    steps_per_epoch,
    to_bytes,
    train_step,
    trust_ratio,
)


def tiny(**kw):
    base = dict(stage_channels="4,8,8", convs_per_stage=1, proj_hidden=16, proj_dim=8,
                inst_hidden=16, inst_dim=8, fpn_dim=8, out_res=16, batch_size=4, max_steps=6)
    base.update(kw)
    return TrainRunConfig(**base)


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(0)
    return Dataset(rng.random((12, 3, 24, 24)).astype(np.float32))


class TestLARS:
    def test_trust_ratio_hand_value(self):
        # ||w|| = 1, ||g|| = 1, wd = 0 -> ratio is the trust coefficient
        w = np.array([0.6, 0.8])
        g = np.array([0.0, 1.0])
        assert trust_ratio(w, g, 0.0, 0.001, eps=0.0) == pytest.approx(0.001)

    def test_single_weight_update_magnitude(self):
        p = Tensor(np.array([1.0]), dtype=np.float64)
        p.grad = np.array([1.0])
        LARS([("w.weight", p)], weight_decay=0.0, momentum=0.9, trust_coeff=0.001).step(1.0)
        assert 1.0 - p.data[0] == pytest.approx(0.001, rel=1e-6)

    def test_zero_norms_fall_back_to_one(self):
        assert trust_ratio(np.zeros(3), np.ones(3), 1e-5, 0.001) == 1.0
        assert trust_ratio(np.ones(3), np.zeros(3), 1e-5, 0.001) == 1.0

    def test_step_matches_direct(self):
        rng = np.random.default_rng(0)
        w0, g = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        p = Tensor(w0.copy(), dtype=np.float64)
        p.grad = g.copy()
        LARS([("conv.weight", p)], weight_decay=1e-4, trust_coeff=0.01).step(0.5)
        np.testing.assert_allclose(p.data, w0 - lars_update_direct(w0, g, 0.5, 1e-4, 0.01), atol=1e-14)

    @pytest.mark.parametrize("name", ["conv.bias", "bn.gamma", "bn.beta"])
    def test_excluded_parameters_get_plain_sgd(self, name):
        w0 = np.array([1.0, -2.0])
        p = Tensor(w0.copy(), dtype=np.float64)
        p.grad = np.array([0.5, 0.25])
        LARS([(name, p)], weight_decay=0.1, trust_coeff=0.001).step(0.1)
        np.testing.assert_allclose(p.data, w0 - 0.1 * np.array([0.5, 0.25]))

    def test_heavy_ball_momentum(self):
        p = Tensor(np.array([0.0]), dtype=np.float64)
        opt = LARS([("b.bias", p)], momentum=0.9)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step(1.0)
        # buf1 = 1, buf2 = 0.9 + 1
        assert p.data[0] == pytest.approx(-(1.0 + 1.9))

    def test_zero_gradient_step_leaves_excluded_params(self):
        # weight decay would move these if it applied to them
        opt_params = [(n, Tensor(np.full(3, 2.0), dtype=np.float64)) for n in ("c.bias", "bn.gamma", "bn.beta")]
        w = Tensor(np.full(3, 2.0), dtype=np.float64)
        for _, p in opt_params + [("c.weight", w)]:
            p.grad = np.zeros(3)
        LARS(opt_params + [("c.weight", w)], weight_decay=0.1).step(1.0)
        assert all(np.all(p.data == 2.0) for _, p in opt_params)
        assert np.all(w.data < 2.0)

    def test_non_finite_gradient_names_parameter(self):
        p = Tensor(np.ones(2), dtype=np.float64)
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(NonFiniteGradientError, match="layer.weight"):
            LARS([("layer.weight", p)]).step(0.1)
        assert np.all(p.data == 1.0)


class TestSchedules:
    def test_cosine_lr_endpoints_and_warmup(self):
        assert cosine_lr(0, 100, 2.0, 5) == 0.0
        assert cosine_lr(5, 100, 2.0, 5) == 2.0
        assert cosine_lr(100, 100, 2.0, 5) == pytest.approx(0.0, abs=1e-15)
        assert cosine_lr(2, 100, 2.0, 5) == pytest.approx(0.8)

    def test_cosine_lr_midpoint(self):
        assert cosine_lr(50, 100, 1.0) == pytest.approx(0.5)

    def test_cosine_lr_monotone_after_warmup(self):
        v = [cosine_lr(k, 40, 1.0, 2) for k in range(2, 41)]
        assert all(b <= a for a, b in zip(v, v[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 1.0)

    @pytest.mark.parametrize("bs", [32, 64, 128])
    def test_effective_lr(self, bs):
        assert effective_lr(1.0, bs) == bs / 256
        assert tiny(batch_size=bs).lr_effective == tiny().lr_base * bs / 256

    def test_momentum_endpoints_exact(self):
        assert momentum_schedule(0, 37) == 0.99
        assert momentum_schedule(37, 37) == 1.0


class TestConfig:
    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            tiny(variant="simclr")
        with pytest.raises(ConfigError):
            tiny(out_res=20)
        with pytest.raises(ConfigError):
            tiny(levels="p3,p9")

    def test_ppm_auto(self):
        assert tiny().use_ppm
        assert not tiny(variant="pixcontrast").use_ppm
        assert tiny(variant="pixcontrast", ppm="true").use_ppm

    def test_text_roundtrip(self, tmp_path):
        cfg = tiny(gamma=4.0, photometric=False)
        path = tmp_path / "run.cfg"
        path.write_text("# comment\n" + cfg.to_text())
        assert load_config(path) == cfg
        assert load_config(path, {"gamma": "8"}).gamma == 8.0

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainRunConfig.from_dict({"bogus": 1})

    def test_digest_tracks_content(self):
        assert tiny().digest() == tiny().digest()
        assert tiny().digest() != tiny(seed=1).digest()

    def test_epoch_budget(self):
        cfg = tiny(max_steps=0, epochs=2)
        assert cfg.total_steps(12) == 2 * steps_per_epoch(12, 4) == 6


class TestCheckpointFormat:
    def _ckpt(self):
        rng = np.random.default_rng(0)
        return Checkpoint({"a": 1, "b": [1, 2]}, 7, {
            "w": rng.standard_normal((2, 3)).astype(np.float32),
            "v": rng.standard_normal(4),
            "scalar": np.array(2.5),
        }, {"seed": 3})

    def test_roundtrip_bitwise(self, tmp_path):
        ck = self._ckpt()
        blob = to_bytes(ck)
        back = from_bytes(blob)
        assert to_bytes(back) == blob
        assert back.step == 7 and back.config == ck.config and back.rng_state == {"seed": 3}
        for k, v in ck.tensors.items():
            assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
        save_checkpoint(tmp_path / "x.ckpt", ck)
        assert (tmp_path / "x.ckpt").read_bytes() == blob

    def test_header_layout(self):
        blob = to_bytes(self._ckpt())
        assert blob[:6] == b"PXPRO1"
        assert int.from_bytes(blob[6:10], "little") == 1
        assert blob[10:42].hex() == self._ckpt().config_digest

    def test_truncation_is_reported(self):
        blob = to_bytes(self._ckpt())
        for cut in (3, 20, len(blob) - 1):
            with pytest.raises(CheckpointError, match="truncated"):
                from_bytes(blob[:cut])

    def test_version_and_magic(self):
        blob = bytearray(to_bytes(self._ckpt()))
        bad = bytes(blob[:6]) + (2).to_bytes(4, "little") + bytes(blob[10:])
        with pytest.raises(CheckpointError, match="version"):
            from_bytes(bad)
        with pytest.raises(CheckpointError, match="magic"):
            from_bytes(b"XXXXXX" + bytes(blob[6:]))

    def test_config_tamper_detected(self):
        blob = to_bytes(self._ckpt())
        tampered = blob.replace(b'"a":1', b'"a":2')
        with pytest.raises(CheckpointError, match="digest"):
            from_bytes(tampered)

    def test_state_roundtrip(self):
        cfg = tiny(variant="pixpro+instance")
        state = TrainState.initial(cfg)
        for _, p in state.model.online.named_parameters():
            p.data = p.data + 1.0
        state.optimizer.buffers["x"] = np.ones(1)
        back = TrainState.from_checkpoint(state.to_checkpoint())
        assert to_bytes(back.to_checkpoint()) == to_bytes(state.to_checkpoint())

    def test_shape_mismatch(self):
        ck = TrainState.initial(tiny()).to_checkpoint()
        name = next(iter(ck.tensors))
        ck.tensors[name] = np.zeros((1,), dtype=np.float32)
        with pytest.raises(CheckpointError):
            TrainState.from_checkpoint(ck)


class TestLoop:
    def test_batch_indices_cover_epoch(self):
        cfg = tiny()
        seen = np.concatenate([batch_indices(cfg, s, 12)[1] for s in range(3)])
        assert sorted(seen.tolist()) == list(range(12))
        assert batch_indices(cfg, 3, 12)[0] == 1

    def test_embedding_std_constant_is_zero(self):
        x = np.ones((8, 4, 2, 2))
        assert embedding_std(x) == pytest.approx(0.0, abs=1e-12)
        assert embedding_std(np.random.default_rng(0).standard_normal((8, 4, 2, 2))) > 0.1

    def test_metrics_are_byte_identical(self, tmp_path, images):
        cfg = tiny()
        run_pretrain(cfg, tmp_path / "a", dataset=images)
        run_pretrain(cfg, tmp_path / "b", dataset=images)
        assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
        assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()

    def test_resume_reproduces_trajectory(self, tmp_path, images):
        cfg = tiny()
        full = run_pretrain(cfg, tmp_path / "full", dataset=images)
        run_pretrain(cfg, tmp_path / "cut", dataset=images, stop_at=3)
        # a stray line past the checkpoint must not survive the resume
        with open(tmp_path / "cut/metrics.jsonl", "a") as fh:
            fh.write(json.dumps({"type": "step", "step": 3, "junk": True}) + "\n")
        resumed = run_pretrain(cfg, tmp_path / "cut", dataset=images)
        assert resumed.metrics.read_bytes() == full.metrics.read_bytes()
        assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()

    def test_resume_with_other_config_rejected(self, tmp_path, images):
        run_pretrain(tiny(), tmp_path, dataset=images, stop_at=1)
        with pytest.raises(CheckpointError):
            run_pretrain(tiny(seed=5), tmp_path, dataset=images)

    def test_header_and_records(self, tmp_path, images):
        res = run_pretrain(tiny(), tmp_path, dataset=images)
        lines = [json.loads(x) for x in res.metrics.read_text().splitlines()]
        head = lines[0]
        assert head["type"] == "header" and head["feat_res"] == {"c5": 2}
        assert head["config_digest"] == tiny().digest()
        rows = read_metrics(res.metrics)
        assert [r["step"] for r in rows] == list(range(6))
        assert {"lr", "m", "loss_total", "loss_pix", "pairs_used", "pairs_skipped", "embed_std_mean"} <= set(rows[0])
        # 5% of 6 steps rounds to no warmup, so the first step runs at the full rate
        assert rows[0]["m"] == 0.99 and rows[0]["lr"] == tiny().lr_effective

    def test_doubling_batch_doubles_lr_every_step(self, tmp_path, images):
        a = read_metrics(run_pretrain(tiny(batch_size=2), tmp_path / "a", dataset=images).metrics)
        b = read_metrics(run_pretrain(tiny(batch_size=4), tmp_path / "b", dataset=images).metrics)
        assert [2 * r["lr"] for r in a] == pytest.approx([r["lr"] for r in b], rel=1e-15)
        assert all(r["loss_total"] is None or math.isfinite(r["loss_total"]) for r in a + b)

    def test_zero_epochs_writes_initial_checkpoint(self, tmp_path, images):
        cfg = tiny(max_steps=0, epochs=0)
        res = run_pretrain(cfg, tmp_path, dataset=images)
        assert read_metrics(res.metrics) == []
        model, back, ck = load_model(res.checkpoint)
        assert ck.step == 0 and back == cfg
        init = TrainState.initial(cfg).to_checkpoint()
        assert to_bytes(ck) == to_bytes(init)

    def test_disjoint_views_skip_without_update(self, images):
        # a tiny crop scale keeps the two views apart almost always; force it with one image
        cfg = tiny(scale_min=0.01, scale_max=0.011, batch_size=1)
        state = TrainState.initial(cfg)
        before = to_bytes(state.to_checkpoint())
        skipped = None
        for i in range(12):
            rec = train_step(state, images.images, np.array([i]), 0, 100)
            if rec["skipped"]:
                skipped = rec
                break
        assert skipped is not None
        assert skipped["loss_total"] is None and skipped["pairs_skipped"] == 1
        if state.step == 1:
            after = state.to_checkpoint()
            assert {k: v.tobytes() for k, v in after.tensors.items()} == \
                {k: v.tobytes() for k, v in from_bytes(before).tensors.items()}

    def test_non_finite_loss_raises_with_indices(self, images):
        state = TrainState.initial(tiny())
        bad = images.images.copy()
        bad[2] = np.nan
        with pytest.raises(TrainingError, match=r"\[0, 1, 2, 3\]"):
            train_step(state, bad, np.arange(4), 0, 10)

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(ValueError):
            run_pretrain(tiny(), tmp_path, dataset=Dataset(np.zeros((0, 3, 24, 24))))

    @pytest.mark.parametrize("variant", ["pixcontrast", "pixpro+instance"])
    def test_variants_train(self, tmp_path, images, variant):
        res = run_pretrain(tiny(variant=variant, max_steps=3), tmp_path, dataset=images)
        rows = read_metrics(res.metrics)
        live = [r for r in rows if not r["skipped"]]
        assert live and all(math.isfinite(r["loss_total"]) for r in live)
        if variant == "pixpro+instance":
            assert all(r["loss_inst"] > 0 for r in live)

    def test_pyramid_levels_train(self, tmp_path, images):
        cfg = tiny(levels="p3,p4,p5", max_steps=2)
        res = run_pretrain(cfg, tmp_path, dataset=images)
        assert len(read_metrics(res.metrics)) == 2

    def test_checkpoint_interval(self, tmp_path, images):
        seen = []
        run_pretrain(tiny(checkpoint_interval=2, max_steps=4), tmp_path, dataset=images,
                     step_callback=lambda s, r: seen.append(r["step"]))
        assert seen == [0, 1, 2, 3]
        assert load_checkpoint(tmp_path / "latest.ckpt").step == 4
