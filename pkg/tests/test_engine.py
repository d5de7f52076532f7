import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, strategies as st

from affectlab import engine
from affectlab.backbone import EncoderConfig
from affectlab.cotex import make_twin
from affectlab.data import synth_dataset, stack_images
from affectlab.emma import EmmaModel
from affectlab.engine import (
    CheckpointSet,
    RecipeOptimizer,
    TrainConfig,
    accumulate,
    clip_gradients,
    global_grad_norm,
    layer_id,
    layer_lrs,
    lr_schedule,
)
from affectlab.errors import ConfigError, NonFiniteGradientError
from affectlab.objectives import loss_va

SMALL = EncoderConfig(patch_size=16, embed_dim=32, depth=2, heads=2, drop_path_rate=0.0)


class TestConfig:
    def test_defaults(self):
        e, c = TrainConfig.emma(), TrainConfig.cotex()
        assert (e.base_lr, e.weight_decay, e.batch_size, e.total_epochs) == (5e-4, 0.05, 100, 30)
        assert (c.weight_decay, c.batch_size, c.total_epochs) == (0.15, 1024, 6)
        for cfg in (e, c):
            assert (cfg.clip_grad, cfg.layer_decay, cfg.warmup_epochs, cfg.accum_iters, cfg.drop_path) == (0.05, 0.65, 5, 4, 0.1)
        assert e.effective_batch == 400
        assert e.lr == pytest.approx(5e-4 * 400 / 256)
        assert TrainConfig(scale_lr=False).lr == 5e-4

    @pytest.mark.parametrize(
        "kw",
        [dict(accum_iters=0), dict(batch_size=0), dict(base_lr=-1.0), dict(layer_decay=0.0), dict(mask_ratio=1.0), dict(lam=-1.0), dict(warmup_epochs=40), dict(ensemble_mode="x")],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestLayerDecay:
    def test_example(self):
        got = layer_lrs(5e-4, 0.65, 2)
        want = [1.373125e-4, 2.1125e-4, 3.25e-4, 5e-4]
        assert np.allclose(got, want, rtol=1e-12, atol=0)
        assert got[-1] == 5e-4

    def test_no_decay(self):
        assert layer_lrs(3e-4, 1.0, 5) == [3e-4] * 7

    @given(st.floats(1e-6, 1e-1), st.floats(0.05, 1.0), st.integers(1, 24))
    def test_monotone(self, base, decay, depth):
        lrs = layer_lrs(base, decay, depth)
        assert len(lrs) == depth + 2
        assert all(a <= b for a, b in zip(lrs, lrs[1:]))

    def test_bad_depth(self):
        with pytest.raises(ConfigError):
            layer_lrs(1e-3, 0.65, 0)

    def test_layer_ids(self):
        assert layer_id("encoder.patch_embed.weight", 4) == 0
        assert layer_id("view1.encoder.cls_token", 4) == 0
        assert layer_id("encoder.blocks.0.attn.qkv.weight", 4) == 1
        assert layer_id("encoder.blocks.3.mlp.0.bias", 4) == 4
        assert layer_id("encoder.norm.weight", 4) == 5
        assert layer_id("head.weight", 4) == 5
        assert layer_id("va_head.0.weight", 4) == 5

    def test_groups_cover_all_params(self):
        m = EmmaModel(SMALL)
        opt = RecipeOptimizer(m, TrainConfig())
        grouped = sum(len(g["params"]) for g in opt.optimizer.param_groups)
        assert grouped == len(list(m.parameters()))


class TestSchedule:
    cfg = TrainConfig(warmup_epochs=5, total_epochs=30)

    def test_points(self):
        assert lr_schedule(0, self.cfg) == 0.0
        assert lr_schedule(5, self.cfg) == 1.0
        assert lr_schedule(17.5, self.cfg) == pytest.approx(0.5, abs=1e-15)
        assert lr_schedule(30, self.cfg) == 0.0
        assert lr_schedule(1000, self.cfg) == 0.0

    def test_steps_per_epoch(self):
        assert lr_schedule(25, self.cfg, steps_per_epoch=10) == pytest.approx(0.5)

    def test_continuity(self):
        for d in (1e-3, 1e-6, 1e-9):
            assert abs(lr_schedule(5 - d, self.cfg) - lr_schedule(5 + d, self.cfg)) < 10 * d

    @given(st.floats(0, 40))
    def test_range(self, step):
        assert 0.0 <= lr_schedule(step, self.cfg) <= 1.0

    def test_no_warmup(self):
        assert lr_schedule(0, TrainConfig(warmup_epochs=0, total_epochs=10)) == 1.0


def _linear(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(nn.Linear(4, 3), nn.LayerNorm(3)).double()


class TestOptimStep:
    def test_clip_scale(self):
        p = nn.Parameter(torch.zeros(2, dtype=torch.float64))
        p.grad = torch.tensor([6.0, 8.0], dtype=torch.float64)
        norm = clip_gradients([p], 0.05)
        assert norm == 10.0
        assert torch.allclose(p.grad, torch.tensor([0.03, 0.04], dtype=torch.float64), rtol=1e-15)

    def test_clip_before_update(self):
        cfg = TrainConfig(warmup_epochs=0, total_epochs=10, weight_decay=0.0, scale_lr=False)
        a, b = _linear(), _linear()
        opt = RecipeOptimizer(a, cfg, depth=1)
        ref = torch.optim.AdamW(b.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
        g = [torch.randn_like(p) for p in a.parameters()]
        scale = 10.0 / math.sqrt(sum(float((x**2).sum()) for x in g))
        for p, q, x in zip(a.parameters(), b.parameters(), g):
            p.grad = x * scale  # global norm 10
            q.grad = x * scale * 0.005
        opt.step()
        ref.step()
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.allclose(p, q, rtol=0, atol=1e-15)

    def test_zero_grad_zero_decay_is_fixed_point(self):
        m = _linear()
        before = [p.clone() for p in m.parameters()]
        opt = RecipeOptimizer(m, TrainConfig(weight_decay=0.0, warmup_epochs=0, total_epochs=10), depth=1)
        for p in m.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))

    def test_reproducible(self):
        out = []
        for _ in range(2):
            m = _linear(3)
            opt = RecipeOptimizer(m, TrainConfig(warmup_epochs=0, total_epochs=10), depth=1)
            g = torch.Generator().manual_seed(1)
            for p in m.parameters():
                p.grad = torch.randn(p.shape, generator=g, dtype=p.dtype)
            opt.step()
            out.append([p.clone() for p in m.parameters()])
        assert all(torch.equal(a, b) for a, b in zip(*out))

    def test_non_finite_aborts(self):
        m = _linear()
        before = [p.clone() for p in m.parameters()]
        opt = RecipeOptimizer(m, TrainConfig(warmup_epochs=0, total_epochs=10), depth=1)
        for p in m.parameters():
            p.grad = torch.zeros_like(p)
        m[1].bias.grad[0] = float("nan")
        with pytest.raises(NonFiniteGradientError, match="1.bias") as exc:
            opt.step()
        assert exc.value.bad_params == ["1.bias"]
        assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))
        assert opt.step_count == 0

    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10.0), st.floats(1e-4, 1.0))
    def test_clip_invariant(self, seed, scale, clip):
        g = torch.Generator().manual_seed(seed)
        ps = [nn.Parameter(torch.zeros(s, dtype=torch.float64)) for s in ((3, 4), (5,), (2, 2, 2))]
        for p in ps:
            p.grad = torch.randn(p.shape, generator=g, dtype=torch.float64) * scale
        clip_gradients(ps, clip)
        assert global_grad_norm(ps) <= clip + 1e-9

    def test_decay_only_weight_matrices(self):
        torch.manual_seed(0)
        m = make_twin(SMALL, 6).view1.double()
        cfg = TrainConfig(weight_decay=0.1, warmup_epochs=0, total_epochs=10, scale_lr=False, layer_decay=1.0)
        opt = RecipeOptimizer(m, cfg)
        before = {n: p.clone() for n, p in m.named_parameters()}
        for p in m.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for n, p in m.named_parameters():
            if p.ndim >= 2 and not n.endswith("cls_token"):
                assert torch.allclose(p, before[n] * (1 - cfg.lr * 0.1), rtol=1e-14, atol=0), n
            else:
                assert torch.equal(p, before[n]), n


class TestAccumulate:
    def _setup(self):
        torch.manual_seed(0)
        m = nn.Sequential(nn.Linear(10, 16), nn.GELU(), nn.Linear(16, 5)).double()
        x = torch.randn(16, 10, dtype=torch.float64)
        y = torch.randint(0, 5, (16,))
        return m, x, y

    def _opt(self, m):
        return RecipeOptimizer(m, TrainConfig(warmup_epochs=0, total_epochs=10, scale_lr=False), depth=1)

    def test_empty(self):
        m, _, _ = self._setup()
        with pytest.raises(ConfigError):
            accumulate([], lambda mb: mb, self._opt(m))

    def test_single_is_plain_step(self):
        m, x, y = self._setup()
        m2 = nn.Sequential(nn.Linear(10, 16), nn.GELU(), nn.Linear(16, 5)).double()
        m2.load_state_dict(m.state_dict())
        accumulate([(x, y)], lambda mb: F.cross_entropy(m(mb[0]), mb[1]), self._opt(m))
        o2 = self._opt(m2)
        o2.zero_grad()
        F.cross_entropy(m2(x), y).backward()
        o2.step()
        assert all(torch.equal(a, b) for a, b in zip(m.parameters(), m2.parameters()))

    def _both(self, loss, y=None):
        m, x, labels = self._setup()
        y = labels if y is None else y
        m2 = nn.Sequential(nn.Linear(10, 16), nn.GELU(), nn.Linear(16, 5)).double()
        m2.load_state_dict(m.state_dict())
        micro = [(x[i : i + 4], y[i : i + 4]) for i in range(0, 16, 4)]
        accumulate(micro, lambda mb: loss(m, *mb), self._opt(m))
        accumulate([(x, y)], lambda mb: loss(m2, *mb), self._opt(m2))
        return max(float((a - b).detach().abs().max()) for a, b in zip(m.parameters(), m2.parameters()))

    def test_ce_matches_big_batch(self):
        assert self._both(lambda m, x, y: F.cross_entropy(m(x), y)) < 1e-6

    def test_ccc_is_batch_dependent(self):
        # documented exemption: CCC uses batch statistics, so micro-batches differ
        target = torch.randn(16, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        ccc_loss = lambda m, x, t: loss_va(m(x)[:, :2], t, torch.ones(x.shape[0], dtype=torch.bool))
        assert self._both(ccc_loss, target) > 1e-6


@pytest.fixture(scope="module")
def lsd_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = TrainConfig.cotex(batch_size=8, accum_iters=1, total_epochs=2, warmup_epochs=1, seed=3)
    data = synth_dataset(16, "lsd", 0)
    result = engine.fit_cotex(cfg, data, run_dir=root / "a")
    return root, cfg, data, result


class TestRuns:
    def test_layout(self, lsd_run):
        root, cfg, _, result = lsd_run
        run = root / "a"
        for name in ("config.txt", "log.csv", "report.txt", "checkpoints/epoch_001", "checkpoints/epoch_002"):
            assert (run / name).exists(), name
        header = (run / "log.csv").read_text().splitlines()[0].split(",")
        assert header[:6] == ["epoch", "lr", "loss_total", "loss_js", "loss_ce1", "loss_ce2"]
        assert "train_p_lsd" in header
        assert f"best_epoch = {result.best_epoch}" in (run / "report.txt").read_text()
        assert "seed = 3" in (run / "config.txt").read_text()

    def test_full_run_determinism(self, lsd_run):
        root, cfg, data, result = lsd_run
        again = engine.fit_cotex(cfg, data, run_dir=root / "b")
        assert (root / "a" / "log.csv").read_bytes() == (root / "b" / "log.csv").read_bytes()
        for ep in ("epoch_001", "epoch_002"):
            a = (root / "a" / "checkpoints" / ep / "weights.safetensors").read_bytes()
            b = (root / "b" / "checkpoints" / ep / "weights.safetensors").read_bytes()
            assert a == b
        for (n, x), (_, y) in zip(result.model.state_dict().items(), again.model.state_dict().items()):
            assert torch.equal(x, y), n

    def test_model_checkpoint_roundtrip(self, lsd_run, tmp_path):
        _, _, data, result = lsd_run
        back = engine.load_model(engine.save_model(result.model, tmp_path / "x", epoch=2))
        imgs = stack_images(data[:4])
        assert np.array_equal(engine.soft_predict(back, imgs).exp_probs, engine.soft_predict(result.model, imgs).exp_probs)

    def test_emma_checkpoint_roundtrip(self, tmp_path):
        m = EmmaModel(EncoderConfig(patch_size=16, embed_dim=32, depth=1, heads=2))
        back = engine.load_model(engine.save_model(m, tmp_path / "e"))
        imgs = stack_images(synth_dataset(3, "mtl", 0))
        a, b = engine.soft_predict(m, imgs), engine.soft_predict(back, imgs)
        assert np.array_equal(a.va, b.va) and np.array_equal(a.au_probs, b.au_probs)


class TestEnsembles:
    def test_checkpoint_set_order(self, tmp_path):
        with pytest.raises(ConfigError):
            CheckpointSet.of([(2, tmp_path), (2, tmp_path)])
        with pytest.raises(ConfigError):
            CheckpointSet.of([])

    def test_single_and_repeated(self, lsd_run):
        root, _, data, _ = lsd_run
        imgs = stack_images(data)
        ck = root / "a" / "checkpoints" / "epoch_002"
        plain = engine.soft_predict(engine.load_model(ck), imgs)
        one = engine.ensemble_epochs([(2, ck)], imgs)
        assert np.array_equal(one.expression, plain.expression)
        assert np.array_equal(one.exp_probs, plain.exp_probs)
        models = [engine.load_model(ck) for _ in range(3)]
        three = engine.ensemble_models(models, imgs)
        assert np.array_equal(three.expression, plain.expression)
        assert np.allclose(three.exp_probs, plain.exp_probs, rtol=0, atol=1e-15)

    def test_epochs_average_sums_to_one(self, lsd_run):
        root, _, data, _ = lsd_run
        p = engine.ensemble_epochs(CheckpointSet.from_run_dir(root / "a"), stack_images(data))
        assert np.allclose(p.exp_probs.sum(1), 1.0, atol=1e-12)

    @given(st.integers(0, 2**16))
    def test_random_models_average_sums_to_one(self, seed):
        models = [make_twin(SMALL, 6, seed=seed + i) for i in range(3)]
        p = engine.ensemble_models(models, torch.rand(2, 3, 112, 112, generator=torch.Generator().manual_seed(seed)))
        assert np.allclose(p.exp_probs.sum(1), 1.0, atol=1e-12)

    def test_params_ensemble(self, lsd_run):
        _, cfg, data, _ = lsd_run
        import dataclasses

        cfgs = [dataclasses.replace(cfg, total_epochs=1, warmup_epochs=0), dataclasses.replace(cfg, total_epochs=1, warmup_epochs=0, lam=0.0)]
        imgs = stack_images(data)
        got = engine.ensemble_params(cfgs, data, imgs, task="lsd")
        singles = [engine.soft_predict(engine.fit_cotex(c, data).model, imgs) for c in cfgs]
        assert np.allclose(got.exp_probs, (singles[0].exp_probs + singles[1].exp_probs) / 2, atol=1e-15)

    def test_empty(self):
        with pytest.raises(ConfigError):
            engine.ensemble_models([], torch.rand(1, 3, 112, 112))
        with pytest.raises(ConfigError):
            engine.ensemble_params([], [], torch.rand(1, 3, 112, 112))
