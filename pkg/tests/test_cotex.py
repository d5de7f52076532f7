import math

import numpy as np
import pytest
import torch

from affectlab import engine
from affectlab.backbone import EncoderConfig
from affectlab.cotex import (
    MaskSpec,
    TwinViT,
    cotex_losses,
    cotex_predict,
    cotex_train_step,
    make_twin,
    sample_mask,
    sample_masks,
    view_probs,
)
from affectlab.errors import ConfigError

CFG = EncoderConfig(patch_size=16, embed_dim=32, depth=2, heads=2, drop_path_rate=0.0)


def _opts(twin, **kw):
    cfg = engine.TrainConfig(warmup_epochs=0, total_epochs=100, scale_lr=False, **kw)
    return engine.RecipeOptimizer(twin.view1, cfg), engine.RecipeOptimizer(twin.view2, cfg)


class TestMasks:
    def test_counts(self):
        assert MaskSpec(0.75, 196).kept_count == 49
        assert sample_mask(MaskSpec(0.0, 196)).tolist() == list(range(196))

    def test_sorted_unique(self):
        m = sample_mask(MaskSpec(0.75, 196), torch.Generator().manual_seed(0))
        assert m.tolist() == sorted(set(m.tolist())) and len(m) == 49

    def test_invalid(self):
        for r in (1.0, -0.1):
            with pytest.raises(ConfigError):
                MaskSpec(r, 196)

    def test_no_visible_patch(self):
        assert MaskSpec(0.999, 10).kept_count == 1
        with pytest.raises(ConfigError):
            MaskSpec(0.5, 0)

    def test_uniform_frequency(self):
        m = sample_masks(MaskSpec(0.75, 196), 10_000, torch.Generator().manual_seed(1))
        freq = torch.bincount(m.flatten(), minlength=196).double() / 10_000
        assert float((freq - 0.25).abs().max()) < 0.02

    def test_views_independent(self):
        g = torch.Generator().manual_seed(2)
        spec = MaskSpec(0.75, 196)
        a, b = sample_masks(spec, 4000, g), sample_masks(spec, 4000, g)
        ma = torch.zeros(4000, 196, dtype=torch.bool).scatter_(1, a, True)
        mb = torch.zeros(4000, 196, dtype=torch.bool).scatter_(1, b, True)
        overlap = (ma & mb).sum(1).double()
        # hypergeometric mean (1-r)^2 N; the sample mean concentrates tightly
        assert abs(float(overlap.mean()) - 0.25**2 * 196) < 3 * float(overlap.std()) / math.sqrt(4000)


class TestTwin:
    def test_same_encoder_independent_heads(self):
        twin = make_twin(CFG, 6, seed=4)
        for (n, a), (_, b) in zip(twin.view1.encoder.state_dict().items(), twin.view2.encoder.state_dict().items()):
            assert torch.equal(a, b), n
        assert not torch.equal(twin.view1.head.weight, twin.view2.head.weight)

    def test_loads_given_state(self):
        src = make_twin(CFG, 6, seed=9).view1.encoder.state_dict()
        twin = make_twin(CFG, 6, src, seed=1)
        assert torch.equal(twin.view2.encoder.patch_embed.weight, src["patch_embed.weight"])

    def test_lambda_zero_decouples_views(self):
        twin = make_twin(CFG, 6, seed=0)
        imgs, y = torch.rand(3, 3, 224, 224), torch.tensor([0, 1, 2])
        total, _, (l1, l2) = cotex_losses(twin, imgs, y, 0.0, 0.0)
        g = torch.autograd.grad(total, list(twin.view1.parameters()) + list(twin.view2.parameters()), allow_unused=True, retain_graph=True)
        g1 = torch.autograd.grad(torch.nn.functional.cross_entropy(l1, y), list(twin.view1.parameters()), retain_graph=True)
        n1 = len(list(twin.view1.parameters()))
        for a, b in zip(g[:n1], g1):
            assert torch.allclose(a, b, atol=1e-7)

    def test_identical_views_zero_js(self):
        twin = make_twin(CFG, 6, seed=0)
        twin.view2.load_state_dict(twin.view1.state_dict())
        twin.eval()
        imgs = torch.rand(2, 3, 224, 224)
        # ratio 0: both views see every token, so the masks coincide
        _, comps, _ = cotex_losses(twin, imgs, torch.tensor([0, 1]), 1.0, 0.0)
        assert float(comps["js"]) == 0.0

    def test_tokens_per_view(self):
        twin = make_twin(CFG, 6, seed=0)
        _, comps, _ = cotex_losses(twin, torch.rand(1, 3, 224, 224), torch.tensor([0]), 1.0, 0.75)
        assert comps["tokens_per_view"] == 49

    def test_step_updates_both_views(self):
        twin = make_twin(CFG, 6, seed=0)
        before = [p.clone() for p in (twin.view1.head.weight, twin.view2.head.weight)]
        cotex_train_step(twin, torch.rand(4, 3, 224, 224), torch.tensor([0, 1, 2, 3]), 1.0, 0.75, _opts(twin), torch.Generator().manual_seed(0))
        assert not torch.equal(before[0], twin.view1.head.weight)
        assert not torch.equal(before[1], twin.view2.head.weight)

    def test_js_decreases_on_fixed_batch(self):
        torch.manual_seed(0)
        twin = make_twin(CFG, 6, seed=0)
        imgs = torch.rand(8, 3, 224, 224)
        y = torch.full((8,), -1)  # consistency term only
        opts = _opts(twin, base_lr=1e-4, clip_grad=0.0, weight_decay=0.0)
        g = torch.Generator().manual_seed(0)
        js = [float(cotex_train_step(twin, imgs, y, 1.0, 0.75, opts, g)["js"]) for _ in range(100)]
        assert np.mean(js[-10:]) < np.mean(js[:10])


class TestPredict:
    def test_identical_views(self):
        twin = make_twin(CFG, 6, seed=0)
        twin.view2.load_state_dict(twin.view1.state_dict())
        imgs = torch.rand(3, 3, 224, 224)
        p1, _ = view_probs(twin, imgs)
        assert np.allclose(cotex_predict(twin, imgs).exp_probs, p1.numpy(), atol=1e-15)

    def test_average_arithmetic(self):
        twin = TwinViT(CFG, 6)
        for view, cls in ((twin.view1, 0), (twin.view2, 1)):
            torch.nn.init.zeros_(view.head.weight)
            with torch.no_grad():
                view.head.bias.copy_(torch.full((6,), -1e3))
                view.head.bias[cls] = 1e3
        probs = cotex_predict(twin, torch.rand(1, 3, 224, 224)).exp_probs
        assert np.allclose(probs, [[0.5, 0.5, 0, 0, 0, 0]], atol=1e-12)

    def test_sums_to_one(self):
        twin = make_twin(CFG, 6, seed=3)
        probs = cotex_predict(twin, torch.rand(5, 3, 224, 224)).exp_probs
        assert np.allclose(probs.sum(1), 1.0, atol=1e-12)

    def test_independent_of_mask_ratio(self):
        twin = make_twin(CFG, 6, seed=3)
        imgs = torch.rand(2, 3, 224, 224)
        a = cotex_predict(twin, imgs).exp_probs
        cotex_losses(twin, imgs, torch.tensor([0, 1]), 1.0, 0.9, torch.Generator().manual_seed(5))
        assert np.array_equal(a, cotex_predict(twin, imgs).exp_probs)
