import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ucl_dehaze.errors import ConfigError, DimensionError, InputError, NonFiniteLossError
from ucl_dehaze.generator import FeatureStack
from ucl_dehaze.losses import (LossWeights, PatchSampleSet, ProjectionHead, VGGFeatures, identity_loss,
                               nce_single, patch_nce_loss, sample_and_project, scp_loss,
                               total_generator_loss)


def nce_oracle(v, pos, negs, tau):
    """Plain-python cross entropy over cosine logits."""
    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    logits = [cos(v, pos) / tau] + [cos(v, n) / tau for n in negs]
    m = max(logits)
    return -(logits[0] - m - math.log(sum(math.exp(l - m) for l in logits)))


class TestNCE:
    def test_uniform_similarity_gives_log_n_plus_one(self):
        v = torch.tensor([1.0, 0.0])
        negs = v.repeat(15, 1)
        for tau in (0.07, 1.0):
            assert nce_single(v, v, negs, tau).item() == pytest.approx(math.log(16), abs=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(1, 20), k=st.integers(2, 16), tau=st.sampled_from([0.07, 0.5, 1.0]),
           seed=st.integers(0, 10_000))
    def test_matches_oracle(self, n, k, tau, seed):
        r = np.random.default_rng(seed)
        v, pos, negs = r.normal(size=k), r.normal(size=k), r.normal(size=(n, k))
        got = nce_single(torch.tensor(v), torch.tensor(pos), torch.tensor(negs), tau).item()
        assert got == pytest.approx(nce_oracle(v, pos, negs, tau), rel=1e-10, abs=1e-10)
        assert got >= 0

    def test_scale_invariance(self):
        r = torch.Generator().manual_seed(0)
        v, pos, negs = (torch.randn(*s, generator=r, dtype=torch.float64) for s in ((8,), (8,), (5, 8)))
        a = nce_single(v, pos, negs).item()
        b = nce_single(3 * v, 0.5 * pos, 7 * negs).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_tends_to_zero_with_perfect_positive(self):
        v = torch.tensor([1.0, 0.0], dtype=torch.float64)
        negs = torch.tensor([[-1.0, 0.0]] * 4, dtype=torch.float64)
        assert 0 < nce_single(v, v, negs, 0.07).item() < 1e-10

    def test_opposed_negatives_n255(self):
        v = torch.tensor([1.0, 0.0], dtype=torch.float64)
        negs = (-v).repeat(255, 1)
        assert nce_single(v, v, negs, 0.07).item() < 1e-9

    def test_zero_vector(self):
        with pytest.raises(InputError):
            nce_single(torch.zeros(3), torch.ones(3), torch.ones(2, 3))

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            nce_single(torch.ones(3), torch.ones(3), torch.ones(2, 3), tau=0)

    def test_gradcheck(self):
        r = torch.Generator().manual_seed(1)
        args = tuple(torch.randn(*s, generator=r, dtype=torch.float64, requires_grad=True)
                     for s in ((6,), (6,), (4, 6)))
        assert torch.autograd.gradcheck(lambda a, b, c: nce_single(a, b, c, 0.5), args)


def _stack(b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return FeatureStack([(0, torch.randn(b, 3, 6, 6, generator=g)), (2, torch.randn(b, 5, 3, 3, generator=g))])


class TestPatchSampling:
    def test_shapes_and_unit_norm(self):
        torch.manual_seed(0)
        heads = ProjectionHead([3, 5])
        s = sample_and_project(_stack(), heads, num=4, generator=torch.Generator().manual_seed(0))
        assert [v.shape for v in s.vectors] == [(8, 256), (8, 256)]
        for v in s.vectors:
            assert torch.allclose(v.norm(dim=1), torch.ones(len(v)), atol=1e-5)
        # fewer locations than requested: take them all
        assert len(s.indices[1]) == 4 and len(set(s.indices[0].tolist())) == 4
        full = sample_and_project(_stack(), heads, num=100)
        assert len(full.indices[1]) == 9

    def test_reuse_indices(self):
        heads = ProjectionHead([3, 5])
        a = sample_and_project(_stack(seed=0), heads, num=5)
        b = sample_and_project(_stack(seed=1), heads, num=5, reuse_indices=a.indices)
        assert all(torch.equal(x, y) for x, y in zip(a.indices, b.indices))

    def test_head_count_mismatch(self):
        with pytest.raises(ConfigError):
            sample_and_project(_stack(), ProjectionHead([3]))


class TestPatchNCE:
    def test_loop_oracle(self):
        torch.manual_seed(0)
        heads = ProjectionHead([3, 5]).double()
        sa = FeatureStack([(i, f.double()) for i, f in _stack(seed=0).layers])
        sr = FeatureStack([(i, f.double()) for i, f in _stack(seed=1).layers])
        a = sample_and_project(sa, heads, num=4)
        r = sample_and_project(sr, heads, num=4, reuse_indices=a.indices)
        tau, b = 0.07, 2
        expect = 0.0
        for q, k in zip(a.vectors, r.vectors):
            q, k = q.detach().numpy().reshape(b, -1, 256), k.detach().numpy().reshape(b, -1, 256)
            for img in range(b):
                for i in range(q.shape[1]):
                    negs = [k[img, j] for j in range(q.shape[1]) if j != i]
                    expect += nce_oracle(q[img, i], k[img, i], negs, tau)
        got = patch_nce_loss(a, r, tau, batch_size=b).item()
        assert abs(got - expect / b) < 1e-8

    def test_identical_sets_three_locations(self):
        z = torch.nn.functional.normalize(torch.randn(3, 8, dtype=torch.float64), dim=1)
        idx = [torch.arange(3)]
        expect = sum(nce_oracle(z[i].numpy(), z[i].numpy(), [z[j].numpy() for j in range(3) if j != i], 0.07)
                     for i in range(3))
        got = patch_nce_loss(PatchSampleSet([z], idx), PatchSampleSet([z], idx)).item()
        assert abs(got - expect) < 1e-10

    def test_single_location_is_zero(self):
        z = torch.nn.functional.normalize(torch.randn(1, 8), dim=1)
        assert patch_nce_loss(PatchSampleSet([z], [torch.arange(1)]), PatchSampleSet([z], [torch.arange(1)])) == 0

    def test_layer_order_irrelevant(self):
        g = torch.Generator().manual_seed(4)
        q = [torch.nn.functional.normalize(torch.randn(5, 8, generator=g, dtype=torch.float64), dim=1) for _ in range(2)]
        k = [torch.nn.functional.normalize(torch.randn(5, 8, generator=g, dtype=torch.float64), dim=1) for _ in range(2)]
        idx = [torch.arange(5)] * 2
        a = patch_nce_loss(PatchSampleSet(q, idx), PatchSampleSet(k, idx)).item()
        b = patch_nce_loss(PatchSampleSet(q[::-1], idx), PatchSampleSet(k[::-1], idx)).item()
        assert a == pytest.approx(b, rel=1e-14)

    def test_references_detached(self):
        q = torch.nn.functional.normalize(torch.randn(4, 8), dim=1).requires_grad_(True)
        k = torch.nn.functional.normalize(torch.randn(4, 8), dim=1).requires_grad_(True)
        idx = [torch.arange(4)]
        patch_nce_loss(PatchSampleSet([q], idx), PatchSampleSet([k], idx)).backward()
        assert q.grad is not None and k.grad is None

    def test_mismatched_locations(self):
        v = [torch.nn.functional.normalize(torch.randn(4, 8), dim=1)]
        with pytest.raises(ConfigError):
            patch_nce_loss(PatchSampleSet(v, [torch.arange(4)]), PatchSampleSet(v, [torch.arange(1, 5)]))


class TestSCP:
    def test_restored_equals_clean_is_zero(self, small_extractor):
        g = torch.Generator().manual_seed(0)
        y = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
        x = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
        assert scp_loss(y, y, x, small_extractor).item() == 0.0

    def test_hand_computed_ratio(self):
        def extractor(img):
            return [img, img, img]
        r = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        clean = torch.full_like(r, 2.0)
        hazy = torch.full_like(r, 2.0)
        # each level gives 2 / (2 + delta), weights sum to 2
        assert scp_loss(r, clean, hazy, extractor).item() == pytest.approx(2.0, abs=1e-6)

    def test_loop_oracle(self, small_extractor):
        g = torch.Generator().manual_seed(3)
        r, c, h = (torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) for _ in range(3))
        fr, fc, fh = (small_extractor(t) for t in (r, c, h))
        expect = sum(w * float((c_ - r_).abs().mean()) / (float((h_ - r_).abs().mean()) + 1e-7)
                     for w, c_, r_, h_ in zip((0.4, 0.6, 1.0), fc, fr, fh))
        assert abs(scp_loss(r, c, h, small_extractor).item() - expect) < 1e-8

    def test_shape_mismatch(self, small_extractor):
        with pytest.raises(DimensionError):
            scp_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16), small_extractor)

    def test_vgg_taps(self, vgg):
        feats = vgg(torch.zeros(1, 3, 64, 64))
        assert [tuple(f.shape[1:]) for f in feats] == [(128, 16, 16), (256, 8, 8), (512, 2, 2)]
        assert not any(p.requires_grad for p in vgg.parameters())
        vgg.train()
        assert not vgg.training

    def test_vgg_weights_file(self, tmp_path):
        from torchvision.models import vgg16
        torch.manual_seed(7)
        full = vgg16(weights=None)
        path = tmp_path / "vgg.pth"
        torch.save(full.state_dict(), path)
        ext = VGGFeatures(weights_path=path, seed=123)
        assert torch.equal(ext.slices[0][0].weight, full.features[0].weight)


def test_identity_loss():
    y = torch.rand(1, 3, 4, 4)
    assert identity_loss(lambda t: t, y).item() == 0
    assert identity_loss(lambda t: t + 0.5, y).item() == pytest.approx(0.5)


class TestTotal:
    def test_weighted_sum(self):
        parts = {"adv_g": 1.0, "pc_x": 2.0, "pc_y": 3.0, "scp": 4.0, "ide": 5.0}
        total, bundle = total_generator_loss(parts, LossWeights())
        assert total == pytest.approx(1 + 2 + 3 + 0.0002 * 4 + 5 * 5)
        assert bundle.total == pytest.approx(total) and bundle.scp == 4.0

    def test_linear_in_each_component(self):
        base = {"adv_g": 0.7, "pc_x": 3.0, "pc_y": 2.0, "scp": 1.5, "ide": 0.2}
        t0, _ = total_generator_loss(base, LossWeights())
        coef = {"adv_g": 1, "pc_x": 1, "pc_y": 1, "scp": 0.0002, "ide": 5}
        for name, value in base.items():
            t1, _ = total_generator_loss({**base, name: 2 * value}, LossWeights())
            assert t1 - t0 == pytest.approx(coef[name] * value, rel=1e-12)

    def test_zero_weight_still_logged(self):
        total, bundle = total_generator_loss({"adv_g": 1.0, "scp": 3.0}, LossWeights(scp=0))
        assert total == 1.0 and bundle.scp == 3.0

    def test_zero_weight_drops_component(self):
        total, _ = total_generator_loss({"adv_g": 1.0, "ide": 10.0}, LossWeights(ide=0))
        assert total == 1.0

    def test_nonfinite_names_component(self):
        with pytest.raises(NonFiniteLossError, match="pc_y"):
            total_generator_loss({"pc_y": torch.tensor(float("inf"))}, LossWeights())

    def test_unknown_component(self):
        with pytest.raises(ConfigError):
            total_generator_loss({"tv": 1.0}, LossWeights())

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            LossWeights(scp=-1)
