import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from priqa.errors import NumericError
from priqa.losses import (
    JSD_UPPER_BOUND,
    LossWeights,
    jsd_loss,
    l1_quality_loss,
    plcc_loss,
    total_loss,
)
from priqa.types import QualityMap

# logit -> /0.2 -> softmax -> JSD, evaluated by hand in plain floats for
# pred (0.9, 0.1) against target (0.5, 0.5)
JSD_TWO_PIXEL = 0.21576155120218724

maps = arrays(np.float64, (4, 4), elements=st.floats(0, 1))


def _central_grad(fn, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        g.view(-1)[i] = (up - down) / (2 * h)
    return g


class TestL1:
    def test_identity_and_extremes(self):
        a = np.random.default_rng(0).uniform(size=(5, 5))
        assert l1_quality_loss(a, a).item() == 0.0
        assert l1_quality_loss(np.zeros((3, 3)), np.ones((3, 3))).item() == 1.0

    def test_brute_force(self, rng):
        p, t = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
        expected = sum(abs(p[i, j] - t[i, j]) for i in range(4) for j in range(4)) / 16
        assert abs(l1_quality_loss(QualityMap.dense(p), QualityMap.dense(t)).item() - expected) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_quality_loss(np.zeros((2, 2)), np.zeros((2, 3)))


class TestJsd:
    def test_identity(self, rng):
        a = rng.uniform(size=(6, 6))
        assert abs(jsd_loss(a, a).item()) < 1e-9

    def test_two_pixel_constant(self):
        v = jsd_loss(np.array([[0.9, 0.1]]), np.array([[0.5, 0.5]]), temperature=0.2).item()
        assert v == pytest.approx(JSD_TWO_PIXEL, abs=1e-12)

    def test_saturated_inputs_are_finite(self):
        v = jsd_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])).item()
        assert math.isfinite(v) and 0 <= v <= JSD_UPPER_BOUND + 1e-12

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            jsd_loss(np.array([[np.nan, 0.5]]), np.array([[0.5, 0.5]]))

    @settings(max_examples=60, deadline=None)
    @given(maps, maps)
    def test_bounded_and_symmetric(self, p, t):
        a, b = jsd_loss(p, t).item(), jsd_loss(t, p).item()
        assert -1e-12 <= a <= JSD_UPPER_BOUND + 1e-12
        assert a == pytest.approx(b, abs=1e-12)


class TestPlcc:
    def test_examples(self, rng):
        a = rng.uniform(size=(5, 5))
        assert plcc_loss(a, a).item() == pytest.approx(0.0, abs=1e-12)
        assert plcc_loss(a, 1 - a).item() == pytest.approx(2.0, abs=1e-12)
        assert plcc_loss(np.full((5, 5), 0.3), a).item() == 1.0

    def test_batched_rows_independent(self, rng):
        a = rng.uniform(size=(2, 4, 4))
        b = a.copy()
        b[1] = 1 - b[1]
        assert plcc_loss(a, b).item() == pytest.approx(1.0, abs=1e-12)  # mean of 0 and 2


class TestTotal:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_iqa, w.lambda_jsd, w.lambda_plcc) == (0.5, 1.0, 0.25)
        assert (w.jsd_temperature, w.clamp_eps) == (0.2, 1e-6)

    def test_zero_at_identity(self, rng):
        a = rng.uniform(size=(6, 6))
        total, terms = total_loss(a, a)
        assert abs(total.item()) < 1e-9
        assert terms["l1"] == 0 and abs(terms["jsd"]) < 1e-9 and abs(terms["plcc"]) < 1e-12

    @pytest.mark.parametrize("keep", ["lambda_iqa", "lambda_jsd", "lambda_plcc"])
    def test_single_term(self, rng, keep):
        p, t = rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6))
        w = LossWeights(**{k: (0.7 if k == keep else 0.0) for k in ("lambda_iqa", "lambda_jsd", "lambda_plcc")})
        total, terms = total_loss(p, t, w)
        term = {"lambda_iqa": "l1", "lambda_jsd": "jsd", "lambda_plcc": "plcc"}[keep]
        assert total.item() == 0.7 * terms[term]

    @settings(max_examples=30, deadline=None)
    @given(maps, maps, st.tuples(*[st.floats(0, 2)] * 3), st.tuples(*[st.floats(0, 2)] * 3))
    def test_linear_in_weights(self, p, t, w1, w2):
        def tot(w):
            return total_loss(p, t, LossWeights(*w))[0].item()

        both = tuple(a + b for a, b in zip(w1, w2))
        assert tot(both) == pytest.approx(tot(w1) + tot(w2), abs=1e-9)

    @pytest.mark.parametrize("kw", [dict(lambda_jsd=-1.0), dict(jsd_temperature=0.0), dict(clamp_eps=0.5)])
    def test_invalid_weights(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw)


class TestGradients:
    @pytest.mark.parametrize(
        "fn",
        [l1_quality_loss, jsd_loss, plcc_loss, lambda p, t: total_loss(p, t)[0]],
        ids=["l1", "jsd", "plcc", "total"],
    )
    def test_against_central_differences(self, fn):
        r = np.random.default_rng(7)
        # keep away from the L1 kink and the clamp boundaries
        t = torch.from_numpy(r.uniform(0.05, 0.95, size=(8, 8)))
        p0 = t + torch.from_numpy(r.choice([-1, 1], size=(8, 8)) * r.uniform(0.02, 0.1, size=(8, 8)))
        p = p0.clamp(0.02, 0.98).clone().requires_grad_(True)
        fn(p, t).backward()
        fd = _central_grad(lambda x: fn(x, t), p.detach().clone())
        rel = (p.grad - fd).abs().max() / fd.abs().max()
        assert rel.item() < 1e-5
