import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from faithd2t.losses import (
    EPS,
    LossBreakdown,
    nll_grad,
    nll_loss,
    r2d2_loss,
    rd_grad,
    rd_sentence_loss,
    rd_token_loss,
    unlikelihood_grad,
    unlikelihood_loss,
)

probs = st.floats(min_value=1e-3, max_value=1 - 1e-3)


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(len(x)):
        up, dn = x.copy(), x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


class TestFixtures:
    def test_rd_sentence(self):
        assert float(rd_sentence_loss(1 - EPS, 1)) == pytest.approx(0.0, abs=1e-6)
        assert float(rd_sentence_loss(0.5, 1)) == pytest.approx(math.log(2), abs=1e-9)
        assert float(rd_sentence_loss(0.9, 0)) == pytest.approx(-math.log(0.1), abs=1e-9)

    def test_rd_token(self):
        assert float(rd_token_loss([1.0, 0.0, 1.0], [1, 0, 1])) == pytest.approx(0.0, abs=1e-6)
        expect = -(math.log(0.9) + math.log(0.8) + math.log(0.8))
        assert float(rd_token_loss([0.1, 0.2, 0.8], [0, 0, 1])) == pytest.approx(expect, abs=1e-9)
        assert expect == pytest.approx(0.551646, abs=2e-6)  # printed value is truncated
        for n in (1, 4, 9):
            assert float(rd_token_loss([0.5] * n, [1, 0] * (n // 2) + [1] * (n % 2))) == pytest.approx(
                n * math.log(2), abs=1e-9
            )

    def test_unlikelihood(self):
        expect = -(math.log(0.9) + math.log(0.7) + math.log(0.4))
        assert float(unlikelihood_loss([0.9, 0.7, 0.6], [0, 0, 1])) == pytest.approx(expect, abs=1e-9)
        assert expect == pytest.approx(1.378326, abs=1e-6)
        p = [0.3, 0.8, 0.55]
        assert float(unlikelihood_loss(p, [0, 0, 0])) == pytest.approx(float(nll_loss(p)), abs=1e-12)
        assert float(unlikelihood_loss([0.9, 1e-12], [0, 1])) == pytest.approx(-math.log(0.9), abs=1e-6)

    def test_nll(self):
        assert float(nll_loss([0.5, 0.25])) == pytest.approx(math.log(2) + math.log(4), abs=1e-9)
        assert float(nll_loss([1 - EPS] * 5)) == pytest.approx(0.0, abs=1e-6)

    def test_r2d2(self):
        assert float(r2d2_loss(2.0, [1.0], 0.2, [0.4], 0.5)) == pytest.approx(0.9, abs=1e-9)
        assert float(r2d2_loss(2.0, [1.0, 3.0], 0.2, [0.4, 9.0], 1.0)) == pytest.approx(6.0 / 3, abs=1e-12)
        assert float(r2d2_loss(2.0, [], 0.2, [], 0.3)) == pytest.approx(0.3 * 2.0 + 0.7 * 0.2, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rd_token_loss([0.5, 0.5], [1])
        with pytest.raises(ValueError):
            unlikelihood_loss([0.5], [1, 0])
        with pytest.raises(ValueError):
            r2d2_loss(1.0, [1.0], 0.1, [], 0.5)

    def test_mean_reduction(self):
        p, lab = [0.1, 0.2, 0.8], [0, 0, 1]
        assert float(rd_token_loss(p, lab, "mean")) == pytest.approx(float(rd_token_loss(p, lab)) / 3)


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(probs, min_size=1, max_size=12))
    def test_nll_equals_ul_with_empty_mask(self, p):
        assert float(nll_loss(p)) == pytest.approx(float(unlikelihood_loss(p, [0] * len(p))), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(probs, st.integers(0, 1)), min_size=1, max_size=10))
    def test_nonnegative_finite(self, pairs):
        p = [a for a, _ in pairs]
        lab = [b for _, b in pairs]
        for v in (rd_token_loss(p, lab), unlikelihood_loss(p, lab), nll_loss(p), rd_sentence_loss(p[0], lab[0])):
            assert math.isfinite(float(v)) and float(v) >= 0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(probs, min_size=1, max_size=10))
    def test_token_loss_with_ones_is_sum_of_sentence_losses(self, p):
        by_step = sum(float(rd_sentence_loss(x, 1)) for x in p)
        assert float(rd_token_loss(p, [1] * len(p))) == pytest.approx(by_step, abs=1e-9)

    def test_unlikelihood_monotonicity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.uniform(0.05, 0.95, size=6)
            mask = rng.integers(0, 2, size=6)
            g = central_diff(lambda x: float(unlikelihood_loss(x, mask)), p)
            assert np.all(g[mask == 1] > 0)
            assert np.all(g[mask == 0] < 0)

    def test_lambda_derivative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(0, 5))
            nll, rd_t = rng.uniform(0, 5, size=2)
            ul, rd_f = rng.uniform(0, 5, size=n), rng.uniform(0, 5, size=n)
            f = lambda lam: float(r2d2_loss(nll, list(ul), rd_t, list(rd_f), lam))
            h = 1e-4
            fd = (f(0.5 + h) - f(0.5 - h)) / (2 * h)
            expect = ((nll + ul.sum()) - (rd_t + rd_f.sum())) / (n + 1)
            assert fd == pytest.approx(expect, rel=1e-7, abs=1e-9)
            # affine: midpoint value equals mean of endpoints
            assert f(0.5) == pytest.approx((f(0.0) + f(1.0)) / 2, abs=1e-12)


class TestGradients:
    """Closed-form, autograd and central differences all agree."""

    def _check(self, loss_fn, closed, p):
        t = torch.tensor(p, dtype=torch.float64, requires_grad=True)
        loss_fn(t).backward()
        fd = central_diff(lambda x: float(loss_fn(torch.tensor(x))), p)
        np.testing.assert_allclose(t.grad.numpy(), fd, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(closed(torch.tensor(p)).numpy(), fd, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_all_losses(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.05, 0.95, size=7)
        lab = rng.integers(0, 2, size=7).astype(float)
        self._check(lambda x: rd_token_loss(x, lab), lambda x: rd_grad(x, lab), p)
        self._check(lambda x: unlikelihood_loss(x, lab), lambda x: unlikelihood_grad(x, lab), p)
        self._check(lambda x: nll_loss(x), nll_grad, p)
        self._check(lambda x: rd_sentence_loss(x[0], lab[0]), lambda x: rd_grad(x[:1], lab[:1]), p[:1])

    def test_r2d2_gradient(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.1, 3.0, size=6)  # nll, ul1, ul2, rd_true, rd1, rd2

        def f(v):
            return r2d2_loss(v[0], [v[1], v[2]], v[3], [v[4], v[5]], 0.3)

        t = torch.tensor(x, requires_grad=True)
        f(t).backward()
        fd = central_diff(lambda v: float(f(torch.tensor(v))), x)
        np.testing.assert_allclose(t.grad.numpy(), fd, rtol=1e-6)
        np.testing.assert_allclose(fd, [0.1, 0.1, 0.1, 0.7 / 3, 0.7 / 3, 0.7 / 3], rtol=1e-6)


def test_breakdown_recombines():
    b = LossBreakdown(2.0, [1.0], 0.2, [0.4], 0.5, 0.9)
    assert b.n_false == 1
    assert b.recombine() == pytest.approx(b.combined, abs=1e-12)
