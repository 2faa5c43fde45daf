import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtkd.losses import (
    KDWeights,
    LossError,
    ce_loss,
    combined_loss,
    decoder_sentence_kd,
    decoder_token_kd,
    entropy,
    gradient_check,
    sentence_kd_l2,
    token_kd_l2,
)
from mtkd.models import FeatureSeq, StepDistributions

LN2 = math.log(2.0)


def fs(rows, mask=None):
    data = torch.tensor(rows, dtype=torch.float64)
    if data.dim() == 2:
        data = data[None]
    if mask is None:
        mask = torch.ones(data.shape[:2], dtype=torch.bool)
    return FeatureSeq(data, torch.as_tensor(mask, dtype=torch.bool))


def dist(probs):
    return StepDistributions.from_probs(torch.tensor(probs, dtype=torch.float64))


class TestCE:
    def test_uniform(self):
        assert ce_loss(dist([[0.25] * 4]), torch.tensor([[2]])).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_perfect(self):
        assert ce_loss(dist([[0.0, 1.0, 0.0]]), torch.tensor([[1]])).item() == 0.0

    def test_two_steps_summed(self):
        loss = ce_loss(dist([[0.5, 0.5], [0.5, 0.5]]), torch.tensor([[0, 1]]))
        assert loss.item() == pytest.approx(2 * LN2, abs=1e-12)

    def test_masked_steps_ignored(self):
        d = dist([[0.5, 0.5], [1.0, 0.0]])
        # second step has gold probability 0 but is masked out
        loss = ce_loss(d, torch.tensor([[0, 1]]), torch.tensor([[True, False]]))
        assert loss.item() == pytest.approx(LN2, abs=1e-12)

    def test_batch_mean(self):
        d = StepDistributions(torch.log(torch.tensor([[[0.5, 0.5]], [[0.25, 0.75]]], dtype=torch.float64)))
        loss = ce_loss(d, torch.tensor([[0], [0]]))
        assert loss.item() == pytest.approx((LN2 + math.log(4)) / 2, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(LossError):
            ce_loss(dist([[0.5, 0.5]]), torch.tensor([[0, 1]]))


class TestTokenKD:
    def test_identical(self):
        a = fs([[1.0, 2.0], [3.0, -1.0]])
        assert token_kd_l2(a, a).item() == 0.0

    def test_single_position(self):
        assert token_kd_l2(fs([[1.0, 2.0]]), fs([[1.0, 0.0]])).item() == pytest.approx(2.0)

    def test_average_of_norms(self):
        assert token_kd_l2(fs([[2.0, 0.0], [0.0, 4.0]]), fs([[0.0, 0.0], [0.0, 0.0]])).item() == pytest.approx(3.0)

    def test_per_sample_length(self):
        s = FeatureSeq(torch.tensor([[[2.0, 0.0], [0.0, 4.0]], [[6.0, 0.0], [9.0, 9.0]]]),
                       torch.tensor([[True, True], [True, False]]))
        t = FeatureSeq(torch.zeros(2, 2, 2), s.mask)
        # sample 0: (2+4)/2, sample 1: 6/1 (padded row ignored)
        assert token_kd_l2(s, t).item() == pytest.approx((3.0 + 6.0) / 2)

    def test_squared_variant(self):
        assert token_kd_l2(fs([[1.0, 2.0]]), fs([[1.0, 0.0]]), squared=True).item() == pytest.approx(4.0)

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            token_kd_l2(fs([[1.0, 2.0]]), fs([[1.0, 2.0], [0.0, 0.0]]))

    def test_mask_mismatch(self):
        with pytest.raises(LossError):
            token_kd_l2(fs([[1.0], [2.0]], [[True, True]]), fs([[1.0], [2.0]], [[True, False]]))

    def test_no_gradient_into_teacher(self):
        s = fs([[1.0, 2.0]])
        t = fs([[0.0, 0.5]])
        s.data.requires_grad_(True)
        t.data.requires_grad_(True)
        token_kd_l2(s, t).backward()
        assert t.data.grad is None and s.data.grad is not None

    def test_finite_gradient_at_padding(self):
        s = FeatureSeq(torch.tensor([[[1.0, 2.0], [0.0, 0.0]]], requires_grad=True), torch.tensor([[True, False]]))
        t = FeatureSeq(torch.zeros(1, 2, 2), s.mask)
        token_kd_l2(s, t).backward()
        assert torch.isfinite(s.data.grad).all()


class TestSentenceKD:
    def test_mean_then_norm(self):
        assert sentence_kd_l2(fs([[1.0, 0.0], [3.0, 0.0]]), fs([[0.0, 0.0], [0.0, 0.0]])).item() == pytest.approx(2.0)

    def test_identical(self):
        a = fs([[1.0, 5.0], [2.0, 2.0]])
        assert sentence_kd_l2(a, a).item() == 0.0

    def test_antisymmetric_difference(self):
        t = fs([[0.5, 0.5], [0.5, 0.5]])
        s = fs([[1.5, -0.5], [-0.5, 1.5]])
        assert sentence_kd_l2(s, t).item() == pytest.approx(0.0, abs=1e-15)
        assert token_kd_l2(s, t).item() > 0

    def test_masked_mean(self):
        s = FeatureSeq(torch.tensor([[[2.0, 0.0], [100.0, 100.0]]]), torch.tensor([[True, False]]))
        t = FeatureSeq(torch.zeros(1, 2, 2), s.mask)
        assert sentence_kd_l2(s, t).item() == pytest.approx(2.0)


class TestDecoderKD:
    def test_equal_distributions_give_entropy(self):
        p = dist([[0.5, 0.5]])
        assert decoder_token_kd(p, p).item() == pytest.approx(LN2, abs=1e-12)

    def test_one_hot_teacher_reduces_to_ce(self):
        student = dist([[0.1, 0.6, 0.3], [0.2, 0.2, 0.6]])
        teacher = dist([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        expected = ce_loss(student, torch.tensor([[2, 0]]))
        assert decoder_token_kd(student, teacher).item() == pytest.approx(expected.item(), abs=1e-12)

    def test_hand_expansion(self):
        loss = decoder_token_kd(dist([[0.5, 0.5]]), dist([[0.9, 0.1]]))
        assert loss.item() == pytest.approx(0.9 * LN2 + 0.1 * LN2, abs=1e-12)

    def test_vocab_mismatch(self):
        with pytest.raises(LossError):
            decoder_token_kd(dist([[0.5, 0.5]]), dist([[0.2, 0.3, 0.5]]))

    def test_sentence_identity_with_ground_truth(self):
        student = dist([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]])
        gold = torch.tensor([[2, 0]])
        assert decoder_sentence_kd(student, gold).item() == ce_loss(student, gold).item()

    def test_sentence_perfect_student(self):
        assert decoder_sentence_kd(dist([[0.0, 1.0], [1.0, 0.0]]), torch.tensor([[1, 0]])).item() == 0.0

    def test_sentence_two_steps(self):
        loss = decoder_sentence_kd(dist([[0.5, 0.5], [0.5, 0.5]]), torch.tensor([[1, 1]]))
        assert loss.item() == pytest.approx(2 * LN2, abs=1e-12)


class TestCombined:
    def _terms(self, **vals):
        return {k: torch.tensor(v, dtype=torch.float64) for k, v in vals.items()}

    def test_lambda_zero_is_translation_loss(self):
        l_timt = torch.tensor(1.2345678, dtype=torch.float64)
        terms = self._terms(tkd_i=3.0, skd_i=1.0, tkd_s=2.0, skd_s=0.5, tkd_d=7.0, skd_d=0.1)
        rep = combined_loss(l_timt, terms, KDWeights(lambda_kd=0.0))
        assert rep.total.item() == l_timt.item()

    def test_hand_arithmetic(self):
        w = KDWeights(lambda_kd=0.5, lambda_i=0.0, lambda_s=0.0, lambda_d=1.0)
        terms = self._terms(tkd_d=1.5, skd_d=2.5)
        rep = combined_loss(torch.tensor(2.0, dtype=torch.float64), terms, w)
        assert rep.l_kd.item() == pytest.approx(4.0)
        assert rep.total.item() == pytest.approx(3.0)

    def test_toggles(self):
        terms = self._terms(tkd_i=1.0, skd_i=10.0, tkd_s=100.0, skd_s=1000.0, tkd_d=1e4, skd_d=1e5)
        w = KDWeights(lambda_kd=1.0, enable_token={"i", "d"}, enable_sentence={"s"})
        rep = combined_loss(torch.tensor(0.0, dtype=torch.float64), terms, w)
        assert rep.l_kd.item() == pytest.approx(1.0 + 1000.0 + 1e4)

    def test_missing_active_term(self):
        with pytest.raises(LossError):
            combined_loss(torch.tensor(1.0), self._terms(tkd_i=1.0), KDWeights())

    def test_report_invariant_and_json(self):
        import json

        terms = self._terms(tkd_i=0.3, skd_i=0.2, tkd_s=1.1, skd_s=0.4, tkd_d=2.2, skd_d=1.9)
        w = KDWeights(lambda_kd=0.8, lambda_i=0.5, lambda_s=2.0, lambda_d=1.0)
        rep = combined_loss(torch.tensor(3.3, dtype=torch.float64), terms, w)
        f = rep.as_floats()
        assert abs(f["total"] - ((1 - 0.8) * f["l_timt"] + 0.8 * f["l_kd"])) < 1e-6
        line = json.loads(rep.to_json(epoch=1, step=4))
        assert line["epoch"] == 1 and set(line) >= {"total", "l_timt", "l_kd", "tkd_i", "skd_d"}

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_affine_in_lambda_kd(self, a, b, t):
        terms = self._terms(tkd_i=0.3, skd_i=0.2, tkd_s=1.1, skd_s=0.4, tkd_d=2.2, skd_d=1.9)
        l = torch.tensor(3.3, dtype=torch.float64)

        def total(lam):
            return combined_loss(l, terms, KDWeights(lambda_kd=lam)).total.item()

        mid = t * a + (1 - t) * b
        assert total(mid) == pytest.approx(t * total(a) + (1 - t) * total(b), abs=1e-9)

    @given(st.floats(0, 5), st.floats(0, 5))
    def test_affine_in_component_weight(self, a, b):
        terms = self._terms(tkd_i=0.3, skd_i=0.2, tkd_s=1.1, skd_s=0.4, tkd_d=2.2, skd_d=1.9)
        l = torch.tensor(3.3, dtype=torch.float64)

        def total(lam_s):
            return combined_loss(l, terms, KDWeights(lambda_s=lam_s)).total.item()

        assert total((a + b) / 2) == pytest.approx((total(a) + total(b)) / 2, abs=1e-9)

    @pytest.mark.parametrize(
        "kwargs", [dict(lambda_kd=1.5), dict(lambda_kd=-0.1), dict(lambda_i=-1.0), dict(lambda_s=float("inf")),
                   dict(enable_token={"x"})]
    )
    def test_invalid_weights(self, kwargs):
        with pytest.raises(LossError):
            KDWeights(**kwargs)

    def test_for_teachers(self):
        w = KDWeights.for_teachers("sd")
        assert (w.lambda_i, w.lambda_s, w.lambda_d) == (0.0, 1.0, 1.0)
        assert not w.needs("i") and w.needs("s") and w.needs("d")


# --- properties ---------------------------------------------------------------

feature_arrays = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 4)),
                        elements=st.floats(-10, 10))


@settings(max_examples=60, deadline=None)
@given(feature_arrays)
def test_identity_property(a):
    x = FeatureSeq(torch.from_numpy(a), torch.ones(a.shape[:2], dtype=torch.bool))
    assert token_kd_l2(x, x).item() == 0.0
    assert sentence_kd_l2(x, x).item() == 0.0


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_sentence_bounded_by_token_and_nonnegative(data):
    shape = data.draw(st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 4)))
    a = data.draw(arrays(np.float64, shape, elements=st.floats(-10, 10)))
    b = data.draw(arrays(np.float64, shape, elements=st.floats(-10, 10)))
    mask = torch.ones(shape[:2], dtype=torch.bool)
    s = FeatureSeq(torch.from_numpy(a), mask)
    t = FeatureSeq(torch.from_numpy(b), mask)
    tok, sen = token_kd_l2(s, t).item(), sentence_kd_l2(s, t).item()
    assert 0.0 <= sen <= tok + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_decoder_kd_bounded_below_by_teacher_entropy(data):
    shape = data.draw(st.tuples(st.integers(1, 2), st.integers(1, 4), st.integers(2, 6)))
    s = StepDistributions(torch.from_numpy(data.draw(arrays(np.float64, shape, elements=st.floats(-5, 5)))))
    t = StepDistributions(torch.from_numpy(data.draw(arrays(np.float64, shape, elements=st.floats(-5, 5)))))
    h = entropy(t).item()
    assert decoder_token_kd(s, t).item() >= h - 1e-9
    assert decoder_token_kd(t, t).item() == pytest.approx(h, abs=1e-9)
    assert ce_loss(s, torch.zeros(shape[:2], dtype=torch.long)).item() >= 0


# --- gradient oracle ------------------------------------------------------------


class TestGradientCheck:
    def test_quadratic(self):
        theta = torch.randn(10, dtype=torch.float64, requires_grad=True)
        err = gradient_check(lambda: 0.5 * (theta * theta).sum(), [theta], epsilon=1e-4)
        assert err < 1e-8

    def test_detects_wrong_gradient(self):
        theta = torch.randn(5, dtype=torch.float64, requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return (x**2).sum()

            @staticmethod
            def backward(ctx, g):
                (x,) = ctx.saved_tensors
                return g * x  # true gradient is 2x

        assert gradient_check(lambda: Wrong.apply(theta), [theta]) > 0.4

    def test_non_finite(self):
        theta = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
        with pytest.raises(LossError):
            gradient_check(lambda: torch.log(theta).sum(), [theta])

    def test_restores_parameters(self):
        theta = torch.randn(6, dtype=torch.float64, requires_grad=True)
        before = theta.detach().clone()
        gradient_check(lambda: (theta**3).sum(), [theta])
        assert torch.equal(theta.detach(), before)
