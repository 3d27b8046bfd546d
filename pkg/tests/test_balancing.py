"""Loss scalarization, Adam variants, weight ascent, and UPGrad aggregation."""

import math

import numpy as np
import pytest
import torch

from hamfit.balancing import (
    AdamState,
    LossVector,
    MTAdamState,
    WEIGHT_CAP,
    Weights,
    adam_step,
    gda_update,
    mtadam_step,
    total_loss,
    upgrad_aggregate,
)
from hamfit.surrogate import DTYPE

torch.set_num_threads(1)


def lv(neg_elbo=2.0, lyapunov=0.1, energy=0.2, volume=0.3):
    return LossVector(
        neg_elbo=torch.tensor(neg_elbo, dtype=DTYPE),
        lyapunov=torch.tensor(lyapunov, dtype=DTYPE),
        energy=torch.tensor(energy, dtype=DTYPE),
        volume=torch.tensor(volume, dtype=DTYPE),
    )


class TestLossVector:
    def test_coerces_floats(self):
        v = LossVector(neg_elbo=1.0, lyapunov=0.0, energy=0.0, volume=0.0)
        assert isinstance(v.neg_elbo, torch.Tensor)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="energy"):
            lv(energy=math.inf)
        with pytest.raises(ValueError, match="neg_elbo"):
            lv(neg_elbo=math.nan)

    def test_penalties_order(self):
        v = lv(lyapunov=1.0, energy=2.0, volume=3.0)
        assert [float(t) for t in v.penalties()] == [1.0, 2.0, 3.0]


class TestWeights:
    def test_defaults_equal(self):
        assert Weights().as_tuple() == (1.0, 1.0, 1.0)

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="lambda2"):
            Weights(lambda2=-0.5)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="lambda1"):
            Weights(lambda1=math.inf)


class TestTotalLoss:
    def test_zero_weights_reduce_to_neg_elbo(self):
        v = lv()
        out = total_loss(v, Weights(0.0, 0.0, 0.0))
        assert float(out) == pytest.approx(2.0, rel=1e-15)

    def test_equal_weights_example(self):
        out = total_loss(lv(), Weights(1.0, 1.0, 1.0))
        assert float(out) == pytest.approx(2.6, rel=1e-15)

    def test_linearity_in_weights(self):
        v = lv()
        for k, expect in [(0, 0.1), (1, 0.2), (2, 0.3)]:
            base = [1.0, 1.0, 1.0]
            bump = list(base)
            bump[k] += 1e-3
            fd = (float(total_loss(v, tuple(bump))) - float(total_loss(v, tuple(base)))) / 1e-3
            assert fd == pytest.approx(expect, rel=1e-9)

    def test_gradient_engine_sees_penalty_values(self):
        v = lv()
        lams = tuple(torch.tensor(1.0, dtype=DTYPE, requires_grad=True) for _ in range(3))
        out = total_loss(v, lams)
        grads = torch.autograd.grad(out, lams)
        assert [float(g) for g in grads] == [0.1, 0.2, 0.3]

    def test_accepts_weights_or_tuple(self):
        v = lv()
        assert float(total_loss(v, (0.5, 0.5, 0.5))) == pytest.approx(
            float(total_loss(v, Weights(0.5, 0.5, 0.5))), rel=1e-15
        )


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = {"x": torch.tensor([1.0, -2.0], dtype=DTYPE)}
        st = AdamState(lr=0.1)
        adam_step(st, p, {"x": torch.zeros(2, dtype=DTYPE)})
        assert torch.equal(p["x"], torch.tensor([1.0, -2.0], dtype=DTYPE))

    def test_missing_gradient_treated_as_zero(self):
        p = {"x": torch.tensor([1.0], dtype=DTYPE)}
        adam_step(AdamState(lr=0.1), p, {})
        assert float(p["x"]) == 1.0

    def test_first_step_magnitude_is_lr(self):
        for g in (1e-4, 1.0, 1e4):
            p = {"x": torch.tensor([0.0], dtype=DTYPE)}
            adam_step(AdamState(lr=1e-3), p, {"x": torch.tensor([g], dtype=DTYPE)})
            assert float(p["x"]) == pytest.approx(-1e-3, rel=1e-3)

    def test_descends_against_gradient_sign(self):
        p = {"x": torch.tensor([0.0, 0.0], dtype=DTYPE)}
        adam_step(AdamState(lr=0.01), p, {"x": torch.tensor([3.0, -3.0], dtype=DTYPE)})
        assert float(p["x"][0]) < 0 < float(p["x"][1])

    def test_deterministic(self):
        def run():
            torch.manual_seed(0)
            p = {"x": torch.randn(5, dtype=DTYPE)}
            st = AdamState(lr=0.05)
            for i in range(10):
                adam_step(st, p, {"x": torch.sin(p["x"] + i)})
            return p["x"]

        assert torch.equal(run(), run())

    def test_rejects_bad_lr(self):
        with pytest.raises(ValueError, match="lr"):
            AdamState(lr=0.0)

    def test_matches_torch_adam(self):
        torch.manual_seed(3)
        x_ref = torch.randn(4, dtype=DTYPE, requires_grad=True)
        x_own = {"x": x_ref.detach().clone()}
        opt = torch.optim.Adam([x_ref], lr=0.01)
        own = AdamState(lr=0.01)
        for _ in range(20):
            loss = ((x_ref - 2.0) ** 2).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            adam_step(own, x_own, {"x": 2.0 * (x_own["x"] - 2.0)})
        assert torch.allclose(x_ref.detach(), x_own["x"], atol=1e-10)


class TestGdaUpdate:
    def test_zero_penalties_keep_weights(self):
        w = gda_update(Weights(0.7, 0.8, 0.9), lv(lyapunov=0.0, energy=0.0, volume=0.0))
        assert w.as_tuple() == (0.7, 0.8, 0.9)

    def test_single_ascent_step(self):
        w = gda_update(Weights(1.0, 1.0, 1.0), lv(energy=0.5), lr2=1e-3)
        assert w.lambda2 == pytest.approx(1.0005, rel=1e-12)
        assert w.lambda1 == pytest.approx(1.0 + 1e-3 * 0.1, rel=1e-12)
        assert w.lambda3 == pytest.approx(1.0 + 1e-3 * 0.3, rel=1e-12)

    def test_floor_at_zero(self):
        w = gda_update(Weights(1.0, 1.0, 1.0), lv(lyapunov=-2.0), lr2=1.0)
        assert w.lambda1 == 0.0

    def test_cap_applies(self):
        w = gda_update(Weights(999.0, 1.0, 1.0), lv(lyapunov=10.0), lr2=1.0)
        assert w.lambda1 == WEIGHT_CAP

    def test_inactive_terms_frozen(self):
        w = gda_update(
            Weights(1.0, 1.0, 1.0), lv(), lr2=1.0, active=(False, True, False)
        )
        assert w.lambda1 == 1.0 and w.lambda3 == 1.0
        assert w.lambda2 == pytest.approx(1.2, rel=1e-12)

    def test_adam_mode_first_step_is_lr2(self):
        st = AdamState(lr=1e-3)
        w = gda_update(Weights(1.0, 1.0, 1.0), lv(energy=0.5), adam_state=st)
        # normalized first step ascends by ~lr regardless of the value
        assert w.lambda2 == pytest.approx(1.001, rel=1e-6)

    def test_adam_mode_state_persists(self):
        st = AdamState(lr=1e-3)
        w = Weights(1.0, 1.0, 1.0)
        for _ in range(5):
            w = gda_update(w, lv(energy=0.5), adam_state=st)
        assert st.step_count == 5
        assert w.lambda2 > 1.004  # five near-lr ascent steps


class TestMTAdam:
    def test_single_term_reduces_to_adam(self):
        g = {"x": torch.tensor([0.3, -0.7], dtype=DTYPE)}
        p1 = {"x": torch.tensor([1.0, 1.0], dtype=DTYPE)}
        p2 = {"x": torch.tensor([1.0, 1.0], dtype=DTYPE)}
        mtadam_step(MTAdamState(lr=0.01), {"all": ["x"]}, p1, [g])
        adam_step(AdamState(lr=0.01), p2, g)
        assert torch.allclose(p1["x"], p2["x"], atol=1e-12)

    def test_magnitude_normalization(self):
        # a second term 1000x larger contributes the same as an equal one
        g = torch.tensor([0.5, 0.5], dtype=DTYPE)
        p_big = {"x": torch.zeros(2, dtype=DTYPE)}
        p_eq = {"x": torch.zeros(2, dtype=DTYPE)}
        mtadam_step(
            MTAdamState(lr=0.01), {"all": ["x"]}, p_big, [{"x": g}, {"x": 1000.0 * g}]
        )
        mtadam_step(MTAdamState(lr=0.01), {"all": ["x"]}, p_eq, [{"x": g}, {"x": g}])
        assert torch.allclose(p_big["x"], p_eq["x"], atol=1e-6)

    def test_term_scale_invariance(self):
        g1 = torch.tensor([1.0, 0.0], dtype=DTYPE)
        g2 = torch.tensor([0.0, 1.0], dtype=DTYPE)
        p_a = {"x": torch.zeros(2, dtype=DTYPE)}
        p_b = {"x": torch.zeros(2, dtype=DTYPE)}
        mtadam_step(MTAdamState(lr=0.01), {"all": ["x"]}, p_a, [{"x": g1}, {"x": g2}])
        mtadam_step(MTAdamState(lr=0.01), {"all": ["x"]}, p_b, [{"x": g1}, {"x": 10 * g2}])
        assert torch.allclose(p_a["x"], p_b["x"], atol=1e-6)

    def test_groups_normalized_independently(self):
        # term 2 dwarfs term 1 in group y only; group x must be untouched by that
        grads = [
            {"x": torch.tensor([1.0], dtype=DTYPE), "y": torch.tensor([1.0], dtype=DTYPE)},
            {"x": torch.tensor([1.0], dtype=DTYPE), "y": torch.tensor([500.0], dtype=DTYPE)},
        ]
        p = {"x": torch.zeros(1, dtype=DTYPE), "y": torch.zeros(1, dtype=DTYPE)}
        mtadam_step(MTAdamState(lr=0.01), {"gx": ["x"], "gy": ["y"]}, p, grads)
        # both coordinates see two equal-magnitude contributions
        assert float(p["x"]) == pytest.approx(float(p["y"]), rel=1e-6)

    def test_missing_gradients_allowed(self):
        grads = [{"x": torch.tensor([1.0], dtype=DTYPE)}, {"x": None}]
        p = {"x": torch.zeros(1, dtype=DTYPE)}
        mtadam_step(MTAdamState(lr=0.01), {"all": ["x"]}, p, grads)
        assert float(p["x"]) != 0.0

    def test_empty_terms_rejected(self):
        with pytest.raises(ValueError, match="loss term"):
            mtadam_step(MTAdamState(), {"all": ["x"]}, {"x": torch.zeros(1, dtype=DTYPE)}, [])


class TestUpgrad:
    def test_identical_rows_pass_through(self):
        row = np.array([1.0, -2.0, 3.0])
        jac = np.stack([row, row])
        u = upgrad_aggregate(jac)
        np.testing.assert_allclose(u, row, atol=1e-10)

    def test_orthogonal_rows_average(self):
        jac = np.array([[1.0, 0.0], [0.0, 1.0]])
        u = upgrad_aggregate(jac)
        np.testing.assert_allclose(u, [0.5, 0.5], atol=1e-10)
        assert (jac @ u >= -1e-8).all()

    def test_opposing_rows_do_no_harm(self):
        jac = np.array([[1.0, 0.0], [-1.0, 0.0]])
        u = upgrad_aggregate(jac)
        assert (jac @ u >= -1e-8).all()
        np.testing.assert_allclose(u, [0.0, 0.0], atol=1e-8)

    def test_zero_jacobian_zero_direction(self):
        u = upgrad_aggregate(np.zeros((3, 4)))
        np.testing.assert_array_equal(u, np.zeros(4))

    def test_accepts_torch_input(self):
        jac = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=DTYPE)
        u = upgrad_aggregate(jac)
        np.testing.assert_allclose(u, [0.5, 0.5], atol=1e-10)

    def test_non_conflict_on_random_jacobians(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = rng.integers(2, 5)
            n = rng.integers(2, 20)
            jac = rng.normal(size=(k, n)) * rng.lognormal(sigma=2)
            u = upgrad_aggregate(jac)
            assert (jac @ u >= -1e-8 * max(1.0, np.abs(jac).max())).all()

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError, match="2-D"):
            upgrad_aggregate(np.zeros(3))
        with pytest.raises(ValueError, match="non-finite"):
            upgrad_aggregate(np.array([[np.nan, 0.0]]))
