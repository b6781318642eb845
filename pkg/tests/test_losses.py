import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairdolce import nn
from fairdolce.core import DataPoint, DualState, init_params
from fairdolce.losses import (
    FairnessMode,
    Model,
    cls_and_fair_losses,
    cross_entropy,
    fairness_from_scores,
    fairness_notion,
    fairness_weights,
    invariance,
    invariance_loss,
    recon_doublet,
    recon_loss_doublet,
    recon_loss_quartet,
    recon_quartet,
    scores,
    total_loss,
)

import gradcheck
import oracles


def quartet(rng, d, e=0, e2=1, y=0, y2=1):
    return (
        DataPoint(rng.standard_normal(d), 1, y, e),
        DataPoint(rng.standard_normal(d), -1, y2, e),
        DataPoint(rng.standard_normal(d), 1, y, e2),
        DataPoint(rng.standard_normal(d), -1, y2, e2),
    )


class TestAgainstLoopOracle:
    def test_recon_and_invariance_values(self, rng):
        p = init_params(5, 3, 2, seed=7, hidden=(4,))
        stack = oracles.Stack(p)
        qs = [quartet(rng, 5) for _ in range(4)]
        cols = [np.stack([q[i].features for q in qs]) for i in range(4)]
        y = np.array([q[0].label for q in qs])
        y2 = np.array([q[1].label for q in qs])
        model = Model(nn.Tape(), p)
        expected_rq = np.mean([oracles.recon_quartet(stack, *(r.features for r in q)) for q in qs])
        expected_rd = np.mean([oracles.recon_doublet(stack, q[0].features, q[1].features) for q in qs])
        expected_inv = np.mean([oracles.invariance(stack, *(r.features for r in q), q[0].label, q[1].label)
                                for q in qs])
        assert float(recon_quartet(model, *cols).value) == pytest.approx(expected_rq, rel=1e-12)
        assert float(recon_doublet(model, cols[0], cols[1]).value) == pytest.approx(expected_rd, rel=1e-12)
        assert float(invariance(model, *cols, y, y2).value) == pytest.approx(expected_inv, rel=1e-12)

    def test_numeric_wrappers(self, rng):
        p = init_params(4, 2, 2, seed=1)
        stack = oracles.Stack(p)
        q = quartet(rng, 4)
        f = [r.features for r in q]
        assert recon_loss_quartet(q, p) == pytest.approx(oracles.recon_quartet(stack, *f), rel=1e-12)
        assert recon_loss_doublet(q[:2], p) == pytest.approx(oracles.recon_doublet(stack, f[0], f[1]), rel=1e-12)
        assert invariance_loss(q, p) == pytest.approx(
            oracles.invariance(stack, *f, q[0].label, q[1].label), rel=1e-12)

    def test_cls_and_fair(self, rng):
        p = init_params(4, 3, 2, seed=2)
        stack = oracles.Stack(p)
        batch = [DataPoint(rng.standard_normal(4), int(z), int(y), 0)
                 for z, y in zip([1, -1, 1, -1, 1, 1], [0, 1, 1, 0, 1, 0])]
        sc = [stack.score(stack.hs(b.features)) for b in batch]
        cls, fair = cls_and_fair_losses(batch, p)
        assert cls == pytest.approx(np.mean([oracles.ce(s, b.label) for s, b in zip(sc, batch)]), rel=1e-12)
        assert fair == pytest.approx(oracles.fairness_ddp(sc, [b.sensitive for b in batch]), rel=1e-10)
        _, fair_deo = cls_and_fair_losses(batch, p, FairnessMode.DEO)
        assert fair_deo == pytest.approx(
            oracles.fairness_deo(sc, [b.sensitive for b in batch], [b.label for b in batch]), rel=1e-10)

    def test_no_variation_uses_zero_factor(self, rng):
        p = init_params(4, 2, 3, seed=5)
        x1, x2 = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        model = Model(nn.Tape(), p, use_variation=False)
        expected = oracles.recon_doublet(oracles.Stack(p, use_variation=False), x1[0], x2[0])
        assert float(recon_doublet(model, x1, x2).value) == pytest.approx(expected, rel=1e-12)


class TestReconstruction:
    def test_perfect_decoder_gives_zero(self):
        # identity encoders into s, zero v, decoder reading s back
        d = 3
        eye = nn.DenseBlock((nn.Layer(np.eye(d), np.zeros(d), "identity"),))
        var = nn.DenseBlock((nn.Layer(np.zeros((d, 2)), np.zeros(2), "identity"),))
        dec_w = np.vstack([np.eye(d), np.zeros((2, d))])
        dec = nn.DenseBlock((nn.Layer(dec_w, np.zeros(d), "identity"),))
        clf = nn.DenseBlock((nn.Layer(np.zeros((d, 1)), np.zeros(1), "sigmoid"),))
        from fairdolce.core import ModelParams

        p = ModelParams(eye, var, dec, clf)
        rng = np.random.default_rng(0)
        q = quartet(rng, d)
        assert recon_loss_quartet(q, p) == 0.0
        assert recon_loss_doublet(q[:2], p) == 0.0

    def test_environment_checks(self, rng):
        p = init_params(3, 2, 2, seed=0)
        a, b, c, d = quartet(rng, 3)
        with pytest.raises(ValueError):
            recon_loss_quartet((a, c, b, d), p)
        with pytest.raises(ValueError):
            recon_loss_doublet((a, c), p)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        p = init_params(4, 2, 2, seed=seed)
        q = quartet(rng, 4)
        assert recon_loss_quartet(q, p) >= 0
        assert invariance_loss(q, p) >= 0


class TestFairness:
    def test_identical_scores_give_zero(self):
        z = np.array([1, -1, 1, -1, -1])
        g, degenerate = fairness_from_scores(np.full(5, 0.37), z, np.ones(5, dtype=int))
        assert abs(g) < 1e-15 and not degenerate

    def test_single_group_is_degenerate(self):
        g, degenerate = fairness_from_scores(np.array([0.2, 0.9]), np.array([1, 1]), np.array([0, 1]))
        assert g == 0.0 and degenerate

    def test_deo_without_positives_is_degenerate(self):
        _, degenerate = fairness_from_scores(np.array([0.2, 0.9]), np.array([1, -1]), np.array([0, 0]),
                                             FairnessMode.DEO)
        assert degenerate

    def test_frozen_example(self):
        # p1 = 1/2, weights (+-1/2)/(1/4)/4 = +-1/2: g = (0.9 + 0.7 - 0.2 - 0.4) / 2
        g, _ = fairness_from_scores(np.array([0.9, 0.2, 0.7, 0.4]), np.array([1, -1, 1, -1]),
                                    np.array([1, 0, 1, 0]))
        assert g == pytest.approx(0.5, abs=1e-15)

    def test_sign_tracks_favoured_group(self):
        z = np.array([1, 1, -1, -1])
        assert fairness_from_scores(np.array([0.9, 0.8, 0.1, 0.2]), z, z * 0)[0] > 0
        assert fairness_from_scores(np.array([0.1, 0.2, 0.9, 0.8]), z, z * 0)[0] < 0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from([-1, 1]), st.sampled_from([0, 1])),
                    min_size=1, max_size=16))
    def test_matches_transcription(self, rows):
        sc = np.array([r[0] for r in rows])
        z = np.array([r[1] for r in rows])
        y = np.array([r[2] for r in rows])
        assert fairness_from_scores(sc, z, y)[0] == pytest.approx(oracles.fairness_ddp(sc, z), abs=1e-10)
        assert fairness_from_scores(sc, z, y, FairnessMode.DEO)[0] == pytest.approx(
            oracles.fairness_deo(sc, z, y), abs=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from([-1, 1]), min_size=2, max_size=16))
    def test_weights_sum_to_zero(self, z):
        w, degenerate = fairness_weights(np.array(z), np.ones(len(z), dtype=int), FairnessMode.DDP)
        assert abs(w.sum()) < 1e-12

    def test_notion_from_batch(self, rng):
        p = init_params(3, 2, 2, seed=8)
        batch = [DataPoint(rng.standard_normal(3), z, 1, 0) for z in (1, -1, 1)]
        X = np.stack([b.features for b in batch])
        g, _ = fairness_notion(batch, p)
        assert g == pytest.approx(oracles.fairness_ddp(list(scores(p, X)), [1, -1, 1]), rel=1e-12)
        with pytest.raises(ValueError):
            fairness_notion([], p)


class TestTotal:
    def test_frozen_example(self):
        duals = DualState(1.0, 1.0, 1.0, 0.05, 0.05, 0.05)
        assert total_loss(0.2, 0.3, 1.0, 0.1, duals) == pytest.approx(1.45, abs=1e-12)

    def test_zero_duals_reduce_to_cls(self):
        assert total_loss(5.0, 7.0, 0.8, 3.0, DualState(0.0, 0.0, 0.0)) == 0.8

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 10), st.floats(0.01, 2))
    def test_affine_in_lambda(self, losses, lam, delta):
        recon, inv, cls, fair = losses
        base = DualState(lam, 0.3, 0.7, 0.05, 0.05, 0.05)
        moved = DualState(lam + delta, 0.3, 0.7, 0.05, 0.05, 0.05)
        slope = (total_loss(recon, inv, cls, fair, moved) - total_loss(recon, inv, cls, fair, base)) / delta
        assert slope == pytest.approx(fair - 0.05, abs=1e-8)


def test_cross_entropy_clamped():
    assert cross_entropy(0.0, 1) == pytest.approx(-np.log(1e-12))
    assert cross_entropy(1.0, 1) == pytest.approx(0.0, abs=1e-11)
    assert cross_entropy(0.5, 0) == pytest.approx(np.log(2))


def test_gradients_match_finite_differences():
    worst, counts = gradcheck.run_suite(8, seed=11)
    assert min(counts.values()) == 8
    assert max(worst.values()) < 1e-4, worst
