import numpy as np
import pytest

from cddet import diffcore as dc
from cddet import losses as ls
from cddet.errors import ConfigError, ContractError, ProtocolError
from cddet.losses import AGG_RULES, Batch, LossWeights
from cddet.model import BC, FAKE, LINFC, MC, MT, REAL, Model


class TestMulticlassCE:
    def test_uniform_logits(self):
        logits = dc.Tensor(np.zeros((3, 4)))
        assert ls.multiclass_ce(logits, [0, 1, 2]).item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_closed_form(self):
        loss = ls.multiclass_ce(dc.Tensor([[2.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(np.log(1.0 + np.exp(-2.0)), abs=1e-12)
        assert round(loss.item(), 4) == 0.1269

    def test_confident_target_is_zero(self):
        loss = ls.multiclass_ce(dc.Tensor([[80.0, 0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_out_of_range_target(self):
        with pytest.raises(ContractError):
            ls.multiclass_ce(dc.Tensor(np.zeros((2, 3))), [0, 3])

    def test_soft_rows_match_hard_targets(self):
        rng = np.random.default_rng(0)
        logits = dc.Tensor(rng.normal(size=(5, 4)))
        hard = rng.integers(0, 4, size=5)
        rows = np.eye(4)[hard]
        a = ls.multiclass_ce(logits, hard).item()
        b = ls.multiclass_ce(logits, rows).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestBinaryCE:
    def test_zero_logit(self):
        loss = ls.binary_ce(dc.Tensor([[0.0], [0.0]]), [0, 1])
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_closed_form(self):
        loss = ls.binary_ce(dc.Tensor([1.0]), [1])
        assert loss.item() == pytest.approx(np.log(1.0 + np.exp(-1.0)), abs=1e-12)
        assert round(loss.item(), 4) == 0.3133

    def test_saturated_limit(self):
        assert ls.binary_ce(dc.Tensor([50.0]), [1]).item() <= 1e-12

    def test_rejects_non_binary_targets(self):
        with pytest.raises(ContractError):
            ls.binary_ce(dc.Tensor([0.0]), [0.5])


class TestKdKl:
    def test_identical_logits_zero(self):
        z = np.array([[0.4, -1.2, 2.0], [0.0, 0.5, -0.5]])
        loss = ls.kd_kl(z, dc.Tensor(z), T=1.0, class_mask=np.ones(3, dtype=bool))
        assert loss.item() == 0.0

    def test_two_class_closed_form(self):
        loss = ls.kd_kl(np.array([[1.0, 0.0]]), dc.Tensor([[0.0, 1.0]]), 1.0, np.ones(2, dtype=bool))
        p = dc.np_sigmoid(np.array([1.0]))[0]
        expected = (p - (1 - p)) * 1.0  # (p - q) * logit gap = 2*sigmoid(1) - 1
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert loss.item() == pytest.approx(0.46212, abs=5e-6)

    def test_temperature_scaling_keeps_zero_at_equality(self):
        z = np.array([[3.0, -1.0]])
        for t in (1.0, 2.0, 4.0):
            assert ls.kd_kl(z, dc.Tensor(z), t, np.ones(2, dtype=bool)).item() == 0.0

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            old = rng.normal(size=(4, 5))
            new = rng.normal(size=(4, 5))
            val = ls.kd_kl(old, dc.Tensor(new), 2.0, np.ones(5, dtype=bool)).item()
            assert val >= -1e-15
            if not np.allclose(dc.np_softmax(old / 2.0, 1), dc.np_softmax(new / 2.0, 1)):
                assert val > 1e-10

    def test_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            ls.kd_kl(np.zeros((1, 2)), dc.Tensor(np.zeros((1, 2))), 1.0, np.zeros(2, dtype=bool))

    def test_binary_mask_mode(self):
        z = np.array([[0.7], [-0.3]])
        assert ls.kd_kl(z, dc.Tensor(z), 1.0, np.array([True])).item() == 0.0
        moved = ls.kd_kl(z, dc.Tensor(z + 1.0), 1.0, np.array([True])).item()
        assert moved > 0


class TestKdFeature:
    def test_identical(self):
        f = np.random.default_rng(2).normal(size=(3, 4))
        assert ls.kd_feature(f, dc.Tensor(f)).item() == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        old = np.array([[1.0, 0.0]])
        new = np.array([[0.0, 1.0]])
        assert ls.kd_feature(old, dc.Tensor(new)).item() == pytest.approx(1.0)

    def test_opposite(self):
        old = np.array([[1.0, 2.0]])
        assert ls.kd_feature(old, dc.Tensor(-old)).item() == pytest.approx(2.0)


def _embeddings_with_cosines(target_cos, rival_cosines):
    """Unit feature [1,0,...]; embeddings with prescribed cosines against it."""
    dim = 2 + len(rival_cosines)
    rows = []
    for j, c in enumerate([target_cos] + list(rival_cosines)):
        row = np.zeros(dim)
        row[0] = c
        row[1 + j] = np.sqrt(1.0 - c * c)
        rows.append(row)
    features = np.zeros((1, dim))
    features[0, 0] = 1.0
    return dc.Tensor(features), dc.Tensor(np.array(rows))


class TestMarginRanking:
    def test_satisfied_margin(self):
        feats, emb = _embeddings_with_cosines(1.0, [0.7])
        loss = ls.margin_ranking(feats, emb, [0], tau=0.2, J=1)
        assert loss.item() == 0.0

    def test_hinge_arithmetic(self):
        feats, emb = _embeddings_with_cosines(0.5, [0.6, 0.4])
        loss = ls.margin_ranking(feats, emb, [0], tau=0.2, J=2)
        assert loss.item() == pytest.approx(0.3 + 0.1, abs=1e-12)

    def test_j_zero(self):
        feats, emb = _embeddings_with_cosines(0.5, [0.6])
        assert ls.margin_ranking(feats, emb, [0], tau=0.2, J=0).item() == 0.0

    def test_j_too_large(self):
        feats, emb = _embeddings_with_cosines(0.5, [0.6])
        with pytest.raises(ContractError):
            ls.margin_ranking(feats, emb, [0], tau=0.2, J=2)


class TestAggregate:
    def test_given_distribution(self):
        # class layout: real, fakeA, fakeB with activations 0.2, 0.5, 0.3
        acts = np.array([0.2, 0.5, 0.3])
        logits = np.log(acts)
        polarities = np.array([REAL, FAKE, FAKE])
        d_f, _ = ls.aggregate(logits, acts, polarities, "sumlog")
        assert d_f == pytest.approx(np.log(0.5) + np.log(0.3), abs=1e-9)
        assert round(d_f, 4) == -1.8971
        d_f, _ = ls.aggregate(logits, acts, polarities, "sumlogit")
        assert d_f == pytest.approx(np.log(0.8), abs=1e-9)
        d_f, _ = ls.aggregate(logits, acts, polarities, "max")
        assert d_f == pytest.approx(np.log(0.5), abs=1e-9)

    def test_single_pair_coincidence(self):
        rng = np.random.default_rng(3)
        polarities = np.array([REAL, FAKE])
        for _ in range(100):
            logits = rng.normal(size=2)
            acts = dc.np_softmax(logits)
            results = [ls.aggregate(logits, acts, polarities, rule) for rule in AGG_RULES]
            for d_f, d_r in results[1:]:
                assert d_f == pytest.approx(results[0][0], abs=1e-12)
                assert d_r == pytest.approx(results[0][1], abs=1e-12)

    def test_sumlogit_partition_of_unity(self):
        rng = np.random.default_rng(4)
        polarities = np.array([REAL, FAKE, REAL, FAKE, FAKE])
        for _ in range(100):
            logits = rng.normal(size=5)
            acts = dc.np_softmax(logits)
            d_f, d_r = ls.aggregate(logits, acts, polarities, "sumlogit")
            assert np.exp(d_f) + np.exp(d_r) == pytest.approx(1.0, abs=1e-12)

    def test_single_polarity_rejected(self):
        with pytest.raises(ContractError):
            ls.aggregate(np.zeros(2), np.full(2, 0.5), np.array([FAKE, FAKE]), "max")


class TestMtClassLoss:
    def _setup(self, seed=5, n=6, k=4):
        rng = np.random.default_rng(seed)
        logits = dc.Tensor(rng.normal(size=(n, k)))
        targets = rng.integers(0, k, size=n)
        polarities = np.array([REAL, FAKE, REAL, FAKE])
        return logits, targets, polarities

    def test_lambda_zero_equals_ce(self):
        logits, targets, pol = self._setup()
        mt = ls.mt_class_loss(logits, dc.softmax(logits, 1), targets, pol, 0.0, "sumlogit")
        ce = ls.multiclass_ce(logits, targets)
        assert mt.item() == ce.item()

    def test_lambda_one_is_pure_binary_term(self):
        logits, targets, pol = self._setup()
        acts = dc.softmax(logits, 1)
        mt = ls.mt_class_loss(logits, acts, targets, pol, 1.0, "sumlogit")
        d_f, d_r = ls.aggregate_batch(logits, acts, np.asarray(pol) == FAKE, "sumlogit")
        w = (np.asarray(pol) == FAKE)[targets].astype(float)
        expected = -np.mean(w * d_f.data + (1 - w) * d_r.data)
        assert mt.item() == pytest.approx(expected, abs=1e-12)

    def test_default_lambda_is_benchmark_value(self):
        assert LossWeights().lam == 0.3


class TestLabelSmooth:
    def test_eps_zero_identity(self):
        rows = ls.label_smooth([2], 4, 0.0)
        np.testing.assert_array_equal(rows, [[0, 0, 1, 0]])

    def test_arithmetic(self):
        rows = ls.label_smooth([0], 4, 0.1)
        np.testing.assert_allclose(rows[0], [0.925, 0.025, 0.025, 0.025], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            eps = rng.uniform(0, 0.99)
            rows = ls.label_smooth(rng.integers(0, 5, size=8), 5, eps)
            np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)


class TestMixup:
    def test_identity_coefficient(self):
        x, y = ls.mix_pairs(np.array([[1.0]]), np.array([[1.0, 0.0]]), np.array([[5.0]]), np.array([[0.0, 1.0]]), 1.0)
        np.testing.assert_array_equal(x, [[1.0]])
        np.testing.assert_array_equal(y, [[1.0, 0.0]])

    def test_midpoint(self):
        x, _ = ls.mix_pairs(np.array([[0.0]]), np.array([[1.0, 0.0]]), np.array([[2.0]]), np.array([[0.0, 1.0]]), 0.5)
        np.testing.assert_array_equal(x, [[1.0]])

    def test_mixed_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        ya = np.eye(4)[rng.integers(0, 4, size=6)]
        yb = np.eye(4)[rng.integers(0, 4, size=6)]
        (_, y), lam = ls.mixup((rng.normal(size=(6, 3)), ya), (rng.normal(size=(6, 3)), yb), 0.4, rng)
        assert 0.0 <= lam <= 1.0
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            ls.mix_pairs(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((3, 2)), 0.5)


def _small_model(variant=LINFC, tasks=2, seed=0, d=5):
    rng = np.random.default_rng(seed)
    model = Model.build(d, variant, rng, hidden=(6,), feature_width=4)
    for t in range(1, tasks + 1):
        if variant == "sigmoid":
            model.head.register_task(t)
        else:
            model.head.expand(t)
    return model


def _session_batch(rng, model, task, n=6):
    d = model.extractor.input_width
    x = rng.normal(size=(n, d))
    polarity = rng.integers(0, 2, size=n)
    classes = np.array([model.head.registry.class_of(task, p) for p in polarity])
    return Batch(x=x, classes=classes, polarity=polarity)


class TestTotalLoss:
    def test_bare_classification_bit_identity(self):
        rng = np.random.default_rng(8)
        model = _small_model()
        batch = _session_batch(rng, model, task=2)
        w = LossWeights(gamma_d=0.0, gamma_m=0.0)
        combined = ls.total_loss(MC, batch, None, model, None, w)
        _, logits = model.forward(batch.x)
        bare = ls.multiclass_ce(logits, batch.classes)
        assert combined.item() == bare.item()

    def test_missing_snapshot_protocol_error(self):
        rng = np.random.default_rng(9)
        model = _small_model()
        batch = _session_batch(rng, model, task=2)
        with pytest.raises(ProtocolError):
            ls.total_loss(MC, batch, None, model, None, LossWeights(gamma_d=1.0))

    def test_replay_only_profile_is_classification_over_union(self):
        rng = np.random.default_rng(10)
        model = _small_model()
        new = _session_batch(rng, model, task=2, n=4)
        ex = _session_batch(rng, model, task=1, n=3)
        w = LossWeights(gamma_d=0.0, gamma_m=0.0)
        combined = ls.total_loss(MC, new, ex, model, None, w)
        _, logits = model.forward(np.concatenate([new.x, ex.x]))
        bare = ls.multiclass_ce(logits, np.concatenate([new.classes, ex.classes]))
        assert combined.item() == bare.item()

    def test_distillation_profile_composes(self):
        rng = np.random.default_rng(11)
        model = _small_model()
        model.sessions_trained = 1
        snap = model.snapshot()
        # nudge the live model so distillation is non-zero
        for p in model.parameters():
            p.data = p.data + 0.05 * rng.normal(size=p.data.shape)
        new = _session_batch(rng, model, task=2, n=4)
        ex = _session_batch(rng, model, task=1, n=3)
        base = ls.total_loss(MC, new, ex, model, snap, LossWeights()).item()
        with_kd = ls.total_loss(MC, new, ex, model, snap, LossWeights(gamma_d=1.0)).item()
        assert with_kd > base

    def test_mt_lambda_zero_gradients_match_mc(self):
        rng = np.random.default_rng(12)
        model = _small_model()
        model.sessions_trained = 1
        snap = model.snapshot()
        new = _session_batch(rng, model, task=2, n=5)
        ex = _session_batch(rng, model, task=1, n=3)
        w = LossWeights(gamma_d=0.5, lam=0.0)

        def grads_for(system, rule):
            for p in model.parameters():
                p.zero_grad()
            loss = ls.total_loss(system, new, ex, model, snap, w, rule=rule)
            loss.backward()
            return [None if p.grad is None else p.grad.copy() for p in model.parameters()]

        g_mc = grads_for(MC, None)
        g_mt = grads_for(MT, "sumlogit")
        for a, b in zip(g_mc, g_mt):
            if a is None:
                assert b is None
            else:
                np.testing.assert_allclose(a, b, atol=1e-12)

    def test_latent_exemplar_rows(self):
        rng = np.random.default_rng(13)
        model = _small_model()
        model.sessions_trained = 1
        snap = model.snapshot()
        new = _session_batch(rng, model, task=2, n=4)
        lat = rng.normal(size=(3, model.extractor.latent_width))
        pol = rng.integers(0, 2, size=3)
        classes = np.array([model.head.registry.class_of(1, p) for p in pol])
        ex = Batch(latents=lat, classes=classes, polarity=pol)
        loss = ls.total_loss(MC, new, ex, model, snap, LossWeights(gamma_d=0.3))
        assert np.isfinite(loss.item())


def _smooth_margin_setup(rng, tau=0.2, J=2):
    """Random margin configuration kept away from hinge kinks and rank ties."""
    while True:
        feats = rng.normal(size=(3, 6))
        emb = rng.normal(size=(5, 6))
        targets = rng.integers(0, 5, size=3)
        fn = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        en = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        sims = fn @ en.T
        ok = True
        for i in range(3):
            order = np.argsort(-sims[i], kind="stable")
            rivals = order[order != targets[i]]
            gaps = np.abs(tau - sims[i, targets[i]] + sims[i, rivals[:J]])
            if gaps.min() < 0.05 or abs(sims[i, rivals[J - 1]] - sims[i, rivals[J]]) < 0.05:
                ok = False
                break
        if ok:
            return feats, emb, targets


class TestLossGradients:
    """Every loss against central finite differences at 50 random smooth points."""

    def test_multiclass_ce(self):
        rng = np.random.default_rng(20)
        for _ in range(50):
            targets = rng.integers(0, 5, size=4)
            f = lambda z: ls.multiclass_ce(z, targets)
            assert dc.grad_check(f, dc.Tensor(rng.normal(size=(4, 5)))) < 1e-6

    def test_binary_ce(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            targets = rng.integers(0, 2, size=6)
            f = lambda z: ls.binary_ce(z, targets)
            assert dc.grad_check(f, dc.Tensor(rng.normal(size=(6, 1)))) < 1e-6

    def test_kd_kl(self):
        rng = np.random.default_rng(22)
        mask = np.array([True, True, True, False, False])
        for _ in range(50):
            old = rng.normal(size=(3, 3))
            f = lambda z: ls.kd_kl(old, z, 2.0, mask)
            assert dc.grad_check(f, dc.Tensor(rng.normal(size=(3, 5)))) < 1e-6

    def test_kd_kl_binary(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            old = rng.normal(size=(4, 1))
            f = lambda z: ls.kd_kl(old, z, 1.0, np.array([True]))
            assert dc.grad_check(f, dc.Tensor(rng.normal(size=(4, 1)))) < 1e-6

    def test_kd_feature(self):
        rng = np.random.default_rng(24)
        for _ in range(50):
            old = rng.normal(size=(3, 4))
            f = lambda z: ls.kd_feature(old, z)
            assert dc.grad_check(f, dc.Tensor(rng.normal(size=(3, 4)))) < 1e-6

    def test_margin_ranking(self):
        rng = np.random.default_rng(25)
        for _ in range(50):
            feats, emb, targets = _smooth_margin_setup(rng)
            emb_t = dc.Tensor(emb)
            f = lambda z: ls.margin_ranking(z, emb_t, targets, 0.2, 2)
            assert dc.grad_check(f, dc.Tensor(feats)) < 1e-6

    @pytest.mark.parametrize("rule", AGG_RULES)
    def test_mt_class_loss(self, rule):
        rng = np.random.default_rng(26)
        pol = np.array([REAL, FAKE, REAL, FAKE])
        for _ in range(50):
            targets = rng.integers(0, 4, size=3)

            def f(z):
                return ls.mt_class_loss(z, dc.softmax(z, 1), targets, pol, 0.3, rule)

            assert dc.grad_check(f, dc.Tensor(rng.normal(size=(3, 4)))) < 1e-6

    def test_total_loss_composition(self):
        # linear extractor avoids relu kinks; checks the full chain rule
        rng = np.random.default_rng(27)
        model = Model.build(4, LINFC, rng, hidden=(), feature_width=4)
        model.head.expand(1)
        model.head.expand(2)
        model.sessions_trained = 1
        snap = model.snapshot()
        new = Batch(
            x=rng.normal(size=(3, 4)),
            classes=np.array([2, 3, 2]),
            polarity=np.array([0, 1, 0]),
        )
        ex = Batch(
            x=rng.normal(size=(2, 4)),
            classes=np.array([0, 1]),
            polarity=np.array([0, 1]),
        )
        w = LossWeights(gamma_d=0.5, gamma_m=0.0)

        def f(probe):
            saved = model.extractor.weights[0]
            model.extractor.weights[0] = probe
            try:
                return ls.total_loss(MC, new, ex, model, snap, w, distill_form="logit+feature")
            finally:
                model.extractor.weights[0] = saved

        assert dc.grad_check(f, dc.Tensor(model.extractor.weights[0].data.copy())) < 1e-6
