"""The scikit-learn estimator facade: fit/predict semantics, parameter
handling, and agreement between score orientations."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError as SkNotFittedError
from sklearn.pipeline import Pipeline
from sklearn.preprocessing import StandardScaler

from grood.detector import GroodDetector, variant_scores
from grood.errors import ValidationError
from grood.synth import simplex_etf


def clustered_data(rng, num_classes=5, dim=12, n_per_class=60, scale=4.0, sigma=0.2):
    protos = simplex_etf(num_classes, dim, scale)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    feats = protos[labels] + rng.normal(scale=sigma, size=(labels.size, dim))
    return feats, labels, protos


@pytest.fixture
def fitted():
    rng = np.random.default_rng(0)
    X, y, protos = clustered_data(rng)
    det = GroodDetector(strategy="mean_of_prototypes", seed=0).fit(X, y)
    far = rng.normal(size=(40, 12)) + 30.0
    return det, X, y, far


class TestFit:
    def test_training_rows_score_zero(self, fitted):
        det, X, _, _ = fitted
        np.testing.assert_array_equal(det.ood_scores(X), np.zeros(len(X)))

    def test_far_points_score_higher_than_id(self, fitted):
        det, X, _, far = fitted
        rng = np.random.default_rng(1)
        id_like = X[:40] + rng.normal(scale=0.05, size=(40, 12))
        assert det.ood_scores(far).min() > det.ood_scores(id_like).max()

    def test_predict_signs(self, fitted):
        det, X, _, far = fitted
        assert set(det.predict(far)) == {-1}
        rng = np.random.default_rng(2)
        id_like = X[:40] + rng.normal(scale=0.02, size=(40, 12))
        assert np.mean(det.predict(id_like) == 1) > 0.8

    def test_threshold_honors_target_tpr_on_train(self):
        rng = np.random.default_rng(3)
        X, y, _ = clustered_data(rng)
        det = GroodDetector(strategy="mean_of_prototypes", target_tpr=0.9,
                            seed=0).fit(X, y)
        # calibration used self-excluded scores; plain train scores are 0
        assert det.threshold_ > 0

    def test_boundary_score_is_inlier(self, fitted):
        det, _, _, _ = fitted
        assert det.threshold_ == -det.offset_

    def test_noncontiguous_labels_are_encoded(self):
        rng = np.random.default_rng(4)
        X, y, _ = clustered_data(rng, num_classes=3)
        relabeled = np.array([10, 20, 30])[y]
        det = GroodDetector(strategy="mean_of_prototypes", seed=0).fit(X, relabeled)
        np.testing.assert_array_equal(det.classes_, [10, 20, 30])

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValidationError):
            GroodDetector(strategy="nope").fit(np.eye(4), [0, 0, 1, 1])


class TestScoreOrientations:
    def test_score_samples_is_negated_ood_scores(self, fitted):
        det, _, _, far = fitted
        np.testing.assert_array_equal(det.score_samples(far), -det.ood_scores(far))

    def test_decision_function_zero_at_threshold(self, fitted):
        det, _, _, far = fitted
        decision = det.decision_function(far)
        scores = det.ood_scores(far)
        np.testing.assert_allclose(decision, det.threshold_ - scores, atol=1e-12)

    def test_predict_matches_decision_sign(self, fitted):
        det, X, _, far = fitted
        queries = np.vstack([X[:10], far])
        np.testing.assert_array_equal(
            det.predict(queries), np.where(det.decision_function(queries) >= 0, 1, -1))


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        det = GroodDetector(nlist=32, k=2, variant="gradient_l1_norm")
        params = det.get_params()
        other = GroodDetector().set_params(**params)
        assert other.get_params() == params

    def test_clone(self):
        det = GroodDetector(strategy="mean_of_prototypes", k=3)
        cloned = clone(det)
        assert cloned.get_params() == det.get_params()

    def test_unfitted_raises(self):
        with pytest.raises((SkNotFittedError, AttributeError)):
            GroodDetector().ood_scores(np.eye(3))

    def test_composes_in_pipeline(self):
        rng = np.random.default_rng(5)
        X, y, _ = clustered_data(rng)
        pipe = Pipeline([
            ("scale", StandardScaler()),
            ("det", GroodDetector(strategy="mean_of_prototypes", seed=0)),
        ])
        pipe.fit(X, y)
        preds = pipe.predict(rng.normal(size=(10, 12)) + 40.0)
        assert set(preds) == {-1}

    def test_calibrate_overrides_threshold(self, fitted):
        det, _, _, far = fitted
        held_out = np.linspace(0.0, 1.0, 100)
        det.calibrate(held_out)
        assert det.threshold_ == pytest.approx(0.95, abs=0.011)


class TestVariants:
    @pytest.mark.parametrize("variant", ["grood", "distance_to_ood_prototype",
                                         "gradient_l1_norm",
                                         "grads_wrt_class_prototypes"])
    def test_variants_fit_and_separate_far_ood(self, variant):
        rng = np.random.default_rng(6)
        X, y, protos = clustered_data(rng)
        det = GroodDetector(strategy="mean_of_prototypes", variant=variant,
                            seed=0).fit(X, y)
        # OOD cloud near the OOD prototype: every variant must flag it.
        ood = det.model_.ood_prototype + rng.normal(scale=0.05, size=(50, 12))
        id_like = X[:50] + rng.normal(scale=0.05, size=(50, 12))
        from grood.metrics import auroc

        assert auroc(det.ood_scores(id_like), det.ood_scores(ood)) == 1.0

    def test_distance_variant_is_negated_distance(self):
        rng = np.random.default_rng(7)
        X, y, _ = clustered_data(rng)
        det = GroodDetector(strategy="mean_of_prototypes",
                            variant="distance_to_ood_prototype", seed=0).fit(X, y)
        q = rng.normal(size=(5, 12))
        expected = -np.linalg.norm(q - det.model_.ood_prototype, axis=1)
        np.testing.assert_allclose(det.ood_scores(q), expected, atol=1e-12)

    def test_l1_variant_hand_arithmetic(self):
        # 2-d case checked by hand: the gradient is p_ood * unit(h - p_ood),
        # so its L1 norm is p_ood * (|dx| + |dy|) / ||d||. Two classes,
        # since a one-class prototype mean would equal the prototype.
        X2 = np.array([[0.0, 4.0], [0.0, 4.2], [2.0, 0.0], [2.2, 0.0]])
        y2 = np.array([0, 0, 1, 1])
        det = GroodDetector(strategy="mean_of_prototypes",
                            variant="gradient_l1_norm", seed=0).fit(X2, y2)
        h = np.array([5.0, 1.0])
        from grood.ncp import ncp_logits, ncp_softmax

        p_ood = ncp_softmax(ncp_logits(h, det.model_))[-1]
        diff = h - det.model_.ood_prototype
        expected = p_ood * np.abs(diff).sum() / np.linalg.norm(diff)
        assert det.ood_scores(h[None, :])[0] == pytest.approx(expected, abs=1e-12)

    def test_ivf_index_mode(self):
        rng = np.random.default_rng(8)
        X, y, _ = clustered_data(rng, n_per_class=100)
        det = GroodDetector(strategy="mean_of_prototypes", index="ivf",
                            nlist=10, nprobe=10, seed=0).fit(X, y)
        exact = GroodDetector(strategy="mean_of_prototypes", index="exact",
                              seed=0).fit(X, y)
        q = rng.normal(size=(20, 12))
        np.testing.assert_array_equal(det.ood_scores(q), exact.ood_scores(q))


class TestVariantScoresHelper:
    def test_requires_index_for_corpus_variants(self):
        rng = np.random.default_rng(9)
        X, y, _ = clustered_data(rng)
        det = GroodDetector(strategy="mean_of_prototypes").fit(X, y)
        with pytest.raises(ValidationError):
            variant_scores(det.model_, None, X, "grood")
