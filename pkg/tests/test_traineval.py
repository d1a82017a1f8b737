"""Losses against brute-force oracles, the optimizer, and retrieval scoring."""

import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from bicnet_tks.bicnet import build_model
from bicnet_tks.config import TrainConfig, mini_model, preset
from bicnet_tks.tensor import InputError, Parameter, Tensor
from bicnet_tks.traineval import (
    Adam,
    Classifier,
    adam_state,
    adam_step,
    batch_hard_triplet,
    cross_entropy,
    evaluate_retrieval,
    extract_video_feature,
    total_loss,
)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        cfg = TrainConfig(lr=0.1, weight_decay=0.0)
        p = Parameter(np.array([1.0, -2.0]))
        state = adam_state([p])
        adam_step([p], [np.zeros(2)], state, cfg, epoch=0)
        npt.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step_on_quadratic_matches_hand_computation(self):
        # f(x) = x^2 at x0=1: g=2, m_hat=2, v_hat=4, step = lr * 2/(2+eps) ~ lr
        cfg = TrainConfig(lr=0.1, weight_decay=0.0)
        p = Parameter(np.array([1.0]))
        state = adam_state([p])
        adam_step([p], [np.array([2.0])], state, cfg, epoch=0)
        expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
        assert p.data[0] == pytest.approx(expected, abs=1e-12)

    def test_weight_decay_enters_the_gradient(self):
        cfg = TrainConfig(lr=0.1, weight_decay=0.5)
        p = Parameter(np.array([1.0]))
        state = adam_state([p])
        adam_step([p], [np.array([0.0])], state, cfg, epoch=0)
        # g = 0 + 0.5*1.0, so the normalized step is again ~lr
        assert p.data[0] == pytest.approx(1.0 - 0.1, abs=1e-6)

    def test_schedule_decays_every_40_epochs(self):
        cfg = TrainConfig()  # lr 3.5e-4, decay 0.1 at 40/80/120
        assert cfg.lr_at_epoch(0) == pytest.approx(3.5e-4)
        assert cfg.lr_at_epoch(39) == pytest.approx(3.5e-4)
        assert cfg.lr_at_epoch(40) == pytest.approx(3.5e-5)
        assert cfg.lr_at_epoch(85) == pytest.approx(3.5e-6)
        assert cfg.lr_at_epoch(121) == pytest.approx(3.5e-7)


class TestCrossEntropy:
    def test_confident_correct_logits_near_zero(self):
        logits = Tensor(np.array([[20.0, 0.0], [0.0, 20.0]]))
        assert float(cross_entropy(logits, np.array([0, 1])).data) < 1e-6

    def test_uniform_logits_log_k(self):
        logits = Tensor(np.zeros((3, 5)))
        assert float(cross_entropy(logits, np.array([0, 1, 2])).data) == pytest.approx(np.log(5), rel=1e-6)


class TestTripletLoss:
    @staticmethod
    def _brute_force(features, labels, margin):
        f = features / np.linalg.norm(features, axis=1, keepdims=True)
        n = len(labels)
        dist = np.sqrt(np.maximum(
            ((f[:, None, :] - f[None, :, :]) ** 2).sum(-1), 0.0) + 1e-12)
        losses = []
        for a in range(n):
            pos = [dist[a, j] for j in range(n) if j != a and labels[j] == labels[a]]
            neg = [dist[a, j] for j in range(n) if labels[j] != labels[a]]
            losses.append(max(0.0, max(pos) - min(neg) + margin))
        return float(np.mean(losses))

    def test_matches_brute_force_on_hand_built_points(self):
        features = np.array([
            [1.0, 0.0], [0.9, 0.1],   # identity 0
            [0.0, 1.0], [0.1, 0.9],   # identity 1
        ])
        labels = np.array([0, 0, 1, 1])
        expected = self._brute_force(features, labels, 0.3)
        got = float(batch_hard_triplet(Tensor(features), labels, 0.3).data)
        assert got == pytest.approx(expected, rel=1e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_on_random_batches(self, seed):
        rng = np.random.default_rng(seed)
        features = rng.standard_normal((12, 6))
        labels = np.repeat(np.arange(4), 3)
        expected = self._brute_force(features, labels, 0.3)
        got = float(batch_hard_triplet(Tensor(features), labels, 0.3).data)
        assert got == pytest.approx(expected, rel=1e-4)

    def test_zero_iff_margin_satisfied(self):
        # tight clusters at right angles: hardest positive ~0.02, negatives ~sqrt(2)
        features = np.array([[1.0, 0.0], [1.0, 0.02], [0.0, 1.0], [0.02, 1.0]])
        labels = np.array([0, 0, 1, 1])
        assert float(batch_hard_triplet(Tensor(features), labels, 0.3).data) == 0.0
        # raise the margin above the gap: violation appears
        assert float(batch_hard_triplet(Tensor(features), labels, 1.5).data) > 0.0

    def test_single_identity_batch_rejected(self):
        with pytest.raises(InputError):
            batch_hard_triplet(Tensor(np.eye(3)), np.array([5, 5, 5]), 0.3)


class TestTotalLoss:
    def test_composition(self, rng):
        features = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        logits = Tensor(rng.standard_normal((4, 3)).astype(np.float32))
        labels = np.array([0, 0, 1, 2])
        divergence = Tensor(np.float32(-0.7))
        cfg = TrainConfig(lambda_div=0.5)
        combined = float(total_loss(features, logits, labels, divergence, cfg).data)
        ce = float(cross_entropy(logits, labels).data)
        trip = float(batch_hard_triplet(features, labels, cfg.triplet_margin).data)
        assert combined == pytest.approx(ce + trip + 0.5 * -0.7, rel=1e-6)

    def test_term_wise_minimum(self):
        # separated features, confident logits, orthogonal maps: only -lambda remains
        features = Tensor(np.array([[1.0, 0], [1, 0.01], [0, 1.0], [0.01, 1]]))
        logits = Tensor(np.array([[30.0, 0], [30.0, 0], [0, 30.0], [0, 30.0]]))
        labels = np.array([0, 0, 1, 1])
        cfg = TrainConfig(lambda_div=1.0)
        value = float(total_loss(features, logits, labels, Tensor(-1.0), cfg).data)
        assert value == pytest.approx(-1.0, abs=1e-4)


class TestRetrieval:
    def test_gallery_copies_give_perfect_scores(self, rng):
        feats = rng.standard_normal((6, 8))
        labels = np.arange(6)
        result = evaluate_retrieval(feats, labels, feats.copy(), labels.copy())
        assert result.mAP == 1.0
        assert result.cmc[0] == 1.0

    def test_hand_computed_ap_example(self):
        """Gallery ordered wrong, right, wrong by distance: AP=1/2, CMC=[0,1,1]."""
        query = np.array([[1.0, 0.0]])
        gallery = np.array([
            [np.cos(0.1), np.sin(0.1)],   # wrong id, closest
            [np.cos(0.2), np.sin(0.2)],   # right id
            [np.cos(0.3), np.sin(0.3)],   # wrong id
        ])
        result = evaluate_retrieval(query, np.array([7]), gallery, np.array([1, 7, 2]))
        assert result.mAP == pytest.approx(0.5)
        npt.assert_allclose(result.cmc, [0.0, 1.0, 1.0])

    def test_missing_query_identity_excluded_with_count(self, rng):
        feats = rng.standard_normal((3, 4))
        result = evaluate_retrieval(feats, np.array([0, 1, 99]),
                                    rng.standard_normal((4, 4)), np.array([0, 0, 1, 1]))
        assert result.num_excluded == 1
        assert result.num_queries == 2

    def test_cmc_monotone_on_random_instances(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            q = rng.standard_normal((5, 6))
            g = rng.standard_normal((30, 6))
            ql = rng.integers(0, 5, size=5)
            gl = rng.integers(0, 5, size=30)
            if not np.isin(ql, gl).any():
                continue
            cmc = evaluate_retrieval(q, ql, g, gl).cmc
            assert (np.diff(cmc) >= -1e-12).all()

    def test_map_invariant_under_common_rescaling(self, rng):
        q = rng.standard_normal((6, 8))
        g = rng.standard_normal((40, 8))
        ql = rng.integers(0, 6, size=6)
        gl = rng.integers(0, 6, size=40)
        base = evaluate_retrieval(q, ql, g, gl)
        scaled = evaluate_retrieval(q * 37.5, ql, g * 37.5, gl)
        assert base.mAP == pytest.approx(scaled.mAP, abs=1e-12)
        npt.assert_allclose(base.cmc, scaled.cmc)

    def test_random_features_match_positive_fraction_within_3_sigma(self):
        """Monte-Carlo oracle: 10 ids x 20 gallery items each, 30 seeds."""
        maps = []
        for seed in range(30):
            rng = np.random.default_rng(seed)
            q = rng.standard_normal((10, 16))
            g = rng.standard_normal((200, 16))
            gl = np.repeat(np.arange(10), 20)
            maps.append(evaluate_retrieval(q, np.arange(10), g, gl).mAP)
        maps = np.asarray(maps)
        positive_fraction = 20 / 200
        assert abs(maps.mean() - positive_fraction) < 3 * maps.std(ddof=1)

    def test_empty_gallery_rejected(self, rng):
        with pytest.raises(InputError):
            evaluate_retrieval(rng.standard_normal((2, 4)), np.array([0, 1]),
                               np.zeros((0, 4)), np.array([]))

    def test_exact_distance_ties_keep_gallery_order(self):
        query = np.array([[1.0, 0.0]])
        same = np.array([0.6, 0.8])
        gallery = np.stack([same, same, same])  # three identical vectors
        # only the middle entry is correct; stable ranking keeps index order,
        # so the correct match sits at rank 2 exactly
        result = evaluate_retrieval(query, np.array([1]), gallery, np.array([0, 1, 2]))
        npt.assert_allclose(result.cmc, [0.0, 1.0, 1.0])
        assert result.mAP == pytest.approx(0.5)


@pytest.fixture(scope="module")
def eval_model():
    model = build_model(mini_model(), rng=np.random.default_rng(2))
    model.eval()
    return model


class TestFeatureExtraction:
    def test_exact_length_equals_single_segment(self, eval_model, rng):
        frames = rng.random((8, 3, 64, 32)).astype(np.float32)
        single = extract_video_feature(frames, eval_model)
        assert single.shape == (128,)

    def test_repeated_segments_average_to_the_same(self, eval_model, rng):
        frames = rng.random((8, 3, 64, 32)).astype(np.float32)
        doubled = np.concatenate([frames, frames])
        a = extract_video_feature(frames, eval_model)
        b = extract_video_feature(doubled, eval_model)
        npt.assert_allclose(a, b, atol=1e-6)

    def test_remainder_frames_dropped(self, eval_model, rng):
        frames = rng.random((17, 3, 64, 32)).astype(np.float32)
        a = extract_video_feature(frames, eval_model)
        b = extract_video_feature(frames[:16], eval_model)
        npt.assert_allclose(a, b, atol=1e-7)  # frame 17 contributed nothing

    def test_short_tracklet_rejected(self, eval_model, rng):
        with pytest.raises(InputError):
            extract_video_feature(rng.random((5, 3, 64, 32)).astype(np.float32), eval_model)


class TestDescentSanity:
    def test_one_small_step_decreases_the_loss(self, tiny_dataset):
        run_cfg = preset("mini")
        run_cfg = dataclasses.replace(
            run_cfg, train=dataclasses.replace(run_cfg.train, lr=1e-6, batch_p=3, batch_s=2))
        rng = np.random.default_rng(8)
        model = build_model(run_cfg.model, rng=rng)
        classifier = Classifier(model.feature_dim, 6, rng=rng)
        model.eval()  # frozen statistics keep the objective fixed across steps
        classifier.eval()

        from bicnet_tks.bicnet import aggregate_branches, split_segment
        from bicnet_tks.synthdata import PKSampler
        from bicnet_tks import tensor as T

        sampler = PKSampler(tiny_dataset, 3, 2, 8, 4, np.random.default_rng(0))
        segments, raw_labels = next(iter(sampler.epoch()))
        labels = np.asarray([{ident: i for i, ident in enumerate(tiny_dataset.identity_ids())}[l]
                             for l in raw_labels])

        def compute_loss():
            feats, divs = [], []
            for seg in segments:
                f_d, f_c, diag = model.forward(split_segment(seg, run_cfg.model.alpha))
                feats.append(aggregate_branches(f_d, f_c))
                divs.append(diag.divergence)
            stacked = T.stack(feats)
            return total_loss(stacked, classifier.forward(stacked), labels,
                              T.stack(divs).mean(), run_cfg.train)

        optimizer = Adam(model.parameters() + classifier.parameters(), run_cfg.train)
        first = compute_loss()
        optimizer.zero_grad()
        first.backward()
        optimizer.step(0)
        second = compute_loss()
        assert float(second.data) < float(first.data)
