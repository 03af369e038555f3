import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmlab.autodiff import Tensor
from wmlab.gradcheck import check
from wmlab.policy import (InsufficientLengthError, MappingMLP, NGramEmbedder, WatermarkPolicy, calibrate_threshold,
                          contexts_and_targets, detect_z, norm_loss)


@pytest.fixture(scope="module")
def policy():
    return WatermarkPolicy.create(xi_seed=7, n=1, delta=1.5)


def constant_policy(c, n=1):
    p = WatermarkPolicy.create(xi_seed=3, n=n)
    p.mapper.params["out.weight"].data[:] = 0
    p.mapper.params["out.bias"].data[:] = np.arctanh(c)
    return p


class TestEmbedder:
    def test_deterministic(self):
        a = NGramEmbedder(5, n=3).embed([1, 2, 3])
        b = NGramEmbedder(5, n=3).embed([1, 2, 3])
        np.testing.assert_array_equal(a, b)

    def test_unigram_is_table_row(self):
        e = NGramEmbedder(5, n=1)
        np.testing.assert_array_equal(e.embed([17]), e.table[17])

    def test_mean_pooling(self):
        e = NGramEmbedder(5, n=2)
        np.testing.assert_allclose(e.embed([4, 9]), (e.table[4].astype(np.float64) + e.table[9]) / 2, rtol=1e-6)

    def test_seeds_decorrelate(self):
        rng = np.random.default_rng(0)
        a, b = NGramEmbedder(1, n=2), NGramEmbedder(2, n=2)
        sims = []
        for _ in range(100):
            g = rng.integers(0, 259, 2)
            u, v = a.embed(g), b.embed(g)
            sims.append(float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v))))
        assert np.mean(sims) < 0.5

    def test_wrong_arity(self):
        with pytest.raises(ValueError):
            NGramEmbedder(0, n=2).embed([1])

    def test_out_of_vocab(self):
        with pytest.raises(IndexError):
            NGramEmbedder(0, n=1).embed([259])

    def test_table_read_only(self):
        e = NGramEmbedder(0)
        with pytest.raises(ValueError):
            e.table[0, 0] = 1.0


class TestMapper:
    def test_zero_final_layer(self):
        p = WatermarkPolicy.create(1)
        p.mapper.params["out.weight"].data[:] = 0
        p.mapper.params["out.bias"].data[:] = 0
        assert np.all(p.watermark_logits([5]) == 0)

    def test_bounds(self, policy):
        ctx = np.arange(259)[:, None]
        raw = policy.raw_np(ctx)
        assert np.all(np.abs(raw) < 1)
        wl = np.stack([policy.watermark_logits([c]) for c in range(0, 259, 37)])
        assert np.all(np.abs(wl) < policy.delta)

    def test_bound_under_large_weights(self):
        p = WatermarkPolicy.create(1)
        for t in p.mapper.parameters():
            t.data *= 100
        raw = p.raw_np(np.arange(259)[:, None])
        assert np.all(np.abs(raw) <= 1)

    def test_context_too_short(self):
        p = WatermarkPolicy.create(1, n=3)
        with pytest.raises(InsufficientLengthError):
            p.watermark_logits([1, 2])

    def test_gradient_matches_finite_differences(self):
        mapper = MappingMLP.init(d_e=6, d_h=5, vocab_size=7, seed=0, dtype=np.float64)
        x = np.random.default_rng(1).normal(size=(4, 6))
        w = Tensor(np.random.default_rng(2).normal(size=(4, 7)))
        res = check(lambda: (mapper(x) * w).sum(), mapper.parameters(), h=1e-5, tol=1e-3)
        assert res.passed, res


class TestNormLoss:
    def test_balanced_at_epsilon(self):
        out = Tensor(np.array([[0.5, -0.5], [-0.5, 0.5]]))
        assert norm_loss(out, 0.5).item() == pytest.approx(0.0, abs=1e-9)

    def test_constant_positive(self):
        out = Tensor(np.array([[0.5, 0.5], [0.5, 0.5]]))
        assert norm_loss(out, 0.5, 1.0).item() == pytest.approx(2.0, abs=1e-9)

    def test_all_zero_hinge(self):
        out = Tensor(np.zeros((2, 2)))
        assert norm_loss(out, 0.5, 1.0).item() == pytest.approx(2.0, abs=1e-9)

    def test_negative_epsilon(self):
        with pytest.raises(ValueError):
            norm_loss(Tensor(np.zeros((1, 2))), -0.1)

    def test_sums_not_means(self):
        # row term scales with N; hinge scales with N*V
        out = Tensor(np.full((3, 4), 0.1))
        expected = 3 * 0.1 + 4 * 0.1 + 2.0 * 12 * (0.2 - 0.1)
        assert norm_loss(out, 0.2, 2.0).item() == pytest.approx(expected, abs=1e-12)

    @given(st.integers(1, 4), st.integers(1, 4), st.floats(0.05, 0.9), st.floats(0.0, 0.5),
           st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_zero_iff_balanced_and_large(self, half_rows, half_cols, eps, extra, seed):
        rng = np.random.default_rng(seed)
        # checkerboard of +-a with a >= eps has zero row and column means
        a = min(eps + extra, 0.99)
        signs = np.where((np.add.outer(np.arange(2 * half_rows), np.arange(2 * half_cols)) % 2) == 0, 1.0, -1.0)
        out = signs * a
        assert norm_loss(Tensor(out), eps).item() == pytest.approx(0.0, abs=1e-9)
        # shrinking one entry below eps, or shifting a row, breaks it
        bad = out.copy()
        i, j = rng.integers(0, 2 * half_rows), rng.integers(0, 2 * half_cols)
        bad[i, j] = np.sign(bad[i, j]) * eps * 0.5
        assert norm_loss(Tensor(bad), eps).item() > 0
        shifted = out + 0.01
        assert norm_loss(Tensor(shifted), eps).item() > 0

    def test_gradient(self):
        x = Tensor(np.random.default_rng(0).uniform(-0.9, 0.9, (3, 5)), requires_grad=True)
        res = check(lambda: norm_loss(x, 0.3), [x], h=1e-6, tol=1e-6)
        assert res.passed, res


class TestDetect:
    def test_constant_stub(self):
        p = constant_policy(0.3)
        r = detect_z(p, np.arange(50))
        assert r.z == pytest.approx(0.3, abs=1e-6)

    def test_scored_count_and_mean(self, policy):
        text = np.random.default_rng(0).integers(0, 256, 40)
        r = policy.detect(text)
        assert r.n_scored == len(text) - policy.n
        assert r.z == pytest.approx(np.mean(r.per_position_logits), abs=1e-12)

    def test_bigram_scored_count(self):
        p = WatermarkPolicy.create(2, n=3)
        r = p.detect(np.arange(20))
        assert r.n_scored == 17

    def test_matches_direct_loop(self, policy):
        text = np.random.default_rng(1).integers(0, 256, 30)
        vals = [policy.raw_np(text[i - 1:i][None])[0, text[i]] for i in range(1, 30)]
        assert policy.detect(text).z == pytest.approx(float(np.mean(vals)), abs=1e-7)

    def test_batching_invariance(self, policy):
        texts = np.random.default_rng(2).integers(0, 256, (5, 30))
        np.testing.assert_array_equal(policy.score_many(texts), [policy.detect(t).z for t in texts])

    def test_too_short(self, policy):
        with pytest.raises(InsufficientLengthError, match="insufficient length"):
            policy.detect(np.array([5]))
        with pytest.raises(InsufficientLengthError):
            policy.detect(np.array([], dtype=np.int64))

    def test_threshold_decision(self, policy):
        r = policy.detect(np.arange(30), threshold=-10.0)
        assert r.decision is True and r.threshold == -10.0

    def test_random_bytes_match_analytic_mean(self, policy):
        # direct enumeration over all (context, token) pairs for uniform random bytes
        raw = policy.raw_np(np.arange(256)[:, None])[:, :256].astype(np.float64)
        analytic = raw.mean()
        texts = np.random.default_rng(3).integers(0, 256, (500, 100))
        z = policy.score_many(texts)
        assert abs(z.mean() - analytic) < 3 * z.std(ddof=1) / math.sqrt(500)

    def test_contexts_and_targets(self):
        ctx, tgt = contexts_and_targets(np.array([[1, 2, 3, 4]]), 2)
        np.testing.assert_array_equal(ctx, [[1, 2], [2, 3]])
        np.testing.assert_array_equal(tgt, [3, 4])


class TestCalibrate:
    def test_median(self):
        scores = np.arange(101, dtype=float)
        assert calibrate_threshold(None, scores, 0.5) == 50.0

    def test_resubstitution_fpr(self):
        scores = np.random.default_rng(0).normal(size=1000)
        for fpr in (0.01, 0.05, 0.1, 0.3):
            thr = calibrate_threshold(None, scores, fpr)
            assert abs(np.mean(scores > thr) - fpr) <= 0.02

    def test_monotone(self):
        scores = np.random.default_rng(1).normal(size=300)
        assert calibrate_threshold(None, scores, 0.01) >= calibrate_threshold(None, scores, 0.05)

    def test_too_few(self):
        with pytest.raises(ValueError):
            calibrate_threshold(None, np.zeros(99), 0.05)

    def test_bad_fpr(self):
        with pytest.raises(ValueError):
            calibrate_threshold(None, np.zeros(200), 1.0)

    def test_with_policy(self, policy):
        texts = np.random.default_rng(4).integers(0, 256, (120, 20))
        thr = calibrate_threshold(policy, list(texts), 0.1)
        assert thr == pytest.approx(np.quantile(policy.score_many(texts), 0.9, method="higher"))


class TestPolicyCheckpoint:
    def test_round_trip(self, policy, tmp_path):
        policy.save(tmp_path / "p")
        loaded = WatermarkPolicy.load(tmp_path / "p")
        assert (loaded.delta, loaded.epsilon, loaded.n) == (policy.delta, policy.epsilon, policy.n)
        text = np.arange(40) % 256
        assert loaded.detect(text).z == policy.detect(text).z
        np.testing.assert_array_equal(loaded.embedder.table, policy.embedder.table)

    def test_manifest_fields(self, policy, tmp_path):
        import json
        policy.save(tmp_path / "p")
        man = json.loads((tmp_path / "p" / "manifest.json").read_text())
        for key in ("xi_seed", "n", "delta", "epsilon", "d_e", "d_h"):
            assert key in man
