import json
import math

import numpy as np
import pytest

from wmlab import autodiff as ad
from wmlab.baselines import KgwScheme, kgw_bias_fn
from wmlab.data import batch_windows, sample_prompts
from wmlab.evaluation import green_ratio
from wmlab.gradcheck import check
from wmlab.model import CausalLM, sample_with_bias
from wmlab.optim import AdamW, clip_grad_norm
from wmlab.policy import InsufficientLengthError, WatermarkPolicy, norm_loss
from wmlab.training import (TrainConfig, TrainingDivergedError, TrainLog, anti_loss, distill_logit,
                            distill_sampling, fpl_step, gen_anti_batch, kgw_target_logits, mapping_objective,
                            sim_loss, teacher_logits, train_cawp, watermark_kl)

from conftest import TINY, checksum, fresh_student


def two_token_policy(values):
    """Policy over a 2-token vocabulary whose mapper emits ``values`` for every context."""
    p = WatermarkPolicy.create(xi_seed=0, n=1, delta=1.0, d_e=4, d_h=3, vocab_size=2, dtype=np.float64)
    p.mapper.params["out.weight"].data[:] = 0
    p.mapper.params["out.bias"].data[:] = np.arctanh(np.asarray(values, dtype=np.float64))
    return p


def kl_oracle(p_logits, q_logits):
    p = np.exp(p_logits - np.max(p_logits))
    p /= p.sum()
    q = np.exp(q_logits - np.max(q_logits))
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def small_cfg(**kw):
    base = dict(steps=6, batch=2, seq_len=32, anti_batch=2, anti_prompt_len=4, anti_refresh=3, lr=1e-3,
                d_e=16, d_h=16, xi_seed=5)
    base.update(kw)
    return TrainConfig(**base)


def make_policy(cfg, delta=None):
    return WatermarkPolicy.create(cfg.xi_seed, n=cfg.n, delta=cfg.delta if delta is None else delta,
                                  epsilon=cfg.epsilon, d_e=cfg.d_e, d_h=cfg.d_h)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lam1, c.lam2, c.alpha, c.beta) == (1.0, 1.0, 0.1, 5.0)
        assert c.effective_anti_len == c.seq_len // 2
        assert c.effective_mapper_lr == c.lr

    def test_beta_requires_alpha(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=0.0, beta=1.0)
        TrainConfig(alpha=0.0, beta=0.0)

    def test_negative(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=-0.1)

    def test_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"beta": 0.0, "steps": 10}))
        c = TrainConfig.from_json(path)
        assert c.beta == 0.0 and c.steps == 10
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"bogus": 1})


class TestSimLoss:
    def test_zero_delta_identical_student(self, tiny_teacher, small_corpus):
        policy = WatermarkPolicy.create(1, delta=0.0)
        batch = next(batch_windows(small_corpus, "train", 32, 2, seed=0))
        assert sim_loss(tiny_teacher, policy, tiny_teacher.copy(), batch).item() == pytest.approx(0.0, abs=1e-6)

    def test_nonnegative(self, tiny_teacher, small_corpus):
        policy = WatermarkPolicy.create(1, delta=2.0)
        student = CausalLM.init(TINY, seed=9)
        for s in range(3):
            batch = next(batch_windows(small_corpus, "train", 24, 2, seed=s))
            assert sim_loss(tiny_teacher, policy, student, batch).item() >= 0

    def test_hand_case(self):
        policy = two_token_policy([0.5, -0.5])
        tokens = np.array([[0, 1]])
        zeros = np.zeros((1, 1, 2))
        got = watermark_kl(zeros, policy, zeros, tokens, sign=1.0, wrt="none").item()
        assert got == pytest.approx(kl_oracle(np.array([0.5, -0.5]), np.zeros(2)), abs=1e-12)
        # closed form for two tokens against uniform: ln 2 - H(sigmoid(1))
        p = 1 / (1 + math.exp(-1.0))
        assert got == pytest.approx(math.log(2) + p * math.log(p) + (1 - p) * math.log(1 - p), abs=1e-12)

    def test_anti_hand_case_flips_sign(self):
        policy = two_token_policy([0.5, -0.5])
        tokens = np.array([[0, 1]])
        teacher = np.array([[[0.3, 0.0]]])
        zeros = np.zeros((1, 1, 2))
        got = anti_loss(teacher, policy, zeros, tokens, wrt="none").item()
        assert got == pytest.approx(kl_oracle(np.array([0.3 - 0.5, 0.5]), np.zeros(2)), abs=1e-12)

    def test_too_short(self, tiny_teacher):
        policy = WatermarkPolicy.create(1, n=2)
        with pytest.raises(InsufficientLengthError):
            sim_loss(tiny_teacher, policy, tiny_teacher, np.array([[1, 2]]))

    def test_positions_align_with_detector(self, tiny_teacher):
        # one scored prediction per detector position: L - n of them
        policy = WatermarkPolicy.create(1, n=2)
        t = teacher_logits(tiny_teacher, np.arange(10)[None], 2)
        assert t.shape[1] == 10 - 2 == policy.detect(np.arange(10)).n_scored

    def test_teacher_gets_no_gradient(self, tiny_teacher, small_corpus):
        policy = WatermarkPolicy.create(1)
        student = fresh_student(tiny_teacher)
        batch = next(batch_windows(small_corpus, "train", 24, 2, seed=0))
        sim_loss(tiny_teacher, policy, student, batch).backward()
        assert all(p.grad is None for p in tiny_teacher.parameters())
        assert all(p.grad is None for p in policy.mapper.parameters())


class TestMappingObjective:
    def test_lam_zero(self):
        assert mapping_objective(0.3, 0.2, 0.0) == 0.3

    def test_arithmetic(self):
        assert mapping_objective(0.3, 0.2, 1.0) == pytest.approx(0.5)

    def test_mapper_gradient(self):
        policy = WatermarkPolicy.create(2, d_e=5, d_h=4, vocab_size=6, dtype=np.float64)
        policy.embedder.table = policy.embedder.table.astype(np.float64)
        rng = np.random.default_rng(0)
        tokens = rng.integers(0, 6, (2, 5))
        teacher = rng.normal(size=(2, 4, 6))
        student = rng.normal(size=(2, 4, 6))
        ctx = tokens[:, :4].reshape(-1, 1)

        def objective():
            sim = watermark_kl(teacher, policy, student, tokens, wrt="mapper")
            return mapping_objective(sim, norm_loss(policy.raw(ctx), 0.2), 1.0)

        res = check(objective, policy.mapper.parameters(), h=1e-6, tol=1e-5)
        assert res.passed, res


class TestAntiBatch:
    def test_zero_mapper_equals_unbiased(self, tiny_teacher):
        policy = WatermarkPolicy.create(1)
        policy.mapper.params["out.weight"].data[:] = 0
        prompts = np.array([[65, 66], [67, 68]])
        anti = gen_anti_batch(tiny_teacher, policy, prompts, 20, seed=3)
        plain = sample_with_bias(tiny_teacher, prompts, 20, seed=3)
        np.testing.assert_array_equal(anti[:, 2:], plain)
        np.testing.assert_array_equal(anti[:, :2], prompts)

    def test_deterministic(self, tiny_teacher):
        policy = WatermarkPolicy.create(1)
        p = np.array([[65, 66]])
        np.testing.assert_array_equal(gen_anti_batch(tiny_teacher, policy, p, 10, 1),
                                      gen_anti_batch(tiny_teacher, policy, p, 10, 1))

    def test_anti_scores_below_null(self, tiny_teacher, small_corpus):
        policy = WatermarkPolicy.create(4, delta=2.0)
        prompts = sample_prompts(small_corpus, "val", 60, 4, seed=0)
        anti = gen_anti_batch(tiny_teacher, policy, prompts, 60, seed=1)[:, 4:]
        null = sample_with_bias(tiny_teacher, prompts, 60, seed=1)
        assert policy.score_many(anti).mean() < policy.score_many(null).mean()


class TestFplStep:
    def _setup(self, tiny_teacher, small_corpus, **kw):
        cfg = small_cfg(**kw)
        policy = make_policy(cfg)
        wm = next(batch_windows(small_corpus, "train", cfg.seq_len, cfg.batch, seed=1))
        anti = gen_anti_batch(tiny_teacher, policy, wm[:, :4], 16, seed=2)
        return cfg, policy, wm, anti

    def test_beta_zero_equals_plain_sim_step(self, tiny_teacher, small_corpus):
        cfg, policy, wm, anti = self._setup(tiny_teacher, small_corpus, beta=0.0, alpha=0.0)
        a, b = fresh_student(tiny_teacher), fresh_student(tiny_teacher)
        fpl_step(a, tiny_teacher, policy, wm, anti, cfg, AdamW(a.parameters()), lr=1e-3)
        # plain step written out by hand
        loss = sim_loss(tiny_teacher, policy, b, wm)
        loss.backward()
        grads = [p.grad.copy() for p in b.parameters()]
        grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        AdamW(b.parameters()).step(grads, lr=1e-3)
        assert checksum(a) == checksum(b)

    def test_restores_parameters(self, tiny_teacher, small_corpus):
        cfg, policy, wm, anti = self._setup(tiny_teacher, small_corpus)
        student = fresh_student(tiny_teacher)
        student.params["lm_head.weight"].data += 0.01
        before = checksum(student)
        rec = fpl_step(student, tiny_teacher, policy, wm, anti, cfg, AdamW(student.parameters()), lr=1e-3,
                       apply_update=False)
        assert rec["l_anti_post"] is not None
        assert checksum(student) == before

    def test_mapper_untouched(self, tiny_teacher, small_corpus):
        cfg, policy, wm, anti = self._setup(tiny_teacher, small_corpus)
        before = [p.data.copy() for p in policy.mapper.parameters()]
        student = fresh_student(tiny_teacher)
        fpl_step(student, tiny_teacher, policy, wm, anti, cfg, AdamW(student.parameters()), lr=1e-3)
        assert all(p.grad is None for p in policy.mapper.parameters())
        for a, p in zip(before, policy.mapper.parameters()):
            np.testing.assert_array_equal(a, p.data)

    def test_combined_gradient(self, tiny_teacher, small_corpus):
        # gradient = g_sim + beta * (g_anti(theta) - g_anti(theta - alpha g/|g|)), recomputed by hand
        cfg, policy, wm, anti = self._setup(tiny_teacher, small_corpus, grad_clip=1e9)
        student = fresh_student(tiny_teacher)
        student.params["lm_head.weight"].data += 0.02
        captured = {}

        class Spy(AdamW):
            def step(self, grads=None, lr=None):
                captured["g"] = [g.copy() for g in grads]

        fpl_step(student, tiny_teacher, policy, wm, anti, cfg, Spy(student.parameters()), lr=1e-3)
        params = student.parameters()

        def grads_of(loss):
            for p in params:
                p.grad = None
            loss.backward()
            out = [p.grad.copy() for p in params]
            for p in params:
                p.grad = None
            return out

        g_sim = grads_of(sim_loss(tiny_teacher, policy, student, wm))
        g_pre = grads_of(anti_loss(tiny_teacher, policy, student, anti))
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in g_pre))
        saved = [p.data.copy() for p in params]
        for p, g in zip(params, g_pre):
            p.data = p.data - cfg.alpha * g / norm
        g_post = grads_of(anti_loss(tiny_teacher, policy, student, anti))
        for p, s in zip(params, saved):
            p.data = s
        for got, a, b, c in zip(captured["g"], g_sim, g_pre, g_post):
            np.testing.assert_allclose(got, a + cfg.beta * (b - c), rtol=1e-4, atol=1e-7)

    def test_zero_anti_gradient_skips(self, tiny_teacher, small_corpus, caplog):
        # all-zero weights give an exactly zero gradient (zero features times zero head)
        cfg, policy, wm, anti = self._setup(tiny_teacher, small_corpus)
        student = fresh_student(tiny_teacher)
        for p in student.parameters():
            p.data[...] = 0
        with caplog.at_level("INFO"):
            rec = fpl_step(student, tiny_teacher, policy, wm, anti, cfg, AdamW(student.parameters()), lr=1e-3)
        assert rec["perturbation_skipped"] is True and rec["anti_grad_norm"] == 0.0
        assert rec["l_anti_post"] is None
        assert "skipped" in caplog.text

    def test_gap_mostly_nonnegative_early(self, tiny_teacher, small_corpus):
        # Monte Carlo over 200 fresh batches at the start of training
        cfg = small_cfg()
        policy = make_policy(cfg)
        student = fresh_student(tiny_teacher)
        opt = AdamW(student.parameters())
        windows = batch_windows(small_corpus, "train", cfg.seq_len, cfg.batch, seed=3, epochs=None)
        gaps = []
        for i in range(200):
            wm = next(windows)
            anti = gen_anti_batch(tiny_teacher, policy, wm[:, :4], 16, seed=100 + i)
            rec = fpl_step(student, tiny_teacher, policy, wm, anti, cfg, opt, lr=1e-3, apply_update=False)
            gaps.append(rec["gap"])
        assert np.mean(np.asarray(gaps) >= 0) >= 0.95


class TestTrainCawp:
    def test_zero_steps(self, tiny_teacher, small_corpus):
        cfg = small_cfg(steps=0)
        student = fresh_student(tiny_teacher)
        before = checksum(student)
        _, _, log = train_cawp(tiny_teacher, student, make_policy(cfg), small_corpus, cfg)
        assert checksum(student) == before and len(log) == 0

    def test_invariants_and_log(self, tiny_teacher, small_corpus, tmp_path):
        cfg = small_cfg()
        policy = make_policy(cfg)
        table = policy.embedder.table.copy()
        teacher_before = checksum(tiny_teacher)
        mapper_before = [p.data.copy() for p in policy.mapper.parameters()]
        student = fresh_student(tiny_teacher)
        path = tmp_path / "log.jsonl"
        _, _, log = train_cawp(tiny_teacher, student, policy, small_corpus, cfg, log_path=str(path))
        assert checksum(tiny_teacher) == teacher_before
        np.testing.assert_array_equal(policy.embedder.table, table)
        assert any(not np.array_equal(a, p.data) for a, p in zip(mapper_before, policy.mapper.parameters()))
        assert len(log) == cfg.steps
        assert len(TrainLog.read(path)) == cfg.steps
        keys = {"l_sim", "l_norm", "l_anti_pre", "l_anti_post", "grad_norm", "lr", "mapper_grad_norm"}
        assert keys <= set(log.records[0])

    def test_reproducible(self, tiny_teacher, small_corpus):
        cfg = small_cfg()
        runs = []
        for _ in range(2):
            student = fresh_student(tiny_teacher)
            _, policy, log = train_cawp(tiny_teacher, student, make_policy(cfg), small_corpus, cfg)
            runs.append((log.series("l_sim"), checksum(student)))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_nonfinite_aborts_with_dump(self, tiny_teacher, small_corpus, tmp_path):
        cfg = small_cfg(beta=0.0)
        bad = tiny_teacher.copy().freeze()
        bad.params["lm_head.weight"].data[0, 0] = np.inf
        with pytest.raises(TrainingDivergedError) as exc:
            train_cawp(bad, fresh_student(tiny_teacher), make_policy(cfg), small_corpus, cfg,
                       dump_dir=str(tmp_path))
        assert exc.value.dump_path and np.load(exc.value.dump_path)["wm_batch"].shape == (2, 32)


class TestDistillation:
    def test_sampling_lr_zero_unchanged(self, tiny_teacher):
        s = fresh_student(tiny_teacher)
        before = checksum(s)
        distill_sampling(s, np.random.default_rng(0).integers(0, 256, (4, 20)), steps=1, batch=2, lr=0.0)
        assert checksum(s) == before

    def test_sampling_empty(self, tiny_teacher):
        with pytest.raises(ValueError):
            distill_sampling(fresh_student(tiny_teacher), np.zeros((0, 10), dtype=np.int64), steps=1)

    def test_sampling_learns_green_bias(self, tiny_teacher, small_corpus):
        scheme = KgwScheme(key=21, k=0, gamma=0.25, delta=2.0)
        prompts = sample_prompts(small_corpus, "train", 96, 4, seed=0)
        wm = np.hstack([prompts, sample_with_bias(tiny_teacher, prompts, 60, bias_fn=kgw_bias_fn(scheme), seed=1)])
        train, held = wm[:80], wm[80:]
        student = fresh_student(tiny_teacher)
        before = float(np.mean([ad.cross_entropy(student(h[None, :-1]), h[None, 1:]).item() for h in held]))
        _, losses = distill_sampling(student, train, steps=80, batch=8, lr=3e-3)
        after = float(np.mean([ad.cross_entropy(student(h[None, :-1]), h[None, 1:]).item() for h in held]))
        assert after < before
        test_prompts = sample_prompts(small_corpus, "val", 40, 4, seed=5)
        base = green_ratio(scheme, sample_with_bias(tiny_teacher, test_prompts, 60, seed=2))
        learned = green_ratio(scheme, sample_with_bias(student, test_prompts, 60, seed=2))
        assert learned > base

    def test_logit_identity_target_zero_loss(self, tiny_teacher, small_corpus):
        scheme = KgwScheme(key=1, k=1, delta=0.0)
        s = fresh_student(tiny_teacher)
        _, losses = distill_logit(s, tiny_teacher, scheme, small_corpus, steps=1, seq_len=32, batch=2, lr=1e-3)
        assert losses[0] == pytest.approx(0.0, abs=1e-6)

    def test_logit_nonnegative(self, tiny_teacher, small_corpus):
        scheme = KgwScheme(key=1, k=1, delta=2.0)
        _, losses = distill_logit(fresh_student(tiny_teacher), tiny_teacher, scheme, small_corpus, steps=5,
                                  seq_len=32, batch=2, lr=1e-3)
        assert min(losses) >= 0

    def test_kgw_target_matches_mask(self, tiny_teacher):
        from wmlab.baselines import kgw_bias
        scheme = KgwScheme(key=4, k=2, delta=1.5)
        tokens = np.array([[3, 9, 27, 81, 5]])
        t = tiny_teacher.logits_np(tokens)
        target = kgw_target_logits(t, tokens, scheme)
        for pos in range(1, 5):
            np.testing.assert_allclose(target[0, pos], t[0, pos] + kgw_bias(scheme, tokens[0, pos - 1:pos + 1]))

    def test_logit_rejects_kth(self, tiny_teacher, small_corpus):
        from wmlab.baselines import KthScheme
        with pytest.raises(TypeError):
            distill_logit(fresh_student(tiny_teacher), tiny_teacher, KthScheme(key=1, m=8), small_corpus, steps=1)
