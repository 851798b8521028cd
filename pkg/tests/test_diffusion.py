import numpy as np
import pytest

from layoutgen.diffusion import (DiffusionSchedule, build_schedule, corrupt,
                                 cumulative_matrix, fast_reverse_distribution,
                                 posterior, probs_from_logits,
                                 reverse_distribution, schedule_for_vocab,
                                 training_loss, transition_matrix)
from layoutgen.errors import DataError, NumericError
from layoutgen.vocab import MODALITIES

from conftest import random_layout


def toy_schedule(k=2, steps=2, alpha=0.8, gamma=0.1):
    """Constant-rate schedule (alpha, gamma per step) over one modality."""
    alpha_bar = alpha ** np.arange(steps + 1)
    gamma_bar = 1.0 - (1.0 - gamma) ** np.arange(steps + 1)
    return DiffusionSchedule(steps, alpha_bar, gamma_bar, {"m": k})


def dense_product(sched, t, mod):
    q = np.eye(sched.kprime[mod] + 1)
    for s in range(1, t + 1):
        q = transition_matrix(sched, s, mod) @ q
    return q


def brute_posterior(sched, t, mod, zt, z0, delta=1):
    step = np.eye(sched.kprime[mod] + 1)
    for s in range(t - delta + 1, t + 1):
        step = transition_matrix(sched, s, mod) @ step
    prev = dense_product(sched, t - delta, mod)
    now = dense_product(sched, t, mod)
    unnorm = step[zt, :] * prev[:, z0]
    return unnorm / now[zt, z0]


class TestSchedule:
    def test_single_step_hits_endpoints(self):
        s = build_schedule(1, {"m": 5})
        a, b, g = s.step_params(1, "m")
        assert a == pytest.approx(1e-5, rel=1e-12)
        assert g == pytest.approx(0.9999, rel=1e-12)

    def test_rows_sum_to_one_identity(self):
        s = build_schedule(100, {"cat": 6, "geo": 33})
        for mod, k in (("cat", 6), ("geo", 33)):
            for t in range(1, 101):
                a, b, g = s.step_params(t, mod)
                assert abs(a + k * b + g - 1.0) < 1e-12

    def test_infeasible_schedule_rejected(self):
        with pytest.raises(NumericError) as e:
            build_schedule(4, {"m": 3}, alpha_bar_T=0.5, gamma_bar_T=0.9)
        assert e.value.code == "INFEASIBLE_SCHEDULE"

    def test_terminal_mask_mass(self):
        s = build_schedule(100, {"m": 34})
        assert s.gamma_bar[100] == pytest.approx(0.9999, abs=1e-12)
        q = cumulative_matrix(s, 100, "m")
        assert np.all(q[34, :34] >= 0.999)


class TestTransitionMatrices:
    def test_worked_single_step_column(self):
        q = transition_matrix(toy_schedule(), 1, "m")
        np.testing.assert_allclose(q[:, 0], [0.85, 0.05, 0.10], atol=1e-12)
        np.testing.assert_allclose(q[:, 2], [0.0, 0.0, 1.0], atol=0)
        np.testing.assert_allclose(q.sum(axis=0), 1.0, atol=1e-12)

    def test_worked_two_step_cumulative(self):
        q = cumulative_matrix(toy_schedule(), 2, "m")
        assert q[0, 0] == pytest.approx(0.85**2 + 0.05**2, abs=1e-12)
        assert q[1, 0] == pytest.approx(2 * 0.85 * 0.05, abs=1e-12)
        assert q[2, 0] == pytest.approx(1 - 0.9**2, abs=1e-12)

    @pytest.mark.parametrize("k", [6, 7, 33, 34])
    def test_closed_form_matches_dense_product_T100(self, k):
        s = build_schedule(100, {"m": k})
        prod = np.eye(k + 1)
        for t in range(1, 101):
            prod = transition_matrix(s, t, "m") @ prod
            closed = cumulative_matrix(s, t, "m")
            assert np.max(np.abs(closed - prod)) <= 1e-9
            np.testing.assert_allclose(closed.sum(axis=0), 1.0, atol=1e-9)

    def test_mask_column_absorbing_exactly(self):
        s = build_schedule(100, {"m": 7})
        e_mask = np.zeros(8)
        e_mask[7] = 1.0
        for t in (1, 37, 100):
            np.testing.assert_array_equal(cumulative_matrix(s, t, "m") @ e_mask, e_mask)
            np.testing.assert_array_equal(transition_matrix(s, t, "m") @ e_mask, e_mask)


class TestCorrupt:
    def test_t_zero_is_identity(self, uniform_vocab, rng):
        from layoutgen.core import flatten
        sched = schedule_for_vocab(10, uniform_vocab)
        seq = flatten(random_layout(rng, n_elements=8), uniform_vocab, 25)
        np.testing.assert_array_equal(corrupt(seq, 0, sched, uniform_vocab, rng), seq)

    def test_terminal_step_is_mostly_mask(self, uniform_vocab):
        from layoutgen.core import flatten
        rng = np.random.default_rng(0)
        sched = schedule_for_vocab(100, uniform_vocab)
        seq = flatten(random_layout(rng, n_elements=20), uniform_vocab, 25)
        draws = corrupt(np.tile(seq, (800, 1)), 100, sched, uniform_vocab, rng)
        rate = (draws == uniform_vocab.mask_id).mean()
        assert rate >= 0.999  # 1e5 Bernoulli(0.9999) draws stay above this

    def test_modality_isolation(self, uniform_vocab):
        from layoutgen.core import flatten
        rng = np.random.default_rng(1)
        sched = schedule_for_vocab(50, uniform_vocab)
        seq = flatten(random_layout(rng, n_elements=25), uniform_vocab, 25)
        batch = np.tile(seq, (800, 1))
        t = rng.integers(1, 51, size=800)
        draws = corrupt(batch, t, sched, uniform_vocab, rng)
        for m_idx, mod in enumerate(MODALITIES):
            lo, hi = uniform_vocab.range_for(mod)
            toks = draws[:, m_idx::5]
            ok = ((toks >= lo) & (toks < hi)) | (toks == uniform_vocab.pad_id) \
                | (toks == uniform_vocab.mask_id)
            assert ok.all()

    def test_mask_in_z0_rejected(self, uniform_vocab, rng):
        sched = schedule_for_vocab(10, uniform_vocab)
        seq = np.full(125, uniform_vocab.mask_id)
        with pytest.raises(DataError):
            corrupt(seq, 3, sched, uniform_vocab, rng)


class TestPosterior:
    def test_worked_mask_posterior(self):
        s = toy_schedule()
        got = posterior(zt=2, z0=0, t=2, modality="m", sched=s)
        np.testing.assert_allclose(got, [0.4474, 0.0263, 0.5263], atol=1e-4)

    def test_observed_equals_clean_puts_mode_there(self):
        s = toy_schedule()
        got = posterior(zt=0, z0=0, t=2, modality="m", sched=s)
        assert np.argmax(got) == 0

    def test_fresh_mask_path(self):
        # two steps, but all mask mass gained in the last step
        alpha_bar = np.array([1.0, 0.9, 0.81])
        gamma_bar = np.array([0.0, 0.0, 0.1])
        s = DiffusionSchedule(2, alpha_bar, gamma_bar, {"m": 2})
        got = posterior(zt=2, z0=0, t=2, modality="m", sched=s)
        np.testing.assert_allclose(got, brute_posterior(s, 2, "m", 2, 0), atol=1e-9)
        assert got[2] == 0.0  # gamma_bar was zero at t=1

    @pytest.mark.parametrize("k,steps", [(2, 2), (5, 7), (10, 10)])
    def test_enumeration_oracle(self, k, steps):
        s = build_schedule(steps, {"m": k})
        for t in range(1, steps + 1):
            for z0 in range(k):
                for zt in range(k + 1):
                    got = posterior(zt, z0, t, "m", s)
                    want = brute_posterior(s, t, "m", zt, z0)
                    assert np.max(np.abs(got - want)) <= 1e-9
                    assert got.sum() == pytest.approx(1.0, abs=1e-9)

    def test_zero_evidence_raises(self):
        s = toy_schedule()
        with pytest.raises(DataError):
            posterior(zt=1, z0=2, t=2, modality="m", sched=s)  # z0 = MASK


def one_position_probs(vocab, mod, weights):
    """A (5M, n_tokens) clean-state table, uniform elsewhere, custom at pos 0."""
    length = 5
    table = np.zeros((length, vocab.n_tokens))
    for m_idx, m in enumerate(MODALITIES):
        lo, hi = vocab.range_for(m)
        cols = list(range(lo, hi)) + [vocab.pad_id]
        table[m_idx, cols] = 1.0 / len(cols)
    m_lo, m_hi = vocab.range_for(mod)
    idx = MODALITIES.index(mod)
    table[idx, :] = 0.0
    table[idx, list(range(m_lo, m_hi)) + [vocab.pad_id]] = weights
    return table


class TestReverseDistribution:
    def test_point_mass_recovers_posterior(self, tiny_vocab):
        v = tiny_vocab
        sched = schedule_for_vocab(4, v)
        k = v.ordinary_count("x")
        weights = np.zeros(k)
        weights[1] = 1.0
        table = one_position_probs(v, "x", weights)
        zt = np.full(5, v.mask_id)
        out = reverse_distribution(table, zt, 3, sched, v)
        want = posterior(k, 1, 3, "x", sched)
        cols = list(range(*v.range_for("x"))) + [v.pad_id, v.mask_id]
        np.testing.assert_allclose(out[1, cols], want, atol=1e-12)

    def test_uniform_mixture_matches_enumeration(self):
        s = toy_schedule()
        p0 = np.array([0.5, 0.5])
        want = 0.5 * brute_posterior(s, 2, "m", 2, 0) + 0.5 * brute_posterior(s, 2, "m", 2, 1)
        from layoutgen.kernels import reverse_mixture
        got = reverse_mixture(p0[None, :], np.array([2]),
                              *[np.array([x]) for x in (
                                  *s.step_params(2, "m"),
                                  *s.cumulative_params(1, "m"),
                                  *s.cumulative_params(2, "m"))])
        np.testing.assert_allclose(got[0], want, atol=1e-9)

    def test_rows_sum_to_one(self, tiny_vocab, rng):
        v = tiny_vocab
        sched = schedule_for_vocab(6, v)
        probs0 = np.zeros((2, 10, v.n_tokens))
        for m_idx, mod in enumerate(MODALITIES):
            lo, hi = v.range_for(mod)
            cols = list(range(lo, hi)) + [v.pad_id]
            for p in (m_idx, m_idx + 5):
                probs0[:, p, cols] = rng.dirichlet(np.ones(len(cols)), size=2)
        zt = corrupt(np.tile(flatten_layout(v, 2), (2, 1)), 4, sched, v,
                     np.random.default_rng(0))
        out = reverse_distribution(probs0, zt, 4, sched, v)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)

    def test_fast_delta1_identical_to_reverse(self, tiny_vocab, rng):
        v = tiny_vocab
        sched = schedule_for_vocab(6, v)
        table = np.tile(one_position_probs(v, "x", np.array([0.1, 0.2, 0.3, 0.3, 0.1])),
                        (3, 1, 1))
        zt = np.full((3, 5), v.mask_id)
        a = reverse_distribution(table, zt, 5, sched, v)
        b = fast_reverse_distribution(table, zt, 5, 1, sched, v)
        np.testing.assert_array_equal(a, b)

    def test_fast_full_jump_from_mask_returns_clean_prediction(self, tiny_vocab):
        v = tiny_vocab
        sched = schedule_for_vocab(4, v)
        weights = np.array([0.4, 0.1, 0.2, 0.05, 0.25])
        table = one_position_probs(v, "x", weights)
        zt = np.full(5, v.mask_id)
        out = fast_reverse_distribution(table, zt, 4, 4, sched, v)
        cols = list(range(*v.range_for("x"))) + [v.pad_id]
        np.testing.assert_allclose(out[1, cols], weights, atol=1e-12)
        assert out[1, v.mask_id] == 0.0

    def test_fast_delta_matches_brute_force_mixture(self):
        s = toy_schedule(k=3, steps=6, alpha=0.9, gamma=0.05)
        rng = np.random.default_rng(5)
        from layoutgen.kernels import reverse_mixture
        for t, delta in [(4, 2), (6, 3), (6, 6), (5, 1)]:
            p0 = rng.dirichlet(np.ones(3))
            for zt in range(4):
                want = sum(p0[m] * brute_posterior(s, t, "m", zt, m, delta)
                           for m in range(3))
                got = reverse_mixture(p0[None, :], np.array([zt]),
                                      *[np.array([x]) for x in (
                                          *s.step_params(t, "m", delta),
                                          *s.cumulative_params(t - delta, "m"),
                                          *s.cumulative_params(t, "m"))])
                np.testing.assert_allclose(got[0], want, atol=1e-9)


def flatten_layout(vocab, max_elements=1):
    from layoutgen.core import Element, Layout, flatten
    lay = Layout((Element(1, (0.3, 0.4, 0.3, 0.2)),))
    return flatten(lay, vocab, max_elements)


class TestTrainingLoss:
    def _setup(self, vocab, t, rng, batch=1):
        from layoutgen.core import flatten
        sched = schedule_for_vocab(8, vocab)
        seqs = np.stack([flatten(random_layout(rng, categories=vocab.categories,
                                               max_elements=3, n_elements=2),
                                 vocab, 3) for _ in range(batch)])
        zt = corrupt(seqs, t, sched, vocab, rng)
        return sched, seqs, zt

    def test_point_mass_on_truth_at_t1_is_zero(self, tiny_vocab, rng):
        v = tiny_vocab
        sched, z0, zt = self._setup(v, 1, rng)
        logits = np.full((1, 15, v.n_tokens), -300.0)
        logits[0, np.arange(15), z0[0]] = 300.0
        loss, (vb, aux) = training_loss(logits, z0, zt, 1, sched, v, aux_weight=0.1)
        assert loss == pytest.approx(0.0, abs=1e-7)

    def test_lambda_zero_gives_pure_vb(self, tiny_vocab, rng):
        v = tiny_vocab
        sched, z0, zt = self._setup(v, 5, rng)
        logits = rng.normal(size=(1, 15, v.n_tokens))
        loss0, (vb0, aux0) = training_loss(logits, z0, zt, 5, sched, v, aux_weight=0.0)
        assert loss0 == pytest.approx(vb0, abs=1e-15)
        loss1, (vb1, aux1) = training_loss(logits, z0, zt, 5, sched, v, aux_weight=0.1)
        assert vb0 == pytest.approx(vb1, abs=1e-12)
        assert loss1 == pytest.approx(vb1 + 0.1 * aux1, abs=1e-12)

    def test_toy_kl_matches_enumeration(self):
        # K'=2 single position, hand-set prediction, oracle by full enumeration
        s = toy_schedule()
        p0 = np.array([0.7, 0.3])
        q = brute_posterior(s, 2, "m", 2, 0)
        p = 0.7 * brute_posterior(s, 2, "m", 2, 0) + 0.3 * brute_posterior(s, 2, "m", 2, 1)
        want_vb = float(np.sum(q[q > 0] * np.log(q[q > 0] / p[q > 0])))
        want_aux = -np.log(0.7)

        from layoutgen.vocab import Vocabulary
        cents = {m: np.array([0.5]) for m in ("x", "y", "w", "h")}
        # one category and one bin: every modality chain has K'=2 (token+PAD)
        v = Vocabulary(categories=1, bins=1, centroids=cents, kind="uniform")
        sched = DiffusionSchedule(2, s.alpha_bar, s.gamma_bar,
                                  {m: 2 for m in MODALITIES})
        logits = np.full((1, 5, v.n_tokens), -np.inf)
        for m_idx, mod in enumerate(MODALITIES):
            lo, hi = v.range_for(mod)
            cols = list(range(lo, hi)) + [v.pad_id]
            logits[0, m_idx, cols] = np.log(p0)
        z0 = np.array([[0, v.range_for("x")[0], v.range_for("y")[0],
                        v.range_for("w")[0], v.range_for("h")[0]]])
        zt = np.full((1, 5), v.mask_id)
        loss, (vb, aux) = training_loss(logits, z0, zt, 2, sched, v, aux_weight=0.1)
        assert vb == pytest.approx(want_vb, abs=1e-9)
        assert aux == pytest.approx(want_aux, abs=1e-9)

    def test_loss_nonnegative_and_finite(self, tiny_vocab, rng):
        v = tiny_vocab
        for t in (1, 3, 8):
            sched, z0, zt = self._setup(v, t, rng, batch=4)
            logits = rng.normal(size=(4, 15, v.n_tokens))
            loss, (vb, aux) = training_loss(logits, z0, zt, t, sched, v)
            assert np.isfinite(loss) and loss >= 0 and vb >= -1e-12 and aux >= 0

    def test_gradient_matches_finite_differences(self, tiny_vocab):
        v = tiny_vocab
        rng = np.random.default_rng(17)
        sched, z0, zt = self._setup(v, 4, rng)
        logits = rng.normal(size=(1, 15, v.n_tokens))
        loss, _, grad = training_loss(logits, z0, zt, 4, sched, v, with_grad=True)
        h = 1e-4
        idx = [(0, int(rng.integers(15)), int(rng.integers(v.n_tokens))) for _ in range(25)]
        for i in idx:
            lp = logits.copy()
            lp[i] += h
            lm = logits.copy()
            lm[i] -= h
            fd = (training_loss(lp, z0, zt, 4, sched, v)[0]
                  - training_loss(lm, z0, zt, 4, sched, v)[0]) / (2 * h)
            denom = max(abs(fd), abs(grad[i]), 1e-8)
            assert abs(fd - grad[i]) / denom < 1e-3
