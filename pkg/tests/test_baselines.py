import numpy as np
import pytest

from cecs.baselines import (
    FeedbackStats,
    IndependentModel,
    egreedy_select,
    independent_fit,
    independent_select,
    popularity_select,
    preference_select,
)
from cecs.data import GeneratorSpec, Impression, gen_world, oracle_best, simulate_logs
from cecs.errors import ConfigError, DataError, UsageError
from cecs.metrics import evaluate
from cecs.model import CECSModel, ModelConfig, batches_by_shape
from cecs.training import TrainConfig, batch_loss


CHI2_01_DF4 = 13.277  # chi-square critical value, alpha = 0.01


def imp(i, user, shop, cands, shown, label):
    return Impression(i, user, shop, cands, shown, label)


SLATE = [[10, 11, 12], [20, 21], [30, 31, 32]]


def handmade_log():
    # shop 0: element 11 clicks 2/2, element 10 clicks 0/3
    log = [imp(0, 0, 0, SLATE, [1, 0, 0], 1), imp(1, 0, 0, SLATE, [1, 1, 2], 1)]
    log += [imp(2 + i, 1, 0, SLATE, [0, 0, 0], 0) for i in range(3)]
    return log


class TestFeedbackStats:
    def test_counts(self):
        st = FeedbackStats.from_log(handmade_log())
        assert st.shop[(0, 0, 11)] == [2, 2]
        assert st.shop[(0, 0, 10)] == [3, 0]
        assert st.user[(1, 2, 30)] == [3, 0]

    def test_laplace(self):
        st = FeedbackStats.from_log(handmade_log())
        assert st.shop_ctr(0, 0, 11) == pytest.approx(3 / 4)
        assert st.shop_ctr(0, 0, 10) == pytest.approx(1 / 5)
        assert st.shop_ctr(0, 0, 12) == 0.5
        assert st.user_ctr(5, 0, 10) is None

    def test_roundtrip(self, tmp_path):
        st = FeedbackStats.from_log(handmade_log())
        st.save(tmp_path / "s.json")
        back = FeedbackStats.load(tmp_path / "s.json")
        assert dict(back.shop) == dict(st.shop) and dict(back.user) == dict(st.user)

    def test_malformed_cache(self, tmp_path):
        (tmp_path / "s.json").write_text('{"shop": {"1|2": [1]}}')
        with pytest.raises(DataError):
            FeedbackStats.load(tmp_path / "s.json")


class TestPopularity:
    def test_picks_highest_smoothed_ctr(self):
        st = FeedbackStats.from_log(handmade_log())
        # category 0: 11 -> 0.75, 12 unseen -> 0.5, 10 -> 0.2
        # category 1: 20 -> (1+1)/(4+2), 21 -> 2/3
        # category 2: 30 -> 2/6, 31 unseen -> 0.5, 32 -> 2/3
        assert popularity_select(st, imp(9, 3, 0, SLATE, [0, 0, 0], 1)) == [1, 1, 2]

    def test_unseen_shop_ties_to_first(self):
        st = FeedbackStats.from_log(handmade_log())
        assert popularity_select(st, imp(9, 0, 7, SLATE, [0, 0, 0], 1)) == [0, 0, 0]

    def test_scaling_invariance(self):
        rng = np.random.default_rng(0)
        log = [imp(i, int(rng.integers(5)), int(rng.integers(3)), SLATE,
                   [int(rng.integers(3)), int(rng.integers(2)), int(rng.integers(3))], int(rng.random() < 0.3))
               for i in range(300)]
        st = FeedbackStats.from_log(log)
        doubled = st.scaled(2)
        for m in log[:50]:
            assert popularity_select(st, m) == popularity_select(doubled, m)


class TestPreference:
    def test_user_stats_win(self):
        log = handmade_log() + [imp(10 + i, 4, 0, SLATE, [0, 0, 0], 1) for i in range(3)]
        st = FeedbackStats.from_log(log)
        # user 4 on element 10: 4/5 beats the shop-level fallbacks 11 (3/4) and 12 (1/2)
        assert preference_select(st, imp(20, 4, 0, SLATE, [0, 0, 0], 1))[0] == 0
        assert popularity_select(st, imp(20, 4, 0, SLATE, [0, 0, 0], 1))[0] == 1

    def test_contradicting_stats(self):
        # user 0 likes 10 and dislikes 12; the shop as a whole clicks 12 most
        log = [imp(i, 0, 0, SLATE, [0, 0, 0], 1) for i in range(5)]
        log += [imp(5 + i, 0, 0, SLATE, [2, 0, 0], 0) for i in range(3)]
        log += [imp(10 + i, 1, 0, SLATE, [2, 0, 0], 1) for i in range(40)]
        st = FeedbackStats.from_log(log)
        q = imp(99, 0, 0, SLATE, [0, 0, 0], 1)
        assert popularity_select(st, q)[0] == 2
        assert preference_select(st, q)[0] == 0

    def test_no_history_equals_popularity(self):
        st = FeedbackStats.from_log(handmade_log())
        q = imp(9, 42, 0, SLATE, [0, 0, 0], 1)
        assert preference_select(st, q) == popularity_select(st, q)


class TestEGreedy:
    def test_zero_is_popularity(self):
        st = FeedbackStats.from_log(handmade_log())
        for i in range(20):
            q = imp(i, 0, 0, SLATE, [0, 0, 0], 1)
            assert egreedy_select(st, q, 0.0, seed=3) == popularity_select(st, q)

    def test_deterministic(self):
        st = FeedbackStats.from_log(handmade_log())
        q = imp(17, 0, 0, SLATE, [0, 0, 0], 1)
        assert egreedy_select(st, q, 0.5, seed=1) == egreedy_select(st, q, 0.5, seed=1)

    def test_full_exploration_uniform(self):
        st = FeedbackStats()
        slate = [list(range(5))] * 3
        picks = np.array([egreedy_select(st, imp(i, 0, 0, slate, [0, 0, 0], 1), 1.0) for i in range(20_000)])
        for c in range(3):
            counts = np.bincount(picks[:, c], minlength=5)
            assert ((counts - counts.mean()) ** 2 / counts.mean()).sum() < CHI2_01_DF4

    def test_bad_epsilon(self):
        with pytest.raises(UsageError):
            egreedy_select(FeedbackStats(), imp(0, 0, 0, SLATE, [0, 0, 0], 1), 1.5)


def tiny_cfg(**kw):
    base = dict(vocab_sizes=(6, 6, 6), num_users=4, num_shops=3, d_dim=4, max_candidates=3)
    base.update(kw)
    return ModelConfig(**base)


def random_log(n, seed=0):
    rng = np.random.default_rng(seed)
    return [imp(i, int(rng.integers(4)), int(rng.integers(3)),
                [rng.choice(6, 3, replace=False).tolist() for _ in range(3)],
                [int(x) for x in rng.integers(3, size=3)], 1) for i in range(n)]


class TestIndependentModel:
    def test_arch_checked(self):
        with pytest.raises(ConfigError):
            IndependentModel(tiny_cfg())

    def test_matches_double_ablation(self):
        """With h pinned to h0 and no pooled context, the double ablation is the independent model."""
        ind = IndependentModel(tiny_cfg(arch="independent"), seed=5)
        cfg = tiny_cfg(use_cei=False, use_ces=False, context_pool=False)
        cecs = CECSModel(cfg, seed=9)
        for n, v in ind.params.items():
            cecs.params[n] = v.copy()
        cecs.params["gru.b_z"][:] = -1e3  # update gate shut: h_1 = h_0 exactly
        batches = batches_by_shape(random_log(40))
        a, _ = batch_loss(ind, ind.tensors(), batches, "off")
        b, _ = batch_loss(cecs, cecs.tensors(), batches, "off")
        assert abs(a.item() - b.item()) <= 1e-10
        for batch in batches:
            assert np.array_equal(ind.predict(batch), cecs.predict(batch))

    def test_no_cross_category_flow(self):
        ind = IndependentModel(tiny_cfg(arch="independent"), seed=1)
        base = [[0, 1, 2], [0, 1, 2], [0, 1, 2]]
        swapped = [[0, 1, 2], [3, 4, 5], [0, 1, 2]]
        assert independent_select(ind, imp(0, 1, 1, base, [0, 0, 0], 1))[0::2] == \
            independent_select(ind, imp(0, 1, 1, swapped, [0, 0, 0], 1))[0::2]

    def test_fit_deterministic(self):
        log = random_log(120)
        tc = TrainConfig(lr=0.01, epochs=2, batch_size=16)
        a, _ = independent_fit(log[:100], log[100:], tiny_cfg(), tc)
        b, _ = independent_fit(log[:100], log[100:], tiny_cfg(), tc)
        assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)


@pytest.mark.slow
class TestSeparableWorld:
    """gamma=0 with ample data per user: the per-category learner should recover the oracle."""

    @pytest.fixture(scope="class")
    @classmethod
    def fitted(cls):
        spec = GeneratorSpec(num_users=5, num_shops=2, gamma=0.0, base_logit=-2.0, user_affinity=4.0,
                             impressions=100_000, seed=0)
        world = gen_world(spec)
        log = list(simulate_logs(world))
        n_train = 90_000
        train, test = log[:n_train], log[n_train:]
        cfg = ModelConfig(vocab_sizes=tuple(len(e) for e in world.elements), num_users=5, num_shops=2,
                          d_dim=8, arch="independent", context_pool=False)
        cut = int(n_train * 0.9)
        tc = TrainConfig(lr=0.03, epochs=30, batch_size=256, weight_decay=0.003)
        model, _ = independent_fit(train[:cut], train[cut:], cfg, tc)
        return world, spec, model, test

    def test_oracle_hr(self, fitted):
        world, spec, model, test = fitted
        rep = evaluate("independent", lambda xs: np.array([independent_select(model, x) for x in xs]),
                       test, world=world, oracle=True)
        print(f"separable world: independent oracle-HR {rep.oracle_hr:.4f}")
        assert rep.oracle_hr >= 0.9

    def test_exact_match_rate(self, fitted):
        world, spec, model, test = fitted
        clicked = [m for m in test if m.label]
        hits = [independent_select(model, m) == oracle_best(world, spec, m.user, m.shop, m.cands) for m in clicked]
        print(f"separable world: exact oracle match on {np.mean(hits):.4f} of slates")
        assert np.mean(hits) >= 0.9
