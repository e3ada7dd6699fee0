import itertools
import json
import math

import numpy as np
import pytest

from cecs.data import (
    ORACLE_COUNTER,
    GeneratorSpec,
    Impression,
    combination_logits,
    gen_world,
    load_world,
    main_effect_argmax,
    oracle_best,
    read_log,
    save_world,
    simulate_logs,
    split_counts,
    true_click_prob,
    write_log,
)
from cecs.errors import CapacityError, ConfigError, DataError, SlateError

from oracles import click_prob

# chi-square critical values at alpha = 0.01
CHI2_01 = {4: 13.277, 9: 21.666, 24: 42.980}


def small(**kw):
    base = dict(num_users=30, num_shops=6, impressions=2000, latent_dim=4)
    base.update(kw)
    return GeneratorSpec(**base)


def chi2(counts):
    counts = np.asarray(counts, dtype=float)
    exp = counts.sum() / counts.size
    return float(((counts - exp) ** 2 / exp).sum())


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(num_users=0), dict(k=1), dict(gamma=-1.0), dict(latent_dim=0),
                                    dict(impressions=-1), dict(main_weights=(1.0, 1.0)),
                                    dict(catalog_size=3)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            GeneratorSpec(**kw)

    def test_unknown_field_named(self):
        with pytest.raises(ConfigError, match="colour"):
            GeneratorSpec.from_dict({"colour": 1})

    def test_roundtrip(self):
        spec = small(catalog_size=20, gamma=0.5)
        assert GeneratorSpec.from_dict(spec.to_dict()) == spec

    def test_int_inputs_coerced(self):
        spec = GeneratorSpec(gamma=2, base_logit=-1, user_affinity=1)
        assert isinstance(spec.base_logit, float)


class TestWorld:
    def test_deterministic(self):
        a, b = gen_world(small(seed=4)), gen_world(small(seed=4))
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())

    def test_gamma_does_not_change_world(self):
        a, b = gen_world(small(gamma=0.0)), gen_world(small(gamma=3.0))
        assert np.array_equal(a.users, b.users)
        assert all(np.array_equal(x, y) for x, y in zip(a.elements, b.elements))
        assert all(np.array_equal(a.pairs[key], b.pairs[key]) for key in a.pairs)

    def test_scalar_pairs_at_p1(self):
        w = gen_world(small(latent_dim=1))
        assert all(m.shape == (1, 1) for m in w.pairs.values())
        assert set(w.pairs) == {(0, 1), (0, 2), (1, 2)}

    def test_latent_scales(self):
        w = gen_world(GeneratorSpec(num_users=4000, latent_dim=8, impressions=0))
        assert np.std(w.users) == pytest.approx(1 / math.sqrt(8), rel=0.03)
        big = gen_world(GeneratorSpec(num_users=5, latent_dim=40, impressions=0))
        assert np.std(np.stack(list(big.pairs.values()))) == pytest.approx(1 / 40, rel=0.05)

    def test_pools(self):
        w = gen_world(small())
        assert w.pools.shape == (6, 3, 5)
        assert len(np.unique(w.pools[:, 0])) == 30  # disjoint per shop
        c = gen_world(small(catalog_size=12))
        assert c.pools.max() < 12
        assert all(len(set(c.pool(s, k))) == 5 for s in range(6) for k in range(3))

    def test_file_roundtrip(self, tmp_path):
        w = gen_world(small(catalog_size=12))
        save_world(tmp_path / "w.json", w)
        back = load_world(tmp_path / "w.json")
        assert np.array_equal(back.users, w.users) and np.array_equal(back.pools, w.pools)
        assert back.spec == w.spec


class TestClickProb:
    def test_flat(self):
        w = gen_world(small(gamma=0.0, main_weights=(0.0, 0.0, 0.0)))
        for combo in [(0, 1, 2), (5, 7, 29)]:
            assert true_click_prob(w, w.spec, 3, 0, combo) == 0.5

    def test_very_negative_base(self):
        w = gen_world(small(base_logit=-50.0))
        assert true_click_prob(w, w.spec, 0, 0, (0, 0, 0)) < 1e-20

    def test_hand_p1(self):
        spec = small(latent_dim=1, gamma=1.5, base_logit=0.3, main_weights=(1.0, 0.5, 2.0), user_affinity=1.2)
        w = gen_world(spec)
        w.users[:] = 0.5
        for c, vals in enumerate([[1.0, -2.0], [0.4, 3.0], [-1.0, 0.25]]):
            w.elements[c][:2, 0] = vals
        w.pairs = {(0, 1): np.array([[2.0]]), (0, 2): np.array([[-1.0]]), (1, 2): np.array([[0.5]])}
        z = (-2.0, 0.4, 0.25)  # combo (1, 0, 1)
        logit = 0.3 + 1.2 * 0.5 * (1.0 * z[0] + 0.5 * z[1] + 2.0 * z[2])
        logit += 1.5 * (z[0] * 2.0 * z[1] + z[0] * -1.0 * z[2] + z[1] * 0.5 * z[2])
        assert true_click_prob(w, spec, 7, 0, (1, 0, 1)) == pytest.approx(1 / (1 + math.exp(-logit)), abs=1e-12)

    def test_matches_scalar_oracle(self):
        w = gen_world(small(catalog_size=15, base_logit=-0.5, user_affinity=1.7))
        rng = np.random.default_rng(0)
        for _ in range(20):
            combo = [int(x) for x in rng.integers(15, size=3)]
            u = int(rng.integers(30))
            assert true_click_prob(w, w.spec, u, 0, combo) == pytest.approx(click_prob(w, u, combo), abs=1e-12)

    def test_unknown_ids(self):
        w = gen_world(small())
        with pytest.raises(DataError):
            true_click_prob(w, w.spec, 999, 0, (0, 0, 0))
        with pytest.raises(DataError):
            true_click_prob(w, w.spec, 0, 0, (0, 0, 10_000))
        with pytest.raises(DataError):
            true_click_prob(w, w.spec, 0, 99, (0, 0, 0))


class TestSimulate:
    def test_empty(self):
        assert list(simulate_logs(gen_world(small(impressions=0)))) == []

    def test_flat_ctr(self):
        spec = GeneratorSpec(num_users=50, num_shops=10, gamma=0.0, main_weights=(0.0, 0.0, 0.0),
                             impressions=100_000, seed=1)
        labels = np.array([m.label for m in simulate_logs(gen_world(spec))])
        assert abs(labels.mean() - 0.5) <= 0.01

    def test_shown_uniform_chi2(self):
        spec = GeneratorSpec(num_users=50, num_shops=10, impressions=100_000, seed=2)
        counts = np.zeros((3, 5))
        for m in simulate_logs(gen_world(spec)):
            for c, j in enumerate(m.shown):
                counts[c, j] += 1
        for c in range(3):
            assert chi2(counts[c]) < CHI2_01[4]

    def test_slates_from_pool(self):
        w = gen_world(small(catalog_size=20))
        for m in itertools.islice(simulate_logs(w), 300):
            for c, ids in enumerate(m.cands):
                assert len(ids) == 5 and len(set(ids)) == 5
                assert set(ids) <= set(w.pool(m.shop, c).tolist())
            assert all(0 <= j < 5 for j in m.shown)

    def test_slate_capped(self):
        w = gen_world(small(slate_size=3))
        assert all(len(c) == 3 for m in itertools.islice(simulate_logs(w), 50) for c in m.cands)

    def test_labels_follow_true_prob(self):
        w = gen_world(small(impressions=20_000, seed=3))
        logs = list(simulate_logs(w))
        probs = np.array([true_click_prob(w, w.spec, m.user, m.shop,
                                          [m.cands[c][j] for c, j in enumerate(m.shown)]) for m in logs])
        labels = np.array([m.label for m in logs])
        # calibration by decile
        bins = np.quantile(probs, np.linspace(0, 1, 11))
        idx = np.clip(np.searchsorted(bins, probs, side="right") - 1, 0, 9)
        for b in range(10):
            sel = idx == b
            se = math.sqrt(probs[sel].mean() * (1 - probs[sel].mean()) / sel.sum())
            assert abs(labels[sel].mean() - probs[sel].mean()) < 4 * se + 1e-3

    def test_byte_identical_files(self, tmp_path):
        for name in ("a", "b"):
            write_log(tmp_path / f"{name}.jsonl", simulate_logs(gen_world(small(seed=9))))
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestLogFiles:
    def test_line_format(self, tmp_path):
        write_log(tmp_path / "l.jsonl", [Impression(3, 1, 2, [[4, 5], [6]], [1, 0], 1)])
        line = (tmp_path / "l.jsonl").read_text().strip()
        assert json.loads(line) == {"id": 3, "user": 1, "shop": 2, "cands": [[4, 5], [6]], "shown": [1, 0],
                                    "label": 1}

    @pytest.mark.parametrize("bad", [
        '{"id": 0, "user": 0, "shop": 0, "cands": [[1]], "shown": [1], "label": 1}',
        '{"id": 0, "user": 0, "shop": 0, "cands": [[1]], "shown": [0], "label": 2}',
        '{"id": 0, "user": 0, "shop": 0, "cands": [[1]]}',
        '{not json',
    ])
    def test_malformed(self, tmp_path, bad):
        (tmp_path / "l.jsonl").write_text(bad + "\n")
        with pytest.raises(DataError):
            read_log(tmp_path / "l.jsonl")

    @pytest.mark.parametrize("n,expect", [(200_000, (180_000, 20_000)), (10, (9, 1)), (19, (18, 1)), (0, (0, 0))])
    def test_split(self, n, expect):
        assert split_counts(n) == expect


class TestOracle:
    def test_identical_latents_tie_break(self):
        w = gen_world(small())
        for c in range(3):
            w.elements[c][:] = w.elements[c][0]
        assert oracle_best(w, w.spec, 0, 0, [w.pool(0, c).tolist() for c in range(3)]) == [0, 0, 0]

    @pytest.mark.parametrize("seed", range(4))
    def test_separable_equals_main_effect(self, seed):
        w = gen_world(small(gamma=0.0, seed=seed))
        rng = np.random.default_rng(seed)
        for _ in range(50):
            u, s = int(rng.integers(30)), int(rng.integers(6))
            slate = [w.pool(s, c).tolist() for c in range(3)]
            assert oracle_best(w, w.spec, u, s, slate) == main_effect_argmax(w, u, slate)

    def test_enumerates_125(self):
        w = gen_world(small())
        ORACLE_COUNTER.reset()
        oracle_best(w, w.spec, 0, 0, [w.pool(0, c).tolist() for c in range(3)])
        assert ORACLE_COUNTER.combinations == 125

    def test_matches_loop_enumeration(self):
        w = gen_world(small(gamma=2.0, catalog_size=15, seed=5))
        rng = np.random.default_rng(1)
        for _ in range(10):
            u = int(rng.integers(30))
            slate = [rng.choice(15, size=int(rng.integers(1, 5)), replace=False).tolist() for _ in range(3)]
            best, best_p = None, -1.0
            for combo in itertools.product(*(range(len(s)) for s in slate)):
                p = click_prob(w, u, [slate[c][j] for c, j in enumerate(combo)])
                if p > best_p:
                    best, best_p = list(combo), p
            assert oracle_best(w, w.spec, u, 0, slate) == best

    def test_gamma_only_acts_through_pairs(self):
        w0 = gen_world(small(gamma=0.0, seed=2))
        w2 = gen_world(small(gamma=2.0, seed=2))
        slate = [w0.pool(1, c).tolist() for c in range(3)]
        diff = combination_logits(w2, 4, slate) - combination_logits(w0, 4, slate)
        z = [w0.elements[c][slate[c]] for c in range(3)]
        pair = (2.0 * (z[0] @ w0.pairs[(0, 1)] @ z[1].T)[:, :, None]
                + 2.0 * (z[0] @ w0.pairs[(0, 2)] @ z[2].T)[:, None, :]
                + 2.0 * (z[1] @ w0.pairs[(1, 2)] @ z[2].T)[None, :, :])
        assert np.allclose(diff, pair, atol=1e-12)

    def test_capacity_guard(self):
        spec = GeneratorSpec(num_users=2, num_shops=1, k=3, elements_per_shop=101, slate_size=101,
                             latent_dim=2, impressions=0, catalog_size=101)
        w = gen_world(spec)
        slate = [list(range(101))] * 3
        with pytest.raises(CapacityError):
            oracle_best(w, spec, 0, 0, slate)

    def test_empty_category(self):
        w = gen_world(small())
        with pytest.raises(SlateError):
            oracle_best(w, w.spec, 0, 0, [[0], [], [1]])
