"""Self-checks behind ``cecs verify``: gradients, normalization, metrics, oracle, counters."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import grad_check
from .data import ORACLE_COUNTER, GeneratorSpec, gen_world, main_effect_argmax, oracle_best
from .metrics import MetricWeights, hr, pr
from .model import SCORING_COUNTER, CECSModel, ModelConfig, SlateBatch, init_params
from .training import batch_loss, build_model


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: str
    expected: str
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _random_batch(rng, config: ModelConfig, sizes, batch: int) -> SlateBatch:
    return SlateBatch(
        users=rng.integers(config.num_users, size=batch),
        shops=rng.integers(config.num_shops, size=batch),
        cands=[np.stack([rng.choice(config.vocab_sizes[c], n, replace=False) for _ in range(batch)])
               for c, n in enumerate(sizes)],
        targets=np.stack([rng.integers(n, size=batch) for n in sizes], axis=-1),
    )


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_sizes=(7, 7, 7), num_users=5, num_shops=4, d_dim=4, max_candidates=3)
    base.update(kw)
    return ModelConfig(**base)


def model_grad_check(config: ModelConfig, coords: int = 120, seed: int = 0, uncertainty: str = "learned"):
    """Finite-difference check of the full training objective for ``config``."""
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    # move s and the biases off zero so every term is exercised
    for n, v in params.items():
        params[n] = v + 0.3 * rng.standard_normal(v.shape)
    batch = _random_batch(rng, config, (config.max_candidates,) * config.k, 3)
    model = build_model(config, params)

    def loss(T):
        obj, _ = batch_loss(model, T, [batch], uncertainty)
        return obj

    return grad_check(loss, params, 1e-5, coords=coords, seed=seed)


def check_gradients(coords: int = 120) -> CheckResult:
    t0 = time.perf_counter()
    worst, total = 0.0, 0
    variants = [
        ("cecs", tiny_config(), "learned"),
        ("cecs-hard", tiny_config(glimpse="hard"), "learned"),
        ("no-cei", tiny_config(use_cei=False), "learned"),
        ("no-ces", tiny_config(use_ces=False), "learned"),
        ("independent", tiny_config(arch="independent"), "off"),
    ]
    detail = []
    for i, (name, cfg, unc) in enumerate(variants):
        res = model_grad_check(cfg, coords, seed=i, uncertainty=unc)
        worst = max(worst, res.max_rel_error)
        total += res.checked
        detail.append(f"{name}={res.max_rel_error:.1e}")
    ok = worst < 1e-4 and total >= 100
    return CheckResult("grad_check d=4 k=3 N=3", ok,
                       f"max rel err {worst:.3e} over {total} coords ({', '.join(detail)})",
                       "< 1e-4 over >= 100 coords", time.perf_counter() - t0)


def check_primitives(seed: int = 0) -> CheckResult:
    """Per-primitive finite-difference checks on small random inputs."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    x = rng.standard_normal(4)
    h = rng.standard_normal(4)
    gru = {n: 0.5 * rng.standard_normal((4, 4) if n[0] in "wu" else 4) for n in ad.GRUWeights.NAMES}
    cases: dict[str, tuple[Callable, dict]] = {
        "matvec": (lambda T: ad.sum_(ad.tanh(ad.matvec(T["m"], T["x"]))), {"m": a, "x": x}),
        "matmul": (lambda T: ad.sum_(ad.mul(ad.matmul(T["a"], T["b"]), ad.matmul(T["a"], T["b"]))),
                   {"a": a, "b": b}),
        "scaled_softmax": (lambda T: ad.sum_(ad.mul(ad.scaled_softmax(T["s"], 4), ad.Tensor(np.arange(4.0)))),
                           {"s": x}),
        "sigmoid_exp_log": (lambda T: ad.sum_(ad.log(ad.add(ad.exp(ad.sigmoid(T["x"])), 1.0))), {"x": x}),
        "gru_cell": (lambda T: ad.sum_(ad.mul(ad.gru_cell(T["x"], T["h"], ad.GRUWeights(
            **{n: T[n] for n in ad.GRUWeights.NAMES})), ad.Tensor(np.arange(1.0, 5.0)))),
            {"x": x, "h": h, **gru}),
    }
    worst, total, detail = 0.0, 0, []
    for name, (fn, params) in cases.items():
        res = grad_check(fn, params, 1e-5)
        worst = max(worst, res.max_rel_error)
        total += res.checked
        detail.append(f"{name}={res.max_rel_error:.1e}")
    ok = worst < 1e-4 and total >= 100
    return CheckResult("grad_check primitives", ok, f"max rel err {worst:.3e} over {total} coords ({', '.join(detail)})",
                       "< 1e-4 over >= 100 coords", time.perf_counter() - t0)


def check_normalization(slates: int = 100, seed: int = 0) -> CheckResult:
    """Per-step sums and the brute-force joint sum on random slates with N_i <= 3."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    step_err, joint_err = 0.0, 0.0
    for glimpse in ("soft", "hard"):
        cfg = tiny_config(glimpse=glimpse)
        model = CECSModel(cfg, seed=seed)
        for p in model.params.values():
            p += 0.5 * rng.standard_normal(p.shape)
        for _ in range(slates // 2):
            sizes = tuple(int(n) for n in rng.integers(1, 4, size=cfg.k))
            b = _random_batch(rng, cfg, sizes, 1)
            user, shop, cands = int(b.users[0]), int(b.shops[0]), [c[0].tolist() for c in b.cands]
            res = model.decode(user, shop, cands)
            step_err = max(step_err, *(abs(math.fsum(p) - 1.0) for p in res.probs))
            total = math.fsum(math.exp(model.logprob(user, shop, cands, combo))
                              for combo in itertools.product(*(range(n) for n in sizes)))
            joint_err = max(joint_err, abs(total - 1.0))
    ok = step_err <= 1e-9 and joint_err <= 1e-6
    return CheckResult("probability normalization", ok,
                       f"step |sum-1| {step_err:.2e}, joint |sum-1| {joint_err:.2e} on {slates} slates",
                       "step <= 1e-9, joint <= 1e-6", time.perf_counter() - t0)


def check_metrics() -> CheckResult:
    t0 = time.perf_counter()
    w = MetricWeights((0.5, 0.3, 0.2))
    got = {
        "full": (hr([0, 1, 2], [0, 1, 2], w), pr([0, 1, 2], [0, 1, 2], w)),
        "cat1": (hr([0, 1, 2], [0, 0, 0], w), pr([0, 1, 2], [0, 0, 0], w)),
        "cat13": (None, pr([0, 1, 2], [0, 0, 2], w)),
    }
    want = {"full": (1.0, 1.0), "cat1": (1 / 3, 0.5), "cat13": (None, 0.7)}
    ok = all((g is None or abs(g - e) <= 1e-12)
             for key in want for g, e in zip(got[key], want[key]))
    return CheckResult("metric exactness", ok, repr(got), repr(want), time.perf_counter() - t0)


def check_separable_oracle(instances: int = 200, seed: int = 0) -> CheckResult:
    """At gamma=0 the enumerated best equals the per-category main-effect argmax."""
    t0 = time.perf_counter()
    spec = GeneratorSpec(num_users=50, num_shops=20, gamma=0.0, impressions=0, seed=seed)
    world = gen_world(spec)
    rng = np.random.default_rng(seed)
    agree = 0
    for _ in range(instances):
        user = int(rng.integers(spec.num_users))
        shop = int(rng.integers(spec.num_shops))
        slate = [world.pool(shop, c).tolist() for c in range(spec.k)]
        agree += list(oracle_best(world, spec, user, shop, slate)) == main_effect_argmax(world, user, slate)
    return CheckResult("separable oracle equivalence", agree == instances, f"{agree}/{instances}",
                       f"{instances}/{instances}", time.perf_counter() - t0)


def check_complexity() -> CheckResult:
    """Operation counters at N=5, k=3: sum N_i scorings vs prod N_i enumerations."""
    t0 = time.perf_counter()
    spec = GeneratorSpec(num_users=10, num_shops=4, impressions=0)
    world = gen_world(spec)
    cfg = ModelConfig(vocab_sizes=(spec.vocab_size,) * 3, num_users=10, num_shops=4, d_dim=4)
    model = CECSModel(cfg)
    slate = [world.pool(0, c).tolist() for c in range(3)]
    SCORING_COUNTER.reset()
    model.decode(0, 0, slate)
    scored = SCORING_COUNTER.scorings
    ORACLE_COUNTER.reset()
    oracle_best(world, spec, 0, 0, slate)
    enumerated = ORACLE_COUNTER.combinations
    return CheckResult("complexity counters N=5 k=3", (scored, enumerated) == (15, 125),
                       f"scorings {scored}, enumerations {enumerated}", "15, 125", time.perf_counter() - t0)


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "gradients": check_gradients,
    "primitives": check_primitives,
    "normalization": check_normalization,
    "metrics": check_metrics,
    "oracle": check_separable_oracle,
    "complexity": check_complexity,
}


def run_all(fault: str | None = None) -> list[CheckResult]:
    """Run every check; ``fault`` names an injected bug (mutation testing)."""
    if fault is None:
        return [fn() for fn in CHECKS.values()]
    with ad.inject_fault(fault):
        return [fn() for fn in CHECKS.values()]
