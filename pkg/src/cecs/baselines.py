"""Feedback-count strategies and a learned per-category (no cross-element) selector.

The count strategies use Laplace-smoothed CTR, ``(clicks + 1) / (impressions + 2)``;
an element never shown therefore scores 0.5.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, UsageError
from .model import (
    ModelConfig,
    ModelParams,
    SlateBatch,
    as_tensors,
    check_params,
    decode_context,
    init_params,
    mlp_encode,
    pointer_scores,
)


@dataclass
class FeedbackStats:
    """Impression/click counts keyed by (shop, category, element) and (user, category, element)."""

    shop: dict[tuple[int, int, int], list[int]] = field(default_factory=lambda: defaultdict(lambda: [0, 0]))
    user: dict[tuple[int, int, int], list[int]] = field(default_factory=lambda: defaultdict(lambda: [0, 0]))

    @classmethod
    def from_log(cls, train: Sequence) -> "FeedbackStats":
        """Build from the training log only; never pass test data here."""
        stats = cls()
        for m in train:
            for c, (cands, j) in enumerate(zip(m.cands, m.shown)):
                e = cands[j]
                s = stats.shop[(m.shop, c, e)]
                s[0] += 1
                s[1] += m.label
                u = stats.user[(m.user, c, e)]
                u[0] += 1
                u[1] += m.label
        return stats

    def scaled(self, factor: int) -> "FeedbackStats":
        out = FeedbackStats()
        for key, (n, c) in self.shop.items():
            out.shop[key] = [n * factor, c * factor]
        for key, (n, c) in self.user.items():
            out.user[key] = [n * factor, c * factor]
        return out

    def shop_ctr(self, shop: int, category: int, element: int) -> float:
        n, c = self.shop.get((shop, category, element), (0, 0))
        return (c + 1) / (n + 2)

    def user_ctr(self, user: int, category: int, element: int) -> float | None:
        n, c = self.user.get((user, category, element), (0, 0))
        return (c + 1) / (n + 2) if n >= 1 else None

    def save(self, path: str | Path) -> None:
        enc = lambda d: {f"{a}|{b}|{e}": v for (a, b, e), v in sorted(d.items())}
        Path(path).write_text(json.dumps({"shop": enc(self.shop), "user": enc(self.user)}), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeedbackStats":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            stats = cls()
            for key, v in doc["shop"].items():
                stats.shop[tuple(int(x) for x in key.split("|"))] = [int(v[0]), int(v[1])]
            for key, v in doc["user"].items():
                stats.user[tuple(int(x) for x in key.split("|"))] = [int(v[0]), int(v[1])]
        except (KeyError, IndexError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed stats cache ({exc})") from None
        return stats


def _argmax(scores: Sequence[float]) -> int:
    best, best_i = None, 0
    for i, s in enumerate(scores):
        if best is None or s > best:
            best, best_i = s, i
    return best_i


def popularity_select(stats: FeedbackStats, imp) -> list[int]:
    return [_argmax([stats.shop_ctr(imp.shop, c, e) for e in cands]) for c, cands in enumerate(imp.cands)]


def preference_select(stats: FeedbackStats, imp) -> list[int]:
    """User-level CTR where the user has seen the element, shop-level otherwise."""
    out = []
    for c, cands in enumerate(imp.cands):
        scores = []
        for e in cands:
            u = stats.user_ctr(imp.user, c, e)
            scores.append(stats.shop_ctr(imp.shop, c, e) if u is None else u)
        out.append(_argmax(scores))
    return out


def egreedy_select(stats: FeedbackStats, imp, epsilon: float = 0.1, seed: int = 0) -> list[int]:
    """Per category: explore uniformly with probability epsilon, else act like popularity."""
    if not 0.0 <= epsilon <= 1.0:
        raise UsageError(f"epsilon must be in [0, 1], got {epsilon}")
    rng = np.random.default_rng([seed, imp.id])
    greedy = popularity_select(stats, imp)
    out = []
    for c, cands in enumerate(imp.cands):
        explore = rng.random() < epsilon
        pick = int(rng.integers(len(cands)))
        out.append(pick if explore else greedy[c])
    return out


# ---------------------------------------------------------------- learned


class IndependentModel:
    """One softmax per category over context . mlp(embedding); no cross-category flow.

    The context is tanh(W_ctx (user + shop) + b_ctx), shared by every category.
    """

    def __init__(self, config: ModelConfig, params: ModelParams | None = None, seed: int = 0):
        if config.arch != "independent":
            raise ConfigError(f"IndependentModel needs arch='independent', got {config.arch!r}")
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        check_params(config, self.params)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return as_tensors(self.params, requires_grad)

    def step_probs(self, T: dict[str, Tensor], batch: SlateBatch) -> list[Tensor]:
        if len(batch.cands) != self.config.k:
            raise DataError(f"slate has {len(batch.cands)} categories, model expects {self.config.k}")
        extra = ad.add(ad.take_rows(T["emb.user"], batch.users), ad.take_rows(T["emb.shop"], batch.shops))
        ctx, _ = decode_context([], T, extra, pool=False)
        probs = []
        for c, ids in enumerate(batch.cands):
            enc = mlp_encode(ad.take_rows(T[f"emb.{c}"], ids), T["mlp.W"], T["mlp.b"])
            probs.append(ad.scaled_softmax(pointer_scores(enc, ctx), self.config.d_dim))
        return probs

    def predict(self, batch: SlateBatch) -> np.ndarray:
        probs = self.step_probs(self.tensors(), batch)
        return np.stack([np.argmax(p.data, axis=-1) for p in probs], axis=-1)


def independent_fit(train: Sequence, val: Sequence, config: ModelConfig, tc, log=None):
    """Train the independent selector with the unweighted sum of per-category losses."""
    from dataclasses import replace

    from .training import fit

    cfg = replace(config, arch="independent")
    tc = replace(tc, uncertainty="off")
    params, history = fit(train, val, cfg, tc, log=log)
    return IndependentModel(cfg, params), history


def independent_select(model: IndependentModel, imp) -> list[int]:
    from .model import single_batch

    return [int(x) for x in model.predict(single_batch(imp.user, imp.shop, imp.cands))[0]]
