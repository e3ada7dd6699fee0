"""Synthetic click logs with planted pairwise cross-element interactions.

Each shop owns a pool of ``elements_per_shop`` elements per category.
The true click logit of a user seeing one element per category is::

    b + affinity * sum_c a_c <u, z_c> + gamma * sum_{c<c'} z_c^T W_cc' z_c'

Logging is uniformly random over the slate, so the log is an unbiased
sample of user preference.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, DataError, SlateError

ORACLE_LIMIT = 10**6


@dataclass(frozen=True)
class GeneratorSpec:
    num_users: int = 2000
    num_shops: int = 200
    k: int = 3
    elements_per_shop: int = 5
    slate_size: int = 5
    latent_dim: int = 8
    gamma: float = 2.0
    base_logit: float = 0.0
    main_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    user_affinity: float = 1.0
    impressions: int = 200_000
    seed: int = 0
    catalog_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "main_weights", tuple(float(a) for a in self.main_weights))
        for name in ("gamma", "base_logit", "user_affinity"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("num_users", "num_shops", "elements_per_shop", "slate_size", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.impressions < 0:
            raise ConfigError(f"impressions must be >= 0, got {self.impressions}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.catalog_size is not None and self.catalog_size < self.elements_per_shop:
            raise ConfigError(f"catalog_size must be >= elements_per_shop, got {self.catalog_size}")
        if len(self.main_weights) != self.k:
            raise ConfigError(f"main_weights needs {self.k} entries, got {len(self.main_weights)}")

    @property
    def vocab_size(self) -> int:
        """Element vocabulary per category."""
        if self.catalog_size is None:
            return self.num_shops * self.elements_per_shop
        return self.catalog_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["main_weights"] = list(self.main_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown generator field(s): {', '.join(sorted(extra))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"generator: {exc}") from None


@dataclass
class World:
    """Latent ground truth; fully determined by ``(spec, seed)``."""

    spec: GeneratorSpec
    seed: int
    users: np.ndarray  # (num_users, p)
    elements: list[np.ndarray]  # per category, (vocab_size, p)
    pairs: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)  # (p, p)
    pools: np.ndarray | None = None  # (num_shops, k, elements_per_shop) element ids

    def pool(self, shop: int, category: int) -> np.ndarray:
        return self.pools[shop, category]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "users": self.users.tolist(),
            "elements": [e.tolist() for e in self.elements],
            "pairs": {f"{a},{b}": w.tolist() for (a, b), w in self.pairs.items()},
            "pools": self.pools.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        return cls(
            spec=GeneratorSpec.from_dict(d["spec"]),
            seed=int(d["seed"]),
            users=np.asarray(d["users"], dtype=np.float64),
            elements=[np.asarray(e, dtype=np.float64) for e in d["elements"]],
            pairs={tuple(int(x) for x in key.split(",")): np.asarray(w, dtype=np.float64)
                   for key, w in d["pairs"].items()},
            pools=np.asarray(d["pools"], dtype=np.int64),
        )


@dataclass
class Impression:
    id: int
    user: int
    shop: int
    cands: list[list[int]]
    shown: list[int]
    label: int

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "user": self.user, "shop": self.shop,
                           "cands": self.cands, "shown": self.shown, "label": self.label},
                          separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Impression":
        try:
            imp = cls(int(d["id"]), int(d["user"]), int(d["shop"]),
                      [[int(e) for e in c] for c in d["cands"]],
                      [int(i) for i in d["shown"]], int(d["label"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed impression record: {exc}") from None
        if len(imp.cands) != len(imp.shown):
            raise DataError(f"impression {imp.id}: {len(imp.cands)} categories but {len(imp.shown)} shown")
        for c, (cands, idx) in enumerate(zip(imp.cands, imp.shown)):
            if not cands:
                raise SlateError(f"impression {imp.id}: category {c} is empty")
            if not 0 <= idx < len(cands):
                raise DataError(f"impression {imp.id}: shown index {idx} out of range in category {c}")
        if imp.label not in (0, 1):
            raise DataError(f"impression {imp.id}: label must be 0 or 1")
        return imp


def _rngs(seed: int):
    ss = np.random.SeedSequence(int(seed))
    world_ss, log_ss = ss.spawn(2)
    return np.random.default_rng(world_ss), np.random.default_rng(log_ss)


def gen_world(spec: GeneratorSpec, seed: int | None = None) -> World:
    seed = spec.seed if seed is None else seed
    rng, _ = _rngs(seed)
    p = spec.latent_dim
    users = rng.standard_normal((spec.num_users, p)) / math.sqrt(p)
    elements = [rng.standard_normal((spec.vocab_size, p)) / math.sqrt(p) for _ in range(spec.k)]
    pairs = {(a, b): rng.standard_normal((p, p)) / p
             for a, b in itertools.combinations(range(spec.k), 2)}
    P = spec.elements_per_shop
    if spec.catalog_size is None:
        pools = np.broadcast_to(np.arange(spec.num_shops * P).reshape(spec.num_shops, 1, P),
                                (spec.num_shops, spec.k, P)).copy()
    else:
        pools = np.array([[rng.choice(spec.catalog_size, size=P, replace=False) for _ in range(spec.k)]
                          for _ in range(spec.num_shops)], dtype=np.int64)
    return World(spec, seed, users, elements, pairs, pools)


def _check_ids(world: World, user: int, elems: Sequence) -> None:
    if not 0 <= user < world.users.shape[0]:
        raise DataError(f"unknown user id {user}")
    for c, e in enumerate(elems):
        e = np.asarray(e)
        if e.size and (e.min() < 0 or e.max() >= world.elements[c].shape[0]):
            raise DataError(f"unknown element id in category {c}")


def combination_logits(world: World, user: int, slate: Sequence[Sequence[int]]) -> np.ndarray:
    """True click logits for every combination of ``slate`` (element ids).

    Returns an array of shape ``(N_1, ..., N_k)``.
    """
    spec = world.spec
    if len(slate) != spec.k:
        raise SlateError(f"slate has {len(slate)} categories, world has {spec.k}")
    _check_ids(world, user, slate)
    u = world.users[user]
    z = [world.elements[c][np.asarray(ids, dtype=np.int64)] for c, ids in enumerate(slate)]
    k = spec.k
    total = np.full(tuple(len(s) for s in slate), spec.base_logit)
    for c in range(k):
        shape = [1] * k
        shape[c] = -1
        total = total + (spec.user_affinity * spec.main_weights[c] * (z[c] @ u)).reshape(shape)
    if spec.gamma:
        for (a, b), w in world.pairs.items():
            shape = [1] * k
            shape[a] = z[a].shape[0]
            shape[b] = z[b].shape[0]
            total = total + (spec.gamma * (z[a] @ w @ z[b].T)).reshape(shape)
    return total


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def true_click_prob(world: World, spec: GeneratorSpec, user: int, shop: int,
                    combo: Sequence[int]) -> float:
    """Click probability of the combination given as one element id per category."""
    if not 0 <= shop < spec.num_shops:
        raise DataError(f"unknown shop id {shop}")
    logit = combination_logits(world, user, [[e] for e in combo]).reshape(())
    return float(_sigmoid(logit))


def simulate_logs(world: World, spec: GeneratorSpec | None = None,
                  chunk: int = 50_000) -> Iterator[Impression]:
    """Uniform-random serving: user, shop, slates and shown combination all uniform."""
    spec = world.spec if spec is None else spec
    _, rng = _rngs(world.seed)
    P, k = spec.elements_per_shop, spec.k
    n_slate = min(spec.slate_size, P)
    next_id = 0
    remaining = spec.impressions
    while remaining > 0:
        n = min(chunk, remaining)
        users = rng.integers(0, spec.num_users, size=n)
        shops = rng.integers(0, spec.num_shops, size=n)
        slates, shown = [], []
        logit = np.full(n, spec.base_logit)
        zs = []
        for c in range(k):
            ids = rng.permuted(world.pools[shops, c], axis=1)[:, :n_slate]
            pick = rng.integers(0, n_slate, size=n)
            slates.append(ids)
            shown.append(pick)
            z = world.elements[c][ids[np.arange(n), pick]]
            zs.append(z)
            logit += spec.user_affinity * spec.main_weights[c] * np.einsum("ij,ij->i", z, world.users[users])
        if spec.gamma:
            for (a, b), w in world.pairs.items():
                logit += spec.gamma * np.einsum("ij,ij->i", zs[a] @ w, zs[b])
        labels = rng.random(n) < _sigmoid(logit)
        for i in range(n):
            yield Impression(
                id=next_id + i,
                user=int(users[i]),
                shop=int(shops[i]),
                cands=[slates[c][i].tolist() for c in range(k)],
                shown=[int(shown[c][i]) for c in range(k)],
                label=int(labels[i]),
            )
        next_id += n
        remaining -= n


class EnumerationCounter:
    """Counts combinations scored by :func:`oracle_best`."""

    def __init__(self):
        self.combinations = 0

    def reset(self):
        self.combinations = 0


ORACLE_COUNTER = EnumerationCounter()


def oracle_best(world: World, spec: GeneratorSpec | None, user: int, shop: int,
                slate: Sequence[Sequence[int]]) -> list[int]:
    """Exhaustive argmax of the true click probability over all combinations.

    Returns candidate indices; ties go to the lexicographically smallest.
    """
    sizes = [len(s) for s in slate]
    if any(n == 0 for n in sizes):
        raise SlateError("oracle_best: empty category")
    total = math.prod(sizes)
    if total > ORACLE_LIMIT:
        raise CapacityError(f"oracle_best: {total} combinations exceeds limit {ORACLE_LIMIT}")
    spec = world.spec if spec is None else spec
    if not 0 <= shop < spec.num_shops:
        raise DataError(f"unknown shop id {shop}")
    logits = combination_logits(world, user, slate)
    ORACLE_COUNTER.combinations += logits.size
    # C-order flat argmax returns the first maximum, i.e. lexicographic tie-break
    flat = int(np.argmax(logits))
    return [int(i) for i in np.unravel_index(flat, logits.shape)]


def main_effect_argmax(world: World, user: int, slate: Sequence[Sequence[int]]) -> list[int]:
    """Per-category argmax of the user main effect alone (lowest index on ties)."""
    spec = world.spec
    u = world.users[user]
    out = []
    for c, ids in enumerate(slate):
        scores = spec.user_affinity * spec.main_weights[c] * (world.elements[c][np.asarray(ids)] @ u)
        out.append(int(np.argmax(scores)))
    return out


# ---------------------------------------------------------------- files


def write_log(path: str | Path, impressions: Iterable[Impression]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for imp in impressions:
            fh.write(imp.to_json())
            fh.write("\n")
            n += 1
    return n


def read_log(path: str | Path) -> list[Impression]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"log file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Impression.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def split_counts(n: int, train_fraction: float = 0.9) -> tuple[int, int]:
    """Test gets ``floor(n * (1 - train_fraction))``; the remainder goes to train."""
    n_test = int(math.floor(n * (1.0 - train_fraction) + 1e-9))
    return n - n_test, n_test


def save_world(path: str | Path, world: World) -> None:
    Path(path).write_text(json.dumps(world.to_dict()), encoding="utf-8")


def load_world(path: str | Path) -> World:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"world file not found: {path}")
    try:
        return World.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed world file: {exc}") from None
