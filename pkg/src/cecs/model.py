"""Cross-element interaction encoder and cascade element-selection decoder.

All operations accept tensors with arbitrary leading batch dimensions:
a single slate has candidate embeddings of shape (N_i, d), a batch of
same-shaped slates (B, N_i, d).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GRUWeights, Tensor
from .errors import ConfigError, SlateError, UsageError

ARCHS = ("cecs", "independent")
GLIMPSES = ("soft", "hard")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``glimpse="soft"`` feeds the probability-weighted candidate mix forward;
    ``"hard"`` feeds the chosen candidate (the logged one while training).
    ``context_pool`` controls whether encoded candidates enter h_0.
    """

    vocab_sizes: tuple[int, ...] = (1000, 1000, 1000)
    num_users: int = 2000
    num_shops: int = 200
    d_dim: int = 16
    max_candidates: int = 5
    use_cei: bool = True
    use_ces: bool = True
    glimpse: str = "soft"
    context_pool: bool = True
    arch: str = "cecs"

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.d_dim < 2:
            raise ConfigError(f"d_dim must be >= 2, got {self.d_dim}")
        if self.max_candidates < 1:
            raise ConfigError(f"max_candidates must be >= 1, got {self.max_candidates}")
        if min(self.vocab_sizes) < 1 or self.num_users < 1 or self.num_shops < 1:
            raise ConfigError("vocabulary sizes must all be >= 1")
        if self.glimpse not in GLIMPSES:
            raise ConfigError(f"glimpse must be one of {GLIMPSES}, got {self.glimpse!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")

    @property
    def k(self) -> int:
        return len(self.vocab_sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown model field(s): {', '.join(sorted(extra))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from None


ModelParams = dict  # name -> float64 ndarray, insertion order is canonical


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for c, v in enumerate(config.vocab_sizes):
        shapes[f"emb.{c}"] = (v, d)
    shapes["emb.user"] = (config.num_users, d)
    shapes["emb.shop"] = (config.num_shops, d)
    if config.arch == "independent" or not config.use_cei:
        shapes["mlp.W"] = (d, d)
        shapes["mlp.b"] = (d,)
    if config.arch == "cecs" and config.use_cei:
        shapes["center.W"] = (d, d)
        shapes["center.b"] = (d,)
    shapes["ctx.W"] = (d, d)
    shapes["ctx.b"] = (d,)
    if config.arch == "cecs":
        shapes["start"] = (d,)
        for n in GRUWeights.NAMES:
            shapes[f"gru.{n}"] = (d,) if n.startswith("b_") else (d, d)
        shapes["s"] = (config.k,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(+-1/sqrt(d)) weights and embeddings, zero biases and log-variances."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(config.d_dim)
    params: ModelParams = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "s" or leaf == "b" or leaf.startswith("b_"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def as_tensors(params: ModelParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {n: Tensor(v, requires_grad=requires_grad, name=n) for n, v in params.items()}


def gru_weights(T: dict[str, Tensor]) -> GRUWeights:
    return GRUWeights(*(T[f"gru.{n}"] for n in GRUWeights.NAMES))


class ScoringCounter:
    """Counts candidate scorings made by the decoder (one per candidate per step)."""

    def __init__(self):
        self.scorings = 0

    def reset(self):
        self.scorings = 0


SCORING_COUNTER = ScoringCounter()


# ---------------------------------------------------------------- encoder


def category_centers(embedded: Sequence[Tensor]) -> list[Tensor]:
    """Mean-pool each category's candidate embeddings, (..., N_i, d) -> (..., d)."""
    out = []
    for c, e in enumerate(embedded):
        if e.shape[-2] == 0:
            raise SlateError(f"category {c} has no candidates")
        out.append(ad.mean(e, axis=-2))
    return out


def transform_centers(centers: Sequence[Tensor], w: Tensor, b: Tensor) -> list[Tensor]:
    return [ad.tanh(ad.linear(c, w, b)) for c in centers]


def cei_encode(embedded: Tensor, transformed: Sequence[Tensor], d_dim: int) -> Tensor:
    """Residual cross-attention of candidates over the transformed centers.

    ``embedded`` is (..., N, d); each center is (..., d).  Every candidate
    attends over the k centers with scores v_i.E / sqrt(d) and adds the
    attention-weighted centers to itself.
    """
    keys = ad.stack(transformed, axis=-1)  # (..., d, k)
    values = ad.stack(transformed, axis=-2)  # (..., k, d)
    alpha = ad.scaled_softmax(ad.matmul(embedded, keys), d_dim)  # (..., N, k)
    return ad.add(embedded, ad.matmul(alpha, values))


def mlp_encode(embedded: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.tanh(ad.linear(embedded, w, b))


def decode_context(encoded: Sequence[Tensor], T: dict[str, Tensor], extra: Tensor | None = None,
                   pool: bool = True) -> tuple[Tensor, Tensor]:
    """Initial hidden state and start glimpse for the decoder.

    h_0 = tanh(W_ctx (mean of all encoded candidates + extra) + b_ctx); the
    start glimpse is the learned ``start`` vector broadcast to the batch.
    """
    parts = []
    if pool:
        parts.append(ad.mean(ad.concat(encoded, axis=-2), axis=-2))
    if extra is not None:
        parts.append(extra)
    if not parts:
        raise UsageError("decode_context: nothing to pool")
    ctx = parts[0]
    for p in parts[1:]:
        ctx = ad.add(ctx, p)
    h0 = ad.tanh(ad.linear(ctx, T["ctx.W"], T["ctx.b"]))
    y0 = ad.broadcast_to(T["start"], h0.shape) if "start" in T else None
    return h0, y0


def pointer_scores(candidates: Tensor, query: Tensor) -> Tensor:
    """Dot product of every candidate (..., N, d) with the query (..., d)."""
    n, d = candidates.shape[-2:]
    SCORING_COUNTER.scorings += int(np.prod(candidates.shape[:-1]))
    q = ad.reshape(query, query.shape + (1,))
    return ad.reshape(ad.matmul(candidates, q), candidates.shape[:-1])


def soft_glimpse(p: Tensor, candidates: Tensor) -> Tensor:
    n, d = candidates.shape[-2:]
    row = ad.reshape(p, p.shape[:-1] + (1, n))
    return ad.reshape(ad.matmul(row, candidates), candidates.shape[:-2] + (d,))


def _argmax(p: np.ndarray) -> np.ndarray:
    return np.argmax(p, axis=-1)  # first maximum, i.e. lowest-index tie-break


@dataclass
class DecodeResult:
    probs: list[np.ndarray]
    glimpses: list[np.ndarray]
    hiddens: list[np.ndarray]
    combination: list[int]
    forced: tuple[int, ...] | None = None
    glimpse: str = "soft"


def ces_decode(encoded: Sequence[Tensor], h0: Tensor, y0: Tensor, gru: GRUWeights, d_dim: int,
               *, use_ces: bool = True, glimpse: str = "soft",
               force: np.ndarray | None = None) -> tuple[list[Tensor], list[Tensor], list[Tensor], np.ndarray]:
    """Run the cascade over categories in index order.

    Returns per-step probabilities, glimpses, hidden states (all tensors) and
    the greedy selections with shape (..., k).  In ``hard`` mode the glimpse
    fed forward is the candidate at ``force[..., i]`` when given, else the
    argmax; ``force`` is ignored in ``soft`` mode.
    """
    probs, glimpses, hiddens, chosen = [], [], [], []
    h_prev, y_prev = h0, y0
    fixed_h = None
    for i, cand in enumerate(encoded):
        if cand.shape[-2] == 0:
            raise SlateError(f"category {i} has no candidates")
        if use_ces:
            h = ad.gru_cell(y_prev, h_prev, gru)
        else:
            if fixed_h is None:
                fixed_h = ad.gru_cell(y0, h0, gru)
            h = fixed_h
        p = ad.scaled_softmax(pointer_scores(cand, h), d_dim)
        pick = _argmax(p.data)
        chosen.append(pick)
        if glimpse == "soft":
            y = soft_glimpse(p, cand)
        else:
            idx = pick if force is None else np.asarray(force)[..., i]
            y = ad.select(cand, idx)
        probs.append(p)
        glimpses.append(y)
        hiddens.append(h)
        h_prev, y_prev = h, y
    return probs, glimpses, hiddens, np.stack(chosen, axis=-1)


def combination_logprob(result: DecodeResult, combo: Sequence[int]) -> float:
    """Sum over categories of log p_i[combo_i].

    In hard-glimpse mode step i depends on the prefix, so ``result`` must
    come from a decode forced on ``combo`` (see :meth:`CECSModel.decode`).
    """
    if len(combo) != len(result.probs):
        raise UsageError(f"combination has {len(combo)} entries, slate has {len(result.probs)} categories")
    if result.glimpse == "hard":
        if result.forced is None or tuple(result.forced[:-1]) != tuple(combo[:-1]):
            raise UsageError("hard-glimpse logprob needs a decode forced on the same combination prefix")
    total = 0.0
    for p, j in zip(result.probs, combo):
        if not 0 <= j < len(p):
            raise UsageError(f"index {j} out of range for {len(p)} candidates")
        total += math.log(p[j]) if p[j] > 0 else -math.inf
    return total


# ---------------------------------------------------------------- batches


@dataclass
class SlateBatch:
    """Same-shaped slates: ``cands[c]`` is (B, N_c) element ids."""

    users: np.ndarray
    shops: np.ndarray
    cands: list[np.ndarray]
    targets: np.ndarray | None = None  # (B, k) candidate indices

    def __len__(self) -> int:
        return len(self.users)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cands)


def batches_by_shape(impressions: Sequence, order: Sequence[int] | None = None,
                     with_targets: bool = True) -> list[SlateBatch]:
    """Group impressions (in ``order``) into batches of identical slate shape."""
    order = range(len(impressions)) if order is None else order
    groups: dict[tuple[int, ...], list] = {}
    for i in order:
        imp = impressions[i]
        groups.setdefault(tuple(len(c) for c in imp.cands), []).append(imp)
    out = []
    for sizes, imps in groups.items():
        if any(n == 0 for n in sizes):
            raise SlateError("slate with an empty category")
        out.append(SlateBatch(
            users=np.array([m.user for m in imps], dtype=np.int64),
            shops=np.array([m.shop for m in imps], dtype=np.int64),
            cands=[np.array([m.cands[c] for m in imps], dtype=np.int64) for c in range(len(sizes))],
            targets=np.array([m.shown for m in imps], dtype=np.int64) if with_targets else None,
        ))
    return out


# ---------------------------------------------------------------- model


class CECSModel:
    """Parameters plus the forward pass of the full encoder-decoder."""

    def __init__(self, config: ModelConfig, params: ModelParams | None = None, seed: int = 0):
        if config.arch != "cecs":
            raise ConfigError(f"CECSModel needs arch='cecs', got {config.arch!r}")
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        check_params(config, self.params)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return as_tensors(self.params, requires_grad)

    def _check_batch(self, batch: SlateBatch) -> None:
        cfg = self.config
        if len(batch.cands) != cfg.k:
            raise SlateError(f"slate has {len(batch.cands)} categories, model expects {cfg.k}")
        for c, ids in enumerate(batch.cands):
            if ids.shape[-1] == 0:
                raise SlateError(f"category {c} has no candidates")
            if ids.shape[-1] > cfg.max_candidates:
                raise SlateError(f"category {c} has {ids.shape[-1]} candidates, cap is {cfg.max_candidates}")

    def encode(self, T: dict[str, Tensor], batch: SlateBatch) -> list[Tensor]:
        cfg = self.config
        self._check_batch(batch)
        embedded = [ad.take_rows(T[f"emb.{c}"], ids) for c, ids in enumerate(batch.cands)]
        if not cfg.use_cei:
            return [mlp_encode(e, T["mlp.W"], T["mlp.b"]) for e in embedded]
        v = transform_centers(category_centers(embedded), T["center.W"], T["center.b"])
        return [cei_encode(e, v, cfg.d_dim) for e in embedded]

    def forward(self, T: dict[str, Tensor], batch: SlateBatch, force: np.ndarray | None = None):
        cfg = self.config
        encoded = self.encode(T, batch)
        extra = ad.add(ad.take_rows(T["emb.user"], batch.users), ad.take_rows(T["emb.shop"], batch.shops))
        h0, y0 = decode_context(encoded, T, extra, pool=cfg.context_pool)
        return ces_decode(encoded, h0, y0, gru_weights(T), cfg.d_dim,
                          use_ces=cfg.use_ces, glimpse=cfg.glimpse, force=force)

    def step_probs(self, T: dict[str, Tensor], batch: SlateBatch) -> list[Tensor]:
        """Per-category distributions, teacher-forced on ``batch.targets``."""
        probs, *_ = self.forward(T, batch, force=batch.targets)
        return probs

    def predict(self, batch: SlateBatch) -> np.ndarray:
        probs, _, _, chosen = self.forward(self.tensors(), batch)
        return chosen

    def decode(self, users: int, shop: int, cands: Sequence[Sequence[int]],
               force: Sequence[int] | None = None) -> DecodeResult:
        """Decode one slate; ``force`` pins the hard-glimpse path to a combination."""
        batch = single_batch(users, shop, cands)
        f = None if force is None else np.asarray([force], dtype=np.int64)
        probs, glimpses, hiddens, chosen = self.forward(self.tensors(), batch, force=f)
        return DecodeResult(
            probs=[p.data[0] for p in probs],
            glimpses=[g.data[0] for g in glimpses],
            hiddens=[h.data[0] for h in hiddens],
            combination=[int(x) for x in chosen[0]],
            forced=None if force is None else tuple(int(x) for x in force),
            glimpse=self.config.glimpse,
        )

    def logprob(self, user: int, shop: int, cands: Sequence[Sequence[int]], combo: Sequence[int]) -> float:
        return combination_logprob(self.decode(user, shop, cands, force=combo), combo)


def single_batch(user: int, shop: int, cands: Sequence[Sequence[int]]) -> SlateBatch:
    return SlateBatch(np.array([user], dtype=np.int64), np.array([shop], dtype=np.int64),
                      [np.array([list(c)], dtype=np.int64) for c in cands])


def check_params(config: ModelConfig, params: ModelParams) -> None:
    want = param_shapes(config)
    if set(want) != set(params):
        missing = sorted(set(want) - set(params))
        extra = sorted(set(params) - set(want))
        raise ConfigError(f"parameter names disagree with config (missing {missing}, unexpected {extra})")
    for n, shape in want.items():
        if np.shape(params[n]) != shape:
            raise ConfigError(f"parameter {n} has shape {np.shape(params[n])}, config implies {shape}")
