"""Losses, Adam, the training loop and checkpoint files."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Impression
from .errors import (
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    UsageError,
)
from .metrics import MetricWeights, hr, pr
from .model import CECSModel, ModelConfig, ModelParams, batches_by_shape, param_shapes

FORMAT_VERSION = 1
UNCERTAINTY_MODES = ("learned", "frozen", "off")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    positives_only: bool = True
    clip_norm: float = 5.0
    uncertainty: str = "learned"
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.uncertainty not in UNCERTAINTY_MODES:
            raise ConfigError(f"uncertainty must be one of {UNCERTAINTY_MODES}, got {self.uncertainty!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown train field(s): {', '.join(sorted(extra))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from None


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce: list[float]
    sigma2: list[float]
    val_hr: float | None
    val_pr: float | None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), separators=(",", ":")) + "\n" for r in self.epochs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


# ---------------------------------------------------------------- losses


def ce_loss(p: Tensor, target) -> Tensor:
    """-log(p[target] + 1e-12); batched over rows when ``p`` is (B, N)."""
    p = ad.as_tensor(p)
    if p.data.ndim == 1:
        t = int(target)
        if not 0 <= t < p.shape[0]:
            raise UsageError(f"target {t} out of range for {p.shape[0]} candidates")
        row = ad.pick(ad.reshape(p, (1, p.shape[0])), [t])
        return ad.reshape(ad.neg(ad.log(ad.add(row, 1e-12))), ())
    return ad.neg(ad.log(ad.add(ad.pick(p, target), 1e-12)))


def total_loss(losses: Sequence | Tensor, s: Tensor) -> Tensor:
    """Uncertainty-weighted sum: sum_i exp(-s_i) L_i + s_i, where s_i = log sigma_i^2."""
    s = ad.as_tensor(s)
    L = losses if isinstance(losses, Tensor) else ad.stack([ad.as_tensor(x) for x in losses])
    if L.shape != s.shape:
        raise UsageError(f"total_loss: losses {L.shape} vs log-variances {s.shape}")
    return ad.sum_(ad.add(ad.mul(ad.exp(ad.neg(s)), L), s))


# ---------------------------------------------------------------- models


def build_model(config: ModelConfig, params: ModelParams | None = None, seed: int = 0):
    if config.arch == "independent":
        from .baselines import IndependentModel

        return IndependentModel(config, params, seed)
    return CECSModel(config, params, seed)


def batch_loss(model, T: dict[str, Tensor], batches: Sequence, uncertainty: str = "learned"):
    """Mean per-category CE over ``batches`` combined into the training objective.

    Returns ``(objective, per_category_means)``.
    """
    n = sum(len(b) for b in batches)
    k = model.config.k
    sums: list[Tensor | None] = [None] * k
    for b in batches:
        for i, p in enumerate(model.step_probs(T, b)):
            term = ad.sum_(ce_loss(p, b.targets[:, i]))
            sums[i] = term if sums[i] is None else ad.add(sums[i], term)
    means = [ad.scale(x, 1.0 / n) for x in sums]
    if uncertainty == "off" or "s" not in T:
        obj = means[0]
        for m in means[1:]:
            obj = ad.add(obj, m)
    else:
        obj = total_loss(means, T["s"])
    return obj, means


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(v) for n, v in params.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, g in grads.items():
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[n] = params[n] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for n in grads:
            grads[n] = grads[n] * factor
    return norm


def embedding_decay(grads: dict[str, np.ndarray], params: ModelParams, batches: Sequence,
                    weight_decay: float) -> None:
    """Add the gradient of ``weight_decay * sum ||looked-up row||^2 / batch_size``.

    Rows are penalized once per lookup, so frequent ids are held harder.
    """
    n = sum(len(b) for b in batches)
    ids = {"emb.user": [b.users for b in batches], "emb.shop": [b.shops for b in batches]}
    for b in batches:
        for c, cand in enumerate(b.cands):
            ids.setdefault(f"emb.{c}", []).append(cand.reshape(-1))
    for name, parts in ids.items():
        if name not in grads:
            continue
        counts = np.bincount(np.concatenate(parts), minlength=params[name].shape[0])
        grads[name] = grads[name] + (2.0 * weight_decay / n) * counts[:, None] * params[name]


def train_step(model, batches: Sequence, opt: Adam, tc: TrainConfig) -> tuple[float, list[float]]:
    T = model.tensors(requires_grad=True)
    frozen = {"s"} if tc.uncertainty != "learned" else set()
    for n in frozen & set(T):
        T[n].requires_grad = False
    with Tape() as tape:
        obj, means = batch_loss(model, T, batches, tc.uncertainty)
    raw = ad.backward(tape, obj)
    grads = {n: raw[t] for n, t in T.items() if t.requires_grad and t in raw}
    if tc.weight_decay:
        embedding_decay(grads, model.params, batches, tc.weight_decay)
    clip_global_norm(grads, tc.clip_norm)
    opt.step(model.params, grads)
    return obj.item(), [m.item() for m in means]


# ---------------------------------------------------------------- fit


def select_positives(impressions: Sequence[Impression], positives_only: bool = True) -> list[Impression]:
    return [m for m in impressions if m.label == 1] if positives_only else list(impressions)


def predict_log(model, impressions: Sequence[Impression], chunk: int = 4096) -> np.ndarray:
    """Greedy selections for every impression, in input order, shape (n, k)."""
    out = np.zeros((len(impressions), model.config.k), dtype=np.int64)
    for start in range(0, len(impressions), chunk):
        part = impressions[start:start + chunk]
        groups: dict[tuple[int, ...], list[int]] = {}
        for j, m in enumerate(part):
            groups.setdefault(tuple(len(c) for c in m.cands), []).append(j)
        for idx in groups.values():
            (batch,) = batches_by_shape(part, idx, with_targets=False)
            out[[start + j for j in idx]] = model.predict(batch)
    return out


def validation_metrics(model, val: Sequence[Impression], weights: MetricWeights | None = None):
    clicked = [m for m in val if m.label == 1]
    if not clicked:
        return None, None
    weights = weights or MetricWeights.default(model.config.k)
    preds = predict_log(model, clicked)
    hrs = [hr(p, m.shown, weights) for p, m in zip(preds, clicked)]
    prs = [pr(p, m.shown, weights) for p, m in zip(preds, clicked)]
    return math.fsum(hrs) / len(hrs), math.fsum(prs) / len(prs)


def fit(train: Sequence[Impression], val: Sequence[Impression], config: ModelConfig,
        tc: TrainConfig, *, log=None):
    """Train with Adam on shuffled mini-batches; keep the best-validation-HR parameters.

    Returns ``(params, history)``.  ``log`` receives one line per epoch.
    """
    data = select_positives(train, tc.positives_only)
    if not data:
        raise DataError("no training samples left after filtering")
    model = build_model(config, seed=tc.seed)
    opt = Adam(model.params, tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
    rng = np.random.default_rng(tc.seed)
    history = TrainHistory()
    best_params, best_hr = None, -math.inf
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(data))
        tot, ce_sum, seen = 0.0, np.zeros(config.k), 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            batches = batches_by_shape(data, idx)
            obj, means = train_step(model, batches, opt, tc)
            tot += obj * len(idx)
            ce_sum += np.asarray(means) * len(idx)
            seen += len(idx)
        vhr, vpr = validation_metrics(model, val)
        sigma2 = np.exp(model.params["s"]).tolist() if "s" in model.params else [1.0] * config.k
        rec = EpochRecord(epoch, tot / seen, (ce_sum / seen).tolist(), sigma2, vhr, vpr)
        history.epochs.append(rec)
        if log is not None:
            hr_txt = "n/a" if vhr is None else f"{vhr:.4f}"
            pr_txt = "n/a" if vpr is None else f"{vpr:.4f}"
            log(f"epoch {epoch:3d}  loss {rec.loss:.5f}  ce {' '.join(f'{x:.4f}' for x in rec.ce)}"
                f"  val HR {hr_txt} PR {pr_txt}")
        score = -math.inf if vhr is None else vhr
        if best_params is None or score > best_hr:
            best_hr = score
            best_params = {n: v.copy() for n, v in model.params.items()}
            history.best_epoch = epoch
    return best_params, history


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, config: ModelConfig, path: str | Path) -> None:
    """Versioned JSON; floats use repr, which round-trips float64 exactly."""
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "tensors": {n: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
                    for n, v in params.items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: not a valid checkpoint ({exc})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptCheckpointError(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {doc['format_version']}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(doc["config"])
        tensors = doc["tensors"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise CorruptCheckpointError(f"{path}: bad header ({exc})") from None
    params: ModelParams = {}
    for name, t in tensors.items():
        try:
            arr = np.asarray(t["data"], dtype=np.float64)
            shape = tuple(int(x) for x in t["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpointError(f"{path}: tensor {name}: {exc}") from None
        if arr.ndim != 1 or arr.size != math.prod(shape):
            raise CorruptCheckpointError(f"{path}: tensor {name} has {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    want = param_shapes(config)
    for name, shape in want.items():
        if name not in params or params[name].shape != shape:
            got = params[name].shape if name in params else None
            raise CheckpointShapeError(f"{path}: tensor {name} has shape {got}, config implies {shape}")
    if set(params) != set(want):
        raise CheckpointShapeError(f"{path}: unexpected tensors {sorted(set(params) - set(want))}")
    if expect is not None:
        exp_shapes = param_shapes(expect)
        if exp_shapes != want or expect.arch != config.arch:
            raise CheckpointShapeError(
                f"{path}: checkpoint (k={config.k}, d={config.d_dim}) does not fit the run "
                f"(k={expect.k}, d={expect.d_dim})")
    return {n: params[n] for n in want}, config
