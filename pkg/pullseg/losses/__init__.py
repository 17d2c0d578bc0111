"""Training objectives: supervised and self-training cross-entropy, the pulling
loss with its two per-pair forms, and dynamic re-weighting of classes."""
import dataclasses
import enum
import typing

import numpy as np

import pullseg.data
import pullseg.model
import pullseg.pairing
from pullseg.numerics import autograd
from pullseg.utils import errors

LOG_FLOOR = 1e-12

Scalar = typing.Union[float, autograd.Tensor]


class PullKind(enum.Enum):
    infonce = "infonce"
    mse = "mse"


class DrwMode(enum.Enum):
    dynamic = "dynamic"
    fixed = "fixed"
    none = "none"


class DrwDivisor(enum.Enum):
    max = "max"
    min = "min"


@dataclasses.dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    lambda_pull: float = 0.1
    pull_kind: PullKind = PullKind.infonce
    beta_drw: float = 0.5
    drw_mode: DrwMode = DrwMode.dynamic
    drw_divisor: DrwDivisor = DrwDivisor.max
    fixed_weights: typing.Tuple[float, ...] = ()

    def __post_init__(self):
        if self.tau <= 0:
            raise errors.ConfigInvalid(f"temperature must be positive, got {self.tau}")
        if self.lambda_pull < 0:
            raise errors.ConfigInvalid("lambda_pull must be non-negative")
        if self.beta_drw < 0:
            raise errors.ConfigInvalid("beta_drw must be non-negative")
        if any(w < 0 for w in self.fixed_weights):
            raise errors.ConfigInvalid("fixed class weights must be non-negative")

    def check_classes(self, classes: int):
        if self.drw_mode is DrwMode.fixed and len(self.fixed_weights) != classes:
            raise errors.ConfigInvalid(
                f"fixed DRW needs {classes} weights, got {len(self.fixed_weights)}"
            )


@dataclasses.dataclass(frozen=True)
class ClassConfidence:
    """Mean teacher confidence per pseudo-labelled class; absent classes are missing keys."""

    classes: int
    values: typing.Dict[int, float]

    def __getitem__(self, cls: int) -> typing.Optional[float]:
        return self.values.get(cls)

    def absent(self, cls: int) -> bool:
        return cls not in self.values


#################
# Cross-entropy #
#################


def source_ce(probs: autograd.Tensor, labels) -> autograd.Tensor:
    """Mean −log p(label) over non-IGNORE pixels."""
    probs = autograd.lift(probs)
    classes = probs.shape[-1]
    labels = np.asarray(labels).ravel()
    flat = probs.reshape(-1, classes)
    if flat.shape[0] != labels.size:
        raise errors.ShapeMismatch(f"{flat.shape[0]} predictions for {labels.size} labels")
    valid = np.flatnonzero(labels != pullseg.data.IGNORE)
    if valid.size == 0:
        raise errors.AllIgnored("every pixel carries the ignore label")
    return -flat.take(valid).pick(labels[valid]).log(LOG_FLOOR).mean()


def target_ce(probs: autograd.Tensor, pl: pullseg.model.PseudoLabel) -> autograd.Tensor:
    """q · CE against hard pseudo-labels, one quality weight per image."""
    try:
        return source_ce(probs, pl.labels) * pl.quality
    except errors.AllIgnored:
        return autograd.Tensor(0.0)


###########
# Pulling #
###########


def info_nce_rows(
    queries: autograd.Tensor, k_pos: np.ndarray, negs: np.ndarray, tau: float
) -> autograd.Tensor:
    """Per-query InfoNCE for a block of queries sharing positive and negatives."""
    count = queries.shape[0]
    column = np.asarray(k_pos, dtype=np.float64).reshape(-1, 1)
    pos = (queries @ column).reshape(count) * (1.0 / tau)
    neg = (queries @ np.asarray(negs, dtype=np.float64).T) * (1.0 / tau)
    logits = autograd.concat([pos.reshape(count, 1), neg], axis=1)
    return logits.logsumexp(axis=1) - pos


def mse_rows(queries: autograd.Tensor, k_pos: np.ndarray) -> autograd.Tensor:
    return (queries - np.asarray(k_pos, dtype=np.float64)).square().sum(axis=1)


def info_nce(q, k_pos, negs, tau: float) -> float:
    if tau <= 0:
        raise errors.ConfigInvalid(f"temperature must be positive, got {tau}")
    q = autograd.Tensor(np.asarray(q, dtype=np.float64).reshape(1, -1))
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, q.shape[1])
    return info_nce_rows(q, k_pos, negs, tau).item()


def mse_pull(q, k_pos) -> float:
    q = autograd.Tensor(np.asarray(q, dtype=np.float64).reshape(1, -1))
    return mse_rows(q, k_pos).item()


def pull_loss(pairs: pullseg.pairing.PairBatch, cfg: LossConfig) -> autograd.Tensor:
    """(1/|active|) Σ_c w*_c · mean per-pair loss of class c."""
    active = pairs.active
    if not active:
        raise errors.NoActiveClasses("no class has queries, a prototype and negatives")
    total: Scalar = 0.0
    for cls in active:
        queries = pairs.queries.rows[cls]
        if cfg.pull_kind is PullKind.mse:
            per_pair = mse_rows(queries, pairs.positives[cls])
        else:
            per_pair = info_nce_rows(
                queries, pairs.positives[cls], pairs.negatives[cls].keys, cfg.tau
            )
        weight = pairs.drw_weights.get(cls, 1.0 / len(active))
        total = total + per_pair.mean() * weight
    return autograd.lift(total) * (1.0 / len(active))


#######################
# Dynamic re-weighting #
#######################


def class_confidence(
    pls: typing.Union[pullseg.model.PseudoLabel, typing.Sequence[pullseg.model.PseudoLabel]],
    classes: int,
) -> ClassConfidence:
    if isinstance(pls, pullseg.model.PseudoLabel):
        pls = [pls]
    labels = np.concatenate([np.asarray(pl.labels).ravel() for pl in pls])
    confidence = np.concatenate([np.asarray(pl.confidence).ravel() for pl in pls])
    values = {}
    for cls in range(classes):
        hit = labels == cls
        if np.any(hit):
            values[cls] = float(confidence[hit].mean())
    return ClassConfidence(classes, values)


def _uniform(active: typing.Sequence[int]) -> typing.Dict[int, float]:
    return {c: 1.0 / len(active) for c in active}


def _normalize(raw: typing.Dict[int, float]) -> typing.Dict[int, float]:
    total = sum(raw.values())
    if total <= 0:
        return _uniform(list(raw))
    return {c: w / total for c, w in raw.items()}


def drw_weights(
    conf: typing.Optional[ClassConfidence],
    beta: float,
    active: typing.Sequence[int],
    cfg: typing.Optional[LossConfig] = None,
) -> typing.Dict[int, float]:
    """w*_c over the active classes; they always sum to one."""
    active = sorted(active)
    if not active:
        raise errors.NoActiveClasses("DRW needs at least one active class")
    mode = cfg.drw_mode if cfg else DrwMode.dynamic
    divisor_kind = cfg.drw_divisor if cfg else DrwDivisor.max

    if mode is DrwMode.none or conf is None:
        return _uniform(active)
    if mode is DrwMode.fixed:
        return _normalize({c: float(cfg.fixed_weights[c]) for c in active})

    doubt = {c: 1.0 - conf[c] for c in active if not conf.absent(c)}
    positive = [u for u in doubt.values() if u > 0]
    if not positive:
        return _uniform(active)
    divisor = max(positive) if divisor_kind is DrwDivisor.max else min(positive)
    # an absent class is as doubtful as the least confident one, so its prior is 1 under max
    prior = max(positive)
    raw = {c: (doubt.get(c, prior) / divisor) ** beta for c in active}
    return _normalize(raw)


def total_loss(src: Scalar, trg: Scalar, pull: Scalar, lambda_pull: float) -> Scalar:
    return src + trg + pull * lambda_pull
