"""Contrastive pair construction for pulling pseudo-target features to source.

Queries are student embeddings of pseudo-target images at pixels whose
(downsampled) source label is c; the positive key is the teacher's source
prototype of c; negative keys come from teacher source features of other
classes and from unreliable teacher target features.

PairingConfig's domain knobs re-route each role for the direction ablations
(vanilla source contrast, source to target, source to pseudo-target, and
source-only negatives).
"""
import csv
import dataclasses
import enum
import math
import pathlib
import typing
import warnings

import numpy as np

import pullseg.data
import pullseg.numerics
from pullseg.numerics import autograd
from pullseg.utils import errors

# positions with a raw embedding norm below this carry no usable direction
MIN_KEY_NORM = 1e-3
UNIT_TOLERANCE = 1e-9


class QuerySampling(enum.Enum):
    balanced = "balanced"
    random = "random"


class NegativeSampling(enum.Enum):
    equalized = "equalized"
    random = "random"


class PrototypeMode(enum.Enum):
    normalize_mean = "normalize_mean"
    mean_normalized = "mean_normalized"


class PairDomain(enum.Enum):
    source = "source"
    target = "target"
    pseudo_target = "pseudo_target"


class NegativeDomain(enum.Enum):
    source = "source"
    source_target = "source_target"


@dataclasses.dataclass(frozen=True)
class PairingConfig:
    classes: int
    n: int = 16
    m: int = 64
    alpha: float = 0.5
    query_sampling: QuerySampling = QuerySampling.balanced
    negative_sampling: NegativeSampling = NegativeSampling.equalized
    prototype_mode: PrototypeMode = PrototypeMode.normalize_mean
    query_domain: PairDomain = PairDomain.pseudo_target
    positive_domain: PairDomain = PairDomain.source
    negative_domain: NegativeDomain = NegativeDomain.source_target

    def __post_init__(self):
        if self.n < 1:
            raise errors.ConfigInvalid("base query count n must be ≥ 1")
        if self.m < 2 or self.m % 2:
            raise errors.ConfigInvalid(f"negative count m must be even and ≥ 2, got {self.m}")
        if not 0.0 <= self.alpha <= 1.0:
            raise errors.ConfigInvalid(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.query_domain is PairDomain.target:
            raise errors.ConfigInvalid("queries need labelled images: source or pseudo_target")


#########
# Types #
#########


@dataclasses.dataclass
class QuerySet:
    rows: typing.Dict[int, autograd.Tensor]
    positions: typing.Dict[int, np.ndarray]

    @property
    def counts(self) -> typing.Dict[int, int]:
        return {c: len(p) for c, p in self.positions.items()}


@dataclasses.dataclass
class NegativePools:
    source_keys: np.ndarray
    source_labels: np.ndarray
    target_keys: np.ndarray
    target_labels: np.ndarray
    target_unreliable: np.ndarray
    gamma: typing.Optional[float]

    def source_indices(self, cls: int) -> np.ndarray:
        valid = (self.source_labels != cls) & (self.source_labels != pullseg.data.IGNORE)
        return np.flatnonzero(valid)

    def target_indices(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.target_unreliable & (self.target_labels != cls))


@dataclasses.dataclass
class NegativeSample:
    keys: np.ndarray
    from_target: np.ndarray
    labels: np.ndarray

    @property
    def source_count(self) -> int:
        return int(np.sum(~self.from_target))

    @property
    def target_count(self) -> int:
        return int(np.sum(self.from_target))


@dataclasses.dataclass
class PairBatch:
    queries: QuerySet
    positives: typing.Dict[int, np.ndarray]
    negatives: typing.Dict[int, NegativeSample]
    drw_weights: typing.Dict[int, float]
    gamma: typing.Optional[float] = None

    @property
    def active(self) -> typing.List[int]:
        return sorted(
            c
            for c in self.queries.rows
            if c in self.positives and c in self.negatives and len(self.queries.positions[c])
        )


##########################
# Class-balanced queries #
##########################


def label_distribution(labels, classes: int) -> np.ndarray:
    """Per-class pixel fractions p̂ over the batch's valid source labels."""
    labels = np.asarray(labels).ravel()
    valid = labels[labels != pullseg.data.IGNORE]
    if valid.size == 0:
        raise errors.EmptyBatch("no labelled source pixels in the batch")
    counts = np.bincount(valid, minlength=classes)[:classes].astype(np.float64)
    return counts / counts.sum()


def query_counts(p_hat, n: int, classes: int) -> np.ndarray:
    """n_q(c) = ⌈C·p̂(c)·n⌉, zero for absent classes."""
    if n < 1:
        raise errors.ConfigInvalid("base query count n must be ≥ 1")
    return np.array(
        [math.ceil(classes * float(p) * n) if p > 0 else 0 for p in p_hat], dtype=np.int64
    )


def usable_rows(raw: np.ndarray) -> np.ndarray:
    return np.linalg.norm(raw, axis=-1) >= MIN_KEY_NORM


def sample_queries(
    embeddings: autograd.Tensor,
    labels: np.ndarray,
    cfg: PairingConfig,
    rng: pullseg.numerics.Rng,
) -> QuerySet:
    """Draw queries with replacement from each class's candidate positions."""
    labels = np.asarray(labels).ravel()
    candidates = usable_rows(embeddings.data) & (labels != pullseg.data.IGNORE)
    unit = embeddings.normalize_rows()
    positions: typing.Dict[int, np.ndarray] = {}

    if cfg.query_sampling is QuerySampling.balanced:
        p_hat = label_distribution(labels, cfg.classes)
        counts = query_counts(p_hat, cfg.n, cfg.classes)
        for cls in range(cfg.classes):
            pool = np.flatnonzero(candidates & (labels == cls))
            if counts[cls] == 0 or pool.size == 0:
                continue
            gen = rng.split("queries").split(cls).generator()
            positions[cls] = pool[gen.integers(0, pool.size, size=int(counts[cls]))]
    else:
        pool = np.flatnonzero(candidates)
        if pool.size == 0:
            raise errors.EmptyBatch("no usable query positions in the batch")
        gen = rng.split("queries").split("random").generator()
        drawn = pool[gen.integers(0, pool.size, size=cfg.classes * cfg.n)]
        for cls in range(cfg.classes):
            chosen = drawn[labels[drawn] == cls]
            if chosen.size:
                positions[cls] = chosen

    rows = {cls: unit.take(pos) for cls, pos in positions.items()}
    return QuerySet(rows, positions)


##############
# Prototypes #
##############


def compute_prototypes(
    teacher_embeddings: np.ndarray,
    labels: np.ndarray,
    classes: int,
    mode: PrototypeMode = PrototypeMode.normalize_mean,
) -> typing.Dict[int, np.ndarray]:
    """k⁺_c from the teacher's source embeddings; degenerate classes are omitted."""
    raw = np.asarray(teacher_embeddings, dtype=np.float64).reshape(-1, teacher_embeddings.shape[-1])
    labels = np.asarray(labels).ravel()
    prototypes = {}
    for cls in range(classes):
        members = raw[labels == cls]
        if members.shape[0] == 0:
            continue
        if mode is PrototypeMode.mean_normalized:
            prototypes[cls] = pullseg.numerics.normalize_rows(members).mean(axis=0)
            continue
        mean = members.mean(axis=0)
        if np.linalg.norm(mean) < pullseg.numerics.DEGENERATE_NORM:
            warnings.warn(
                errors.DegenerateVector(f"class {cls}: source features cancel out"), stacklevel=2
            )
            continue
        prototypes[cls] = pullseg.numerics.l2_normalize(mean)
    return prototypes


#############
# Negatives #
#############


def unreliable_mask(confidence: np.ndarray, alpha: float) -> typing.Tuple[np.ndarray, float]:
    """Pixels whose confidence is strictly below γ = percentile(conf, 100α)."""
    confidence = np.asarray(confidence, dtype=np.float64).ravel()
    gamma = pullseg.numerics.percentile(confidence, 100.0 * alpha)
    if alpha >= 1.0:
        return np.ones(confidence.shape, dtype=bool), gamma
    return confidence < gamma, gamma


def build_negative_pools(
    teacher_source: np.ndarray,
    source_labels: np.ndarray,
    teacher_target: typing.Optional[np.ndarray],
    target_labels: typing.Optional[np.ndarray],
    target_confidence: typing.Optional[np.ndarray],
    alpha: float,
) -> NegativePools:
    src_raw = np.asarray(teacher_source, dtype=np.float64)
    src_raw = src_raw.reshape(-1, src_raw.shape[-1])
    src_labels = np.asarray(source_labels).ravel()
    keep = usable_rows(src_raw)
    source_keys = pullseg.numerics.normalize_rows(src_raw[keep])
    source_labels_kept = src_labels[keep]

    dim = src_raw.shape[-1]
    if teacher_target is None:
        return NegativePools(
            source_keys,
            source_labels_kept,
            np.zeros((0, dim)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=bool),
            None,
        )

    trg_raw = np.asarray(teacher_target, dtype=np.float64).reshape(-1, dim)
    trg_labels = np.asarray(target_labels).ravel()
    unreliable, gamma = unreliable_mask(target_confidence, alpha)
    keep_t = usable_rows(trg_raw)
    return NegativePools(
        source_keys,
        source_labels_kept,
        pullseg.numerics.normalize_rows(trg_raw[keep_t]),
        trg_labels[keep_t],
        unreliable[keep_t],
        gamma,
    )


def sample_negatives(
    pools: NegativePools,
    cls: int,
    m: int,
    rng: pullseg.numerics.Rng,
    mode: NegativeSampling = NegativeSampling.equalized,
) -> NegativeSample:
    """m/2 source and m/2 unreliable-target keys, all source if the target pool is empty."""
    if m < 2 or m % 2:
        raise errors.ConfigInvalid(f"negative count m must be even, got {m}")
    src_idx = pools.source_indices(cls)
    if src_idx.size == 0:
        raise errors.NoSourceNegatives(f"no source features outside class {cls}")
    trg_idx = pools.target_indices(cls)
    gen = rng.split("negatives").split(cls).generator()

    if mode is NegativeSampling.random:
        union = np.concatenate([src_idx, pools.source_keys.shape[0] + trg_idx])
        drawn = union[gen.integers(0, union.size, size=m)]
        from_target = drawn >= pools.source_keys.shape[0]
        src_pick = drawn[~from_target]
        trg_pick = drawn[from_target] - pools.source_keys.shape[0]
    elif trg_idx.size == 0:
        src_pick = src_idx[gen.integers(0, src_idx.size, size=m)]
        trg_pick = np.zeros(0, dtype=np.int64)
    else:
        src_pick = src_idx[gen.integers(0, src_idx.size, size=m // 2)]
        trg_pick = trg_idx[gen.integers(0, trg_idx.size, size=m // 2)]

    keys = np.concatenate([pools.source_keys[src_pick], pools.target_keys[trg_pick]])
    labels = np.concatenate([pools.source_labels[src_pick], pools.target_labels[trg_pick]])
    from_target = np.concatenate(
        [np.zeros(src_pick.size, dtype=bool), np.ones(trg_pick.size, dtype=bool)]
    )
    return NegativeSample(keys, from_target, labels)


############
# Assembly #
############


def build_pair_batch(
    student_embeddings: autograd.Tensor,
    source_labels: np.ndarray,
    teacher_source: np.ndarray,
    teacher_target: typing.Optional[np.ndarray],
    target_labels: typing.Optional[np.ndarray],
    target_confidence: typing.Optional[np.ndarray],
    cfg: PairingConfig,
    rng: pullseg.numerics.Rng,
    positive_embeddings: typing.Optional[np.ndarray] = None,
    positive_labels: typing.Optional[np.ndarray] = None,
) -> PairBatch:
    """All of one step's pairs, inputs flattened to (positions, d) at feature resolution.

    ``student_embeddings`` are taken from ``cfg.query_domain`` images, which all carry
    ``source_labels``. Prototypes come from ``positive_embeddings``/``positive_labels``
    when ``cfg.positive_domain`` is not source. DRW weights start uniform over the
    active classes; callers replace them.
    """
    if cfg.positive_domain is PairDomain.source:
        positive_embeddings, positive_labels = teacher_source, source_labels
    elif positive_embeddings is None or positive_labels is None:
        raise errors.ConfigInvalid(
            f"{cfg.positive_domain.value} prototypes need positive embeddings and labels"
        )
    if cfg.negative_domain is NegativeDomain.source:
        teacher_target = target_labels = target_confidence = None

    queries = sample_queries(student_embeddings, source_labels, cfg, rng)
    positives = compute_prototypes(
        positive_embeddings, positive_labels, cfg.classes, cfg.prototype_mode
    )
    pools = build_negative_pools(
        teacher_source,
        source_labels,
        teacher_target,
        target_labels,
        target_confidence,
        cfg.alpha,
    )
    negatives = {}
    for cls in queries.rows:
        if cls not in positives:
            continue
        try:
            negatives[cls] = sample_negatives(pools, cls, cfg.m, rng, cfg.negative_sampling)
        except errors.NoSourceNegatives:
            continue

    pairs = PairBatch(queries, positives, negatives, {}, pools.gamma)
    active = pairs.active
    pairs.drw_weights = {c: 1.0 / len(active) for c in active}
    return pairs


def check_pair_batch(pairs: PairBatch, unit_keys: bool = True):
    """Raise AssertionError when a pairing invariant is broken."""
    for cls in pairs.active:
        positions = pairs.queries.positions[cls]
        rows = pairs.queries.rows[cls].data
        if rows.shape[0] != positions.size:
            raise AssertionError(f"class {cls}: query rows and positions disagree")
        negatives = pairs.negatives[cls]
        if np.any(negatives.labels == cls):
            raise AssertionError(f"class {cls}: a negative key carries label {cls}")
        vectors = [rows, negatives.keys]
        if unit_keys:
            vectors.append(pairs.positives[cls][None, :])
        for block in vectors:
            norms = np.linalg.norm(block, axis=-1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
                raise AssertionError(f"class {cls}: vector off the unit sphere")
    if pairs.drw_weights:
        total = sum(pairs.drw_weights.get(c, 0.0) for c in pairs.active)
        if abs(total - 1.0) > 1e-9:
            raise AssertionError(f"DRW weights over active classes sum to {total}")


def dump_pairs(pairs: PairBatch, path):
    """One row per vector: class, role (query, pos, neg_src, neg_trg), components."""
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            for cls in pairs.active:
                for row in pairs.queries.rows[cls].data:
                    writer.writerow([cls, "query", *map(repr, row.tolist())])
                writer.writerow([cls, "pos", *map(repr, pairs.positives[cls].tolist())])
                negatives = pairs.negatives[cls]
                for key, from_target in zip(negatives.keys, negatives.from_target):
                    role = "neg_trg" if from_target else "neg_src"
                    writer.writerow([cls, role, *map(repr, key.tolist())])
    except OSError as exc:
        raise errors.IoError(f"cannot write pair dump {path}: {exc}") from exc
