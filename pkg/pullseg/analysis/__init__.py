"""Held-out evaluation and feature-space diagnostics."""
import dataclasses
import typing
import warnings

import numpy as np

import pullseg.data
import pullseg.model
from pullseg.analysis import report
from pullseg.utils import errors

PAIR_FLOOR = 1e-12
PDD_EPS = 1e-8
COS_EPS = 1e-12

SOURCE = pullseg.data.Domain.SOURCE
TARGET = pullseg.data.Domain.TARGET


############
# Accuracy #
############


@dataclasses.dataclass
class ConfusionMatrix:
    """Row = ground truth, column = prediction."""

    counts: np.ndarray

    @classmethod
    def empty(cls, classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((classes, classes), dtype=np.int64))

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, truth, pred) -> "ConfusionMatrix":
        truth = np.asarray(truth).ravel()
        pred = np.asarray(pred).ravel()
        if truth.shape != pred.shape:
            raise errors.ShapeMismatch(f"truth {truth.shape} vs prediction {pred.shape}")
        valid = (truth != pullseg.data.IGNORE) & (truth < self.classes)
        index = self.classes * truth[valid] + pred[valid]
        counts = np.bincount(index, minlength=self.classes**2)
        return ConfusionMatrix(self.counts + counts.reshape(self.classes, self.classes))


def confusion_matrix(truths, preds, classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(classes)
    for truth, pred in zip(truths, preds):
        cm = cm.add(truth, pred)
    return cm


def miou(cm: ConfusionMatrix) -> typing.Tuple[np.ndarray, float]:
    """Per-class IoU (nan where TP+FP+FN is zero) and their mean."""
    if cm.total == 0:
        raise errors.EmptyMatrix("no evaluated pixels")
    counts = cm.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    iou = np.full(cm.classes, np.nan)
    np.divide(inter, union, out=iou, where=union > 0)
    return iou, float(np.nanmean(iou))


def evaluate(params: pullseg.model.ModelParams, held_out: pullseg.data.HeldOutDataset) -> ConfusionMatrix:
    preds = [pullseg.model.predict(params, image) for image in held_out.images]
    return confusion_matrix(held_out.labels(), preds, held_out.class_count)


def evaluate_source(
    params: pullseg.model.ModelParams, source: pullseg.data.DomainDataset
) -> ConfusionMatrix:
    """Confusion on labelled source images, to check the source space survives adaptation."""
    if source.domain_tag != SOURCE:
        raise errors.ConfigInvalid(f"expected a source dataset, got {source.domain_tag!r}")
    preds = [pullseg.model.predict(params, s.image) for s in source.samples]
    return confusion_matrix([s.label for s in source.samples], preds, source.class_count)


################
# Feature bank #
################


@dataclasses.dataclass
class FeatureBank:
    features: typing.Dict[str, typing.Dict[int, np.ndarray]]

    def domain(self, domain: str) -> typing.Dict[int, np.ndarray]:
        return self.features.get(domain, {})

    def present(self, domain: str) -> typing.List[int]:
        return sorted(c for c, rows in self.domain(domain).items() if len(rows))

    def members(self, cls: int, domain: str) -> np.ndarray:
        rows = self.domain(domain).get(cls)
        if rows is None or len(rows) == 0:
            raise errors.ClassMissing(f"class {cls} has no {domain} features")
        return rows

    def centers(self, domain: str) -> typing.Dict[int, np.ndarray]:
        return {c: self.domain(domain)[c].mean(axis=0) for c in self.present(domain)}


def build_feature_bank(
    params: pullseg.model.ModelParams,
    datasets: typing.Mapping[str, typing.Tuple[typing.Sequence[np.ndarray], typing.Sequence[np.ndarray]]],
    features: str = "projector",
) -> FeatureBank:
    """Collect h×w feature vectors per ground-truth class for each domain."""
    if features not in ("projector", "encoder"):
        raise errors.ConfigInvalid(f"features must be projector or encoder, got {features!r}")
    classes = params.architecture.classes
    bank: typing.Dict[str, typing.Dict[int, np.ndarray]] = {}
    for domain, (images, labels) in datasets.items():
        collected: typing.Dict[int, list] = {c: [] for c in range(classes)}
        for image, label in zip(images, labels):
            out = pullseg.model.forward(params, image)
            fmap = (out.embeddings if features == "projector" else out.features).data
            small = pullseg.data.downsample_labels(label, pullseg.model.FEATURE_STRIDE).ravel()
            rows = fmap.reshape(-1, fmap.shape[-1])
            for cls in range(classes):
                collected[cls].append(rows[small == cls])
        bank[domain] = {
            cls: np.concatenate(chunks) for cls, chunks in collected.items() if chunks
        }
    return FeatureBank(bank)


###############
# Diagnostics #
###############


def _require_pair(bank: FeatureBank, cls: int, domain: str) -> typing.Dict[int, np.ndarray]:
    bank.members(cls, domain)
    centers = bank.centers(domain)
    if len(centers) < 2:
        raise errors.ClassMissing(f"{domain} holds fewer than two classes")
    return centers


def ccd(bank: FeatureBank, cls: int, domain: str = TARGET) -> float:
    """Class center distance: intra-class spread over squared distance to each other center."""
    centers = _require_pair(bank, cls, domain)
    members = bank.members(cls, domain)
    center = centers[cls]
    intra = float(np.mean(np.sum((members - center) ** 2, axis=1)))
    total = 0.0
    for other, other_center in centers.items():
        if other == cls:
            continue
        gap = float(np.sum((center - other_center) ** 2))
        if gap < PAIR_FLOOR:
            warnings.warn(
                errors.DegeneratePair(f"centers of {cls} and {other} coincide"), stacklevel=2
            )
            gap = PAIR_FLOOR
        total += intra / gap
    return total / (len(centers) - 1)


def _cosines(rows: np.ndarray, vector: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1) * np.linalg.norm(vector)
    return rows @ vector / np.maximum(norms, COS_EPS)


def pdd(bank: FeatureBank, cls: int, domain: str = TARGET) -> float:
    """Pixel-wise discrimination distance, 1 − mean cos-to-own over Σ cos-to-others."""
    centers = _require_pair(bank, cls, domain)
    members = bank.members(cls, domain)
    own = _cosines(members, centers[cls])
    others = sum(_cosines(members, center) for c, center in centers.items() if c != cls)
    denominator = others + PDD_EPS
    if np.any(denominator < 0):
        warnings.warn(
            errors.NegativeDenominator(
                f"class {cls}: {int(np.sum(denominator < 0))} features lean away from other centers"
            ),
            stacklevel=2,
        )
    return float(1.0 - np.mean(own / denominator))


def cross_domain_similarity(bank: FeatureBank) -> typing.Dict[int, typing.Optional[float]]:
    """Cosine between source and target centroids per class; None when a domain lacks it."""
    source = bank.centers(SOURCE)
    target = bank.centers(TARGET)
    out: typing.Dict[int, typing.Optional[float]] = {}
    for cls in sorted(set(source) | set(target)):
        if cls not in source or cls not in target:
            out[cls] = None
            continue
        a, b = source[cls], target[cls]
        out[cls] = float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), COS_EPS))
    return out


def metric_rows(
    run: str,
    step: int,
    cm: typing.Optional[ConfusionMatrix] = None,
    bank: typing.Optional[FeatureBank] = None,
    source_cm: typing.Optional[ConfusionMatrix] = None,
) -> typing.List[report.MetricRow]:
    """Long-form rows for the report; a class missing from one domain gets a nan similarity."""
    rows = []
    for prefix, matrix in (("", cm), ("source_", source_cm)):
        if matrix is None:
            continue
        iou, mean = miou(matrix)
        rows.append(report.MetricRow(run, step, f"{prefix}miou", None, mean))
        rows.extend(
            report.MetricRow(run, step, f"{prefix}iou", c, float(v))
            for c, v in enumerate(iou)
            if not np.isnan(v)
        )
    if bank is not None:
        present = bank.present(TARGET)
        if len(present) >= 2:
            for cls in present:
                rows.append(report.MetricRow(run, step, "ccd", cls, ccd(bank, cls)))
                rows.append(report.MetricRow(run, step, "pdd", cls, pdd(bank, cls)))
        if bank.present(SOURCE):
            for cls, value in cross_domain_similarity(bank).items():
                rows.append(
                    report.MetricRow(
                        run, step, "cross_domain_similarity", cls,
                        float("nan") if value is None else value,
                    )
                )
    return rows
