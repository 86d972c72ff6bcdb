"""Fairness, identity, and age-fidelity metrics plus kinship verification.

All aggregate numbers are recomputable from the emitted confusion matrices,
and the kinship improvements are recomputed from the per-age accuracies
rather than stored.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import FairageError, IntegrityError, RaceLabel, ValidationError, derive_seed
from .datakit import FOLDS, RELATIONS, KinPair

AGE_GROUPS = (20, 30, 40, 50, 60, 70, 80)
KINSHIP_AGES = (20, 30, 40, 50, 60)
N_RACES = len(RaceLabel)


class EstimatorUnavailable(FairageError):
    """The pluggable age estimator stopped responding; carries partial results."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial or []


def confusion_matrix(preds, truth) -> np.ndarray:
    """4x4 counts with rows = true label, columns = predicted label."""
    if len(preds) != len(truth):
        raise ValidationError(f"got {len(preds)} predictions for {len(truth)} labels")
    if len(preds) == 0:
        raise ValidationError("cannot build a confusion matrix from zero samples")
    matrix = np.zeros((N_RACES, N_RACES), dtype=np.int64)
    for p, t in zip(preds, truth):
        matrix[int(t), int(p)] += 1
    return matrix


def accuracy(matrix: np.ndarray) -> float:
    total = int(matrix.sum())
    return float(np.trace(matrix)) / total if total else 0.0


def micro_recall(matrix: np.ndarray) -> float:
    """Recall pooled over all classes; algebraically equal to accuracy."""
    tp = float(np.trace(matrix))
    total = float(matrix.sum())
    return tp / total if total else 0.0


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float


def precision_recall_f1(matrix: np.ndarray) -> dict:
    """Per-race precision/recall/F1; empty rows or columns score zero."""
    scores = {}
    for race in RaceLabel:
        i = race.value
        tp = float(matrix[i, i])
        col, row = float(matrix[:, i].sum()), float(matrix[i, :].sum())
        precision = tp / col if col else 0.0
        recall = tp / row if row else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores[race] = PRF1(precision, recall, f1)
    return scores


@dataclass
class AgeGroupReport:
    """Race-classification outcome for one target age."""

    age: int
    matrix: np.ndarray
    failures: int

    @property
    def accuracy(self) -> float:
        return accuracy(self.matrix)

    @property
    def per_race(self) -> dict:
        return precision_recall_f1(self.matrix)


def _identity_crop(image):
    return image


def race_accuracy_by_age(transform, samples, classifier, ages=AGE_GROUPS,
                         cropper=None) -> list:
    """Transform every sample to each target age, classify, and tally.

    ``samples`` are ``(normalized image, RaceLabel)`` pairs; ``transform`` is
    ``f(image, age) -> image``; ``classifier`` maps an image to a RaceLabel.
    Per-image classifier or cropper errors are counted as failures, never
    silently dropped.
    """
    cropper = cropper or _identity_crop
    reports = []
    for age in ages:
        preds, truths, failures = [], [], 0
        for image, race in samples:
            try:
                aged = transform(image, age)
                pred = classifier(cropper(aged))
            except FairageError:
                failures += 1
                continue
            preds.append(int(pred))
            truths.append(int(race))
        matrix = (confusion_matrix(preds, truths) if preds
                  else np.zeros((N_RACES, N_RACES), dtype=np.int64))
        reports.append(AgeGroupReport(age=age, matrix=matrix, failures=failures))
    return reports


@dataclass
class IdentityReport:
    age: int
    mean: float
    std: float
    excluded: int


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 or nb == 0.0:
        raise ValidationError("zero-norm embedding has no direction")
    return float((a * b).sum()) / (na * nb)


def identity_preservation(transform, images, embedder, ages=AGE_GROUPS) -> list:
    """Cosine similarity between embeddings of each image and its aged version."""
    reports = []
    for age in ages:
        values, excluded = [], 0
        for image in images:
            aged = transform(image, age)
            try:
                values.append(cosine_similarity(embedder(image), embedder(aged)))
            except ValidationError:
                excluded += 1
        mean = float(np.mean(values)) if values else 0.0
        std = float(np.std(values)) if values else 0.0
        reports.append(IdentityReport(age=age, mean=mean, std=std, excluded=excluded))
    return reports


@dataclass
class AgeErrorReport:
    age: int
    mae_mean: float
    mae_std: float
    count: int
    failures: int
    note: str = ""


def age_mae(transform, images, estimator, ages=AGE_GROUPS, sample_size=None,
            seed=0, note="") -> list:
    """Mean absolute error between the target age and the estimator's read.

    ``estimator`` maps an image to years; raising
    :class:`EstimatorUnavailable` aborts the run with the finished age
    groups attached to the exception.
    """
    images = list(images)
    reports = []
    for age in ages:
        chosen = images
        if sample_size is not None and sample_size < len(images):
            g = torch.Generator()
            g.manual_seed(derive_seed(seed, "age-mae", age))
            order = torch.randperm(len(images), generator=g).tolist()
            chosen = [images[i] for i in order[:sample_size]]
        errors, failures = [], 0
        for image in chosen:
            aged = transform(image, age)
            try:
                estimate = float(estimator(aged))
            except EstimatorUnavailable as exc:
                raise EstimatorUnavailable(
                    f"age estimator unavailable at age group {age}: {exc}",
                    partial=reports) from exc
            except FairageError:
                failures += 1
                continue
            errors.append(abs(float(age) - estimate))
        mean = float(np.mean(errors)) if errors else 0.0
        std = float(np.std(errors)) if errors else 0.0
        reports.append(AgeErrorReport(age=age, mae_mean=mean, mae_std=std,
                                      count=len(errors), failures=failures, note=note))
    return reports


class OracleVerifier:
    """Answers with the ground-truth label; for harness smoke checks."""

    def fit(self, examples):
        return self

    def decide(self, pair: KinPair, parent_image, child_image) -> bool:
        return pair.kin


class CosineThresholdVerifier:
    """Per-fold baseline: threshold the cosine similarity of identity embeddings."""

    def __init__(self, embedder):
        self.embedder = embedder
        self.threshold = 0.0

    def _similarity(self, a, b) -> float:
        try:
            return cosine_similarity(self.embedder(a), self.embedder(b))
        except ValidationError:
            return -1.0

    def fit(self, examples):
        """Pick the accuracy-maximizing threshold over candidate midpoints."""
        scored = sorted((self._similarity(a, b), kin) for a, b, kin in examples)
        if not scored:
            raise IntegrityError("cannot fit a verifier on an empty training fold")
        sims = [s for s, _ in scored]
        candidates = [sims[0] - 1.0]
        candidates += [(sims[i] + sims[i + 1]) / 2.0 for i in range(len(sims) - 1)]
        candidates.append(sims[-1] + 1.0)
        best_threshold, best_correct = candidates[0], -1
        for threshold in candidates:
            correct = sum(1 for s, kin in scored if (s >= threshold) == kin)
            if correct > best_correct:
                best_threshold, best_correct = threshold, correct
        self.threshold = best_threshold
        return self

    def decide(self, pair, parent_image, child_image) -> bool:
        return self._similarity(parent_image, child_image) >= self.threshold


@dataclass
class KinReport:
    """Per-relation verification accuracies (percent) for base and aged modes."""

    relation: str
    base: float
    by_age: dict = field(default_factory=dict)

    @property
    def improvement(self) -> float:
        """Best aged accuracy minus base; recomputed, may be negative."""
        if not self.by_age or self.base is None:
            return float("nan")
        return max(self.by_age.values()) - self.base


def _check_folds(pairs, relation):
    present = {fold: 0 for fold in FOLDS}
    for pair in pairs:
        present[pair.fold] += 1
    empty = [fold for fold, n in present.items() if n == 0]
    if empty:
        raise IntegrityError(f"{relation}: empty fold(s) {empty}; the five-fold "
                             "protocol needs every fold populated")


def _fold_accuracy(pairs, images, verifier_factory) -> float:
    """Five-fold cross validation: fit on four folds, score the held-out one."""
    correct = total = 0
    for fold in FOLDS:
        train = [(images[p.parent], images[p.child], p.kin) for p in pairs if p.fold != fold]
        test = [p for p in pairs if p.fold == fold]
        verifier = verifier_factory()
        verifier.fit(train)
        for pair in test:
            decision = verifier.decide(pair, images[pair.parent], images[pair.child])
            correct += int(bool(decision) == pair.kin)
            total += 1
    return 100.0 * correct / total


def run_kinship_protocol(pairs, prepare, ager, verifier_factory,
                         ages=KINSHIP_AGES, include_base=True) -> list:
    """Verify each relation on base images and on same-age transformed pairs.

    ``prepare`` maps an image path to its base (full-face) tensor, ``ager``
    maps ``(image, age)`` to the transformed image. A fresh verifier is
    fitted per fold and mode.
    """
    reports = []
    for relation in RELATIONS:
        rel_pairs = [p for p in pairs if p.relation == relation]
        if not rel_pairs:
            continue
        _check_folds(rel_pairs, relation)
        paths = sorted({p.parent for p in rel_pairs} | {p.child for p in rel_pairs})
        base_images = {path: prepare(path) for path in paths}
        base_acc = (_fold_accuracy(rel_pairs, base_images, verifier_factory)
                    if include_base else None)
        by_age = {}
        for age in ages:
            aged = {path: ager(base_images[path], age) for path in paths}
            by_age[age] = _fold_accuracy(rel_pairs, aged, verifier_factory)
        reports.append(KinReport(relation=relation, base=base_acc, by_age=by_age))
    return reports
