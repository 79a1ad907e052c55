"""Iterative post-training: remove noisy-probable samples, retrain, keep what helps.

Each round audits the current model on the surviving training set, removes the
selected samples and retrains with a restarted learning-rate schedule. The round
commits only if clean-validation accuracy improves by at least the saturation
delta (in accuracy points); otherwise the model and training set roll back to
their snapshots and the loop stops. Removed samples can afterwards be given the
final model's confident predictions and folded back in for one fresh retrain.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
from sklearn.base import BaseEstimator

from .data import LabeledDataset, ValidationSet
from .network import FeedforwardClassifier, TrainConfig
from .scoring import SelectionConfig, ScoreTable, compute_score_table, fit_gmm_2, zscore
from . import influence as infl


@dataclass(frozen=True)
class PostTrainConfig:
    """Loop controls for iterative removal and retraining."""

    epochs: int = 20
    max_rounds: int = 3
    saturation_delta: float = 0.1  # accuracy points on clean validation
    refine_threshold: float = 0.8
    selector: str = "influence"  # or "small-loss"
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    retrain_lr: float | None = None  # None: restart at the classifier's own initial rate
    retrain_lr_drops: tuple[tuple[int, float], ...] = ((5, 0.1),)
    retrain_batch_size: int | None = None  # None: keep the classifier's batch size
    damping: float = infl.DEFAULT_DAMPING
    cg_tol: float = infl.DEFAULT_CG_TOL
    hessian_sample_size: int | None = None
    threads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.refine_threshold <= 1.0:
            raise ValueError("refine_threshold must be in (0, 1]")
        if self.selector not in ("influence", "small-loss"):
            raise ValueError(f"unknown selector {self.selector!r}")


@dataclass
class RoundReport:
    """What one round did. `removed_ids` is empty when the round rolled back."""

    round_index: int
    selected_ids: list[int]
    removed_ids: list[int]
    committed: bool
    clean_size: int
    accuracy_before: float
    accuracy_after: float
    precision: float | None = None
    remaining_noise_ratio: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AuditReport:
    """Outcome of a whole post-training run."""

    rounds: list[RoundReport]
    initial_accuracy: float
    final_accuracy: float
    committed_rounds: int
    final_clean_ids: list[int]
    aborted: str | None = None
    refinement: dict | None = None
    model_path: str | None = None
    refined_data_path: str | None = None

    @property
    def removed_ids(self) -> list[int]:
        out: list[int] = []
        for r in self.rounds:
            out.extend(r.removed_ids)
        return out

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["rounds"] = [r.to_dict() for r in self.rounds]
        doc["removed_ids"] = self.removed_ids
        return doc


def detection_metrics(
    removed_ids, dataset: LabeledDataset
) -> tuple[float | None, float | None]:
    """(precision of the removal, noise ratio of what survives); needs true labels.

    Precision is None when nothing was removed, both are None without ground truth.
    """
    if dataset.y_true is None:
        return None, None
    removed_ids = np.asarray(removed_ids, dtype=np.int64)
    flipped = dataset.flipped_mask()
    removed_mask = np.isin(dataset.ids, removed_ids)
    precision = None
    if removed_mask.any():
        precision = float(flipped[removed_mask].mean())
    rest = ~removed_mask
    remaining = float(flipped[rest].mean()) if rest.any() else 0.0
    return precision, remaining


def small_loss_select(clf, dataset: LabeledDataset, config: SelectionConfig) -> np.ndarray:
    """High-loss selection baseline: z-scored losses through the same GMM threshold.

    Candidates are samples with non-negative z-scored loss; the threshold is the
    low component's mean of a GMM fit to the candidate scores. All-equal losses
    select nothing.
    """
    losses = clf.per_sample_loss(dataset.X, dataset.y)
    z = zscore(losses)
    if not z.any():  # constant losses carry no ranking signal
        return np.array([], dtype=np.int64)
    mask = z >= 0.0
    if mask.sum() < 4:
        return np.array([], dtype=np.int64)
    fit = fit_gmm_2(
        z[mask],
        max_iter=config.gmm_max_iter,
        tol=config.gmm_tol,
        var_floor=config.gmm_var_floor,
        seed=config.gmm_seed,
    )
    selected = z[mask] >= fit.low_mean
    return dataset.ids[mask][selected]


def _retrain_config(clf: FeedforwardClassifier, config: PostTrainConfig, round_index: int) -> TrainConfig:
    rate = config.retrain_lr if config.retrain_lr is not None else clf.learning_rate
    batch = config.retrain_batch_size if config.retrain_batch_size is not None else clf.batch_size
    return TrainConfig(
        epochs=config.epochs,
        learning_rate=rate,
        lr_drops=config.retrain_lr_drops,
        momentum=clf.momentum,
        batch_size=batch,
        seed=config.seed * 1000 + round_index,
    )


def post_train(
    clf: FeedforwardClassifier,
    train: LabeledDataset,
    val: ValidationSet,
    config: PostTrainConfig = PostTrainConfig(),
    score_hook=None,
    round_hook=None,
) -> tuple[FeedforwardClassifier, AuditReport]:
    """Run the removal/retrain loop; returns the final model and a full report.

    The input classifier is never mutated. `score_hook(round_index, table)` sees
    each round's ScoreTable when the influence selector is active;
    `round_hook(round_report, model)` sees every retrained round's model, even
    ones that roll back.
    """
    current = clf.copy()
    pool = train
    acc0 = current.accuracy(val.X, val.y)
    acc_prev = acc0
    rounds: list[RoundReport] = []
    committed = 0
    aborted = None
    for round_index in range(1, config.max_rounds + 1):
        t0 = time.perf_counter()
        if config.selector == "influence":
            table: ScoreTable = compute_score_table(
                current,
                pool,
                val,
                config=config.selection,
                damping=config.damping,
                cg_tol=config.cg_tol,
                hessian_sample_size=config.hessian_sample_size,
                seed=config.seed,
                threads=config.threads,
            )
            if score_hook is not None:
                score_hook(round_index, table)
            selected_ids = table.selected_ids
        else:
            selected_ids = small_loss_select(current, pool, config.selection)
        elapsed = time.perf_counter() - t0
        if len(selected_ids) == 0:
            rounds.append(RoundReport(
                round_index=round_index,
                selected_ids=[],
                removed_ids=[],
                committed=False,
                clean_size=len(pool),
                accuracy_before=acc_prev,
                accuracy_after=acc_prev,
                precision=None,
                remaining_noise_ratio=pool.noise_ratio() if pool.has_true_labels else None,
                wall_time=elapsed,
            ))
            break
        survivors = pool.remove_ids(selected_ids)
        precision, remaining = detection_metrics(selected_ids, pool)
        if len(survivors) == 0:
            aborted = "empty-clean-set"
            rounds.append(RoundReport(
                round_index=round_index,
                selected_ids=[int(i) for i in selected_ids],
                removed_ids=[],
                committed=False,
                clean_size=len(pool),
                accuracy_before=acc_prev,
                accuracy_after=acc_prev,
                precision=precision,
                remaining_noise_ratio=pool.noise_ratio() if pool.has_true_labels else None,
                wall_time=time.perf_counter() - t0,
            ))
            break
        # snapshot is (current, pool); retraining happens on a copy
        candidate = current.copy()
        candidate.continue_fit(
            survivors.X, survivors.y, _retrain_config(current, config, round_index)
        )
        acc_new = candidate.accuracy(val.X, val.y)
        gain_points = (acc_new - acc_prev) * 100.0
        commit = gain_points >= config.saturation_delta
        report = RoundReport(
            round_index=round_index,
            selected_ids=[int(i) for i in selected_ids],
            removed_ids=[int(i) for i in selected_ids] if commit else [],
            committed=commit,
            clean_size=len(survivors) if commit else len(pool),
            accuracy_before=acc_prev,
            accuracy_after=acc_new,
            precision=precision,
            remaining_noise_ratio=(
                (survivors if commit else pool).noise_ratio()
                if pool.has_true_labels
                else None
            ),
            wall_time=time.perf_counter() - t0,
        )
        rounds.append(report)
        if round_hook is not None:
            round_hook(report, candidate)
        if not commit:
            break  # model and pool stay at the snapshot
        current = candidate
        pool = survivors
        acc_prev = acc_new
        committed += 1
    return current, AuditReport(
        rounds=rounds,
        initial_accuracy=acc0,
        final_accuracy=acc_prev,
        committed_rounds=committed,
        final_clean_ids=[int(i) for i in pool.ids],
        aborted=aborted,
    )


def refine_labels(
    clf, removed: LabeledDataset, threshold: float = 0.8
) -> tuple[LabeledDataset, LabeledDataset]:
    """Relabel removed samples with the model's prediction, keeping only confident ones.

    A sample is kept iff its maximum softmax probability exceeds `threshold`
    strictly, so threshold 1.0 keeps nothing. Returns (kept with new labels,
    discarded unchanged).
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    if len(removed) == 0:
        return removed, removed
    probs = clf.predict_proba(removed.X)
    confident = probs.max(axis=1) > threshold
    kept = removed.subset(confident)
    if len(kept):
        kept = kept.with_labels(kept.ids, np.argmax(probs[confident], axis=1))
    return kept, removed.subset(~confident)


def final_retrain(
    dataset: LabeledDataset,
    template: FeedforwardClassifier,
    epochs: int | None = None,
    seed: int = 0,
    **param_overrides,
) -> FeedforwardClassifier:
    """Train a fresh model (new init) on the cleaned-plus-refined data.

    Keyword overrides replace template constructor params, e.g. a lower
    learning rate for the last fit than the one used while hunting noise.
    """
    if len(dataset) == 0:
        raise ValueError("cannot retrain on an empty dataset")
    params = template.get_params()
    params["random_state"] = seed
    params["n_classes"] = dataset.n_classes
    if epochs is not None:
        params["epochs"] = epochs
    params.update(param_overrides)
    clf = FeedforwardClassifier(**params)
    return clf.fit(dataset.X, dataset.y)


class PostTrainer(BaseEstimator):
    """Estimator facade: fit runs the whole loop on arrays and stores the outcome."""

    def __init__(
        self,
        classifier=None,
        epochs: int = 20,
        max_rounds: int = 3,
        saturation_delta: float = 0.1,
        selector: str = "influence",
        gamma: int | None = None,
        noise_ratio: float | None = None,
        random_state: int = 0,
    ):
        self.classifier = classifier
        self.epochs = epochs
        self.max_rounds = max_rounds
        self.saturation_delta = saturation_delta
        self.selector = selector
        self.gamma = gamma
        self.noise_ratio = noise_ratio
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None) -> "PostTrainer":
        if self.classifier is None:
            raise ValueError("an already fitted classifier is required")
        if X_val is None or y_val is None:
            raise ValueError("clean validation arrays are required")
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n_classes = len(self.classifier.classes_)
        ds = LabeledDataset(np.arange(len(X)), X, y, n_classes)
        val = ValidationSet(np.arange(len(X_val)), X_val, y_val, n_classes)
        config = PostTrainConfig(
            epochs=self.epochs,
            max_rounds=self.max_rounds,
            saturation_delta=self.saturation_delta,
            selector=self.selector,
            selection=SelectionConfig(
                gamma=self.gamma, m_per_class=1, noise_ratio=self.noise_ratio
            ),
            seed=self.random_state,
        )
        self.classifier_, self.report_ = post_train(self.classifier, ds, val, config)
        self.removed_indices_ = np.array(self.report_.removed_ids, dtype=np.int64)
        return self

    def predict(self, X) -> np.ndarray:
        return self.classifier_.predict(X)
