"""Removal/retrain loop: rollback, reporting, refinement, baselines."""
import numpy as np
import pytest

from labelsift.data import (
    LabeledDataset,
    NoiseSpec,
    ValidationSet,
    generate_blobs,
    inject_noise,
    split_validation,
)
from labelsift.network import FeedforwardClassifier
from labelsift.posttrain import (
    PostTrainConfig,
    PostTrainer,
    detection_metrics,
    final_retrain,
    post_train,
    refine_labels,
    small_loss_select,
)
from labelsift.scoring import SelectionConfig


def noisy_blobs_case(seed=0, eps=0.3, epochs=200):
    ds = generate_blobs(30, 3, separation=8.0, seed=seed)
    train, val = split_validation(ds, m=5, seed=seed)
    train = inject_noise(train, NoiseSpec(ratio=eps, seed=seed))
    clf = FeedforwardClassifier(hidden_layer_sizes=(16,), epochs=epochs, n_classes=3,
                                standardize=True, random_state=seed)
    clf.fit(train.X, train.y)
    return clf, train, val


# -- config and metrics ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        PostTrainConfig(max_rounds=0)
    with pytest.raises(ValueError):
        PostTrainConfig(epochs=0)
    with pytest.raises(ValueError):
        PostTrainConfig(refine_threshold=0.0)
    with pytest.raises(ValueError):
        PostTrainConfig(refine_threshold=1.2)
    with pytest.raises(ValueError):
        PostTrainConfig(selector="loss-rank")


def test_detection_metrics_hand_case():
    y_true = np.zeros(10, dtype=int)
    y = y_true.copy()
    y[[1, 3, 5, 7]] = 1  # four flips
    ds = LabeledDataset(np.arange(10), np.zeros((10, 1)), y, 2, y_true=y_true)
    precision, remaining = detection_metrics([1, 3, 8], ds)
    assert precision == pytest.approx(2 / 3)
    assert remaining == pytest.approx(2 / 7)


def test_detection_metrics_edge_cases():
    ds_no_truth = LabeledDataset(np.arange(4), np.zeros((4, 1)), [0, 1, 0, 1], 2)
    assert detection_metrics([0], ds_no_truth) == (None, None)
    y_true = np.array([0, 0, 1, 1])
    y = np.array([0, 1, 1, 1])
    ds = LabeledDataset(np.arange(4), np.zeros((4, 1)), y, 2, y_true=y_true)
    precision, remaining = detection_metrics([], ds)
    assert precision is None
    assert remaining == pytest.approx(0.25)
    precision, remaining = detection_metrics([0, 1, 2, 3], ds)
    assert precision == pytest.approx(0.25)
    assert remaining == 0.0


def test_retrain_schedule_inherits_and_overrides():
    from labelsift.posttrain import _retrain_config

    clf = FeedforwardClassifier(learning_rate=0.05, momentum=0.7, batch_size=110)
    cfg = PostTrainConfig(epochs=40, retrain_lr_drops=((10, 0.1),), seed=3)
    tc = _retrain_config(clf, cfg, round_index=2)
    assert tc.epochs == 40
    assert tc.learning_rate == 0.05  # restart at the classifier's own rate
    assert tc.momentum == 0.7
    assert tc.batch_size == 110
    assert tc.lr_drops == ((10, 0.1),)
    assert tc.seed == 3002

    tc = _retrain_config(clf, PostTrainConfig(epochs=5, retrain_lr=0.5,
                                              retrain_batch_size=16), 1)
    assert tc.learning_rate == 0.5 and tc.batch_size == 16


# -- loop behavior ------------------------------------------------------------------


def test_rollback_is_bit_exact():
    clf, train, val = noisy_blobs_case(seed=1)
    before = clf.get_flat_params().copy()
    cfg = PostTrainConfig(epochs=5, max_rounds=3, saturation_delta=1000.0,
                          selection=SelectionConfig(gamma=2, noise_ratio=0.3), seed=1)
    final, report = post_train(clf, train, val, cfg)
    # nothing can clear a 1000-point gate: one audited round, no commits
    assert report.committed_rounds == 0
    assert len(report.rounds) == 1
    assert report.rounds[0].committed is False
    assert report.rounds[0].removed_ids == []
    assert np.array_equal(final.get_flat_params(), before)
    assert np.array_equal(clf.get_flat_params(), before)  # input untouched
    assert report.final_clean_ids == train.ids.tolist()
    assert report.final_accuracy == report.initial_accuracy


def test_saturation_gate_direction():
    clf, train, val = noisy_blobs_case(seed=2)
    base = dict(epochs=5, max_rounds=1, selector="small-loss", seed=2)
    _, strict = post_train(clf, train, val,
                           PostTrainConfig(saturation_delta=1000.0, **base))
    _, lenient = post_train(clf, train, val,
                            PostTrainConfig(saturation_delta=-1000.0, **base))
    assert strict.committed_rounds == 0
    assert lenient.committed_rounds == 1
    assert lenient.rounds[0].removed_ids == lenient.rounds[0].selected_ids


def test_report_accounting_identity():
    clf, train, val = noisy_blobs_case(seed=3)
    cfg = PostTrainConfig(epochs=20, max_rounds=2, saturation_delta=-1000.0,
                          selection=SelectionConfig(gamma=3, noise_ratio=0.3), seed=3)
    final, report = post_train(clf, train, val, cfg)
    removed_total = sum(len(r.removed_ids) for r in report.rounds)
    assert removed_total == len(train) - len(report.final_clean_ids)
    assert report.removed_ids == [i for r in report.rounds for i in r.removed_ids]
    assert report.committed_rounds == sum(r.committed for r in report.rounds)
    assert [r.round_index for r in report.rounds] == list(range(1, len(report.rounds) + 1))
    # removed ids and survivors partition the pool
    assert set(report.removed_ids) | set(report.final_clean_ids) == set(train.ids.tolist())
    assert not set(report.removed_ids) & set(report.final_clean_ids)
    doc = report.to_dict()
    assert doc["committed_rounds"] == report.committed_rounds
    assert doc["removed_ids"] == report.removed_ids


def test_committed_round_noise_drops():
    clf, train, val = noisy_blobs_case(seed=4)
    cfg = PostTrainConfig(epochs=20, max_rounds=2, saturation_delta=-1000.0,
                          selection=SelectionConfig(gamma=3, noise_ratio=0.3), seed=4)
    _, report = post_train(clf, train, val, cfg)
    start = train.noise_ratio()
    for r in report.rounds:
        if r.committed:
            assert r.remaining_noise_ratio is not None
            assert r.remaining_noise_ratio <= start + 1e-12
            assert r.precision is not None and 0.0 <= r.precision <= 1.0


def test_hooks_observe_every_round():
    clf, train, val = noisy_blobs_case(seed=5)
    seen_scores, seen_rounds = [], []
    cfg = PostTrainConfig(epochs=5, max_rounds=2, saturation_delta=-1000.0,
                          selection=SelectionConfig(gamma=2, noise_ratio=0.3), seed=5)
    post_train(clf, train, val, cfg,
               score_hook=lambda i, table: seen_scores.append((i, len(table.ids))),
               round_hook=lambda rep, model: seen_rounds.append(rep.round_index))
    assert [i for i, _ in seen_scores] == seen_rounds
    assert len(seen_rounds) >= 1


def test_empty_selection_stops_loop():
    # constant losses make the high-loss baseline select nothing
    clf, train, val = noisy_blobs_case(seed=6, epochs=1)
    clf.set_flat_params(np.zeros(clf.get_flat_params().size))
    cfg = PostTrainConfig(epochs=5, max_rounds=3, selector="small-loss", seed=6)
    final, report = post_train(clf, train, val, cfg)
    assert len(report.rounds) == 1
    assert report.rounds[0].selected_ids == []
    assert report.committed_rounds == 0
    assert np.array_equal(final.get_flat_params(), clf.get_flat_params())


def test_selecting_everything_aborts_before_emptying_pool():
    # four identical samples give identical scores, so the vote selects them all
    X = np.tile([[1.0, -2.0]], (4, 1))
    y = np.zeros(4, dtype=np.int64)
    train = LabeledDataset(np.arange(4), X, y, 2, y_true=y.copy())
    rng = np.random.default_rng(0)
    val = ValidationSet(np.arange(4), rng.standard_normal((4, 2)),
                        np.array([0, 0, 1, 1]), 2)
    clf = FeedforwardClassifier(hidden_layer_sizes=(4,), epochs=10, n_classes=2,
                                random_state=0).fit(X, y)
    cfg = PostTrainConfig(epochs=5, max_rounds=2,
                          selection=SelectionConfig(gamma=2, m_per_class=2), seed=0)
    final, report = post_train(clf, train, val, cfg)
    assert report.aborted == "empty-clean-set"
    assert report.committed_rounds == 0
    assert report.final_clean_ids == [0, 1, 2, 3]


# -- selection baseline ---------------------------------------------------------------


def test_small_loss_select_finds_flips():
    clf, train, val = noisy_blobs_case(seed=7)
    picked = small_loss_select(clf, train, SelectionConfig())
    assert len(picked) > 0
    flipped = set(train.ids[train.flipped_mask()].tolist())
    precision = len(set(picked.tolist()) & flipped) / len(picked)
    assert precision > train.noise_ratio()  # better than chance


def test_small_loss_select_degenerate_losses():
    clf, train, _ = noisy_blobs_case(seed=8, epochs=1)
    clf.set_flat_params(np.zeros(clf.get_flat_params().size))
    assert small_loss_select(clf, train, SelectionConfig()).size == 0


# -- refinement -----------------------------------------------------------------------


def confident_classifier(seed=0):
    ds = generate_blobs(40, 2, separation=12.0, seed=seed)
    clf = FeedforwardClassifier(hidden_layer_sizes=(8,), epochs=300, n_classes=2,
                                standardize=True, random_state=seed)
    return clf.fit(ds.X, ds.y), ds


def test_refine_labels_threshold_one_keeps_nothing():
    clf, ds = confident_classifier()
    kept, discarded = refine_labels(clf, ds, threshold=1.0)
    assert len(kept) == 0
    assert len(discarded) == len(ds)


def test_refine_labels_relabels_confident_samples():
    clf, ds = confident_classifier(seed=1)
    # mislabel everything, then let the confident model set labels back
    wrong = ds.with_labels(ds.ids, 1 - np.asarray(ds.y))
    kept, discarded = refine_labels(clf, wrong, threshold=0.9)
    assert len(kept) > 0
    assert np.array_equal(kept.y, clf.predict(kept.X))
    assert np.array_equal(kept.y, kept.y_true)  # confident predictions are the truth here
    assert len(kept) + len(discarded) == len(ds)
    assert not set(kept.ids.tolist()) & set(discarded.ids.tolist())


def test_refine_labels_validates_threshold_and_empty():
    clf, ds = confident_classifier(seed=2)
    with pytest.raises(ValueError):
        refine_labels(clf, ds, threshold=0.0)
    empty = ds.subset(np.zeros(len(ds), dtype=bool))
    kept, discarded = refine_labels(clf, empty, threshold=0.8)
    assert len(kept) == 0 and len(discarded) == 0


# -- final retrain and facade -----------------------------------------------------------


def test_final_retrain_is_fresh_fit():
    clf, train, _ = noisy_blobs_case(seed=9, epochs=30)
    out = final_retrain(train, clf, epochs=30, seed=123)
    assert out is not clf
    assert out.random_state == 123
    assert not np.array_equal(out.get_flat_params(), clf.get_flat_params())
    again = final_retrain(train, clf, epochs=30, seed=123)
    assert np.array_equal(out.get_flat_params(), again.get_flat_params())
    empty = train.subset(np.zeros(len(train), dtype=bool))
    with pytest.raises(ValueError, match="empty"):
        final_retrain(empty, clf)


def test_final_retrain_accepts_param_overrides():
    clf, train, _ = noisy_blobs_case(seed=9, epochs=30)
    out = final_retrain(train, clf, epochs=25, seed=7,
                        learning_rate=0.01, momentum=0.0, batch_size=len(train))
    assert out.learning_rate == 0.01
    assert out.momentum == 0.0
    assert out.batch_size == len(train)
    assert out.epochs == 25
    assert out.standardize == clf.standardize  # untouched params come from the template


def test_post_trainer_facade():
    clf, train, val = noisy_blobs_case(seed=10)
    pt = PostTrainer(classifier=clf, epochs=10, max_rounds=2,
                     saturation_delta=-1000.0, gamma=2, noise_ratio=0.3,
                     random_state=10)
    pt.fit(train.X, train.y, X_val=val.X, y_val=val.y)
    assert pt.report_.committed_rounds >= 0
    assert pt.removed_indices_.dtype == np.int64
    assert pt.predict(val.X).shape == (len(val),)
    with pytest.raises(ValueError, match="classifier"):
        PostTrainer().fit(train.X, train.y, X_val=val.X, y_val=val.y)
    with pytest.raises(ValueError, match="validation"):
        PostTrainer(classifier=clf).fit(train.X, train.y)
