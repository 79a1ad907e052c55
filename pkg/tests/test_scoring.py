"""Overfitting scores, GMM thresholding and consensus selection."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelsift.data import LabeledDataset, NoiseSpec, ValidationSet, generate_blobs, inject_noise, split_validation
from labelsift.network import FeedforwardClassifier
from labelsift.scoring import (
    InfluenceAuditor,
    ScoreTable,
    SelectionConfig,
    compute_osd,
    compute_osm,
    compute_score_table,
    default_gamma,
    fit_gmm_2,
    select_noisy,
    zscore,
)

SQRT_3_2 = 1.224744871391589  # z-score of the extremes of {1, 2, 3}


# -- z-scores ---------------------------------------------------------------------


def test_zscore_three_points_frozen():
    z = zscore(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(z, [-SQRT_3_2, 0.0, SQRT_3_2], atol=1e-12)


def test_zscore_constant_input_is_zero():
    assert np.array_equal(zscore(np.full(5, 7.3)), np.zeros(5))


@settings(deadline=None, max_examples=50)
@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=2, max_size=40))
def test_zscore_population_normalization(values):
    # output is either the degenerate all-zeros or exactly standardized
    z = zscore(np.array(values))
    if np.all(z == 0.0):
        return
    assert abs(z.mean()) <= 1e-9
    assert abs(z.std() - 1.0) <= 1e-9


def test_osm_is_zscore_of_norms():
    norms = np.array([0.1, 0.5, 2.0, 0.7])
    assert np.array_equal(compute_osm(norms), zscore(norms))


def test_osm_scale_invariant():
    norms = np.random.default_rng(0).uniform(0.1, 5.0, size=30)
    assert np.allclose(compute_osm(norms), compute_osm(norms * 37.0), atol=1e-12)


# -- data scores --------------------------------------------------------------------


def test_osd_two_candidate_frozen_values():
    # candidate 0 spreads per class: std([5,5])=0, std([1,3])=1
    # candidate 1 spreads per class: std([0,4])=2, std([2,2])=0
    i_d = np.array([[5.0, 5.0, 1.0, 3.0], [0.0, 4.0, 2.0, 2.0]])
    val_labels = np.array([0, 0, 1, 1])
    osd = compute_osd(i_d, val_labels, 2)
    assert np.allclose(osd, [[-1.0, 1.0], [1.0, -1.0]], atol=1e-12)


def test_osd_normalization_modes_differ():
    rng = np.random.default_rng(3)
    i_d = rng.standard_normal((6, 8))
    val_labels = np.repeat([0, 1], 4)
    by_cand = compute_osd(i_d, val_labels, 2, normalize="candidates")
    by_class = compute_osd(i_d, val_labels, 2, normalize="classes")
    assert by_cand.shape == by_class.shape == (6, 2)
    assert not np.allclose(by_cand, by_class)
    # rows of the per-class mode are centered, columns of the default mode are
    assert np.allclose(by_class.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(by_cand.mean(axis=0), 0.0, atol=1e-9)


def test_osd_scale_invariant():
    rng = np.random.default_rng(4)
    i_d = rng.standard_normal((5, 6))
    val_labels = np.array([0, 0, 0, 1, 1, 1])
    a = compute_osd(i_d, val_labels, 2)
    b = compute_osd(i_d * 1e3, val_labels, 2)
    assert np.allclose(a, b, atol=1e-9)


def test_osd_permutation_equivariant():
    rng = np.random.default_rng(5)
    i_d = rng.standard_normal((7, 6))
    val_labels = np.array([0, 1, 0, 1, 0, 1])
    perm = rng.permutation(7)
    a = compute_osd(i_d, val_labels, 2)
    b = compute_osd(i_d[perm], val_labels, 2)
    assert np.allclose(a[perm], b, atol=1e-12)


def test_osd_requires_two_val_samples_per_class():
    i_d = np.ones((3, 3))
    with pytest.raises(ValueError, match="fewer than 2"):
        compute_osd(i_d, np.array([0, 0, 1]), 2)


def test_osd_shape_mismatch():
    with pytest.raises(ValueError, match="disagree"):
        compute_osd(np.ones((2, 4)), np.array([0, 1]), 2)


def test_osd_unknown_normalization():
    with pytest.raises(ValueError, match="normalization"):
        compute_osd(np.ones((2, 4)), np.array([0, 0, 1, 1]), 2, normalize="rows")


# -- GMM ------------------------------------------------------------------------------


def test_gmm_recovers_well_separated_mixture():
    rng = np.random.default_rng(0)
    values = np.concatenate([rng.normal(0.0, 1.0, 100), rng.normal(10.0, 1.0, 100)])
    fit = fit_gmm_2(values)
    assert abs(fit.means[0] - 0.0) <= 0.5
    assert abs(fit.means[1] - 10.0) <= 0.5
    assert abs(fit.weights[0] - 0.5) <= 0.1
    assert fit.low_mean == fit.means[0]


def test_gmm_log_likelihood_never_decreases():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal(40) + rng.integers(0, 2, 40) * rng.uniform(0, 6)
        fit = fit_gmm_2(values)
        assert np.all(np.diff(fit.log_likelihood) >= -1e-12)


def test_gmm_means_come_back_sorted():
    rng = np.random.default_rng(1)
    for seed in range(10):
        values = np.random.default_rng(seed).uniform(-5, 5, 25)
        fit = fit_gmm_2(values)
        assert fit.means[0] <= fit.means[1]
        assert np.all(fit.variances >= 1e-6)


def test_gmm_identical_values_degenerate_but_stable():
    fit = fit_gmm_2(np.full(10, 4.2))
    assert np.allclose(fit.means, 4.2)
    assert np.all(np.isfinite(fit.log_likelihood))


def test_gmm_needs_four_values():
    with pytest.raises(ValueError, match="at least 4"):
        fit_gmm_2(np.array([1.0, 2.0, 3.0]))


# -- gamma and selection -----------------------------------------------------------


def test_default_gamma_rules():
    assert default_gamma(10, 0.4) == 5
    assert default_gamma(10, 0.39) == 8
    assert default_gamma(10, None) == 8
    assert default_gamma(2, 0.4) == 2  # clipped to K
    assert default_gamma(4, 0.5) == 4
    assert default_gamma(6, 0.2) == 6


def test_selection_config_validation():
    with pytest.raises(ValueError):
        SelectionConfig(gamma=0)
    with pytest.raises(ValueError):
        SelectionConfig(m_per_class=0)
    with pytest.raises(ValueError):
        SelectionConfig(gamma=5).resolve_gamma(3)
    assert SelectionConfig(gamma=2).resolve_gamma(4) == 2
    assert SelectionConfig(noise_ratio=0.5).resolve_gamma(4) == 4


def test_select_noisy_bimodal_consensus():
    # the per-class threshold sits at the low component's mean, so single-class
    # votes are loose; precision comes from consensus and grows with gamma
    rng = np.random.default_rng(7)
    n, n_noisy = 100, 20
    noisy = np.zeros(n, dtype=bool)
    noisy[rng.choice(n, size=n_noisy, replace=False)] = True
    for k in (2, 4):
        osd = rng.normal(0.0, 0.2, size=(n, k))
        osd[noisy] += 3.0
        selected, votes, fits = select_noisy(osd, gamma=k)
        assert len(fits) == k and votes.max() <= k
        precision = (selected & noisy).sum() / max(selected.sum(), 1)
        recall = (selected & noisy).sum() / n_noisy
        assert recall >= 0.95  # planted rows sit far above every threshold
        assert precision > n_noisy / n
        if k == 4:
            assert precision >= 0.6


def test_select_noisy_gamma_nesting():
    rng = np.random.default_rng(8)
    osd = rng.standard_normal((60, 4))
    picks = []
    for gamma in (1, 2, 3, 4):
        selected, _, _ = select_noisy(osd, gamma=gamma)
        picks.append(set(np.flatnonzero(selected)))
    for tighter, looser in zip(picks[1:], picks[:-1]):
        assert tighter <= looser


def test_select_noisy_gamma_out_of_range():
    with pytest.raises(ValueError, match="gamma"):
        select_noisy(np.zeros((10, 2)), gamma=3)


def test_score_table_select_uses_stored_votes():
    table = ScoreTable(
        ids=np.arange(6),
        osm=np.linspace(-1, 1, 6),
        influence_norms=np.ones(6),
        cg_residuals=np.zeros(6),
        candidate_mask=np.array([False, True, True, True, True, False]),
        osd=np.zeros((4, 3)),
        votes=np.array([0, 1, 2, 3]),
        gamma=2,
        selected_ids=np.array([3, 4]),
    )
    assert table.select(1).tolist() == [2, 3, 4]
    assert table.select(2).tolist() == [3, 4]
    assert table.select(3).tolist() == [4]
    assert set(table.select(3)) <= set(table.select(2)) <= set(table.select(1))
    with pytest.raises(ValueError):
        table.select(4)
    assert table.selected_mask().tolist() == [False, False, False, True, True, False]


# -- full audit ---------------------------------------------------------------------


def audit_fixture(seed=0, eps=0.3):
    ds = generate_blobs(30, 3, separation=8.0, seed=seed)
    train, val = split_validation(ds, m=5, seed=seed)
    train = inject_noise(train, NoiseSpec(ratio=eps, seed=seed))
    clf = FeedforwardClassifier(hidden_layer_sizes=(16,), epochs=150, n_classes=3,
                                standardize=True, random_state=seed)
    clf.fit(train.X, train.y)
    return clf, train, val


def test_compute_score_table_shapes_and_alignment():
    clf, train, val = audit_fixture()
    table = compute_score_table(clf, train, val,
                                SelectionConfig(gamma=2, noise_ratio=0.3), keep_i_d=True)
    n = len(train)
    assert table.ids.shape == table.osm.shape == (n,)
    assert abs(table.osm.mean()) <= 1e-9 and abs(table.osm.std() - 1.0) <= 1e-9
    n_cand = int(table.candidate_mask.sum())
    assert table.osd.shape == (n_cand, 3)
    assert table.votes.shape == (n_cand,)
    assert table.i_d.shape == (n_cand, len(val))
    assert table.gamma == 2
    assert set(table.selected_ids) <= set(table.candidate_ids.tolist())
    assert np.array_equal(table.select(2), table.selected_ids)
    rows = list(table.rows())
    assert len(rows) == n
    blank = [r for r in rows if r[2] == ""]
    assert len(blank) == n - n_cand


def test_compute_score_table_detects_planted_flips():
    clf, train, val = audit_fixture(seed=1, eps=0.2)
    table = compute_score_table(clf, train, val, SelectionConfig(gamma=3, noise_ratio=0.2))
    flipped_ids = set(train.ids[train.flipped_mask()].tolist())
    selected = set(table.selected_ids.tolist())
    if selected:
        precision = len(selected & flipped_ids) / len(selected)
        assert precision > 0.2  # well above random as a smoke threshold


def test_compute_score_table_rejects_small_validation():
    clf, train, val = audit_fixture()
    with pytest.raises(ValueError, match="validation"):
        compute_score_table(clf, train, val, SelectionConfig(m_per_class=50))


def test_auditor_facade_matches_direct_call():
    clf, train, val = audit_fixture(seed=2)
    auditor = InfluenceAuditor(classifier=clf, gamma=2, noise_ratio=0.3)
    mask = auditor.fit_predict(train.X, train.y, X_val=val.X, y_val=val.y)
    assert mask.dtype == bool and mask.shape == (len(train),)
    assert np.array_equal(mask, auditor.noisy_mask_)
    assert auditor.osm_.shape == (len(train),)


def test_auditor_requires_classifier_and_validation():
    with pytest.raises(ValueError, match="classifier"):
        InfluenceAuditor().fit(np.zeros((4, 2)), np.array([0, 1, 0, 1]),
                               X_val=np.zeros((2, 2)), y_val=np.array([0, 1]))
    clf, train, val = audit_fixture(seed=3)
    with pytest.raises(ValueError, match="validation"):
        InfluenceAuditor(classifier=clf).fit(train.X, train.y)
