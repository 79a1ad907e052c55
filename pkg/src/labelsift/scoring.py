"""Overfitting scores, two-component GMM thresholds and consensus selection.

A sample's model score is the z-score of its influence-vector norm over the
training set; samples at or above zero are candidates. For each candidate the
per-class data score is the z-score of the spread (population std) of its
influence on that class's validation samples. Per class, a two-component 1-d
GMM fit to the candidate scores yields a threshold at the low component's mean;
candidates above it earn one vote from that class. Samples with at least gamma
votes are selected as noisy-probable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_X_y

from . import influence as infl


def zscore(values: np.ndarray) -> np.ndarray:
    """Population z-scores; all-equal input maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    centered = values - values.mean()
    centered -= centered.mean()  # second pass removes cancellation residue
    std = np.sqrt(np.mean(centered**2))
    # spread at rounding level means the input is constant in float64
    if std == 0.0 or std <= 1e-13 * np.abs(values).max():
        return np.zeros_like(values)
    return centered / std


def compute_osm(norms: np.ndarray) -> np.ndarray:
    """Overfitting score on the model: z-score of influence norms over the training set."""
    return zscore(norms)


def compute_osd(
    i_d: np.ndarray,
    val_labels: np.ndarray,
    n_classes: int,
    normalize: str = "candidates",
) -> np.ndarray:
    """Overfitting scores on data, one column per class, rows following `i_d`.

    `i_d` holds the influence of each candidate (row) on each validation sample
    (column). The spread s_k of a candidate's influence over class-k validation
    samples is normalized either across candidates (default) or across classes.
    """
    i_d = np.atleast_2d(np.asarray(i_d, dtype=np.float64))
    val_labels = np.asarray(val_labels, dtype=np.int64)
    if i_d.shape[1] != len(val_labels):
        raise ValueError("influence table and validation labels disagree")
    if normalize not in ("candidates", "classes"):
        raise ValueError(f"unknown normalization {normalize!r}")
    spreads = np.empty((len(i_d), n_classes))
    for k in range(n_classes):
        cols = val_labels == k
        if cols.sum() < 2:
            raise ValueError(f"class {k} has fewer than 2 validation samples")
        spreads[:, k] = i_d[:, cols].std(axis=1)
    if normalize == "candidates":
        return np.apply_along_axis(zscore, 0, spreads)
    return np.apply_along_axis(zscore, 1, spreads)


@dataclass
class GmmFit:
    """Two-component 1-d Gaussian mixture, components ordered by mean."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: np.ndarray  # one entry per EM iteration, starting at the init
    converged: bool

    @property
    def low_mean(self) -> float:
        return float(self.means[0])


def _em(values, means, variances, weights, max_iter, tol, var_floor):
    n = len(values)
    trace: list[float] = []
    converged = False
    prev = (means, variances, weights)
    for step in range(max_iter + 1):
        # log-likelihood and responsibilities at the current parameters
        log_pdf = (
            -0.5 * np.log(2.0 * np.pi * variances)
            - (values[:, None] - means) ** 2 / (2.0 * variances)
        )
        log_weighted = np.log(weights) + log_pdf
        log_mix = np.logaddexp(log_weighted[:, 0], log_weighted[:, 1])
        ll = float(log_mix.sum())
        if trace and ll < trace[-1]:
            # numerical jitter at convergence; revert to the better iterate
            means, variances, weights = prev
            break
        if trace and abs(ll - trace[-1]) <= tol * max(1.0, abs(trace[-1])):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        if step == max_iter:
            break
        # M-step
        resp = np.exp(log_weighted - log_mix[:, None])
        mass = resp.sum(axis=0)
        if np.any(mass == 0.0):
            break  # a component lost all responsibility; stop at the last params
        prev = (means, variances, weights)
        new_means = (resp * values[:, None]).sum(axis=0) / mass
        means = new_means
        variances = np.maximum(
            (resp * (values[:, None] - new_means) ** 2).sum(axis=0) / mass, var_floor
        )
        weights = mass / n
    return means, variances, weights, np.array(trace), converged


def fit_gmm_2(
    values: np.ndarray,
    max_iter: int = 200,
    tol: float = 1e-8,
    var_floor: float = 1e-6,
    seed: int = 0,
) -> GmmFit:
    """EM fit of a two-component 1-d GMM, initialized by a median split.

    Requires at least 4 values. Variances are floored at `var_floor`. If EM does
    not converge within max_iter, one seeded random restart is tried and the fit
    with the higher final log-likelihood wins. Components come back ordered by
    mean, so means[0] is the low component.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) < 4:
        raise ValueError(f"need at least 4 values to fit a 2-component GMM, got {len(values)}")

    def init_median():
        s = np.sort(values)
        half = len(s) // 2
        lo, hi = s[:half], s[half:]
        means = np.array([lo.mean(), hi.mean()])
        variances = np.maximum(np.array([lo.var(), hi.var()]), var_floor)
        weights = np.array([len(lo), len(hi)], dtype=np.float64) / len(s)
        return means, variances, weights

    means, variances, weights, trace, converged = _em(
        values, *init_median(), max_iter, tol, var_floor
    )
    if not converged:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(values), size=2, replace=False)
        means2 = np.sort(values[pick]).astype(np.float64)
        variances2 = np.full(2, max(values.var(), var_floor))
        weights2 = np.array([0.5, 0.5])
        m2, v2, w2, trace2, conv2 = _em(
            values, means2, variances2, weights2, max_iter, tol, var_floor
        )
        if trace2[-1] > trace[-1]:
            means, variances, weights, trace, converged = m2, v2, w2, trace2, conv2
    order = np.argsort(means)
    return GmmFit(
        weights=weights[order],
        means=means[order],
        variances=variances[order],
        log_likelihood=trace,
        converged=converged,
    )


def default_gamma(n_classes: int, noise_ratio: float | None = None) -> int:
    """5 when the declared noise ratio is at least 40%, 8 otherwise, clipped to [1, K]."""
    gamma = 5 if noise_ratio is not None and noise_ratio >= 0.4 else 8
    return int(np.clip(gamma, 1, n_classes))


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs of the candidate/vote selection stage."""

    gamma: int | None = None  # None: derive from n_classes and declared noise ratio
    m_per_class: int = 5
    noise_ratio: float | None = None
    osd_normalization: str = "candidates"
    gmm_max_iter: int = 200
    gmm_tol: float = 1e-8
    gmm_var_floor: float = 1e-6
    gmm_seed: int = 0

    def __post_init__(self) -> None:
        if self.gamma is not None and self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.m_per_class < 1:
            raise ValueError("m_per_class must be >= 1")

    def resolve_gamma(self, n_classes: int) -> int:
        if self.gamma is None:
            return default_gamma(n_classes, self.noise_ratio)
        if self.gamma > n_classes:
            raise ValueError(f"gamma {self.gamma} exceeds the number of classes {n_classes}")
        return self.gamma


def select_noisy(
    osd: np.ndarray, gamma: int, config: SelectionConfig = SelectionConfig()
) -> tuple[np.ndarray, np.ndarray, list[GmmFit]]:
    """Threshold each class column at its GMM low-component mean and count votes.

    Returns (selected mask over candidates, votes per candidate, per-class fits).
    """
    osd = np.atleast_2d(np.asarray(osd, dtype=np.float64))
    n_classes = osd.shape[1]
    if not 1 <= gamma <= n_classes:
        raise ValueError(f"gamma must be in [1, {n_classes}], got {gamma}")
    votes = np.zeros(len(osd), dtype=np.int64)
    fits = []
    for k in range(n_classes):
        fit = fit_gmm_2(
            osd[:, k],
            max_iter=config.gmm_max_iter,
            tol=config.gmm_tol,
            var_floor=config.gmm_var_floor,
            seed=config.gmm_seed,
        )
        fits.append(fit)
        votes += osd[:, k] >= fit.low_mean
    return votes >= gamma, votes, fits


@dataclass
class ScoreTable:
    """Everything the audit computed for one model/dataset pair."""

    ids: np.ndarray
    osm: np.ndarray
    influence_norms: np.ndarray
    cg_residuals: np.ndarray
    candidate_mask: np.ndarray
    osd: np.ndarray  # (n_candidates, K), rows follow ids[candidate_mask]
    votes: np.ndarray  # per candidate
    gamma: int
    selected_ids: np.ndarray
    gmm_fits: list[GmmFit] = field(default_factory=list)
    i_d: np.ndarray | None = None  # kept only on request; rows follow candidate_ids

    @property
    def candidate_ids(self) -> np.ndarray:
        return self.ids[self.candidate_mask]

    def select(self, gamma: int) -> np.ndarray:
        """Selected ids at another consensus threshold, from the stored votes."""
        if not 1 <= gamma <= self.osd.shape[1]:
            raise ValueError("gamma out of range")
        return self.candidate_ids[self.votes >= gamma]

    def selected_mask(self) -> np.ndarray:
        return np.isin(self.ids, self.selected_ids)

    def rows(self):
        """Dump rows: id, osm, osd per class, votes, selected. Non-candidates have blank osd."""
        cand_index = {int(i): j for j, i in enumerate(self.candidate_ids)}
        selected = set(int(i) for i in self.selected_ids)
        for pos, sid in enumerate(self.ids):
            sid = int(sid)
            j = cand_index.get(sid)
            osd_cells = [""] * self.osd.shape[1] if j is None else [
                repr(float(v)) for v in self.osd[j]
            ]
            votes = 0 if j is None else int(self.votes[j])
            yield [sid, repr(float(self.osm[pos])), *osd_cells, votes, int(sid in selected)]


def compute_score_table(
    clf,
    dataset,
    val,
    config: SelectionConfig = SelectionConfig(),
    damping: float = infl.DEFAULT_DAMPING,
    cg_tol: float = infl.DEFAULT_CG_TOL,
    hessian_sample_size: int | None = None,
    seed: int = 0,
    threads: int = 1,
    keep_i_d: bool = False,
) -> ScoreTable:
    """Full audit of a trained classifier on its training data.

    Influence norms give the model scores; candidates (score >= 0) get per-class
    data scores from their influence on the validation samples, and the GMM vote
    stage turns those into a selection.
    """
    if val.m < config.m_per_class:
        raise ValueError(
            f"validation set holds {val.m} samples per class, need {config.m_per_class}"
        )
    gamma = config.resolve_gamma(dataset.n_classes)
    hessian = infl.final_layer_hessian(
        clf, dataset.X, damping=damping, sample_size=hessian_sample_size, seed=seed
    )
    vectors, residuals = infl.influence_vectors(
        clf, hessian, dataset.X, dataset.y, tol=cg_tol, threads=threads
    )
    norms = np.linalg.norm(vectors, axis=1)
    osm = compute_osm(norms)
    candidate_mask = osm >= 0.0
    val_grads = clf.final_layer_grads(val.X, val.y)
    i_d = vectors[candidate_mask] @ val_grads.T
    osd = compute_osd(i_d, val.y, dataset.n_classes, normalize=config.osd_normalization)
    selected, votes, fits = select_noisy(osd, gamma, config)
    return ScoreTable(
        ids=np.array(dataset.ids),
        osm=osm,
        influence_norms=norms,
        cg_residuals=residuals,
        candidate_mask=candidate_mask,
        osd=osd,
        votes=votes,
        gamma=gamma,
        selected_ids=dataset.ids[candidate_mask][selected],
        gmm_fits=fits,
        i_d=i_d if keep_i_d else None,
    )


class InfluenceAuditor(BaseEstimator):
    """Estimator facade over the audit: fit stores scores and the noisy-sample mask.

    Operates on plain arrays; sample ids are row positions. The classifier must
    already be fitted on (X, y); clean validation arrays are required.
    """

    def __init__(
        self,
        classifier=None,
        gamma: int | None = None,
        noise_ratio: float | None = None,
        osd_normalization: str = "candidates",
        damping: float = infl.DEFAULT_DAMPING,
        cg_tol: float = infl.DEFAULT_CG_TOL,
        hessian_sample_size: int | None = None,
        random_state: int = 0,
        threads: int = 1,
    ):
        self.classifier = classifier
        self.gamma = gamma
        self.noise_ratio = noise_ratio
        self.osd_normalization = osd_normalization
        self.damping = damping
        self.cg_tol = cg_tol
        self.hessian_sample_size = hessian_sample_size
        self.random_state = random_state
        self.threads = threads

    def fit(self, X, y, X_val=None, y_val=None) -> "InfluenceAuditor":
        from .data import LabeledDataset, ValidationSet

        if self.classifier is None:
            raise ValueError("an already fitted classifier is required")
        if X_val is None or y_val is None:
            raise ValueError("clean validation arrays are required")
        X, y = check_X_y(X, y, dtype=np.float64)
        n_classes = len(self.classifier.classes_)
        ds = LabeledDataset(np.arange(len(X)), X, y, n_classes)
        val = ValidationSet(np.arange(len(X_val)), X_val, y_val, n_classes)
        config = SelectionConfig(
            gamma=self.gamma,
            m_per_class=1,
            noise_ratio=self.noise_ratio,
            osd_normalization=self.osd_normalization,
        )
        self.score_table_ = compute_score_table(
            self.classifier,
            ds,
            val,
            config=config,
            damping=self.damping,
            cg_tol=self.cg_tol,
            hessian_sample_size=self.hessian_sample_size,
            seed=self.random_state,
            threads=self.threads,
        )
        self.osm_ = self.score_table_.osm
        self.candidate_mask_ = self.score_table_.candidate_mask
        self.votes_ = self.score_table_.votes
        self.noisy_mask_ = self.score_table_.selected_mask()
        return self

    def fit_predict(self, X, y, X_val=None, y_val=None) -> np.ndarray:
        """Boolean mask of samples flagged as noisy-probable."""
        return self.fit(X, y, X_val=X_val, y_val=y_val).noisy_mask_
