"""Influence of training samples on the final layer, via damped Hessian CG solves.

The influence of a sample on the model is -H^-1 g, where g is the sample's
final-layer cross-entropy gradient and H is the damped mean Hessian of the loss
over a training subset. Because loss and final layer are softmax cross-entropy,
H has the closed form

    H v = (1/n) sum_i (a_i a_i^T) V (diag(p_i) - p_i p_i^T) + damping * v

with a_i the bias-augmented penultimate activation, p_i the predicted
probabilities and V the (h+1) x K matrix view of v. That matrix is positive
semidefinite, so CG on the damped system is well posed. The influence of a
training sample on a validation sample is the dot product of the validation
gradient with the training sample's influence vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_DAMPING = 0.01
DEFAULT_CG_TOL = 1e-6
DEFAULT_HESSIAN_SAMPLE = 2000


class CgBreakdownError(RuntimeError):
    """Non-finite values met during CG; the system is ill conditioned at this damping."""


class HessianOperator:
    """Damped mean final-layer Hessian of softmax cross-entropy over a sample subset."""

    def __init__(self, activations: np.ndarray, probs: np.ndarray, damping: float = DEFAULT_DAMPING):
        if damping < 0:
            raise ValueError("damping must be >= 0")
        activations = np.asarray(activations, dtype=np.float64)
        probs = np.asarray(probs, dtype=np.float64)
        if activations.ndim != 2 or probs.ndim != 2 or len(activations) != len(probs):
            raise ValueError("activations and probs must be matching 2-d arrays")
        self._A = activations  # (n, h+1), bias column included
        self._P = probs  # (n, K)
        self.damping = float(damping)
        self.subset_size = len(activations)
        self.n_activations = activations.shape[1]
        self.n_classes = probs.shape[1]
        self.dim = self.n_activations * self.n_classes

    def with_damping(self, damping: float) -> "HessianOperator":
        return HessianOperator(self._A, self._P, damping)

    def matmat(self, V: np.ndarray) -> np.ndarray:
        """Apply to a (dim, m) block of vectors."""
        V = np.asarray(V, dtype=np.float64)
        m = V.shape[1]
        # (m, h+1, K) tensor view of the columns
        Vt = np.moveaxis(V, 1, 0).reshape(m, self.n_activations, self.n_classes)
        S = self._A @ Vt  # (m, n, K)
        PS = self._P * S
        T = PS - self._P * PS.sum(axis=2, keepdims=True)
        HV = np.matmul(self._A.T, T) / self.subset_size  # (m, h+1, K)
        out = HV.reshape(m, self.dim).T
        out += self.damping * V
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.matmat(np.asarray(v, dtype=np.float64)[:, None])[:, 0]

    def dense(self) -> np.ndarray:
        """Materialize the operator; test helper for desk-scale dims."""
        return self.matmat(np.eye(self.dim))


class DenseOperator:
    """Matrix wrapped in the operator interface used by cg_solve."""

    def __init__(self, M: np.ndarray):
        self._M = np.asarray(M, dtype=np.float64)
        self.dim = self._M.shape[0]

    def matmat(self, V: np.ndarray) -> np.ndarray:
        return self._M @ V

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self._M @ v


def _as_operator(op):
    if hasattr(op, "matmat"):
        return op
    if callable(op):

        class _CallableOperator:
            def matmat(self, V):
                return np.column_stack([op(V[:, j]) for j in range(V.shape[1])])

            def matvec(self, v):
                return op(v)

        return _CallableOperator()
    return DenseOperator(op)


def final_layer_hessian(
    clf,
    X: np.ndarray,
    damping: float = DEFAULT_DAMPING,
    sample_size: int | None = None,
    seed: int = 0,
) -> HessianOperator:
    """Build the damped Hessian operator from (a subset of) the given inputs.

    The subset has min(n, sample_size) rows, drawn without replacement by `seed`;
    sample_size defaults to 2000.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    cap = DEFAULT_HESSIAN_SAMPLE if sample_size is None else int(sample_size)
    if cap < n:
        pos = np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))
        X = X[pos]
    a = clf.penultimate(X)
    a_aug = np.hstack([a, np.ones((len(a), 1))])
    probs = clf.predict_proba(X)
    return HessianOperator(a_aug, probs, damping)


def cg_solve_batch(
    op,
    B: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
    callback=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run plain CG independently on every column of B, in lockstep.

    Each column follows the textbook recursion with its own step sizes, so the
    result matches solving the columns one at a time. Columns stop once their
    relative residual reaches `tol`; if max_iter (default 10 * dim) runs out,
    the best iterate seen is returned with its residual.

    Returns (solutions, relative residuals, iterations per column). Residuals
    are recomputed from the operator at exit, not taken from the recursion.
    """
    op = _as_operator(op)
    B = np.asarray(B, dtype=np.float64)
    squeeze = B.ndim == 1
    if squeeze:
        B = B[:, None]
    dim, m = B.shape
    if max_iter is None:
        max_iter = 10 * dim
    X = np.zeros_like(B)
    iters = np.zeros(m, dtype=np.int64)
    norm_b = np.linalg.norm(B, axis=0)
    active = norm_b > 0.0  # zero rhs solved by x = 0 in zero iterations
    R = B[:, active].copy()
    P = R.copy()
    Xa = np.zeros_like(R)
    best_X = np.zeros_like(R)
    rs = np.einsum("ij,ij->j", R, R)
    best_res = np.sqrt(rs)
    cols = np.flatnonzero(active)
    it = 0
    while cols.size and it < max_iter:
        it += 1
        HP = op.matmat(P)
        if not np.all(np.isfinite(HP)):
            raise CgBreakdownError("non-finite values in operator application")
        pHp = np.einsum("ij,ij->j", P, HP)
        if not np.all(np.isfinite(pHp)) or np.any(pHp <= 0.0):
            raise CgBreakdownError("non-positive curvature met; raise the damping")
        alpha = rs / pHp
        Xa += alpha * P
        R -= alpha * HP
        rs_new = np.einsum("ij,ij->j", R, R)
        res = np.sqrt(rs_new)
        improved = res < best_res
        best_X[:, improved] = Xa[:, improved]
        best_res = np.minimum(best_res, res)
        if callback is not None:
            callback(it, Xa, res / norm_b[cols])
        done = res <= tol * norm_b[cols]
        if np.any(done):
            keep = ~done
            X[:, cols[done]] = Xa[:, done]
            iters[cols[done]] = it
            cols = cols[keep]
            if not cols.size:
                break
            Xa = Xa[:, keep]
            best_X = best_X[:, keep]
            best_res = best_res[keep]
            R = R[:, keep]
            P = P[:, keep]
            rs = rs[keep]
            rs_new = rs_new[keep]
        P = R + (rs_new / rs) * P
        rs = rs_new
    if cols.size:  # unconverged columns keep their best iterate
        X[:, cols] = best_X
        iters[cols] = it
    final_res = np.linalg.norm(op.matmat(X) - B, axis=0)
    rel = np.divide(final_res, norm_b, out=np.zeros_like(final_res), where=norm_b > 0)
    if squeeze:
        return X[:, 0], rel[0], iters[0]
    return X, rel, iters


def cg_solve(op, b: np.ndarray, tol: float = DEFAULT_CG_TOL, max_iter: int | None = None,
             callback=None) -> tuple[np.ndarray, float, int]:
    """Solve one SPD system H x = b; returns (x, relative residual, iterations)."""
    x, res, iters = cg_solve_batch(op, b, tol=tol, max_iter=max_iter, callback=callback)
    return x, float(res), int(iters)


@dataclass
class InfluenceVector:
    """Influence of one training sample on the final-layer parameters."""

    sample_id: int
    vector: np.ndarray
    cg_residual: float


@dataclass
class InfluenceOnData:
    """Influence of one training sample on the losses of validation samples."""

    train_id: int
    val_ids: np.ndarray
    values: np.ndarray


def influence_on_model(
    clf,
    hessian: HessianOperator,
    x: np.ndarray,
    y: int,
    sample_id: int = -1,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
) -> InfluenceVector:
    """Influence vector -H^-1 grad of one sample; retries once at 10x damping on breakdown."""
    grad = clf.final_layer_grad(x, y)
    try:
        sol, res, _ = cg_solve(hessian, grad, tol=tol, max_iter=max_iter)
    except CgBreakdownError:
        sol, res, _ = cg_solve(hessian.with_damping(hessian.damping * 10.0), grad,
                               tol=tol, max_iter=max_iter)
    return InfluenceVector(sample_id=sample_id, vector=-sol, cg_residual=res)


def influence_vectors(
    clf,
    hessian: HessianOperator,
    X: np.ndarray,
    y: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Influence vectors of many samples at once.

    Samples are independent: the columns are solved in disjoint blocks, so the
    (vectors, residuals) arrays are identical for any thread count.
    """
    grads = clf.final_layer_grads(X, y)
    B = grads.T
    n = B.shape[1]
    sols = np.empty_like(B)
    res = np.empty(n)

    def solve_block(lo: int, hi: int) -> None:
        try:
            s, r, _ = cg_solve_batch(hessian, B[:, lo:hi], tol=tol, max_iter=max_iter)
        except CgBreakdownError:
            s, r, _ = cg_solve_batch(hessian.with_damping(hessian.damping * 10.0),
                                     B[:, lo:hi], tol=tol, max_iter=max_iter)
        sols[:, lo:hi] = s
        res[lo:hi] = r

    threads = max(1, int(threads))
    if threads == 1 or n <= 1:
        solve_block(0, n)
    else:
        bounds = np.linspace(0, n, threads + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(solve_block, int(lo), int(hi))
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            for fut in futures:
                fut.result()
    return -sols.T, res


def influence_on_data(
    clf,
    hessian: HessianOperator,
    x: np.ndarray,
    y: int,
    X_val: np.ndarray,
    y_val: np.ndarray,
    val_ids: np.ndarray | None = None,
    train_id: int = -1,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
) -> InfluenceOnData:
    """Dot products of validation gradients with one training sample's influence vector."""
    iv = influence_on_model(clf, hessian, x, y, sample_id=train_id, tol=tol, max_iter=max_iter)
    val_grads = clf.final_layer_grads(X_val, y_val)
    if val_ids is None:
        val_ids = np.arange(len(val_grads))
    return InfluenceOnData(train_id=train_id, val_ids=np.asarray(val_ids),
                           values=val_grads @ iv.vector)


def bag_influence(
    clf,
    hessian: HessianOperator,
    X_bag: np.ndarray,
    label: int | np.ndarray,
    bag_id: int = -1,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
) -> InfluenceVector:
    """Influence of a bag of same-label members: -H^-1 applied to the mean member gradient."""
    X_bag = np.atleast_2d(np.asarray(X_bag, dtype=np.float64))
    labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (len(X_bag),))
    if len(np.unique(labels)) != 1:
        raise ValueError("bag members must share one label")
    grad = clf.final_layer_grads(X_bag, labels).mean(axis=0)
    try:
        sol, res, _ = cg_solve(hessian, grad, tol=tol, max_iter=max_iter)
    except CgBreakdownError:
        sol, res, _ = cg_solve(hessian.with_damping(hessian.damping * 10.0), grad,
                               tol=tol, max_iter=max_iter)
    return InfluenceVector(sample_id=bag_id, vector=-sol, cg_residual=res)
