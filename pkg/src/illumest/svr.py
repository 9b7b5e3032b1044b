"""Epsilon-insensitive support vector regression with an RBF kernel.

The dual is solved by sequential minimal optimization over the stacked
variables z = [alpha; alpha*] with labels u = [+1; -1]: working pairs are
chosen by maximal KKT violation, the two-variable subproblem is solved in
closed form, and the gradient is maintained incrementally. The stopping
rule is the usual duality-gap surrogate m(z) - M(z) <= tol.

One deliberate difference from the textbook setup: the cost parameter C is a
total budget, split evenly as a per-sample box of C/n. Duplicating every
training sample then leaves the fitted function unchanged, which keeps
hyperparameter choices meaningful when dataset sizes move around.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

_TAU = 1e-12


def rbf_kernel(A, B, gamma: float) -> np.ndarray:
    """exp(-gamma * ||a - b||^2) for every row pair."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    aa = np.sum(A * A, axis=1)[:, None]
    bb = np.sum(B * B, axis=1)[None, :]
    sq = np.maximum(aa + bb - 2.0 * (A @ B.T), 0.0)
    return np.exp(-gamma * sq)


@dataclass(eq=False)
class SvrModel:
    support_vectors: np.ndarray  # (m, d)
    coefficients: np.ndarray  # (m,) alpha - alpha* of the kept samples
    bias: float
    gamma: float

    def __post_init__(self):
        self.support_vectors = np.asarray(self.support_vectors, dtype=np.float64)
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.support_vectors.ndim != 2:
            raise ValueError("support_vectors must be 2-D")
        if self.coefficients.shape != (self.support_vectors.shape[0],):
            raise ValueError("one coefficient per support vector required")


def predict(model: SvrModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if model.support_vectors.shape[0] == 0:
        return np.full(X.shape[0], model.bias)
    K = rbf_kernel(X, model.support_vectors, model.gamma)
    return K @ model.coefficients + model.bias


def fit_epsilon_svr(
    X,
    y,
    C: float = 1.0,
    epsilon: float = 0.01,
    gamma: float = 1.0,
    tol: float = 1e-5,
    max_iter: int = 200_000,
) -> SvrModel:
    """Fit f(x) = sum_k beta_k K(x_k, x) + b to the epsilon-insensitive loss.

    C is the total slack budget (per-sample box C/n, see module docstring).
    Raises NumericError when SMO fails to reach the tolerance in max_iter
    working-set steps.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("X must be (n, d) with matching y")
    if C <= 0 or epsilon < 0 or gamma <= 0:
        raise ValueError("C and gamma must be positive, epsilon nonnegative")
    n = X.shape[0]
    box = C / n
    K = rbf_kernel(X, X, gamma)

    z = np.zeros(2 * n)
    u = np.concatenate([np.ones(n), -np.ones(n)])
    # gradient of the dual objective at z = 0
    G = np.concatenate([epsilon - y, epsilon + y])

    def q_column(t: int) -> np.ndarray:
        col = K[:, t % n]
        return u[t] * u * np.concatenate([col, col])

    converged = False
    for _ in range(max_iter):
        score = -u * G
        in_up = ((u > 0) & (z < box)) | ((u < 0) & (z > 0))
        in_low = ((u < 0) & (z < box)) | ((u > 0) & (z > 0))
        up_scores = np.where(in_up, score, -np.inf)
        low_scores = np.where(in_low, score, np.inf)
        i = int(np.argmax(up_scores))
        j = int(np.argmin(low_scores))
        m = up_scores[i]
        M = low_scores[j]
        if m - M <= tol:
            converged = True
            break
        Kii = K[i % n, i % n]
        Kjj = K[j % n, j % n]
        Kij = K[i % n, j % n]
        old_i, old_j = z[i], z[j]
        if u[i] != u[j]:
            quad = Kii + Kjj - 2.0 * Kij  # Q_ii + Q_jj + 2 Q_ij with Q_ij = -K_ij
            if quad <= 0:
                quad = _TAU
            delta = (-G[i] - G[j]) / quad
            diff = old_i - old_j
            z[i] = old_i + delta
            z[j] = old_j + delta
            if diff > 0:
                if z[j] < 0:
                    z[j] = 0.0
                    z[i] = diff
            else:
                if z[i] < 0:
                    z[i] = 0.0
                    z[j] = -diff
            if diff > 0:
                if z[i] > box:
                    z[i] = box
                    z[j] = box - diff
            else:
                if z[j] > box:
                    z[j] = box
                    z[i] = box + diff
        else:
            quad = Kii + Kjj - 2.0 * Kij
            if quad <= 0:
                quad = _TAU
            delta = (G[i] - G[j]) / quad
            total = old_i + old_j
            z[i] = old_i - delta
            z[j] = old_j + delta
            if total > box:
                if z[i] > box:
                    z[i] = box
                    z[j] = total - box
            else:
                if z[j] < 0:
                    z[j] = 0.0
                    z[i] = total
            if total > box:
                if z[j] > box:
                    z[j] = box
                    z[i] = total - box
            else:
                if z[i] < 0:
                    z[i] = 0.0
                    z[j] = total
        G += q_column(i) * (z[i] - old_i) + q_column(j) * (z[j] - old_j)

    if not converged:
        raise NumericError(f"SVR solver did not converge within {max_iter} steps")

    score = -u * G
    free = (z > 0) & (z < box)
    if free.any():
        bias = float(score[free].mean())
    else:
        in_up = ((u > 0) & (z < box)) | ((u < 0) & (z > 0))
        in_low = ((u < 0) & (z < box)) | ((u > 0) & (z > 0))
        hi = score[in_up].max() if in_up.any() else 0.0
        lo = score[in_low].min() if in_low.any() else 0.0
        bias = float((hi + lo) / 2.0)

    beta = z[:n] - z[n:]
    keep = beta != 0.0
    return SvrModel(X[keep], beta[keep], bias, gamma)
