"""Finite-sum objectives with per-worker gradient oracles.

The global objective is the average f(x) = (1/n) sum_i f_i(x). Local
losses carry an n-fold scaling of their data term so that this average
reproduces the undistributed objective exactly:

  ridge:    f_i(x) = (n/2) |A_i x - y_i|^2 + (lam/2) |x|^2
            f(x)   = (1/2) |A x - y|^2 + (lam/2) |x|^2
  logistic: f_i(x) = (1/m_i) sum_l log(1 + exp(-b_il a_il.x)) + (lam/2) |x|^2

Problems are immutable after construction; gradient oracles are read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from shiftcomp.datagen import Dataset, Shard, shard as make_shards


@dataclass(frozen=True)
class SmoothnessInfo:
    L: float
    L_i: np.ndarray
    L_max: float
    mu: float

    @property
    def kappa(self) -> float:
        return self.L / self.mu


@dataclass(frozen=True)
class ReferenceSolution:
    x_star: np.ndarray
    worker_grads: np.ndarray  # (n, d): grad f_i(x*) for every worker
    grad_norms_at_star: np.ndarray  # per-worker |grad f_i(x*)|
    f_star: float


class Problem:
    """A sharded ridge or logistic objective."""

    def __init__(self, loss_kind: str, dataset: Dataset, shards: list[Shard], lam: float):
        if loss_kind not in ("ridge", "logistic"):
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        if lam < 0:
            raise ValueError("regularizer must be non-negative")
        if loss_kind == "logistic" and dataset.kind != "binary":
            raise ValueError("logistic loss needs binary labels")
        self.loss_kind = loss_kind
        self.dataset = dataset
        self.shards = shards
        self.lam = float(lam)
        self.n = len(shards)
        self.d = dataset.d
        self._A = [np.ascontiguousarray(dataset.features[s.rows]) for s in shards]
        self._y = [np.ascontiguousarray(dataset.labels[s.rows]) for s in shards]
        sizes = {a.shape[0] for a in self._A}
        # equal shards admit a single-einsum gradient path for all workers
        if len(sizes) == 1:
            self._A3 = np.stack(self._A)
            self._y2 = np.stack(self._y)
        else:
            self._A3 = None
            self._y2 = None
        self._smoothness = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_dataset(loss_kind: str, dataset: Dataset, lam: float, n: int, shard_seed: int = 0) -> "Problem":
        return Problem(loss_kind, dataset, make_shards(dataset, n, shard_seed), lam)

    def with_lambda(self, lam: float) -> "Problem":
        return Problem(self.loss_kind, self.dataset, self.shards, lam)

    # -- oracles --------------------------------------------------------------

    def local_gradient(self, i: int, x: np.ndarray) -> np.ndarray:
        """Exact analytic gradient of f_i at x."""
        if not (0 <= i < self.n):
            raise IndexError(f"worker index {i} out of range for n={self.n}")
        A, y = self._A[i], self._y[i]
        if self.loss_kind == "ridge":
            return self.n * (A.T @ (A @ x - y)) + self.lam * x
        margins = (A @ x) * y
        sig = _sigmoid(-margins)
        return -(A.T @ (y * sig)) / len(y) + self.lam * x

    def worker_gradients(self, x: np.ndarray) -> np.ndarray:
        """All local gradients at once, shape (n, d)."""
        if self._A3 is None:
            return np.stack([self.local_gradient(i, x) for i in range(self.n)])
        if self.loss_kind == "ridge":
            R = self._A3 @ x - self._y2
            return self.n * np.matmul(R[:, None, :], self._A3)[:, 0, :] + self.lam * x
        margins = (self._A3 @ x) * self._y2
        sig = _sigmoid(-margins)
        mi = self._y2.shape[1]
        return -np.einsum("nij,ni->nj", self._A3, self._y2 * sig) / mi + self.lam * x

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.worker_gradients(x).mean(axis=0)

    def local_objective(self, i: int, x: np.ndarray) -> float:
        A, y = self._A[i], self._y[i]
        reg = 0.5 * self.lam * float(x @ x)
        if self.loss_kind == "ridge":
            r = A @ x - y
            return 0.5 * self.n * float(r @ r) + reg
        margins = (A @ x) * y
        return float(np.mean(np.logaddexp(0.0, -margins))) + reg

    def objective(self, x: np.ndarray) -> float:
        return sum(self.local_objective(i, x) for i in range(self.n)) / self.n

    # -- constants ------------------------------------------------------------

    def smoothness_constants(self) -> SmoothnessInfo:
        """Exact (ridge) or standard-bound (logistic) smoothness constants."""
        if self._smoothness is None:
            if self.loss_kind == "ridge":
                A = self.dataset.features
                H = A.T @ A
                eigs = scipy.linalg.eigvalsh(H)
                L = eigs[-1] + self.lam
                mu = max(eigs[0], 0.0) + self.lam
                L_i = np.array([
                    self.n * scipy.linalg.eigvalsh(Ai.T @ Ai)[-1] + self.lam
                    for Ai in self._A
                ])
            else:
                # H_i <= A_i^T A_i / (4 m_i) + lam I; the global bound averages the
                # per-worker curvature matrices
                Hbar = np.zeros((self.d, self.d))
                L_i = np.zeros(self.n)
                for i, Ai in enumerate(self._A):
                    Hi = Ai.T @ Ai / (4 * Ai.shape[0])
                    Hbar += Hi
                    L_i[i] = scipy.linalg.eigvalsh(Hi)[-1] + self.lam
                L = scipy.linalg.eigvalsh(Hbar / self.n)[-1] + self.lam
                mu = self.lam  # guaranteed lower bound, not the unknown true constant
            self._smoothness = SmoothnessInfo(float(L), L_i, float(L_i.max()), float(mu))
        return self._smoothness

    # -- reference solution ---------------------------------------------------

    def solve_reference(self, tol: float = 1e-24) -> ReferenceSolution:
        """High-accuracy optimum: closed form for ridge, AGD for logistic."""
        info = self.smoothness_constants()
        if info.mu <= 0:
            # ridge with lam = 0 still works when the design has full column rank
            if self.loss_kind != "ridge":
                raise ValueError("reference solve needs mu > 0")
        if self.loss_kind == "ridge":
            A, y = self.dataset.features, self.dataset.labels
            H = A.T @ A + self.lam * np.eye(self.d)
            try:
                x = scipy.linalg.solve(H, A.T @ y, assume_a="pos")
            except scipy.linalg.LinAlgError:
                raise ValueError("singular normal equations: lam = 0 and rank-deficient design")
            # one Newton polish on the quadratic kills residual round-off
            x = x - scipy.linalg.solve(H, self.full_gradient(x), assume_a="pos")
        else:
            x = self._agd(tol, info)
        grads = self.worker_gradients(x)
        return ReferenceSolution(x, grads, np.linalg.norm(grads, axis=1), self.objective(x))

    def _agd(self, tol: float, info: SmoothnessInfo, max_iters: int = 2_000_000) -> np.ndarray:
        """Nesterov's method with constant momentum until |grad f|^2 <= tol."""
        L, mu = info.L, info.mu
        beta = (np.sqrt(L) - np.sqrt(mu)) / (np.sqrt(L) + np.sqrt(mu))
        x = np.zeros(self.d)
        z = x.copy()
        for _ in range(max_iters):
            g = self.full_gradient(z)
            if float(g @ g) <= tol:
                return z
            x_new = z - g / L
            z = x_new + beta * (x_new - x)
            x = x_new
        g = self.full_gradient(x)
        if float(g @ g) > tol:
            raise RuntimeError(f"AGD did not reach |grad|^2 <= {tol} in {max_iters} iterations")
        return x


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def tune_regularizer_for_condition(problem: Problem, target_kappa: float, rel_tol: float = 0.01) -> float:
    """Regularizer lam making the condition number L/mu match target_kappa.

    Bisection on lam; kappa(lam) is decreasing, so a target above kappa at
    lam = 0 (ridge) is unattainable.
    """
    if target_kappa <= 1:
        raise ValueError("condition number targets must exceed 1")

    def kappa(lam: float) -> float:
        info = problem.with_lambda(lam).smoothness_constants()
        if info.mu <= 0:
            return np.inf
        return info.kappa

    lo = 0.0
    if kappa(lo) < target_kappa:
        raise ValueError(f"target kappa {target_kappa} exceeds the unregularized value {kappa(lo):.3g}")
    hi = 1.0
    while kappa(hi) > target_kappa:
        hi *= 4.0
        if hi > 1e12:
            raise ValueError("failed to bracket the target condition number")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        k = kappa(mid)
        if abs(k - target_kappa) <= rel_tol * target_kappa:
            return mid
        if k > target_kappa:
            lo = mid
        else:
            hi = mid
    raise RuntimeError("bisection on the regularizer failed to converge")
