"""Smallest eigenpairs of the constrained pencil (K, M) by shift-invert Lanczos.

The iteration runs on ``A = K^-1 M`` in the M-inner product (A is self-adjoint
there), so the largest Ritz values ``theta`` of A give the smallest
``lambda = 1 / theta``. The Lanczos vectors are kept: the reduced-order models
are built from them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import ConstrainedSystem

DEFAULT_TOL = 1e-10
GUARD = 3
DENSE_LIMIT = 2000


class EigenSolverError(RuntimeError):
    pass


class IndefiniteStiffnessError(EigenSolverError):
    """Reduced stiffness is singular or indefinite (unrestrained rigid modes)."""


class ConvergenceError(EigenSolverError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class SizeGuardError(EigenSolverError):
    pass


def to_hz(eigenvalues) -> np.ndarray:
    return np.sqrt(np.maximum(np.asarray(eigenvalues, dtype=float), 0.0)) / (2 * np.pi)


class StiffnessFactor:
    """Sparse LDL^T-style factorization of an SPD stiffness.

    SuperLU in symmetric mode with diagonal pivoting keeps ``P K P^T = L U``,
    so the signs of ``diag(U)`` give the inertia of K.
    """

    def __init__(self, K):
        K = sp.csc_matrix(K)
        try:
            self._lu = splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                            options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise IndefiniteStiffnessError(
                f"stiffness factorization failed ({exc}); the structure may have rigid-body "
                "modes, review the constraints") from None
        pivots = self._lu.U.diagonal()
        if np.any(pivots <= 0):
            raise IndefiniteStiffnessError(
                f"reduced stiffness is not positive definite ({int(np.sum(pivots <= 0))} "
                "non-positive pivots); review the constraints")

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


@dataclass(frozen=True, eq=False)
class LanczosRun:
    basis: np.ndarray  # (n_f, m), M-orthonormal Lanczos vectors
    eigenvalues: np.ndarray  # (k,) ascending Ritz values of the pencil
    vectors: np.ndarray  # (n_f, k) M-orthonormal Ritz vectors
    estimates: np.ndarray  # (k,) Lanczos residual estimates relative to theta
    iterations: int


def start_vector(n: int) -> np.ndarray:
    return np.ones(n) / np.sqrt(n)


def _orthogonalize(w, Q, MQ, passes: int = 2):
    for _ in range(passes):
        if Q.shape[1]:
            w = w - Q @ (MQ.T @ w)
    return w


def lanczos(K, M, nev: int, tol: float = DEFAULT_TOL, max_dim: int | None = None,
            min_dim: int = 0, factor: StiffnessFactor | None = None) -> LanczosRun:
    """Run shift-invert Lanczos until the ``nev`` smallest pairs meet ``tol``.

    Convergence uses the Lanczos estimate ``|beta_m s_m| / theta``. On breakdown
    (invariant subspace) the iteration restarts with a deterministic vector
    orthogonal to the current basis.
    """
    n = K.shape[0]
    nev = min(nev, n)
    max_dim = n if max_dim is None else min(max_dim, n)
    min_dim = min(min_dim, max_dim)
    factor = factor or StiffnessFactor(K)
    M = sp.csr_matrix(M)

    Q = np.zeros((n, 0))
    MQ = np.zeros((n, 0))
    alphas, betas = [], []  # betas[j] couples vector j and j+1
    v = start_vector(n)
    restart = 0
    converged = False
    theta = s = None

    while Q.shape[1] < max_dim:
        before = np.sqrt(max(v @ (M @ v), 0.0))
        v = _orthogonalize(v, Q, MQ)
        Mv = M @ v
        norm = np.sqrt(max(v @ Mv, 0.0))
        if norm <= 1e-8 * before:
            # start or restart vector lies in span(Q)
            restart += 1
            if restart > 10:
                break
            v = np.random.default_rng(restart).standard_normal(n)
            if betas:
                betas[-1] = 0.0
            continue
        v /= norm
        Mv /= norm
        Q = np.column_stack([Q, v])
        MQ = np.column_stack([MQ, Mv])
        j = Q.shape[1] - 1

        w = factor.solve(Mv)
        alpha = w @ Mv
        w = w - alpha * v
        if j > 0 and betas[-1] != 0.0:
            w = w - betas[-1] * Q[:, j - 1]
        w = _orthogonalize(w, Q, MQ)
        beta = np.sqrt(max(w @ (M @ w), 0.0))
        alphas.append(alpha)
        betas.append(beta)

        theta, s = la.eigh_tridiagonal(np.array(alphas), np.array(betas[:-1]))
        theta, s = theta[::-1], s[:, ::-1]
        k = min(nev, len(alphas))
        est = np.abs(beta * s[-1, :k]) / np.abs(theta[:k])
        if len(alphas) >= min_dim and k == nev and np.all(est <= tol):
            converged = True
            break
        if Q.shape[1] >= n:
            converged = True
            break
        if beta <= 1e-14 * abs(theta[0]):
            # invariant subspace: continue from a fresh direction
            betas[-1] = 0.0
            restart += 1
            v = np.random.default_rng(restart).standard_normal(n)
            continue
        v = w / beta

    m = Q.shape[1]
    # Rayleigh-Ritz on the pencil restricted to span(Q)
    Kq = Q.T @ (K @ Q)
    Mq = MQ.T @ Q
    Kq = 0.5 * (Kq + Kq.T)
    Mq = 0.5 * (Mq + Mq.T)
    lam, y = la.eigh(Kq, Mq)
    k = min(nev, m)
    vecs = Q @ y[:, :k]
    est = np.zeros(k)
    if theta is not None and len(theta) >= k:
        est = np.abs(betas[-1] * s[-1, :k]) / np.abs(theta[:k])
    if not converged:
        raise ConvergenceError(
            f"Lanczos did not converge within {m} vectors; residual estimates {est.tolist()}",
            residuals=est)
    return LanczosRun(Q, lam[:k], vecs, est, m)


@dataclass(frozen=True, eq=False)
class EigenSolution:
    eigenvalues: np.ndarray  # lambda = omega^2, ascending
    vectors: np.ndarray  # (n, q) full coordinates, M-orthonormal
    reduced_vectors: np.ndarray  # (n_f, q)
    residuals: np.ndarray  # ||K v - lambda M v|| / ||K v|| on the reduced pencil
    x: np.ndarray  # parameter point of the solve

    @property
    def frequencies(self) -> np.ndarray:
        return to_hz(self.eigenvalues)

    @property
    def q(self) -> int:
        return len(self.eigenvalues)


def _normalize_signs(vecs):
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def residual_norms(K, M, lam, vecs) -> np.ndarray:
    KV = K @ vecs
    R = KV - (M @ vecs) * lam
    return np.linalg.norm(R, axis=0) / np.linalg.norm(KV, axis=0)


def solution_from_pairs(system: ConstrainedSystem, x, K, M, lam, vecs) -> EigenSolution:
    vecs = _normalize_signs(vecs)
    # Rayleigh quotients with the stiffness term as a sum of element strain
    # energies: v^T K v itself loses about lambda_max / lambda_1 in accuracy
    e, _ = system.region_values(x)
    lam = (e @ system.energies(vecs)) / np.einsum("ij,ij->j", vecs, M @ vecs)
    res = residual_norms(K, M, lam, vecs)
    return EigenSolution(lam, np.asarray(system.basis @ vecs), vecs, res,
                         np.array(x, dtype=float).reshape(-1))


def solve_smallest(system: ConstrainedSystem, x=None, q: int = 5, tol: float = DEFAULT_TOL,
                   max_dim: int | None = None) -> EigenSolution:
    """The ``q`` smallest eigenpairs at ``x``; ``q + 3`` are iterated as a guard band."""
    if q < 1:
        raise ValueError("q must be at least 1")
    if q > system.n_free:
        raise ValueError(f"q = {q} exceeds the {system.n_free} free dofs")
    x = system.space.start if x is None else system.space.check(x)
    K, M = system.instantiate(x)
    run = lanczos(K, M, min(q + GUARD, system.n_free), tol, max_dim)
    return solution_from_pairs(system, x, K, M, run.eigenvalues[:q], run.vectors[:, :q])


def dense_oracle(system: ConstrainedSystem, x=None, vectors: bool = False):
    """All eigenvalues (ascending) of the reduced dense pencil."""
    if system.n_free > DENSE_LIMIT:
        raise SizeGuardError(f"dense oracle refused: {system.n_free} free dofs > {DENSE_LIMIT}")
    K, M = system.instantiate(x)
    return la.eigh(K.toarray(), M.toarray(), eigvals_only=not vectors)
