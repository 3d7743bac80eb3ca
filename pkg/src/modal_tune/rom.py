"""Local parametric reduced-order eigenmodels built from a Lanczos basis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .assembly import ConstrainedSystem
from .eigen import (DEFAULT_TOL, GUARD, ConvergenceError, EigenSolution, lanczos,
                    solution_from_pairs, to_hz)
from .sensitivity import mode_derivatives

DEFAULT_M_MAX = 40
DEFAULT_M_MIN = 20
ROM_CAP = 64


class RomAccuracyError(ConvergenceError):
    pass


class RomConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LocalROM:
    x0: np.ndarray
    basis: np.ndarray  # V, (n_f, m), orthonormal columns
    full_basis: np.ndarray  # N V, (n, m)
    stiffness: np.ndarray  # (n_regions, m, m), V^T Kbar_j V
    mass: np.ndarray  # (n_regions, m, m), V^T Mbar_j V
    q: int
    system: ConstrainedSystem
    solution: EigenSolution  # full-model pairs at x0, a by-product of the build
    factors: np.ndarray | None = None  # R_j with V^T Kbar_j V = R_j^T R_j

    @property
    def m(self) -> int:
        return self.basis.shape[1]

    def matrices(self, x):
        e, rho = self.system.region_values(x)
        return (np.tensordot(e, self.stiffness, axes=1),
                np.tensordot(rho, self.mass, axes=1))


def _extend(V, W, rtol=1e-8):
    """Orthonormal basis of span(V, W), dropping directions of W already in span(V)."""
    for w in W.T:
        scale = np.linalg.norm(w)
        if scale == 0:
            continue
        w = w / scale
        for _ in range(2):
            w = w - V @ (V.T @ w)
        norm = np.linalg.norm(w)
        if norm > rtol:
            V = np.column_stack([V, w / norm])
    return V


def build_rom(system: ConstrainedSystem, x0=None, q: int = 5, m_max: int = DEFAULT_M_MAX,
              tol: float = DEFAULT_TOL, m_min: int = DEFAULT_M_MIN,
              derivative_modes: int = 0) -> LocalROM:
    """Lanczos at ``x0`` until the first ``q`` (plus guard) pairs converge.

    The basis keeps at least ``m_min`` vectors, since directions beyond the
    converged pairs are what let the model follow parameter changes.

    ``derivative_modes = k`` adds the parameter derivatives of the first k
    eigenvectors (k * p vectors, beyond ``m_max`` but within ``ROM_CAP``).
    Rayleigh-Ritz on such a basis reproduces the eigenvectors to first order
    around ``x0``, which the Lanczos vectors alone do not: without it the
    model's mode-shape gradients are inexact.
    """
    x0 = system.space.start if x0 is None else system.space.check(x0)
    m_max = min(m_max, ROM_CAP, system.n_free)
    K, M = system.instantiate(x0)
    nev = min(q + GUARD, system.n_free)
    try:
        run = lanczos(K, M, nev, tol, max_dim=m_max, min_dim=min(m_min, m_max))
    except ConvergenceError as exc:
        digits = -np.log10(np.max(exc.residuals)) if exc.residuals is not None else float("nan")
        raise RomAccuracyError(
            f"ROM reached m_max = {m_max} before convergence (about {digits:.1f} digits)",
            exc.residuals) from None
    solution = solution_from_pairs(system, x0, K, M, run.eigenvalues[:q], run.vectors[:, :q])
    V, _ = np.linalg.qr(run.basis)
    k = min(derivative_modes, q)
    if k and system.space.dim:
        dV = mode_derivatives(system, solution, range(k))
        W = dV.transpose(1, 0, 2).reshape(system.n_free, -1)
        V = _extend(V, W[:, :max(0, ROM_CAP - V.shape[1])])
    mass = np.array([V.T @ (system.mass.block(j) @ V) for j in range(len(system.mass))])
    mass = 0.5 * (mass + mass.transpose(0, 2, 1))
    factors = None
    if system.strain:
        # square-root form: forming V^T Kbar_j V directly loses lambda_max / lambda_1
        factors = np.array([np.linalg.qr(G @ V, mode="r") for G in system.strain])
        stiff = np.einsum("jki,jkl->jil", factors, factors)
    else:
        stiff = np.array([V.T @ (system.stiffness.block(j) @ V) for j in range(len(system.stiffness))])
        stiff = 0.5 * (stiff + stiff.transpose(0, 2, 1))
    return LocalROM(np.array(x0, dtype=float), V, np.asarray(system.basis @ V), stiff, mass, q,
                    system, solution, factors)


def rom_eigenpairs(rom: LocalROM, x):
    """Eigenvalues (q,) and M-orthonormal reduced eigenvectors (m, q) of the projected pencil.

    The pencil is solved in inverted form ``(Mr, Kr)``, whose largest
    eigenvalues carry full relative accuracy, and the eigenvalues are then
    taken as Rayleigh quotients with the stiffness as a sum of squares.
    """
    Kr, Mr = rom.matrices(x)
    m, q = rom.m, rom.q
    try:
        _, u = la.eigh(Mr, Kr, subset_by_index=[m - q, m - 1])
    except la.LinAlgError as exc:
        raise RomConsistencyError(f"reduced stiffness is not positive definite: {exc}") from None
    u = u[:, ::-1]
    mu = np.einsum("ij,ij->j", u, Mr @ u)
    if rom.factors is not None:
        e, _ = rom.system.region_values(x)
        ku = np.einsum("j,jk->k", e, np.sum((rom.factors @ u) ** 2, axis=1))
    else:
        ku = np.einsum("ij,ij->j", u, Kr @ u)
    u = u / np.sqrt(mu)
    lam = ku / mu
    order = np.argsort(lam, kind="stable")
    return lam[order], u[:, order]


def rom_eval(rom: LocalROM, x, dofs=None):
    """Frequencies (Hz) and modes at ``x``.

    Modes are returned in full coordinates, or only at the given global ``dofs``
    (rows of the precomputable ``N V``), which keeps the cost independent of n.
    """
    lam, u = rom_eigenpairs(rom, x)
    rows = rom.full_basis if dofs is None else rom.full_basis[np.asarray(dofs)]
    return to_hz(lam), rows @ u


class RomEvaluator:
    """ROM restricted to the sensor dofs: every call touches only m x m data."""

    def __init__(self, rom: LocalROM, dofs):
        self.rom = rom
        self.rows = rom.full_basis[np.asarray(dofs, dtype=np.int64)]

    def __call__(self, x):
        lam, u = rom_eigenpairs(self.rom, x)
        return to_hz(lam), self.rows @ u
