"""Residual Jacobian, scaled-Jacobian SVD, perturbation analysis, noise sweeps."""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .assembly import ConstrainedSystem
from .eigen import EigenSolution, solve_smallest
from .objective import ModalTarget, evaluate, pair_modes, residual

log = logging.getLogger(__name__)

REPEATED_GAP = 1e-8
FD_STEP = 1e-6  # in unit-box coordinates


class RepeatedEigenvalueWarning(UserWarning):
    pass


def frequency_derivatives(system: ConstrainedSystem, solution: EigenSolution) -> np.ndarray:
    """d f_i / d x_j (Hz per parameter unit), (q, p), from the simple-eigenvalue formula.

    ``d lambda = v^T (dK - lambda dM) v / v^T M v`` with ``dK``, ``dM`` the unit
    region blocks a parameter scales.
    """
    V = solution.reduced_vectors
    lam = solution.eigenvalues
    p = system.space.dim
    # per-region quadratic forms, (n_regions, q)
    kq = system.energies(V)
    mq = np.array([np.einsum("ij,ij->j", V, system.mass.block(j) @ V)
                   for j in range(len(system.mass))])
    _, rho = system.region_values(solution.x)
    vmv = rho @ mq
    dlam = np.zeros((len(lam), p))
    for i in range(p):
        ce, cr = system.parametric.derivative_coeffs(i)
        dlam[:, i] = (ce @ kq - lam * (cr @ mq)) / vmv
    f = np.sqrt(lam) / (2 * np.pi)
    return dlam / (8 * np.pi ** 2 * f[:, None])


def mode_derivatives(system: ConstrainedSystem, solution: EigenSolution, modes=None) -> np.ndarray:
    """d v_i / d x_j in reduced coordinates, (p, n_f, k), for M-normalized simple modes.

    Each mode needs one sparse factorization of the bordered matrix
    ``[[K - lambda M, M v], [(M v)^T, 0]]``, which is regular for a simple
    eigenvalue; the border row fixes the normalization ``v^T M v = 1``.
    """
    x = solution.x
    K, M = system.instantiate(x, check=False)
    _, rho = system.region_values(x)
    p = system.space.dim
    modes = range(solution.q) if modes is None else modes
    V = solution.reduced_vectors
    dlam = frequency_derivatives(system, solution) * (8 * np.pi ** 2 * solution.frequencies[:, None])
    dK = [system.stiffness.combine(system.parametric.derivative_coeffs(j)[0]) for j in range(p)]
    dM = [system.mass.combine(system.parametric.derivative_coeffs(j)[1]) for j in range(p)]
    out = np.zeros((p, system.n_free, len(modes)))
    for c, i in enumerate(modes):
        lam, v = solution.eigenvalues[i], V[:, i]
        Mv = M @ v
        A = sp.bmat([[K - lam * M, sp.csc_matrix(Mv[:, None])],
                     [sp.csr_matrix(Mv[None, :]), None]], format="csc")
        lu = splu(A)
        for j in range(p):
            rhs = np.empty(system.n_free + 1)
            rhs[:-1] = -(dK[j] @ v - lam * (dM[j] @ v) - dlam[i, j] * Mv)
            rhs[-1] = -0.5 * v @ (dM[j] @ v)
            out[j, :, c] = lu.solve(rhs)[:-1]
    return out


def _has_repeated(lam, gap=REPEATED_GAP) -> bool:
    lam = np.asarray(lam)
    if len(lam) < 2:
        return False
    return bool(np.any(np.diff(lam) <= gap * np.abs(lam[1:])))


def _fd_jacobian(fun, x, widths, h=FD_STEP, lower=None, upper=None):
    """Central differences, one-sided where a step would leave ``[lower, upper]``."""
    cols = []
    f0 = None
    for i in range(len(x)):
        step = h * widths[i]
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        if upper is not None and xp[i] > upper[i]:
            f0 = fun(x) if f0 is None else f0
            cols.append((f0 - fun(xm)) / step)
        elif lower is not None and xm[i] < lower[i]:
            f0 = fun(x) if f0 is None else f0
            cols.append((fun(xp) - f0) / step)
        else:
            cols.append((fun(xp) - fun(xm)) / (2 * step))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def jacobian(system: ConstrainedSystem, target: ModalTarget, x, solution: EigenSolution | None = None,
             evaluator=None, pairing: str = "index") -> np.ndarray:
    """Jacobian of the weighted residual, (2q, p), per physical parameter unit.

    Frequency rows are analytic; MAC rows use central differences on
    ``evaluator`` (a local ROM restricted to the sensors). Without an evaluator,
    or near repeated eigenvalues, everything falls back to differences of full
    solves.
    """
    x = system.space.check(x)
    q, p = target.q, system.space.dim
    w = target.weights
    if solution is None:
        solution = solve_smallest(system, x, q)
    widths = system.space.widths
    lo, hi = system.space.lower, system.space.upper

    def full_residual(xx):
        sol = solve_smallest(system, xx, q)
        return evaluate(target, sol.frequencies, sol.vectors, pairing).r

    if _has_repeated(solution.eigenvalues):
        warnings.warn("repeated eigenvalue among the matched modes; using finite differences",
                      RepeatedEigenvalueWarning, stacklevel=2)
        return _fd_jacobian(full_residual, x, widths, lower=lo, upper=hi)

    J = np.zeros((2 * q, p))
    df = frequency_derivatives(system, solution)
    idx = list(range(q))
    if pairing == "mac":
        modes = solution.vectors[target.sensor_dofs]
        idx = list(pair_modes(modes, target, "mac").indices)
    J[:q] = -w[:q, None] * df[idx]

    if np.any(w[q:] != 0):
        if evaluator is None:
            J[q:] = _fd_jacobian(full_residual, x, widths, lower=lo, upper=hi)[q:]
        else:
            def rom_mac_rows(xx):
                f, modes = evaluator(xx)
                if pairing == "mac":
                    sel = list(pair_modes(modes, target, "mac").indices)
                else:
                    sel = list(range(q))
                return residual(target, f[sel], modes[:, sel]).r[q:]
            J[q:] = _fd_jacobian(rom_mac_rows, x, widths)
    return J


# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SvdReport:
    singular_values: np.ndarray  # descending
    right_vectors: np.ndarray  # Z, (p, p), columns z_i
    left_vectors: np.ndarray  # Q, (2q, p), columns q_i
    condition_number: float
    trusted: np.ndarray  # sigma_i > noise level
    noise_level: float
    scale: np.ndarray  # column scaling applied to J

    def to_dict(self) -> dict:
        return {
            "singular_values": self.singular_values.tolist(),
            "right_vectors": self.right_vectors.tolist(),
            "left_vectors": self.left_vectors.tolist(),
            "condition_number": _json_float(self.condition_number),
            "trusted": [bool(t) for t in self.trusted],
            "noise_level": self.noise_level,
            "scale": self.scale.tolist(),
        }


def _json_float(v):
    return "inf" if np.isinf(v) else float(v)


def svd_report(J, x_opt=None, noise_level: float = 0.0) -> SvdReport:
    """SVD of J with columns scaled by ``x_opt`` (so the optimum sits at all ones).

    Singular values below ``max(shape) * eps * sigma_1`` are reported as zero,
    which makes the condition number infinite.
    """
    J = np.asarray(J, dtype=float)
    scale = np.ones(J.shape[1]) if x_opt is None else np.asarray(x_opt, dtype=float)
    Js = J * scale
    Q, s, Zt = np.linalg.svd(Js, full_matrices=False)
    if s.size and s[0] > 0:
        s = np.where(s <= max(Js.shape) * np.finfo(float).eps * s[0], 0.0, s)
    if s.size == 0 or s[-1] == 0:
        kappa = np.inf
    else:
        kappa = float(s[0] / s[-1])
    return SvdReport(s, Zt.T, Q, kappa, s > noise_level, float(noise_level), scale)


@dataclass(frozen=True, eq=False)
class Perturbation:
    dx: np.ndarray
    zeta: np.ndarray  # components of dx along the right singular vectors
    rank: int
    right_vectors: np.ndarray


def perturb_solution(J, db, rcond: float | None = None) -> Perturbation:
    """First-order change of the least-squares solution for data change ``db``.

    Solves the normal equations through the SVD; rank-deficient J goes through
    the pseudo-inverse with singular values below ``rcond * sigma_1`` dropped.
    """
    J = np.asarray(J, dtype=float)
    db = np.asarray(db, dtype=float)
    Q, s, Zt = np.linalg.svd(J, full_matrices=False)
    if rcond is None:
        rcond = max(J.shape) * np.finfo(float).eps
    keep = s > rcond * (s[0] if s.size else 0.0)
    rank = int(np.sum(keep))
    if rank < J.shape[1]:
        log.warning("rank-deficient Jacobian (rank %d of %d); using the pseudo-inverse",
                    rank, J.shape[1])
    coeff = np.zeros_like(s)
    coeff[keep] = (Q[:, keep].T @ db) / s[keep]
    dx = Zt.T @ coeff
    return Perturbation(dx, Zt @ dx, rank, Zt.T)


# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    delta: float
    seed: int
    error: float
    converged: bool
    x: np.ndarray = field(default=None, repr=False)
    message: str = ""


def relative_error(x_noisy, x_clean) -> float:
    """Infinity norm of ``(x_noisy - x_clean) / x_noisy``."""
    x_noisy = np.asarray(x_noisy, dtype=float)
    return float(np.max(np.abs((x_noisy - np.asarray(x_clean)) / x_noisy)))


def perturb_frequencies(frequencies, delta: float, rng) -> np.ndarray:
    f = np.asarray(frequencies, dtype=float)
    return f + np.abs(f) * delta * rng.uniform(-1.0, 1.0, size=f.shape)


def noise_sweep(system: ConstrainedSystem, target: ModalTarget, deltas, seeds, options=None,
                x_clean=None, mode_noise: float = 0.0, base_seed: int = 0,
                threads: int = 1) -> list:
    """Re-run the update on targets with perturbed frequencies.

    Row ``(delta, seed)`` draws uniform noise ``|df_i| <= delta |f_i|`` from a
    generator seeded by ``(base_seed, seed)``; weights stay those of the clean
    target. ``mode_noise`` optionally adds Gaussian noise, relative to each
    mode's largest entry, to the measured shapes. Rows are independent and
    returned in ``(delta, seed)`` order.
    """
    from .optimizer import update

    if x_clean is None:
        x_clean = update(system, target, options).x_opt

    def run(delta, seed):
        rng = np.random.default_rng([base_seed, seed])
        f = np.sort(perturb_frequencies(target.frequencies, delta, rng))
        shapes = target.mode_shapes
        if mode_noise > 0:
            scale = np.abs(shapes).max(axis=1, keepdims=True)
            shapes = shapes + mode_noise * scale * rng.standard_normal(shapes.shape)
        noisy = ModalTarget(f, target.sensor_dofs, shapes, target.weights)
        try:
            result = update(system, noisy, options)
        except Exception as exc:  # a failed row is recorded, the sweep goes on
            return SweepRow(delta, seed, float("nan"), False, None, str(exc))
        return SweepRow(delta, seed, relative_error(result.x_opt, x_clean),
                        result.termination == "converged", result.x_opt, result.termination)

    jobs = [(d, s) for d in deltas for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda job: run(*job), jobs))
    return [run(d, s) for d, s in jobs]
