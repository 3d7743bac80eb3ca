"""Trust-region model updating over local reduced models, and a black-box baseline.

All trust-region quantities (radius, steps, gradients) live in the unit cube
obtained by mapping each parameter interval onto [0, 1]; the trust region is
an infinity-norm box, so its intersection with the parameter box is a box.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .assembly import ConstrainedSystem
from .eigen import EigenSolution, solve_smallest
from .objective import ModalTarget, evaluate, pair_modes, residual
from .rom import DEFAULT_M_MAX, RomEvaluator, build_rom
from .sensitivity import jacobian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrustRegionOptions:
    gtol: float = 1e-3  # projected-gradient norm, unit-cube coordinates
    max_builds: int = 50
    radius: float = 0.25
    shrink: float = 0.5
    grow: float = 2.0
    eta1: float = 0.1
    eta2: float = 0.75
    m_max: int = DEFAULT_M_MAX
    pairing: str = "index"
    eig_tol: float = 1e-10
    inner_maxiter: int = 100
    inner_tol: float = 1e-10
    min_radius: float = 1e-10

    def __post_init__(self):
        if not 0 < self.eta1 < self.eta2 < 1:
            raise ValueError("need 0 < eta1 < eta2 < 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        if not self.grow > 1:
            raise ValueError("grow factor must exceed 1")
        if not self.radius > 0:
            raise ValueError("initial radius must be positive")
        if self.pairing not in ("index", "mac"):
            raise ValueError("pairing must be 'index' or 'mac'")


@dataclass
class Step:
    iteration: int
    phi: float  # full-model objective at the evaluated point
    radius: float
    ratio: float  # actual / predicted reduction; nan for the start row
    accepted: bool
    u: np.ndarray
    x: np.ndarray
    frequencies: np.ndarray


@dataclass
class UpdateResult:
    x_opt: np.ndarray
    phi: float
    termination: str  # converged | budget | radius | no-progress
    phi_history: list  # per accepted center
    frequency_history: list
    steps: list  # Step records, the start row first
    solution: EigenSolution | None = field(default=None, repr=False)
    jacobian: np.ndarray | None = field(default=None, repr=False)
    gradient_norm: float = float("nan")
    rom_builds: int = 0
    full_solves: int = 0
    method: str = "trust-region-rom"
    names: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    @property
    def accepted(self) -> int:
        return sum(1 for s in self.steps if s.accepted)

    @property
    def rejected(self) -> int:
        return sum(1 for s in self.steps if not s.accepted)


def projected_gradient(u, g) -> np.ndarray:
    return np.clip(u - g, 0.0, 1.0) - u


def _sensor_residual(target: ModalTarget, pairing: str):
    q = target.q

    def fun(frequencies, modes):
        if pairing == "mac":
            idx = list(pair_modes(modes, target, "mac").indices)
        else:
            idx = list(range(q))
        return residual(target, np.asarray(frequencies)[idx], modes[:, idx]).r
    return fun


def _fd_jacobian_unit(res, u, r0, h=1e-6):
    cols = []
    for i in range(len(u)):
        up, um = u.copy(), u.copy()
        up[i] += h
        um[i] -= h
        cols.append((res(up) - res(um)) / (2 * h))
    return np.column_stack(cols) if cols else np.zeros((len(r0), 0))


def _dogleg(J, r, g, delta):
    p_gn = np.linalg.lstsq(J, -r, rcond=1e-12)[0]
    if np.linalg.norm(p_gn) <= delta:
        return p_gn
    gn = np.linalg.norm(g)
    if gn == 0:
        return p_gn * (delta / np.linalg.norm(p_gn))
    Jg = J @ g
    t = gn ** 2 / max(Jg @ Jg, 1e-300)
    p_sd = -t * g
    if np.linalg.norm(p_sd) >= delta:
        return -delta * g / gn
    d = p_gn - p_sd
    a, b, c = d @ d, 2 * p_sd @ d, p_sd @ p_sd - delta ** 2
    tau = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    return p_sd + tau * d


def solve_subproblem(evaluator, target: ModalTarget, center, radius: float, space,
                     options: TrustRegionOptions = TrustRegionOptions()):
    """Minimize the surrogate objective over the box ``|u - center|_inf <= radius`` in [0, 1]^p.

    Projected Gauss-Newton with a dogleg inner radius; steps are clipped to the
    feasible box and only accepted when they decrease the surrogate objective.
    Returns ``(u, phi_center, phi_candidate)`` in unit coordinates.
    """
    center = np.asarray(center, dtype=float)
    resfun = _sensor_residual(target, options.pairing)

    def res(u):
        f, modes = evaluator(space.from_unit(u))
        return resfun(f, modes)

    r = res(center)
    phi0 = float(r @ r)
    if radius <= 0 or center.size == 0:
        return center.copy(), phi0, phi0
    lo = np.maximum(0.0, center - radius)
    hi = np.minimum(1.0, center + radius)
    u, phi = center.copy(), phi0
    delta = radius * np.sqrt(len(u))
    for _ in range(options.inner_maxiter):
        J = _fd_jacobian_unit(res, u, r)
        g = J.T @ r
        if np.linalg.norm(np.clip(u - g, lo, hi) - u) <= options.inner_tol * max(1.0, phi):
            break
        # variables held at a bound by the gradient stay fixed for this step
        free = ~(((u <= lo) & (g > 0)) | ((u >= hi) & (g < 0)))
        while True:
            step = np.zeros_like(u)
            step[free] = _dogleg(J[:, free], r, g[free], delta)
            step = np.clip(u + step, lo, hi) - u
            snorm = np.linalg.norm(step)
            if snorm <= options.inner_tol:
                return u, phi0, phi
            r_new = res(u + step)
            phi_new = float(r_new @ r_new)
            if phi_new < phi:
                predicted = phi - float(np.sum((r + J @ step) ** 2))
                if predicted > 0 and (phi - phi_new) >= 0.75 * predicted:
                    delta = max(delta, 2 * snorm)
                break
            delta = 0.5 * snorm
        u, r, phi = u + step, r_new, phi_new
        if snorm <= options.inner_tol:
            break
    return u, phi0, phi


def _full_phi(target, solution, pairing, check_swap=False):
    res = evaluate(target, solution.frequencies, solution.vectors, pairing, check_swap)
    return res


def _check_sizes(system, target):
    p = system.space.dim
    effective = int(np.count_nonzero(target.weights))
    if p > effective:
        log.warning("%d parameters but only %d weighted data: the problem is underdetermined",
                    p, effective)


def update(system: ConstrainedSystem, target: ModalTarget, options: TrustRegionOptions | None = None,
           x_start=None, surrogate=None) -> UpdateResult:
    """Minimize the weighted modal misfit over the parameter box.

    Each iteration builds a local surrogate at the candidate point (the build
    includes the full eigensolve that verifies the candidate); rejected
    candidates are discarded and the current surrogate is reused with a
    smaller radius. ``surrogate(system, x, target, options)`` may replace the
    Lanczos ROM; it must return an object with ``solution`` and
    ``evaluator(dofs)``.
    """
    options = options or TrustRegionOptions()
    surrogate = surrogate or _rom_surrogate
    space = system.space
    t0 = time.perf_counter()
    _check_sizes(system, target)
    x = space.check(space.start if x_start is None else x_start)
    u = space.to_unit(x)

    model = surrogate(system, x, target, options)
    builds = 1
    res_c = _full_phi(target, model.solution, options.pairing, check_swap=True)
    phi_c = res_c.phi
    radius = options.radius
    steps = [Step(0, phi_c, radius, float("nan"), True, u.copy(), x.copy(),
                  model.solution.frequencies.copy())]
    phi_hist = [phi_c]
    freq_hist = [model.solution.frequencies.copy()]
    evaluator = model.evaluator(target.sensor_dofs)
    termination = None
    it = 0

    while True:
        J = jacobian(system, target, x, model.solution, evaluator, options.pairing)
        Ju = J * space.widths
        g = 2 * Ju.T @ res_c.r
        gnorm = float(np.linalg.norm(projected_gradient(u, g)))
        if gnorm <= options.gtol:
            termination = "converged"
            break
        if builds >= options.max_builds:
            termination = "budget"
            break
        if radius < options.min_radius:
            termination = "radius"
            break

        cand, phi_rom_c, phi_rom_new = solve_subproblem(evaluator, target, u, radius, space, options)
        predicted = phi_rom_c - phi_rom_new
        if not predicted > 0 or np.array_equal(cand, u):
            radius *= options.shrink
            continue

        it += 1
        x_new = space.from_unit(cand)
        trial = surrogate(system, x_new, target, options)
        builds += 1
        res_new = _full_phi(target, trial.solution, options.pairing, check_swap=True)
        ratio = (phi_c - res_new.phi) / predicted
        accepted = ratio >= options.eta1 and res_new.phi < phi_c
        steps.append(Step(it, res_new.phi, radius, float(ratio), bool(accepted), cand.copy(),
                          x_new.copy(), trial.solution.frequencies.copy()))
        log.info("iter %d phi %.3e radius %.3g ratio %.3f %s", it, res_new.phi, radius, ratio,
                 "accepted" if accepted else "rejected")
        if accepted:
            u, x, model, res_c, phi_c = cand, x_new, trial, res_new, res_new.phi
            evaluator = model.evaluator(target.sensor_dofs)
            phi_hist.append(phi_c)
            freq_hist.append(model.solution.frequencies.copy())
            if ratio >= options.eta2:
                radius = min(options.grow * radius, 1.0)
        else:
            radius *= options.shrink

    if termination != "converged":
        log.warning("update stopped without convergence: %s", termination)
    return UpdateResult(x_opt=x, phi=phi_c, termination=termination, phi_history=phi_hist,
                        frequency_history=freq_hist, steps=steps, solution=model.solution,
                        jacobian=J, gradient_norm=gnorm, rom_builds=builds, full_solves=builds,
                        names=space.names, wall_time=time.perf_counter() - t0)


class _RomSurrogate:
    def __init__(self, rom):
        self.rom = rom
        self.solution = rom.solution

    def evaluator(self, dofs):
        return RomEvaluator(self.rom, dofs)


def _rom_surrogate(system, x, target, options):
    # mode-shape terms need first-order accurate ROM eigenvectors
    k = target.q if np.any(target.mode_weights() != 0) else 0
    return _RomSurrogate(build_rom(system, x, target.q, options.m_max, options.eig_tol,
                                   derivative_modes=k))


# ---------------------------------------------------------------------------

def blackbox_baseline(system: ConstrainedSystem, target: ModalTarget,
                      options: TrustRegionOptions | None = None, x_start=None,
                      max_evaluations: int = 2000) -> UpdateResult:
    """Bound-constrained quasi-Newton (L-BFGS-B) treating the eigensolver as a black box.

    Every objective evaluation, including the forward-difference gradient
    probes, is a full eigensolve. The projected-gradient tolerance is the same
    as for :func:`update`, applied in the unit cube.
    """
    options = options or TrustRegionOptions()
    space = system.space
    t0 = time.perf_counter()
    x0 = space.check(space.start if x_start is None else x_start)
    q = target.q
    count = {"solves": 0}
    cache = {}
    trace = []

    def phi(u):
        key = tuple(np.asarray(u, dtype=float))
        if key not in cache:
            xx = space.from_unit(np.clip(u, 0.0, 1.0))
            sol = solve_smallest(system, xx, q, options.eig_tol)
            count["solves"] += 1
            cache[key] = (evaluate(target, sol.frequencies, sol.vectors, options.pairing).phi, sol)
        return cache[key][0]

    def callback(uk):
        trace.append(np.array(uk))

    p = space.dim
    result = minimize(phi, space.to_unit(x0), method="L-BFGS-B", jac="2-point",
                      bounds=[(0.0, 1.0)] * p, callback=callback,
                      options={"gtol": options.gtol / np.sqrt(max(p, 1)), "ftol": 1e-15,
                               "maxfun": max_evaluations, "maxiter": max_evaluations})
    u = np.clip(result.x, 0.0, 1.0)
    x = space.from_unit(u)
    phi_opt = phi(u)
    sol = cache[tuple(u)][1] if tuple(u) in cache else solve_smallest(system, x, q)
    res = evaluate(target, sol.frequencies, sol.vectors, options.pairing)
    J = jacobian(system, target, x, sol, None, options.pairing)
    gnorm = float(np.linalg.norm(projected_gradient(u, 2 * (J * space.widths).T @ res.r)))
    steps = []
    for i, uk in enumerate([space.to_unit(x0)] + trace):
        xk = space.from_unit(uk)
        steps.append(Step(i, phi(uk), float("nan"), float("nan"), True, uk, xk,
                          cache[tuple(np.asarray(uk, dtype=float))][1].frequencies))
    termination = "converged" if gnorm <= options.gtol else ("budget" if result.nfev >= max_evaluations
                                                            else "no-progress")
    return UpdateResult(x_opt=x, phi=phi_opt, termination=termination,
                        phi_history=[s.phi for s in steps],
                        frequency_history=[s.frequencies for s in steps], steps=steps,
                        solution=sol, jacobian=J, gradient_norm=gnorm, rom_builds=0,
                        full_solves=count["solves"], method="blackbox-lbfgsb",
                        names=space.names, wall_time=time.perf_counter() - t0)
