"""The arch-on-piers updating problem: parameter box, sensor layout, synthetic targets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import ConstrainedSystem, ParamBinding, ParamSpace, build_system
from .eigen import solve_smallest
from .mesh import ARCH_MATERIALS, ConstraintSet, Mesh, arch_regions, build_arch_on_piers, dof_index
from .objective import DEFAULT_MODE_WEIGHT, ModalTarget, build_target

ARCH_BINDINGS = (ParamBinding("E2", "E", (2,)), ParamBinding("E3", "E", (3,)),
                 ParamBinding("rho2", "rho", (2,)))
ARCH_LOWER = (1e9, 1e9, 1000.0)
ARCH_UPPER = (9e9, 9e9, 3000.0)
ARCH_TRUTH = (ARCH_MATERIALS[2][0], ARCH_MATERIALS[3][0], ARCH_MATERIALS[2][1])
ARCH_FAR_START = (2e9, 1.1e9, 1100.0)
ARCH_Q = 5


def arch_space(start=None) -> ParamSpace:
    return ParamSpace(ARCH_BINDINGS, ARCH_LOWER, ARCH_UPPER, start)


def arch_sensor_nodes(mesh: Mesh, pier_height: float = 4.0) -> list:
    """Nodes nearest to a sparse layout on the outer boundary.

    Pier outer faces at mid-height and top, the extrados at the quarter points
    and the crown: seven stations, both directions at each.
    """
    xy = mesh.nodes
    top = xy[:, 1].max()
    xmax = xy[:, 0].max()
    points = [(-xmax, pier_height / 2), (-xmax, pier_height), (xmax, pier_height / 2),
              (xmax, pier_height)]
    rext = top - pier_height
    for ang in (3 * np.pi / 4, np.pi / 2, np.pi / 4):
        points.append((rext * np.cos(ang), pier_height + rext * np.sin(ang)))
    return [int(np.argmin(np.hypot(xy[:, 0] - px, xy[:, 1] - py))) for px, py in points]


def sensor_dofs_of(nodes) -> np.ndarray:
    return np.array([dof_index(n, d) for n in nodes for d in (0, 1)], dtype=np.int64)


def synthetic_target(system: ConstrainedSystem, x, sensor_dofs, q: int = ARCH_Q,
                     scheme: str = "relative", mode_weight=DEFAULT_MODE_WEIGHT) -> ModalTarget:
    """Target reproduced exactly by the model at ``x``."""
    sol = solve_smallest(system, x, q)
    shapes = sol.vectors[np.asarray(sensor_dofs)].T
    return build_target(sol.frequencies, shapes, sensor_dofs, scheme, mode_weight)


@dataclass(frozen=True, eq=False)
class ArchProblem:
    mesh: Mesh
    constraints: ConstraintSet
    regions: dict
    system: ConstrainedSystem
    target: ModalTarget
    truth: np.ndarray


def arch_problem(refinement: int = 1, start=None, q: int = ARCH_Q, scheme: str = "relative",
                 mode_weight=DEFAULT_MODE_WEIGHT) -> ArchProblem:
    """Round-trip problem: target generated at the reference materials."""
    mesh, constraints = build_arch_on_piers(refinement=refinement)
    regions = arch_regions()
    system = build_system(mesh, constraints, regions, arch_space(start))
    sensors = sensor_dofs_of(arch_sensor_nodes(mesh))
    truth = np.array(ARCH_TRUTH)
    target = synthetic_target(system, truth, sensors, q, scheme, mode_weight)
    return ArchProblem(mesh, constraints, regions, system, target, truth)
