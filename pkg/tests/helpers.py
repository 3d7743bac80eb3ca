"""Small model generators shared by the tests."""
import numpy as np

from modal_tune.mesh import ConstraintSet, MaterialRegion, Mesh


def grid_mesh(nx, ny, width=1.0, height=1.0, jitter=0.0, rng=None, regions=None, thickness=1.0):
    """Structured quad grid, optionally with interior-safe random node jitter."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    if jitter:
        h = min(xs[1], ys[1])
        nodes = nodes + rng.uniform(-jitter, jitter, nodes.shape) * h
    elements = [[node_id(i, j, ny), node_id(i + 1, j, ny), node_id(i + 1, j + 1, ny),
                 node_id(i, j + 1, ny)] for i in range(nx) for j in range(ny)]
    if regions is None:
        regions = np.ones(len(elements), dtype=int)
    return Mesh(nodes, elements, regions, thickness)


def node_id(i, j, ny):
    return i * (ny + 1) + j


def clamped_left(nx, ny):
    return ConstraintSet(frozenset((node_id(0, j, ny), d) for j in range(ny + 1) for d in (0, 1)))


def random_model(rng, max_free=200):
    """A jittered cantilever grid with 1-3 random materials and at most ``max_free`` free dofs."""
    nx, ny = int(rng.integers(2, 17)), int(rng.integers(2, 9))
    while 2 * nx * (ny + 1) > max_free:
        nx -= 1
    n_regions = int(rng.integers(1, 4))
    reg = rng.integers(1, n_regions + 1, nx * ny)
    mesh = grid_mesh(nx, ny, rng.uniform(1, 5), rng.uniform(1, 5), 0.2, rng, reg,
                     rng.uniform(0.2, 2.0))
    regions = {r: MaterialRegion(r, rng.uniform(1e9, 1e10), rng.uniform(0.0, 0.45),
                                 rng.uniform(1000, 3000)) for r in range(1, n_regions + 1)}
    return mesh, clamped_left(nx, ny), regions


def unit_region(young=1.0, poisson=0.25, density=1.0, rid=1):
    return {rid: MaterialRegion(rid, young, poisson, density)}
