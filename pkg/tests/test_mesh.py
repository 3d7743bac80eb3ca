import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modal_tune.mesh import (ARCH_MATERIALS, ConstraintSet, MaterialRegion, Mesh, MeshError,
                             arch_primitive_area, arch_regions, build_arch_on_piers, dof_map,
                             dump_mesh, load_mesh, single_element_mesh, validate)

from helpers import grid_mesh, unit_region


def test_canonical_arch_counts():
    mesh, cons = build_arch_on_piers()
    assert mesh.n_elements == 336
    assert mesh.n_nodes == 453
    assert dof_map(mesh, cons).n_free == 882
    assert set(np.unique(mesh.region_of_element)) == {1, 2, 3}


@pytest.mark.parametrize("refinement", [0, 1, 2])
def test_arch_area_matches_primitives(refinement):
    mesh, _ = build_arch_on_piers(refinement=refinement)
    assert mesh.element_areas().sum() == pytest.approx(arch_primitive_area(refinement=refinement),
                                                       rel=1e-12)
    assert np.all(mesh.element_areas() > 0)


def test_arch_piers_clamped_at_base():
    mesh, cons = build_arch_on_piers()
    base = {n for n, _ in cons.fixed_dofs}
    assert np.allclose(mesh.nodes[sorted(base), 1], 0.0)
    assert len(cons.fixed_dofs) == 2 * len(base)
    # every node at y = 0 is clamped
    assert base == set(np.flatnonzero(np.isclose(mesh.nodes[:, 1], 0.0)).tolist())


def test_arch_is_symmetric():
    mesh, _ = build_arch_on_piers()
    pts = {tuple(np.round(p, 9)) for p in mesh.nodes}
    mirrored = {tuple(np.round((-x, y), 9)) for x, y in mesh.nodes}
    assert pts == mirrored


@pytest.mark.parametrize("kwargs", [dict(span=0), dict(pier_height=-1), dict(arch_thickness=2.0),
                                    dict(refinement=-1), dict(refinement=1.5)])
def test_arch_rejects_bad_geometry(kwargs):
    with pytest.raises(MeshError, match="invalid geometry"):
        build_arch_on_piers(**kwargs)


def test_clockwise_element_rejected():
    mesh = Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 3, 2, 1]], [1])
    with pytest.raises(MeshError, match="element 0"):
        validate(mesh)


def test_repeated_and_unknown_nodes():
    with pytest.raises(MeshError, match="repeated node"):
        validate(Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 1, 3]], [1]))
    with pytest.raises(MeshError, match="unknown node 7"):
        validate(Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2, 7]], [1]))


def test_unknown_region():
    validate(single_element_mesh(), unit_region())
    with pytest.raises(MeshError, match="unknown region 4"):
        validate(Mesh(single_element_mesh().nodes, [[0, 1, 2, 3]], [4]), unit_region())


def test_material_validation():
    with pytest.raises(MeshError):
        MaterialRegion(1, -1.0, 0.2, 1.0)
    with pytest.raises(MeshError):
        MaterialRegion(1, 1.0, 0.5, 1.0)
    with pytest.raises(MeshError):
        MaterialRegion(1, 1.0, 0.2, 0.0)


def test_constraint_validation():
    with pytest.raises(MeshError, match="cyclic"):
        ConstraintSet(frozenset(), (((0, 0), (1, 0), 1.0), ((1, 0), (0, 0), 1.0)))
    with pytest.raises(MeshError, match="both fixed and a slave"):
        ConstraintSet(frozenset({(0, 0)}), (((0, 0), (1, 0), 1.0),))
    with pytest.raises(MeshError, match="more than one"):
        ConstraintSet(frozenset(), (((0, 0), (1, 0), 1.0), ((0, 0), (2, 0), 1.0)))
    with pytest.raises(MeshError, match="unknown node"):
        dof_map(single_element_mesh(), ConstraintSet(frozenset({(9, 0)})))


def test_chain_resolution():
    cons = ConstraintSet(frozenset(), (((2, 0), (1, 0), 2.0), ((1, 0), (0, 1), 3.0)))
    resolved = cons.resolve_masters()
    assert resolved[(2, 0)] == ((0, 1), 6.0)
    assert resolved[(1, 0)] == ((0, 1), 3.0)


def test_mesh_file_round_trip_is_exact():
    mesh, cons = build_arch_on_piers(refinement=0)
    regions = arch_regions()
    text = dump_mesh(mesh, cons, regions)
    mesh2, cons2, regions2 = load_mesh(io.StringIO(text))
    assert mesh2 == mesh
    assert cons2 == cons
    assert regions2 == regions
    assert dump_mesh(mesh2, cons2, regions2) == text


@pytest.mark.parametrize("doc, message", [
    ({"elements": [], "regions": []}, "missing key 'nodes'"),
    ({"nodes": [[0, 0]], "elements": [{"conn": [0, 0, 0]}], "regions": []}, "element 0"),
    ({"nodes": [1, 2, 3], "elements": [], "regions": []}, "pairs"),
    ({"nodes": [[0, 0]], "elements": [], "regions": [{"id": 1, "E": 1}]}, "missing a field"),
])
def test_mesh_file_errors(doc, message):
    with pytest.raises(MeshError, match=message):
        load_mesh(json.dumps(doc))


def test_mesh_file_not_json():
    with pytest.raises(MeshError, match="not valid JSON"):
        load_mesh("{nodes")


def test_arch_materials_reference_values():
    assert ARCH_MATERIALS[2] == (5.0e9, 2200.0)
    assert ARCH_MATERIALS[3] == (4.8e9, 2100.0)


@settings(max_examples=30, deadline=None)
@given(nx=st.integers(1, 6), ny=st.integers(1, 6), w=st.floats(0.1, 10), h=st.floats(0.1, 10),
       seed=st.integers(0, 2 ** 32 - 1))
def test_jittered_grid_area_is_preserved(nx, ny, w, h, seed):
    # moving only interior nodes leaves the total area unchanged
    rng = np.random.default_rng(seed)
    mesh = grid_mesh(nx, ny, w, h)
    nodes = mesh.nodes.copy()
    interior = ((nodes[:, 0] > 0) & (nodes[:, 0] < w) & (nodes[:, 1] > 0) & (nodes[:, 1] < h))
    step = 0.2 * min(w / nx, h / ny)
    nodes[interior] += rng.uniform(-step, step, (interior.sum(), 2))
    moved = Mesh(nodes, mesh.elements, mesh.region_of_element)
    validate(moved)
    assert moved.element_areas().sum() == pytest.approx(w * h, rel=1e-12)
