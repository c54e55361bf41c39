import math
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p1flow.errors import InvalidArgument, OutOfDomain, UnknownRegion
from p1flow.mesh import gen_pipe, gen_rect, read_msh2
from p1flow.post import (ForceCoefficients, LineSample, ReferenceTable,
                         cavity_rms, div_norm, drag_lift, evaluate_points,
                         ghia_compare, l2_error, load_reference,
                         parse_reference, pressure_energy, sample_line,
                         load_dfg, oscillation, write_vtk)
from p1flow.weakform import FieldState, MaterialParams


def nodal_state(mesh, p, v):
    """State from callables of the node coordinates."""
    x = mesh.nodes
    vals = np.column_stack([p(x), v(x)])
    return FieldState(vals.ravel())


@pytest.fixture(scope="module")
def cylinder():
    path = resources.files("p1flow") / "data" / "meshes" / "cylinder2d.msh"
    with resources.as_file(path) as p:
        return read_msh2(p)


def test_l2_of_own_interpolant():
    mesh = gen_rect(5, 4)
    f = lambda x: np.stack([x[..., 0] * 2 - 1, 3 * x[..., 1]], axis=-1)
    state = nodal_state(mesh, lambda x: np.zeros(len(x)), f)
    assert l2_error(state, f, mesh) <= 1e-12


def test_l2_constant():
    mesh = gen_rect(3, 3)
    zero = FieldState(np.zeros(mesh.n_nodes * 3))
    assert l2_error(zero, lambda x: np.ones(x.shape[:-1]), mesh,
                    which="p") == pytest.approx(1.0, rel=1e-14)


def test_l2_interpolation_rate():
    f = lambda x: x[..., 0] ** 2 + x[..., 0] * x[..., 1]
    errs = []
    for n in (4, 8, 16, 32):
        mesh = gen_rect(n, n)
        state = nodal_state(mesh, f, lambda x: np.zeros((len(x), 2)))
        errs.append(l2_error(state, f, mesh, which="p"))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    np.testing.assert_allclose(ratios, 4.0, rtol=0.05)


def test_l2_mean_free():
    mesh = gen_rect(4, 4)
    zero = FieldState(np.zeros(mesh.n_nodes * 3))
    assert l2_error(zero, lambda x: np.full(x.shape[:-1], 7.0), mesh,
                    which="p", mean_free=True) < 1e-12


def test_div_norm_examples():
    mesh = gen_rect(4, 3, 2.0, 1.5)
    rot = nodal_state(mesh, lambda x: np.zeros(len(x)),
                      lambda x: np.column_stack([-x[:, 1], x[:, 0]]))
    assert div_norm(rot, mesh) < 1e-13
    src = nodal_state(mesh, lambda x: np.zeros(len(x)), lambda x: x.copy())
    assert div_norm(src, mesh) ** 2 == pytest.approx(4 * 3.0, rel=1e-12)


def test_div_norm_3d():
    mesh = gen_pipe(2, 4, 1.0, 1.0)
    src = FieldState(np.column_stack([np.zeros(mesh.n_nodes),
                                      mesh.nodes]).ravel())
    vol = mesh.volumes.sum()
    assert div_norm(src, mesh) ** 2 == pytest.approx(9 * vol, rel=1e-12)


def test_pressure_energy():
    mesh = gen_rect(4, 4, 2.0, 1.0)
    st_ = nodal_state(mesh, lambda x: 3 * x[:, 0] - x[:, 1],
                      lambda x: np.zeros((len(x), 2)))
    assert pressure_energy(st_, mesh) == pytest.approx(10 * 2.0, rel=1e-12)


def test_drag_zero_state(cylinder):
    params = MaterialParams(1.0, 1e-3, 0.01)
    st_ = nodal_state(cylinder, lambda x: np.full(len(x), 4.0),
                      lambda x: np.zeros((len(x), 2)))
    f = drag_lift(st_, cylinder, params, "obstacle", 1.0, 0.1)
    assert abs(f.c_D) < 1e-10 and abs(f.c_L) < 1e-10


def _obstacle_edges(mesh):
    tid = mesh.tag_id("obstacle")
    edges = mesh.facets[mesh.facet_tags == tid]
    a, b = mesh.nodes[edges[:, 0]], mesh.nodes[edges[:, 1]]
    t = b - a
    n = np.column_stack([t[:, 1], -t[:, 0]])  # length-scaled normal
    mid = 0.5 * (a + b)
    inward = np.einsum("ij,ij->i", n, [0.2, 0.2] - mid) > 0
    n[~inward] *= -1  # fluid outward normal points into the body
    return mid, n


def test_drag_pressure_gradient(cylinder):
    params = MaterialParams(1.0, 1e-3, 0.01)
    mesh = cylinder
    st_ = nodal_state(mesh, lambda x: -x[:, 0],
                      lambda x: np.zeros((len(x), 2)))
    f = drag_lift(st_, mesh, params, "obstacle", 1.0, 0.1)
    mid, n = _obstacle_edges(mesh)
    # pressure force on the body, exact for linear p on straight edges
    fx = np.sum(-mid[:, 0] * n[:, 0])
    # indicator layer term: int grad p . w = -int w_x
    ind = np.zeros(mesh.n_nodes)
    ind[mesh.tag_nodes("obstacle")] = 1.0
    layer = -np.sum(mesh.volumes * ind[mesh.cells].mean(axis=1))
    expected = 2.0 / 0.1 * (fx - layer)
    assert f.c_D == pytest.approx(expected, rel=1e-10)
    # the polygon force is close to the disk area
    assert fx == pytest.approx(math.pi * 0.05 ** 2, rel=2e-3)
    assert abs(f.c_L) < 1e-3 * abs(f.c_D)


@settings(max_examples=10, deadline=None)
@given(c=st.floats(-100, 100))
def test_drag_pressure_shift(cylinder, c):
    params = MaterialParams(1.0, 1e-3, 0.01)
    rng = np.random.default_rng(4)
    vals = rng.standard_normal((cylinder.n_nodes, 3))
    a = drag_lift(FieldState(vals.ravel()), cylinder, params, 4, 1.0, 0.1)
    vals[:, 0] += c
    b = drag_lift(FieldState(vals.ravel()), cylinder, params, 4, 1.0, 0.1)
    assert abs(a.c_D - b.c_D) <= 1e-10 * max(1.0, abs(c))
    assert abs(a.c_L - b.c_L) <= 1e-10 * max(1.0, abs(c))


def test_drag_unknown_region():
    mesh = gen_rect(2, 2)
    with pytest.raises(UnknownRegion):
        drag_lift(FieldState(np.zeros(27)), mesh, MaterialParams(1, 1),
                  "obstacle", 1.0, 1.0)


def test_force_coefficients_finite():
    with pytest.raises(ArithmeticError):
        ForceCoefficients(float("nan"), 0.0)


def test_sample_linear_field():
    mesh = gen_rect(7, 5, 2.0, 1.0)
    f = lambda x: 0.5 + x[:, 0] - 2 * x[:, 1]
    st_ = nodal_state(mesh, f, lambda x: np.zeros((len(x), 2)))
    line = sample_line(st_, mesh, (0.1, 0.05), (1.9, 0.93), 37, field="p")
    np.testing.assert_allclose(line.values, f(line.points), atol=1e-13)


def test_sample_endpoints_on_boundary():
    mesh = gen_rect(4, 4)
    st_ = nodal_state(mesh, lambda x: np.zeros(len(x)),
                      lambda x: np.column_stack([x[:, 1] ** 2,
                                                 np.zeros(len(x))]))
    line = sample_line(st_, mesh, (0.5, 0.0), (0.5, 1.0), 9, field="vx")
    assert line.values[0] == 0.0 and line.values[-1] == pytest.approx(1.0)


def test_sample_outside():
    mesh = gen_rect(2, 2)
    with pytest.raises(OutOfDomain):
        evaluate_points(FieldState(np.zeros(27)), mesh, [[1.5, 0.5]])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_sample_superposition(seed, a, b):
    mesh = gen_rect(5, 5)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, mesh.n_nodes * 3))
    args = (mesh, (0.0, 0.3), (1.0, 0.8), 11)
    sx = sample_line(FieldState(x), *args).values
    sy = sample_line(FieldState(y), *args).values
    sz = sample_line(FieldState(a * x + b * y), *args).values
    np.testing.assert_allclose(sz, a * sx + b * sy, atol=1e-10)


def test_sample_3d_axis():
    mesh = gen_pipe(4, 4, 2.0, 1.0)
    f = lambda x: 1 - 4 * (x[:, 0] ** 2 + x[:, 1] ** 2)
    st_ = FieldState(np.column_stack([np.zeros(mesh.n_nodes),
                                      np.zeros((mesh.n_nodes, 2)),
                                      f(mesh.nodes)]).ravel())
    line = sample_line(st_, mesh, (0, 0, 0), (0, 0, 2.0), 5, field="vz")
    np.testing.assert_allclose(line.values, 1.0, atol=1e-12)


def test_reference_tables():
    u100 = load_reference(100, "u")
    assert u100.re == 100 and u100.quantity == "u"
    assert len(u100.coords) == 17
    assert "Ghia" in u100.provenance
    # spot values from the published table
    lookup = dict(zip(u100.coords.round(4), u100.values))
    assert lookup[0.9766] == 0.84123
    assert lookup[0.5] == -0.20581
    v400 = load_reference(400, "v")
    assert dict(zip(v400.coords.round(4), v400.values))[0.2344] == 0.30174
    for re in (100, 400, 1000):
        for q in "uv":
            t = load_reference(re, q)
            assert t.coords[0] == 0 and t.coords[-1] == 1
    with pytest.raises(InvalidArgument):
        load_reference(5000, "u")


def test_parse_reference_rejects():
    with pytest.raises(InvalidArgument):
        parse_reference("# re: 100\n0 1\n")
    with pytest.raises(InvalidArgument):
        parse_reference("# re: 100\n# quantity: u\n0.5 1\n0.2 1\n")
    with pytest.raises(InvalidArgument):
        parse_reference("# re: 100\n# quantity: u\n0.5 1 2\n")


def test_ghia_compare_examples():
    table = load_reference(100, "u")
    assert ghia_compare(table.values.copy(), table) == 0.0
    assert ghia_compare(table.values + 0.01, table) == pytest.approx(0.01)
    with pytest.raises(InvalidArgument):
        ghia_compare(np.zeros(3), table)
    sample = LineSample(np.zeros((17, 2)), table.coords, table.values - 0.02)
    assert ghia_compare(sample, table) == pytest.approx(0.02)


def test_cavity_rms_of_rest_state():
    # every sample is zero, so the deviations are the table values
    mesh = gen_rect(8, 8)
    rest = FieldState(np.zeros(mesh.n_nodes * 3))
    ru, rv, rall = cavity_rms(rest, mesh, 100)
    tu, tv = load_reference(100, "u"), load_reference(100, "v")
    assert ru == pytest.approx(np.sqrt(np.mean(tu.values ** 2)), rel=1e-12)
    assert rv == pytest.approx(np.sqrt(np.mean(tv.values ** 2)), rel=1e-12)
    both = np.concatenate([tu.values, tv.values])
    assert rall == pytest.approx(np.sqrt(np.mean(both ** 2)), rel=1e-12)


def test_write_vtk(tmp_path):
    mesh = gen_rect(1, 1, 2.0, 1.0)
    st_ = nodal_state(mesh, lambda x: x[:, 0],
                      lambda x: np.column_stack([x[:, 1], -x[:, 0]]))
    path = write_vtk(st_, mesh, tmp_path / "out" / "a.vtk")
    text = path.read_text().splitlines()
    assert text[0] == "# vtk DataFile Version 3.0"
    assert "POINTS 4 double" in text and "CELLS 2 8" in text
    k = text.index("POINTS 4 double")
    pts = np.array([[float(v) for v in line.split()] for line in text[k + 1:k + 5]])
    np.testing.assert_array_equal(pts[:, :2], mesh.nodes)
    assert np.all(pts[:, 2] == 0)
    assert "CELL_TYPES 2" in text
    assert text[text.index("CELL_TYPES 2") + 1] == "5"
    assert "SCALARS pressure double 1" in text
    assert "VECTORS velocity double" in text


def test_write_vtk_tets(tmp_path):
    mesh = gen_pipe(1, 2, 1.0, 1.0)
    path = write_vtk(FieldState(np.zeros(mesh.n_nodes * 4)), mesh,
                     tmp_path / "p.vtk")
    text = path.read_text()
    assert f"CELLS {mesh.n_cells} {mesh.n_cells * 5}" in text
    assert "\n10\n" in text


def test_load_dfg():
    d2 = load_dfg("dfg2d2")
    assert set(d2) == {"c_D_max", "c_L_max", "strouhal"}
    for lo, hi, ref in load_dfg("dfg2d3").values():
        assert lo <= ref <= hi
    with pytest.raises(InvalidArgument):
        load_dfg("dfg9")


def test_oscillation_sine():
    t = np.linspace(0, 10, 4001)
    osc = oscillation(t, 0.3 + 2.0 * np.sin(2 * np.pi * t / 0.8), t_start=1.0)
    np.testing.assert_allclose(osc.periods, 0.8, rtol=1e-4)
    np.testing.assert_allclose(osc.amplitudes, 2.0, rtol=1e-3)
    assert osc.mean == pytest.approx(0.3, abs=0.05)


def test_oscillation_flat():
    t = np.linspace(0, 1, 50)
    assert len(oscillation(t, np.ones_like(t)).periods) == 0
    with pytest.raises(InvalidArgument):
        oscillation(t, t[:-1])
