import json

import numpy as np
import pytest

from p1flow.cli import (EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, convergence_study,
                        main, run_case, validate_case)
from p1flow.config import (Expression, build_mesh, bundled_case, bundled_cases,
                           load_case, parse_case)
from p1flow.errors import ConfigError, InvalidArgument


def small_channel(**over):
    case = {
        "name": "tiny_channel",
        "kind": "channel2d",
        "mesh": {"generator": "rect", "nx": 8, "ny": 4, "lx": 2.0, "ly": 1.0},
        "material": {"rho": 1.0, "mu": 0.1, "lam": 0.1},
        "bcs": [
            {"tag": "bottom", "kind": "no_slip", "priority": 1},
            {"tag": "top", "kind": "no_slip", "priority": 1},
            {"tag": "left", "kind": "pressure", "value": 0.8},
            {"tag": "right", "kind": "pressure", "value": 0.0},
            {"tag": "left", "kind": "velocity", "component": "y", "value": 0},
            {"tag": "right", "kind": "velocity", "component": "y", "value": 0},
        ],
        "solver": {"dt": 100.0, "t_end": 200.0},
        "outputs": {"probes": [{"name": "uc", "point": [1.0, 0.5]}],
                    "vtk_every": 1},
        "oracle": {"type": "plane_poiseuille", "H": 1.0, "dpdx": -0.4},
    }
    case.update(over)
    return case


def write_case(tmp_path, data, name="case.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def test_expression():
    e = Expression("4*1.5*y*(0.41-y)/0.41**2*sin(pi*t/8)")
    x = np.array([[0.0, 0.205], [0.0, 0.0]])
    np.testing.assert_allclose(e(x, 4.0), [1.5, 0.0], atol=1e-14)
    assert Expression("2")(np.zeros((3, 2)), 0.0).shape == (3,)


@pytest.mark.parametrize("text", ["__import__('os')", "x.real", "lambda: 1",
                                  "foo(x)", "q + 1", "'a'", "x if y else t"])
def test_expression_rejects(text):
    with pytest.raises(InvalidArgument):
        Expression(text)


def test_all_bundled_cases_validate():
    names = bundled_cases()
    for required in ("channel2d", "pipe3d_re313", "cavity2d", "cylinder2d",
                     "mms"):
        assert required in names
    for name in names:
        ok, diags = validate_case(bundled_case(name))
        assert ok and diags[0] == "OK", (name, diags)


def test_bundled_parameters():
    cyl = load_case(bundled_case("cylinder2d"))
    assert cyl.material.rho == 1.0 and cyl.material.mu == 1e-3
    assert cyl.material.lam == 0.01
    assert cyl.solver.dt == pytest.approx(1 / 1600)
    pipe = load_case(bundled_case("pipe3d_re313"))
    assert (pipe.material.rho, pipe.material.mu, pipe.material.lam) == \
        (998.2e-6, 1001.6e-6, 0.6)
    cav = load_case(bundled_case("cavity2d"))
    assert cav.material.lam == 100 * cav.material.mu


def test_config_errors_are_collected(tmp_path):
    bad = small_channel(kind="tube", solver={"dt": -1, "t_end": 1})
    bad["mesh"]["nx"] = 0
    bad["bcs"][0]["kind"] = "slip"
    with pytest.raises(ConfigError) as info:
        parse_case(bad)
    text = "\n".join(info.value.problems)
    for piece in ("case.kind", "mesh.nx", "solver.dt", "bcs[0].kind"):
        assert piece in text


def test_config_json_syntax_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"name": "x",\n  "kind": }')
    with pytest.raises(ConfigError) as info:
        load_case(str(path))
    assert ":2:" in info.value.problems[0]


def test_validate_singular_warning(tmp_path):
    data = json.loads(open(bundled_case("cavity2d")).read())
    data["solver"]["pressure_gauge"] = None
    ok, diags = validate_case(write_case(tmp_path, data))
    assert any("SingularSystem" in d for d in diags)


def test_validate_missing_mesh(tmp_path):
    data = json.loads(open(bundled_case("cylinder2d")).read())
    data["mesh"] = {"file": "nowhere/missing.msh"}
    ok, diags = validate_case(write_case(tmp_path, data))
    assert not ok and any("not found" in d for d in diags)


def test_validate_unknown_tag(tmp_path):
    data = small_channel()
    data["bcs"][0]["tag"] = "lid"
    ok, diags = validate_case(write_case(tmp_path, data))
    assert not ok and any("lid" in d for d in diags)


def test_unit_warning(tmp_path):
    data = small_channel(units="g-mm-s")
    ok, diags = validate_case(write_case(tmp_path, data))
    assert ok and any("SI" in d for d in diags)


def test_run_channel(tmp_path):
    case = load_case(write_case(tmp_path, small_channel()))
    out = tmp_path / "out"
    summary = run_case(case, str(out))
    assert summary["status"] == "completed"
    assert summary["errors"]["centerline_rel"] < 0.05
    saved = json.loads((out / "summary.json").read_text())
    assert saved["errors"]["centerline_rel"] == \
        summary["errors"]["centerline_rel"]
    probes = np.loadtxt(out / "probes.txt")
    assert probes.shape == (2, 4)
    assert (out / "vtk" / "tiny_channel_final.vtk").exists()
    assert (out / "vtk" / "tiny_channel_000002.vtk").exists()


def test_run_deterministic(tmp_path):
    path = write_case(tmp_path, small_channel())
    a = run_case(load_case(path))
    b = run_case(load_case(path))
    np.testing.assert_array_equal(a["_state"].values, b["_state"].values)
    assert a["errors"] == b["errors"]


def test_convergence_single_level():
    case = parse_case(small_channel())
    rep = convergence_study(case, 1)
    assert len(rep["rows"]) == 1 and rep["monotone"]


def test_convergence_needs_oracle():
    data = small_channel()
    del data["oracle"]
    with pytest.raises(InvalidArgument):
        convergence_study(parse_case(data), 2)


def test_main_exit_codes(tmp_path, capsys):
    good = write_case(tmp_path, small_channel())
    assert main(["validate", good]) == EXIT_OK
    assert capsys.readouterr().out.startswith("OK")
    bad = write_case(tmp_path, small_channel(kind="tube"), "bad.json")
    assert main(["validate", bad]) == EXIT_CONFIG
    assert main(["run", bad]) == EXIT_CONFIG
    capsys.readouterr()
    assert main(["run", good, "--out", str(tmp_path / "o")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["status"] == "completed"
    stubborn = small_channel(solver={"dt": 100.0, "t_end": 200.0,
                                     "newton_max_iter": 1,
                                     "newton_tol": 1e-30})
    path = write_case(tmp_path, stubborn, "stubborn.json")
    assert main(["run", path, "--out", str(tmp_path / "s")]) == EXIT_DIVERGED
    assert (tmp_path / "s" / "summary.json").exists()


def test_main_convergence(tmp_path, capsys):
    good = write_case(tmp_path, small_channel())
    assert main(["convergence", good, "--levels", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert '"monotone": true' in out


def test_build_mesh_refine():
    cfg = {"generator": "rect", "nx": 2, "ny": 3, "lx": 1.0, "ly": 1.0}
    assert build_mesh(cfg, refine=2).n_cells == 4 * build_mesh(cfg).n_cells
    with pytest.raises(InvalidArgument):
        build_mesh({"file": "meshes/cylinder2d.msh"}, refine=2)
