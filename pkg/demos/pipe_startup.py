"""Start-up of flow in a 1/4 inch tube against the Bessel series."""
from dataclasses import replace

import numpy as np

from p1flow.config import build_mesh, bundled_case, load_case
from p1flow.oracles import PipeSpec, pipe_steady, pipe_transient
from p1flow.post import evaluate_points
from p1flow.solver import time_march

# %% coarse mesh keeps this to a few minutes; the bundled case uses twice
# the resolution
case = load_case(bundled_case("pipe3d_startup")).with_mesh(n_axial=42,
                                                           n_radial=10)
mesh = build_mesh(case.mesh)
spec = PipeSpec(case.oracle["diameter"] / 2, case.oracle["length"],
                case.oracle["dpdz"], case.material)
print(mesh, "steady centreline", spec.vmax)

# %% march to t = 6 s and compare the axis velocity at every step
axis = np.array([[0.0, 0.0, spec.L / 2]])


def show(step, state, report):
    w = float(evaluate_points(state, mesh, axis, "vz")[0])
    ref = float(pipe_transient(0.0, state.time, spec))
    print(f"t={state.time:5.2f}  w={w:8.4f}  series={ref:8.4f}  "
          f"newton={report.iterations}")


time_march(mesh, case.material, case.bcs,
           replace(case.solver, dt=0.5, t_end=6.0), callback=show,
           snapshot_every=0)
print("steady profile at r = a/2:", float(pipe_steady(spec.a / 2, spec)))
