"""Lid-driven cavity at Re 100 against the Ghia centreline tables."""
import os

from p1flow.cli import run_case
from p1flow.config import bundled_case, load_case
from p1flow.post import cavity_rms, pressure_energy

# %% 64x64 mesh, lid ramped over the first 4 time units, then held
case = load_case(bundled_case("cavity2d"))
out = os.path.join("out", "cavity2d")
summary = run_case(case, out)
state = summary["_state"]

# %% centreline deviation from the tables and the pressure gradient energy
mesh = summary["_probes"].mesh
print("rms (u, v, pooled):", cavity_rms(state, mesh, 100))
print("div_norm:", summary["div_norm"])
print("sum V |grad p|^2:", pressure_energy(state, mesh))
print("VTK written to", os.path.join(out, "vtk"))
