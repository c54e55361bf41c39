"""Vortex shedding behind a cylinder at Re 100."""
import numpy as np

from p1flow.cli import run_case
from p1flow.config import bundled_case, load_case
from p1flow.post import load_dfg, oscillation

# %% parabolic inflow with mean speed 1, ramped over 1 s and then held;
# about half an hour on one core
case = load_case(bundled_case("cylinder2d_steady"))
summary = run_case(case, "out/cylinder2d_steady")
rec = summary["_probes"]
rows = np.array(rec.rows)
col = {k: i for i, k in enumerate(rec.columns)}
t, cd, cl = rows[:, 0], rows[:, col["c_D"]], rows[:, col["c_L"]]

# %% period and amplitude of the lift once shedding is established
osc = oscillation(t, cl, t_start=t[-1] / 2)
print("periods", np.round(osc.periods, 4))
print("c_L amplitudes", np.round(osc.amplitudes, 3))
print("c_D range", cd[t > t[-1] / 2].min(), cd[t > t[-1] / 2].max())
print("Strouhal", 0.1 / osc.periods.mean())
for key, (lo, hi, ref) in load_dfg("dfg2d2").items():
    print(f"DFG {key}: {lo} .. {hi}")
