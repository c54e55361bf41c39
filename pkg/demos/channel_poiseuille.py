"""Plane Poiseuille flow of water between plates, three mesh levels."""
from p1flow.cli import convergence_study
from p1flow.config import bundled_case, load_case

# %% the bundled case is in g-mm-s units with a pressure drop along x
case = load_case(bundled_case("channel2d"))
print(case.material)

# %% halve h twice; L2 velocity error should fall by about 4 per level
rep = convergence_study(case, 3)
for row in rep["rows"]:
    print(f"h={row['param']:.4f}  dofs={row['dofs']:6d}  "
          f"L2={row['l2_error']:.3e}  centreline={row['centerline_error']:.2e}")
print("ratios", [round(r, 2) for r in rep["ratios"]])
