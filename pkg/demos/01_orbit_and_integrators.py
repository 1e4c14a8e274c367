"""Find the hovering limit cycle, then compare integrators on it.

Searches for the periodic orbit of the default morphology (a few minutes,
cached in demos/out/orbit.json afterwards), then measures two things on a
10-period replay: how well each method preserves rotation-matrix
orthogonality, and the empirical convergence order of the Crouch-Grossman
scheme.
"""
import pathlib
import time

import numpy as np

from flaplearn.dynamics import Morphology
from flaplearn.expert import ReferenceOrbit, find_periodic_orbit
from flaplearn.integrate import (CG3_TABLEAU, CG4_TABLEAU, LIE_EULER_TABLEAU,
                                 order_test, simulate)

OUT = pathlib.Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)
ORBIT_PATH = OUT / "orbit.json"

morph = Morphology()

if ORBIT_PATH.exists():
    orbit = ReferenceOrbit.load(str(ORBIT_PATH))
    print(f"loaded cached orbit from {ORBIT_PATH}")
else:
    print("searching for the periodic orbit (roughly a minute)...")
    t0 = time.time()
    orbit = find_periodic_orbit(morph)
    orbit.save(str(ORBIT_PATH))
    print(f"found in {time.time() - t0:.0f}s, cached at {ORBIT_PATH}")

print(f"wingbeat frequency   {orbit.f:.4f} Hz")
print(f"period-map defect    {orbit.defect:.3e}")
print(f"mean aero power      {orbit.mean_aero_power:.4e} W")

# 10 periods at 500 steps/period; orthogonality drift max ||R^T R - I||_F
print("\northogonality drift over 10 periods (500 steps/period):")
for method in (CG4_TABLEAU, CG3_TABLEAU, LIE_EULER_TABLEAU, "rk4"):
    traj = simulate(orbit.initial, 10, None, morph, orbit.params_R,
                    method=method, save_every=50)
    drift = float(traj.orthogonality_drift().max())
    label = method if isinstance(method, str) else method.name
    print(f"  {label:<10s} {drift:.3e}")

# empirical order: error vs step count against a fine reference solution
t0 = time.time()
p = order_test(CG4_TABLEAU, morph=morph, p_ref=orbit.params_R)
print(f"\nmeasured convergence order of cg4: {p:.2f} "
      f"({time.time() - t0:.0f}s)")
