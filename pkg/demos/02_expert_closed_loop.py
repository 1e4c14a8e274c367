"""Push the vehicle off its orbit and let the receding-horizon expert recover.

Starts from a weighted error of 0.5 (half the sampling ball) and runs the
expert in closed loop for ten periods, printing the weighted error at every
period boundary. Each period costs one trajectory-optimization solve, so
expect a few minutes of runtime.
"""
import pathlib
import time

import numpy as np

from flaplearn.datagen import (closed_loop_errors, make_expert,
                               sample_initial_error)
from flaplearn.dynamics import Morphology
from flaplearn.expert import DEFAULT_W_X, ReferenceOrbit, find_periodic_orbit

OUT = pathlib.Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)
ORBIT_PATH = OUT / "orbit.json"

morph = Morphology()
if ORBIT_PATH.exists():
    orbit = ReferenceOrbit.load(str(ORBIT_PATH))
else:
    orbit = find_periodic_orbit(morph)
    orbit.save(str(ORBIT_PATH))

rng = np.random.default_rng(9)
e0 = sample_initial_error(rng).vec
e0 *= 0.5 / np.linalg.norm(DEFAULT_W_X * e0)

expert = make_expert(orbit, morph=morph)
print("running the expert closed loop for 10 periods...")
t0 = time.time()
errs = closed_loop_errors(expert, orbit, e0, 10, morph=morph)
for k, e in enumerate(errs, start=1):
    n = float(np.linalg.norm(DEFAULT_W_X * e))
    print(f"  period {k:2d}: weighted error {n:.4f}")
print(f"done in {time.time() - t0:.0f}s "
      f"(started at 0.5, recovery threshold 0.05)")
