"""Shared fixtures: the default morphology and its reference hover orbit.

The orbit search costs about a minute, so the found orbit is cached through
pytest's config cache and revalidated by replaying one period before reuse;
any change to the dynamics or integrator invalidates it automatically.
"""
import numpy as np
import pytest

from flaplearn.dynamics import Morphology
from flaplearn.expert import (ReferenceOrbit, find_periodic_orbit,
                              weighted_error)
from flaplearn.integrate import simulate

_ORBIT_KEY = "flaplearn/default-orbit"


def _replay_defect(orb: ReferenceOrbit, morph: Morphology) -> float:
    traj = simulate(orb.initial, 1, None, morph, orb.params_R,
                    steps_per_period=orb.steps_per_period,
                    save_every=orb.steps_per_period)
    _, n = weighted_error(traj.final_state(), 0.0, orb)
    return n


@pytest.fixture(scope="session")
def morph() -> Morphology:
    return Morphology()


@pytest.fixture(scope="session")
def orbit(morph, request) -> ReferenceOrbit:
    cached = request.config.cache.get(_ORBIT_KEY, None)
    if cached is not None:
        try:
            orb = ReferenceOrbit.from_json(cached)
            if (orb.morph_hash == morph.content_hash()
                    and _replay_defect(orb, morph) <= 1e-9):
                return orb
        except (KeyError, ValueError):
            pass
    orb = find_periodic_orbit(morph)
    request.config.cache.set(_ORBIT_KEY, orb.to_json())
    return orb
