"""Training-set construction: sampled initial errors, expert labels, zero pairs.

Samples are drawn per 3-block (position, attitude, velocity, body rate) from
uniform balls with per-block scales chosen so each block contributes a
comparable share of the weighted norm, then rescaled onto the unit weighted
ball when needed. Expert labeling is embarrassingly parallel; every sample
index owns a fixed RNG substream, so the result is identical for any worker
count.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Morphology
from .expert import (
    DEFAULT_W_X,
    CostWeights,
    MPCOptions,
    ReferenceOrbit,
    StateError,
    mpc_solve_info,
    perturb_state,
    weighted_error,
)
from .integrate import simulate
from .wingkin import DELTA_MAX, U_LAYOUT_VERSION, ControlSchedule

__all__ = [
    "DEFAULT_BLOCK_SCALES", "Dataset", "StateError", "perturb_state",
    "sample_initial_error", "generate_dataset", "save_dataset",
    "load_dataset", "make_expert", "make_simulator", "closed_loop_errors",
]

logger = logging.getLogger(__name__)

# Per-block ball radii. Under the default state weights the four blocks then
# contribute weighted radii (0.4, 0.6, 0.6, 0.4): comparable physical levels.
DEFAULT_BLOCK_SCALES = (0.04, 0.30, 0.30, 2.0)

PROVENANCE_KINDS = ("sampled", "zero", "dagger", "dart")


def sample_initial_error(rng: np.random.Generator,
                         scales=DEFAULT_BLOCK_SCALES) -> StateError:
    """One error in the weighted unit ball, radius-stratified.

    Per-3-block uniform ball draws (scaled by each block's physical range,
    rescaled onto the weighted unit ball when the combined norm exceeds one)
    fix the direction; a final uniform scalar spreads the weighted radius
    over [0, 1]. Without that last factor nearly every draw lands close to
    the shell and the near-orbit regime is never observed, which is exactly
    where a cloned policy must get its feedback right.
    """
    scales = np.asarray(scales, dtype=float).reshape(4)
    vec = np.empty(12)
    for i in range(4):
        d = rng.standard_normal(3)
        nd = np.linalg.norm(d)
        d = d / nd if nd > 0 else np.array([1.0, 0.0, 0.0])
        r = rng.random() ** (1.0 / 3.0)
        vec[3 * i:3 * i + 3] = scales[i] * r * d
    wn = float(np.linalg.norm(DEFAULT_W_X * vec))
    if wn > 1.0:
        vec /= wn
    return StateError(vec * rng.random())


@dataclass
class Dataset:
    """Paired error inputs X (12xN) and knot-vector labels Y (60xN)."""

    X: np.ndarray
    Y: np.ndarray
    provenance: list[str]
    seed: int
    n_zero: int = 0
    J_opt: np.ndarray | None = None
    J_zero: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != 12:
            raise ValueError("X must be 12xN")
        if self.Y.ndim != 2 or self.Y.shape[0] != 60:
            raise ValueError("Y must be 60xN")
        if self.X.shape[1] != self.Y.shape[1]:
            raise ValueError("X and Y column counts differ")
        if len(self.provenance) != self.X.shape[1]:
            raise ValueError("provenance length mismatch")
        bad = set(self.provenance) - set(PROVENANCE_KINDS)
        if bad:
            raise ValueError(f"unknown provenance kinds {sorted(bad)}")
        for k, kind in enumerate(self.provenance):
            if kind == "zero" and (np.any(self.X[:, k] != 0.0)
                                   or np.any(self.Y[:, k] != 0.0)):
                raise ValueError("zero-pair columns must be exactly zero")
        if self.J_opt is None:
            self.J_opt = np.zeros(self.X.shape[1])
        if self.J_zero is None:
            self.J_zero = np.zeros(self.X.shape[1])
        self.J_opt = np.asarray(self.J_opt, dtype=float).reshape(self.n)
        self.J_zero = np.asarray(self.J_zero, dtype=float).reshape(self.n)

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def append(self, X_new: np.ndarray, Y_new: np.ndarray,
               kind: str) -> "Dataset":
        X_new = np.asarray(X_new, dtype=float).reshape(12, -1)
        Y_new = np.asarray(Y_new, dtype=float).reshape(60, -1)
        m = X_new.shape[1]
        return Dataset(
            np.concatenate([self.X, X_new], axis=1),
            np.concatenate([self.Y, Y_new], axis=1),
            self.provenance + [kind] * m,
            self.seed,
            self.n_zero,
            np.concatenate([self.J_opt, np.zeros(m)]),
            np.concatenate([self.J_zero, np.zeros(m)]),
        )


def save_dataset(ds: Dataset, path: str, orbit_hash: str = "") -> None:
    header = json.dumps({
        "kind": "dataset", "n": ds.n, "n_zero": ds.n_zero, "seed": ds.seed,
        "orbit_hash": orbit_hash, "u_layout": U_LAYOUT_VERSION,
    }, sort_keys=True)
    np.savez(path, X=ds.X, Y=ds.Y, J_opt=ds.J_opt, J_zero=ds.J_zero,
             provenance=np.array(ds.provenance, dtype="U8"),
             header=np.array(header))


def load_dataset(path: str) -> tuple[Dataset, dict]:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("kind") != "dataset":
            raise ValueError("not a dataset file")
        if header.get("u_layout") != U_LAYOUT_VERSION:
            raise ValueError(
                f"dataset uses control layout {header.get('u_layout')!r}, "
                f"this build expects {U_LAYOUT_VERSION!r}")
        ds = Dataset(z["X"], z["Y"], [str(s) for s in z["provenance"]],
                     int(header["seed"]), int(header["n_zero"]),
                     z["J_opt"], z["J_zero"])
    return ds, header


# module-level worker state so ProcessPoolExecutor children build the
# expert sensitivity cache once instead of once per task
_WORKER_CTX: dict = {}


def _worker_init(orbit_json: str, opts: MPCOptions, morph: Morphology,
                 scales: tuple) -> None:
    _WORKER_CTX["orbit"] = ReferenceOrbit.from_json(orbit_json)
    _WORKER_CTX["opts"] = opts
    _WORKER_CTX["morph"] = morph
    _WORKER_CTX["scales"] = scales


def _label_one(args) -> tuple[int, np.ndarray, np.ndarray, float, float, str]:
    k, child_seq = args
    rng = np.random.default_rng(child_seq)
    e = sample_initial_error(rng, _WORKER_CTX["scales"])
    try:
        res = mpc_solve_info(e, _WORKER_CTX["orbit"],
                             opts=_WORKER_CTX["opts"],
                             morph=_WORKER_CTX["morph"])
    except RuntimeError as exc:  # solver failure; config errors propagate
        return k, e.vec, np.zeros(60), np.nan, np.nan, str(exc)
    return k, e.vec, res.u, res.J_opt, res.J_zero, ""


def generate_dataset(n_samples: int, n_zero: int, orbit: ReferenceOrbit,
                     opts: MPCOptions | None = None, seed: int = 0, *,
                     morph: Morphology | None = None,
                     scales=DEFAULT_BLOCK_SCALES,
                     n_jobs: int = 1) -> Dataset:
    """Expert-labeled pairs plus exact zero pairs, bit-identical per seed.

    Individual expert failures are logged and the column is dropped; zero
    pairs are appended after the sampled block.
    """
    if n_samples < 0 or n_zero < 0:
        raise ValueError("sample counts must be nonnegative")
    opts = MPCOptions() if opts is None else opts
    morph = Morphology() if morph is None else morph
    scales = tuple(float(s) for s in np.asarray(scales).reshape(4))

    # one child substream per sample index: worker split cannot reorder draws
    children = np.random.SeedSequence(seed).spawn(n_samples)
    tasks = list(enumerate(children))

    if n_samples == 0:
        results = []
    elif n_jobs > 1:
        _worker_init(orbit.to_json(), opts, morph, scales)
        with ProcessPoolExecutor(
                max_workers=n_jobs, initializer=_worker_init,
                initargs=(orbit.to_json(), opts, morph, scales)) as pool:
            results = list(pool.map(_label_one, tasks, chunksize=4))
    else:
        _worker_init(orbit.to_json(), opts, morph, scales)
        # warm the sensitivity cache once before the serial sweep
        mpc_solve_info(StateError.zero(), orbit, opts=opts, morph=morph)
        results = []
        for t in tasks:
            results.append(_label_one(t))
            if len(results) % 25 == 0:
                logger.info("labeled %d/%d samples", len(results), n_samples)
    results.sort(key=lambda r: r[0])

    cols_x, cols_y, j_opt, j_zero = [], [], [], []
    n_failed = 0
    for k, x, y, jo, jz, err in results:
        if err:
            n_failed += 1
            logger.warning("expert failed on sample %d: %s", k, err)
            continue
        cols_x.append(x)
        cols_y.append(y)
        j_opt.append(jo)
        j_zero.append(jz)
    n_ok = len(cols_x)
    if n_failed:
        logger.warning("dataset: %d of %d expert solves failed",
                       n_failed, n_samples)
    X = np.zeros((12, n_ok + n_zero))
    Y = np.zeros((60, n_ok + n_zero))
    if n_ok:
        X[:, :n_ok] = np.array(cols_x).T
        Y[:, :n_ok] = np.array(cols_y).T
    prov = ["sampled"] * n_ok + ["zero"] * n_zero
    return Dataset(X, Y, prov, seed, n_zero,
                   np.concatenate([j_opt, np.zeros(n_zero)]),
                   np.concatenate([j_zero, np.zeros(n_zero)]))


def make_expert(orbit: ReferenceOrbit, W: CostWeights | None = None,
                opts: MPCOptions | None = None,
                morph: Morphology | None = None):
    """Labeling callable: 12-dim error -> optimized 60-dim knot vector."""
    opts = MPCOptions() if opts is None else opts

    def expert(e) -> np.ndarray:
        vec = e.vec if isinstance(e, StateError) else np.asarray(e, float)
        return mpc_solve_info(StateError(vec), orbit, W=W, opts=opts,
                              morph=morph).u

    return expert


def closed_loop_errors(control_fn, orbit: ReferenceOrbit, e0,
                       n_periods: int, *,
                       morph: Morphology | None = None,
                       W: CostWeights | None = None,
                       steps_per_period: int | None = None) -> np.ndarray:
    """Period-boundary error vectors under per-period feedback.

    control_fn maps the 12-dim boundary error to a 60-dim knot vector; the
    returned array has one row per completed period (1..n_periods). Rows
    after a truncated (non-finite) simulation are filled with +inf so callers
    see an unbounded excursion rather than a silent crop.
    """
    morph = Morphology() if morph is None else morph
    W = CostWeights() if W is None else W
    spp = orbit.steps_per_period if steps_per_period is None else steps_per_period
    e0_vec = e0.vec if isinstance(e0, StateError) else np.asarray(e0, float)
    start = perturb_state(orbit, StateError(e0_vec.reshape(12)))

    def controller(period_idx: int, boundary_time: float, state):
        e, _ = weighted_error(state, boundary_time, orbit, None)
        u = np.asarray(control_fn(e), dtype=float).reshape(60)
        return ControlSchedule.from_u(u, orbit.period)

    traj = simulate(start, n_periods, controller, morph,
                    orbit.params_R, steps_per_period=spp,
                    save_every=spp)
    out = np.full((n_periods, 12), np.inf)
    n_rows = traj.xs.shape[0] - 1
    for k in range(min(n_periods, n_rows)):
        state = traj.state(k + 1)
        e, _ = weighted_error(state, traj.times[k + 1], orbit, None)
        if np.all(np.isfinite(e)):
            out[k] = e
    return out


def make_simulator(orbit: ReferenceOrbit, *,
                   morph: Morphology | None = None,
                   W: CostWeights | None = None,
                   steps_per_period: int | None = None):
    """Rollout callable (control_fn, e0, n_periods) -> boundary errors."""

    def simulator(control_fn, e0, n_periods: int) -> np.ndarray:
        return closed_loop_errors(control_fn, orbit, e0, n_periods,
                                  morph=morph, W=W,
                                  steps_per_period=steps_per_period)

    return simulator
