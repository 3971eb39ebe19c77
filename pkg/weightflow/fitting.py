"""Growth exponents of sampled trajectories in the iterated logarithm basis.

log h(t) is regressed on ``log t, log log t, ..., log^(depth) t, 1`` and,
optionally, ``1 / log t``.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.optimize

from .config import get_settings
from .errors import InputError, InsufficientRange
from .flow import Trajectory
from .staralg import GradedProjectors

logger = logging.getLogger(__name__)

MIN_T_MAX = 1e6
MIN_WINDOW_RATIO = 10.0


def track_branches(values: np.ndarray) -> np.ndarray:
    """Reorder eigenvalue columns so every column follows one continuous branch.

    Each sample is matched to the linear extrapolation of the previous two in
    log scale.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[1] < 2 or values.shape[0] < 2:
        return values.copy()
    logs = np.log(np.abs(values) + 1e-300)
    out = np.empty_like(values)
    out_logs = np.empty_like(logs)
    out[0], out_logs[0] = values[0], logs[0]
    for n in range(1, len(values)):
        guess = out_logs[n - 1] if n == 1 else 2 * out_logs[n - 1] - out_logs[n - 2]
        cost = np.abs(guess[:, None] - logs[n][None, :])
        rows, cols = scipy.optimize.linear_sum_assignment(cost)
        out[n, rows] = values[n, cols]
        out_logs[n, rows] = logs[n, cols]
    return out


def basis(times: np.ndarray, depth: int, inverse_log: bool = False) -> np.ndarray:
    columns = []
    current = np.asarray(times, dtype=float)
    for _ in range(depth):
        current = np.log(current)
        columns.append(current)
    columns.append(np.ones_like(current))
    if inverse_log:
        columns.append(1 / np.log(times))
    return np.column_stack(columns)


def _solve(design: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Least squares through QR with column pivoting."""
    Q, R, perm = scipy.linalg.qr(design, mode="economic", pivoting=True)
    coef = scipy.linalg.solve_triangular(R, Q.T @ targets)
    out = np.empty_like(coef)
    out[perm] = coef
    return out


@dataclass
class ExponentFit:
    columns: Tuple[str, ...]
    depth: int
    window: Tuple[float, float]
    inverse_log: bool
    coefficients: np.ndarray
    errors: Optional[np.ndarray]
    condition: float
    samples: int
    compressions: Optional[Dict[Tuple[Fraction, ...], np.ndarray]] = None

    @property
    def exponents(self) -> np.ndarray:
        """One row per eigenvalue branch: coefficients of log t, ..., log^(depth) t."""
        return self.coefficients[:, : self.depth]

    @property
    def intercepts(self) -> np.ndarray:
        return self.coefficients[:, self.depth]

    def block_exponents(self) -> Dict[str, np.ndarray]:
        out: Dict[str, List[np.ndarray]] = {}
        for name, row in zip(self.columns, self.exponents):
            out.setdefault(name.rsplit(":", 1)[0], []).append(row)
        return {k: np.array(v) for k, v in out.items()}


def _window(times: np.ndarray, depth: int, window: Optional[Tuple[float, float]]) -> Tuple[float, float]:
    t_max = float(times[-1])
    if t_max < MIN_T_MAX:
        raise InsufficientRange("fitting needs a trajectory reaching t >= {:g}, got {:g}".format(MIN_T_MAX, t_max))
    lo, hi = (t_max / 100, t_max) if window is None else (float(window[0]), float(window[1]))
    hi = min(hi, t_max)
    if lo <= 0 or hi / lo < MIN_WINDOW_RATIO:
        raise InsufficientRange("the fit window ({:g}, {:g}) spans less than a decade".format(lo, hi))
    lower = lo
    for _ in range(depth):
        if lower <= 1:
            raise InsufficientRange("log^({}) t is not positive at t = {:g}".format(depth, lo))
        lower = math.log(lower)
    return lo, hi


def fit_exponents(
    trajectory: Trajectory,
    depth: int,
    window: Optional[Tuple[float, float]] = None,
    inverse_log: bool = False,
    bootstrap: Optional[int] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    projectors: Optional[GradedProjectors] = None,
) -> ExponentFit:
    """Regress log of every tracked eigenvalue branch on the iterated log basis."""
    settings = get_settings()
    bootstrap = settings.bootstrap if bootstrap is None else bootstrap
    seed = settings.seed if seed is None else seed
    threads = settings.threads if threads is None else threads
    if depth < 1:
        raise InputError("the fit depth must be at least 1")
    times = np.asarray(trajectory.times, dtype=float)
    if not len(times):
        raise InsufficientRange("the trajectory is empty")
    lo, hi = _window(times, depth, window)
    rows = (times >= lo * (1 - 1e-12)) & (times <= hi * (1 + 1e-12))
    design = basis(times[rows], depth, inverse_log)
    if rows.sum() < design.shape[1] + 2:
        raise InsufficientRange("only {} samples in the fit window".format(int(rows.sum())))

    values = np.empty_like(trajectory.eigenvalues)
    for idx in trajectory.blocks.values():
        values[:, idx] = track_branches(trajectory.eigenvalues[:, idx])
    if np.any(values[rows] <= 0):
        raise InputError("eigenvalues must stay positive in the fit window")
    targets = np.log(values[rows])
    coefficients = _solve(design, targets).T
    condition = float(np.linalg.cond(design))
    logger.debug("fit of depth %d on (%.3g, %.3g), condition number %.3g", depth, lo, hi, condition)

    errors = None
    if bootstrap:
        n = len(targets)

        def resample(b: int) -> np.ndarray:
            rng = np.random.default_rng([seed, b])
            pick = rng.integers(0, n, n)
            return _solve(design[pick], targets[pick]).T

        with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="bootstrap") as pool:
            draws = list(pool.map(resample, range(bootstrap)))
        errors = np.std(np.array(draws), axis=0, ddof=1) if bootstrap > 1 else np.zeros_like(coefficients)

    compressions = None
    if projectors is not None:
        compressions = {}
        for lab, series in trajectory.compressions(projectors).items():
            compressions[lab] = _solve(design, np.log(series[rows]))[:depth]

    return ExponentFit(
        tuple(trajectory.columns),
        depth,
        (lo, hi),
        inverse_log,
        coefficients,
        errors,
        condition,
        int(rows.sum()),
        compressions,
    )
