"""Data-driven calibration of the GP prior and the measurement noise.

Hyperparameters are chosen so that the stationary output covariance of the
augmented model is closest, in Hellinger distance, to the empirical output
covariance.  The measurement noise is then re-estimated from smoothing
residuals until it stops changing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .estimator import EstimationResult, MeasurementSet, estimate
from .lfm import GplfmSetup, ModelError


class CalibrationError(RuntimeError):
    pass


def empirical_output_cov(data: MeasurementSet) -> np.ndarray:
    """Unbiased covariance of the mean-removed observed samples."""
    Y = data.values[data.mask]
    if Y.shape[0] < 2:
        raise CalibrationError("need at least two observed samples")
    Y = Y - Y.mean(axis=0)
    C = Y.T @ Y / (Y.shape[0] - 1)
    return 0.5 * (C + C.T)


def model_output_cov(alpha: float, length_scale: float, setup: GplfmSetup, R, *,
                     include_noise: bool = True) -> np.ndarray:
    """Stationary output covariance ``H P_inf H^T (+ R)`` for theta."""
    aug = setup.continuous(alpha, length_scale, R)
    S = aug.H @ aug.P_inf @ aug.H.T
    if include_noise:
        S = S + aug.R
    return 0.5 * (S + S.T)


def _logdet_spd(S: np.ndarray, name: str) -> float:
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} is not symmetric positive definite") from exc
    return 2.0 * np.log(np.diag(L)).sum()


def hellinger_gaussian(S1, S2) -> float:
    """Hellinger distance between N(0, S1) and N(0, S2).

    ``H = sqrt(1 - BC)`` with the Bhattacharyya coefficient
    ``BC = |S1|^(1/4) |S2|^(1/4) / |(S1 + S2)/2|^(1/2)``, computed in log form.
    """
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    S2 = np.atleast_2d(np.asarray(S2, dtype=float))
    if S1.shape != S2.shape:
        raise ValueError("covariances must have the same shape")
    for S, nm in ((S1, "first covariance"), (S2, "second covariance")):
        if not np.allclose(S, S.T, rtol=1e-10, atol=0):
            raise ValueError(f"{nm} is not symmetric")
    l1 = _logdet_spd(S1, "first covariance")
    l2 = _logdet_spd(S2, "second covariance")
    lm = _logdet_spd(0.5 * (S1 + S2), "average covariance")
    bc = np.exp(0.25 * l1 + 0.25 * l2 - 0.5 * lm)
    return float(np.sqrt(max(1.0 - bc, 0.0)))


# ---------------------------------------------------------------------------
# hyperparameter fit
# ---------------------------------------------------------------------------


@dataclass
class HyperFitReport:
    """Outcome of :func:`fit_hyperparameters`.

    ``surface`` has columns (alpha, length_scale, distance); failed grid
    points carry NaN distance.
    """

    alpha: float
    length_scale: float
    distance: float
    surface: np.ndarray
    grid_shape: tuple[int, int]
    converged: bool
    iterations: int
    domain: tuple[tuple[float, float], tuple[float, float]]

    @property
    def theta(self) -> tuple[float, float]:
        return self.alpha, self.length_scale

    def surface_grid(self) -> np.ndarray:
        """Distances reshaped to (n_alpha, n_length_scale)."""
        return self.surface[:, 2].reshape(self.grid_shape)

    def local_minima(self) -> int:
        """Number of strict local minima of the grid (8-neighbourhood)."""
        return count_local_minima(self.surface_grid())


def count_local_minima(D) -> int:
    """Strict local minima of a 2-D array over 8-neighbourhoods; NaN cells are skipped."""
    D = np.asarray(D, dtype=float)
    n_a, n_l = D.shape
    count = 0
    for i in range(n_a):
        for j in range(n_l):
            d = D[i, j]
            if not np.isfinite(d):
                continue
            nb = D[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
            others = np.delete(nb.ravel(), (i - max(i - 1, 0)) * nb.shape[1] + j - max(j - 1, 0))
            if np.all(d < others[np.isfinite(others)]):
                count += 1
    return count


DEFAULT_DOMAIN = ((1e-3, 50.0), (1e-3, 1.0))


class _Objective:
    """Hellinger distance as a function of (alpha, l_s).

    ``H P_inf H^T`` is linear in alpha^2, so it is cached per length scale.
    """

    def __init__(self, setup: GplfmSetup, R, target: np.ndarray):
        self.setup = setup
        self.R = np.asarray(setup.continuous(1.0, 1.0, R).R)
        self.target = target
        self._cache: dict[float, np.ndarray] = {}

    def unit_cov(self, ls: float) -> np.ndarray:
        key = float(ls)
        if key not in self._cache:
            self._cache[key] = model_output_cov(1.0, key, self.setup, self.R,
                                                include_noise=False)
        return self._cache[key]

    def __call__(self, alpha: float, ls: float) -> float:
        S = alpha**2 * self.unit_cov(ls) + self.R
        return hellinger_gaussian(0.5 * (S + S.T), self.target)


def fit_hyperparameters(data: MeasurementSet, setup: GplfmSetup, R, *,
                        domain=DEFAULT_DOMAIN, grid: tuple[int, int] = (25, 25),
                        refine: bool = True, max_iter: int = 400,
                        xatol: float = 1e-6) -> HyperFitReport:
    """Minimise the Hellinger distance over theta = (alpha, l_s).

    A log-spaced grid scan locates the basin; Nelder-Mead in log-space then
    refines from the best grid point, clipped to the domain.
    """
    (a_lo, a_hi), (l_lo, l_hi) = domain
    if min(a_lo, l_lo) <= 0 or a_hi <= a_lo or l_hi <= l_lo:
        raise CalibrationError(f"invalid search domain {domain}")
    target = empirical_output_cov(data)
    try:
        np.linalg.cholesky(target)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError("empirical output covariance is singular") from exc
    obj = _Objective(setup, R, target)
    alphas = np.geomspace(a_lo, a_hi, grid[0])
    scales = np.geomspace(l_lo, l_hi, grid[1])
    surf = np.empty((grid[0] * grid[1], 3))
    row = 0
    for a in alphas:
        for ls in scales:
            try:
                d = obj(a, ls)
            except (ValueError, ModelError, np.linalg.LinAlgError, ArithmeticError):
                d = np.nan
            surf[row] = a, ls, d
            row += 1
    if not np.any(np.isfinite(surf[:, 2])):
        raise CalibrationError("every grid evaluation failed")
    best = int(np.nanargmin(surf[:, 2]))
    a0, l0, d0 = surf[best]
    converged, iters = True, 0
    if refine:
        lo = np.log([a_lo, l_lo])
        hi = np.log([a_hi, l_hi])

        def f(x):
            x = np.clip(x, lo, hi)
            try:
                return obj(*np.exp(x))
            except (ValueError, ModelError, np.linalg.LinAlgError, ArithmeticError):
                return 2.0

        res = optimize.minimize(f, np.log([a0, l0]), method="Nelder-Mead",
                                bounds=list(zip(lo, hi)),
                                options={"xatol": xatol, "fatol": 1e-12, "maxiter": max_iter})
        x = np.exp(np.clip(res.x, lo, hi))
        if res.fun <= d0:
            a0, l0, d0 = float(x[0]), float(x[1]), float(res.fun)
        converged, iters = bool(res.success), int(res.nit)
    return HyperFitReport(float(a0), float(l0), float(d0), surf, tuple(grid),
                          converged, iters, ((a_lo, a_hi), (l_lo, l_hi)))


# ---------------------------------------------------------------------------
# measurement-noise tuning
# ---------------------------------------------------------------------------


@dataclass
class NoiseTuneReport:
    history: list[np.ndarray]
    R: np.ndarray
    R_hat: np.ndarray
    iterations: int
    converged: bool
    fits: list[HyperFitReport] = field(default_factory=list)
    result: EstimationResult | None = None

    @property
    def changes(self) -> list[float]:
        """Relative Frobenius change of R at each iteration."""
        return [_rel_change(a, b) for a, b in zip(self.history[:-1], self.history[1:])]


def _rel_change(R_old: np.ndarray, R_new: np.ndarray) -> float:
    return float(np.linalg.norm(R_new - R_old) / np.linalg.norm(R_old))


def _as_cov(R, n: int) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.ndim == 0:
        return R * np.eye(n)
    if R.ndim == 1:
        return np.diag(R)
    return R


def tune_measurement_noise(setup: GplfmSetup, data: MeasurementSet, R0, *,
                           tol: float = 0.1, max_iter: int = 10, full: bool = False,
                           floor_rel: float = 1e-12, bias_correction: bool = False,
                           fit_kwargs: dict | None = None,
                           callback: Callable[[int, np.ndarray], None] | None = None,
                           ) -> NoiseTuneReport:
    """Iterate fit -> filter/smooth -> residual covariance until R settles.

    Each iteration refits theta with the current R, smooths, and sets the
    next R to the residual covariance (diagonal unless ``full``), floored at
    ``floor_rel`` times each channel's variance.  Convergence is declared
    when ``||R_new - R||_F / ||R||_F`` drops below ``tol``.

    Smoothed residuals satisfy ``E[r r^T] = R - H P_{k|N} H^T``, so the
    plain update is biased low when the model is exact.  With
    ``bias_correction`` the mean of ``H P_{k|N} H^T`` is added back, which
    is the EM update for R.
    """
    if tol <= 0:
        raise CalibrationError("tolerance must be positive")
    n = data.n_channels
    R = _as_cov(R0, n)
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError("initial R must be SPD") from exc
    var = data.values[data.mask].var(axis=0)
    floor = np.maximum(floor_rel * var, 1e-300)
    history, fits = [R], []
    converged, result, R_hat = False, None, R
    growth = 0
    last_step = None
    it = 0
    for it in range(1, max_iter + 1):
        fit = fit_hyperparameters(data, setup, R, **(fit_kwargs or {}))
        fits.append(fit)
        aug = setup.build(fit.alpha, fit.length_scale, R)
        result = estimate(aug, data)
        R_hat = result.residual_cov(full=full)
        if bias_correction:
            corr = result.y_cov[result.mask].mean(axis=0) - aug.R
            R_hat = R_hat + (corr if full else np.diag(np.diag(corr)))
        R_new = R_hat.copy()
        d = np.maximum(np.diag(R_new), floor)
        R_new[np.diag_indices(n)] = d
        if full:
            R_new = 0.5 * (R_new + R_new.T) + np.diag(floor)
        history.append(R_new)
        if callback is not None:
            callback(it, R_new)
        change = _rel_change(R, R_new)
        step = np.linalg.norm(R_new) - np.linalg.norm(R)
        if step > 0 and last_step is not None and last_step > 0 and step >= last_step:
            growth += 1
        else:
            growth = 0
        last_step = step
        R = R_new
        if change < tol:
            converged = True
            break
        if growth >= 2:
            raise CalibrationError(
                f"noise covariance diverging: norm grew with non-shrinking steps up to iteration {it}")
    return NoiseTuneReport(history, R, R_hat, it, converged, fits, result)
