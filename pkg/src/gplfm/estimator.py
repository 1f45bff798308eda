"""Kalman filtering and RTS smoothing over the augmented model.

Outputs may be normalised channel-wise before filtering; the model is then
observed through ``H / s`` with noise ``R / (s s^T)`` so that the state
estimates stay in physical units and only output quantities need to be
scaled back.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg

from .kernels import ConditioningError
from .lfm import AugmentedSsm
from .structural import ModalModel


class EstimationError(ValueError):
    """Invalid input to the filter or smoother."""


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    k: int = 0


@dataclass(frozen=True)
class MeasurementSet:
    """Sampled output channels.

    Attributes
    ----------
    values : ndarray, shape (N, n_y)
        Channel samples.  Entries at unobserved steps are ignored.
    dt : float
        Sampling interval in seconds.
    mask : ndarray of bool, shape (N,)
        True where the step is observed.
    kinds, labels : tuple of str
        Channel kind (``acceleration``, ``strain``, ``displacement``) and name.
    scales : ndarray, shape (n_y,)
        Factors the values have already been divided by (ones if raw).
    """

    values: np.ndarray
    dt: float
    mask: np.ndarray | None = None
    kinds: tuple[str, ...] = ()
    labels: tuple[str, ...] = ()
    scales: np.ndarray | None = None

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if np.ndim(self.values) == 1:
            v = v.T
        object.__setattr__(self, "values", v)
        if self.dt <= 0:
            raise EstimationError("sampling interval must be positive")
        N, ny = v.shape
        mask = np.ones(N, bool) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != (N,):
            raise EstimationError("mask length differs from the number of samples")
        if not np.all(np.isfinite(v[mask])):
            raise EstimationError("non-finite value at an observed step")
        object.__setattr__(self, "mask", mask)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"y{i + 1}" for i in range(ny)))
        if not self.kinds:
            object.__setattr__(self, "kinds", ("acceleration",) * ny)
        if len(self.labels) != ny or len(self.kinds) != ny:
            raise EstimationError("labels/kinds do not match the channel count")
        s = np.ones(ny) if self.scales is None else np.asarray(self.scales, float)
        object.__setattr__(self, "scales", s)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt


def normalize_channels(data: MeasurementSet) -> tuple[MeasurementSet, np.ndarray]:
    """Divide each channel by its standard deviation over observed steps."""
    obs = data.values[data.mask]
    if obs.shape[0] < 2:
        raise EstimationError("need at least two observed steps to normalise")
    s = obs.std(axis=0)
    flat = np.flatnonzero(s <= 1e-300 + 1e-15 * np.abs(obs).max(axis=0, initial=0.0))
    if flat.size:
        raise EstimationError(f"channel {data.labels[flat[0]]!r} is constant")
    return replace(data, values=data.values / s, scales=data.scales * s), s


def prior_belief(aug: AugmentedSsm) -> GaussianBelief:
    """Stationary prior ``N(0, P_inf)``."""
    if aug.P_inf is None:
        raise EstimationError("augmented model has no steady-state covariance")
    return GaussianBelief(np.zeros(aug.dim), aug.P_inf.copy(), 0)


@dataclass
class FilterResult:
    """Predicted and filtered moments for every step.

    ``pred_*[k]`` is the belief on z_k given y_0..y_{k-1};
    ``filt_*[k]`` additionally conditions on y_k.
    """

    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    innovations: np.ndarray  # NaN at unobserved steps
    innovation_cov: np.ndarray
    mask: np.ndarray
    log_likelihood: float = 0.0


def kalman_filter(aug: AugmentedSsm, data: MeasurementSet,
                  prior: GaussianBelief | None = None, *,
                  noise_scale: np.ndarray | None = None) -> FilterResult:
    """Kalman filter with Joseph-form covariance update.

    Steps where ``data.mask`` is False only run the prediction.
    ``noise_scale`` optionally inflates R per step (length N), e.g. to
    down-weight a suspect sample without removing it.
    """
    if aug.F is None:
        raise EstimationError("augmented model is not discretised")
    if data.n_channels != aug.n_outputs:
        raise EstimationError(f"data has {data.n_channels} channels, model {aug.n_outputs}")
    prior = prior_belief(aug) if prior is None else prior
    F, Q, H, R = aug.F, aug.Q, aug.H, aug.R
    N, n, ny = data.n_steps, aug.dim, aug.n_outputs
    Y, mask = data.values, data.mask
    pm = np.empty((N, n))
    pc = np.empty((N, n, n))
    fm = np.empty((N, n))
    fc = np.empty((N, n, n))
    inn = np.full((N, ny), np.nan)
    S_all = np.full((N, ny, ny), np.nan)
    I = np.eye(n)
    FT, HT = F.T, H.T
    m, P = np.asarray(prior.mean, float), np.asarray(prior.cov, float)
    if noise_scale is not None:
        noise_scale = np.asarray(noise_scale, dtype=float)
        if noise_scale.shape != (N,) or np.any(noise_scale <= 0):
            raise EstimationError("noise_scale needs one positive factor per step")
    ll = 0.0
    for k in range(N):
        if k > 0:
            m = F @ m
            P = F @ P @ FT + Q
            P = 0.5 * (P + P.T)
        pm[k], pc[k] = m, P
        if mask[k]:
            Rk = R if noise_scale is None else R * noise_scale[k]
            e = Y[k] - H @ m
            PHT = P @ HT
            S = H @ PHT + Rk
            S = 0.5 * (S + S.T)
            try:
                c = linalg.cho_factor(S, check_finite=False)
            except linalg.LinAlgError as exc:
                raise ConditioningError(f"innovation covariance not SPD at step {k}") from exc
            K = linalg.cho_solve(c, PHT.T, check_finite=False).T
            m = m + K @ e
            IKH = I - K @ H
            P = IKH @ P @ IKH.T + K @ Rk @ K.T
            P = 0.5 * (P + P.T)
            inn[k], S_all[k] = e, S
            ll -= 0.5 * (e @ linalg.cho_solve(c, e, check_finite=False)
                         + 2 * np.log(np.diag(c[0])).sum() + ny * np.log(2 * np.pi))
        fm[k], fc[k] = m, P
    return FilterResult(pm, pc, fm, fc, inn, S_all, mask.copy(), float(ll))


@dataclass
class SmootherResult:
    mean: np.ndarray
    cov: np.ndarray
    y_mean: np.ndarray
    y_cov: np.ndarray


def rts_smooth(filtered: FilterResult, aug: AugmentedSsm) -> SmootherResult:
    """Rauch-Tung-Striebel backward pass and smoothed output moments."""
    F = aug.F
    N = filtered.filt_mean.shape[0]
    sm = filtered.filt_mean.copy()
    sc = filtered.filt_cov.copy()
    for k in range(N - 2, -1, -1):
        Pp = filtered.pred_cov[k + 1]
        FP = F @ filtered.filt_cov[k]
        try:
            c = linalg.cho_factor(Pp, check_finite=False)
            G = linalg.cho_solve(c, FP, check_finite=False).T
        except linalg.LinAlgError:
            try:
                G = linalg.solve(Pp, FP, assume_a="sym").T
            except linalg.LinAlgError as exc:
                raise ConditioningError(f"singular predicted covariance at step {k + 1}") from exc
        sm[k] = filtered.filt_mean[k] + G @ (sm[k + 1] - filtered.pred_mean[k + 1])
        P = filtered.filt_cov[k] + G @ (sc[k + 1] - Pp) @ G.T
        sc[k] = 0.5 * (P + P.T)
    H = aug.H
    y_mean = sm @ H.T
    y_cov = np.einsum("ij,kjl,ml->kim", H, sc, H, optimize=True) + aug.R
    return SmootherResult(sm, sc, y_mean, y_cov)


# ---------------------------------------------------------------------------
# latent recovery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentSeries:
    """Mean and standard deviation of a linear readout of the state."""

    mean: np.ndarray  # (N, n_out)
    sd: np.ndarray
    labels: tuple[str, ...]

    def band(self, n_sigma: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
        return self.mean - n_sigma * self.sd, self.mean + n_sigma * self.sd


def linear_readout(mean: np.ndarray, cov: np.ndarray, C: np.ndarray,
                   labels: Sequence[str] = ()) -> LatentSeries:
    """Moments of ``C z``; variances by congruence ``C P C^T``."""
    C = np.atleast_2d(C)
    mu = mean @ C.T
    var = np.einsum("ij,kjl,il->ki", C, cov, C, optimize=True)
    sd = np.sqrt(np.clip(var, 0.0, None))
    labels = tuple(labels) or tuple(f"c{i + 1}" for i in range(C.shape[0]))
    return LatentSeries(mu, sd, labels)


def readout_matrices(aug: AugmentedSsm, modal: ModalModel,
                     T_s: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Maps from the augmented state to physical quantities."""
    nm, n = modal.n_modes, aug.dim
    phi = modal.mode_shapes
    Ht = aug.force_readout
    out = {}
    Z = np.zeros
    out["modal_displacement"] = np.hstack([np.eye(nm), Z((nm, n - nm))])
    out["displacement"] = np.hstack([phi, Z((phi.shape[0], n - nm))])
    out["velocity"] = np.hstack([Z((phi.shape[0], nm)), phi, Z((phi.shape[0], n - 2 * nm))])
    out["acceleration"] = np.hstack([-phi * modal.omega_sq, -phi * modal.gamma, phi @ Ht])
    out["modal_force"] = np.hstack([Z((nm, 2 * nm)), Ht])
    if T_s is not None and np.size(T_s):
        out["strain"] = np.hstack([T_s @ phi, Z((T_s.shape[0], n - nm))])
    return out


def recover_latents(smoothed: SmootherResult, aug: AugmentedSsm, modal: ModalModel,
                    T_s: np.ndarray | None = None, *,
                    quantities: Sequence[str] | None = None,
                    dof_labels: Sequence[str] = ()) -> dict[str, LatentSeries]:
    """Physical displacements, velocities, accelerations, strains and forces."""
    mats = readout_matrices(aug, modal, T_s)
    quantities = tuple(mats) if quantities is None else tuple(quantities)
    out = {}
    for q in quantities:
        if q not in mats:
            raise EstimationError(f"no readout for {q!r} (strain needs a strain transform)")
        C = mats[q]
        if q in ("displacement", "velocity", "acceleration") and dof_labels:
            labels = tuple(f"{q[0]}_{d}" for d in dof_labels)
        elif q == "strain":
            labels = tuple(f"eps{i + 1}" for i in range(C.shape[0]))
        elif q in ("modal_force", "modal_displacement"):
            labels = tuple(f"{'f' if q == 'modal_force' else 'r'}{j + 1}" for j in range(C.shape[0]))
        else:
            labels = ()
        out[q] = linear_readout(smoothed.mean, smoothed.cov, C, labels)
    return out


# ---------------------------------------------------------------------------
# full pass
# ---------------------------------------------------------------------------


@dataclass
class EstimationResult:
    """Smoothed beliefs, output predictions and diagnostics in physical units."""

    mean: np.ndarray
    cov: np.ndarray
    y_mean: np.ndarray
    y_cov: np.ndarray
    innovations: np.ndarray
    innovation_cov: np.ndarray
    residuals: np.ndarray
    mask: np.ndarray
    dt: float
    labels: tuple[str, ...] = ()
    latents: dict[str, LatentSeries] = field(default_factory=dict)
    log_likelihood: float = 0.0

    @property
    def n_steps(self) -> int:
        return self.mean.shape[0]

    def whiteness(self) -> np.ndarray:
        """Lag-1 autocorrelation of the standardised innovations per channel."""
        return innovation_whiteness(self.innovations, self.innovation_cov, self.mask)

    def residual_cov(self, full: bool = False) -> np.ndarray:
        r = self.residuals[self.mask]
        Rh = r.T @ r / max(r.shape[0], 1)
        return Rh if full else np.diag(np.diag(Rh))


def innovation_whiteness(innovations: np.ndarray, S: np.ndarray, mask: np.ndarray) -> np.ndarray:
    e = innovations[mask]
    sd = np.sqrt(np.einsum("kii->ki", S[mask]))
    z = e / sd
    z = z - z.mean(axis=0)
    den = (z**2).sum(axis=0)
    return (z[1:] * z[:-1]).sum(axis=0) / np.where(den > 0, den, 1.0)


def denormalize(result: EstimationResult, scales) -> EstimationResult:
    """Undo output normalisation (states are already physical)."""
    s = np.asarray(scales, dtype=float)
    ss = np.outer(s, s)
    return replace(result, y_mean=result.y_mean * s, y_cov=result.y_cov * ss,
                   innovations=result.innovations * s,
                   innovation_cov=result.innovation_cov * ss,
                   residuals=result.residuals * s)


def estimate(aug: AugmentedSsm, data: MeasurementSet, modal: ModalModel | None = None, *,
             T_s: np.ndarray | None = None, normalize: bool = True,
             prior: GaussianBelief | None = None,
             dof_labels: Sequence[str] = ()) -> EstimationResult:
    """Filter, smooth and (optionally) recover physical latents.

    ``aug`` must be in the raw units of ``data``; normalisation is handled
    internally and undone on the outputs.
    """
    work, model = data, aug
    scales = np.ones(data.n_channels)
    if normalize:
        work, scales = normalize_channels(data)
        model = aug.scaled_outputs(scales)
    filt = kalman_filter(model, work, prior)
    smooth = rts_smooth(filt, model)
    resid = work.values - smooth.y_mean
    resid[~work.mask] = np.nan
    res = EstimationResult(smooth.mean, smooth.cov, smooth.y_mean, smooth.y_cov,
                           filt.innovations, filt.innovation_cov, resid, work.mask,
                           data.dt, data.labels, log_likelihood=filt.log_likelihood)
    res = denormalize(res, scales)
    if normalize:
        # the likelihood refers to normalised outputs; shift to raw units
        res.log_likelihood -= float(work.mask.sum() * np.log(scales).sum())
    if modal is not None:
        res.latents = recover_latents(smooth, aug, modal, T_s, dof_labels=dof_labels)
    return res
