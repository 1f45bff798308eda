"""Augmented force-and-state model.

The modal forces get independent Matérn GP priors.  Stacking their
companion-form SDEs under the modal equations of motion gives one linear
SDE whose stationary covariance serves both as filter prior and as the
source of the discrete process noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg

from .kernels import KernelSpec, matern_ssm, solve_lyapunov, stationary_process_cov
from .structural import MeasurementMap, ModalModel, to_continuous_ss


class ModelError(ValueError):
    """Inconsistent or non-stationary augmented model."""


@dataclass(frozen=True)
class ForceBlock:
    """Block-diagonal GP model of ``n_forces`` independent latent forces."""

    F_c: np.ndarray
    L_c: np.ndarray
    H_c: np.ndarray
    Q_c: np.ndarray
    P_inf: np.ndarray
    kernels: tuple[KernelSpec, ...]

    @property
    def n_forces(self) -> int:
        return self.H_c.shape[0]

    @property
    def dim(self) -> int:
        return self.F_c.shape[0]


def block_force_model(kernels: Sequence[KernelSpec]) -> ForceBlock:
    """Stack one Matérn SSM per modal force into a block-diagonal model."""
    kernels = tuple(kernels)
    if not kernels:
        raise ModelError("at least one force kernel is required")
    parts = [matern_ssm(k) for k in kernels]
    F = linalg.block_diag(*[p.F_c for p in parts])
    L = linalg.block_diag(*[p.L_c for p in parts])
    H = linalg.block_diag(*[p.H_c for p in parts])
    Q = linalg.block_diag(*[p.Q_c for p in parts])
    P = linalg.block_diag(*[p.P_inf for p in parts])
    return ForceBlock(F, L, H, Q, P, kernels)


@dataclass(frozen=True)
class AugmentedSsm:
    """Joint model ``z = [r, r_dot, s]`` with outputs ``y = H z + v``.

    The continuous part is always present.  ``P_inf``, ``dt``, ``F`` and
    ``Q`` are filled in by :func:`steady_state` and :func:`discretize`.
    """

    F_c: np.ndarray
    H: np.ndarray
    Q_c: np.ndarray
    R: np.ndarray
    n_states: int  # 2 n_m
    force_readout: np.ndarray  # H~_c, n_m x beta n_m
    Q_x: np.ndarray | None = None
    P_inf: np.ndarray | None = None
    dt: float | None = None
    F: np.ndarray | None = None
    Q: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.F_c.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.H.shape[0]

    @property
    def n_modes(self) -> int:
        return self.n_states // 2

    def with_noise(self, R) -> "AugmentedSsm":
        R = _check_noise(R, self.n_outputs)
        return replace(self, R=R)

    def scaled_outputs(self, scales) -> "AugmentedSsm":
        """Same model observed through outputs divided by ``scales``."""
        s = np.asarray(scales, dtype=float)
        return replace(self, H=self.H / s[:, None], R=self.R / np.outer(s, s))

    def output_cov(self, P: np.ndarray | None = None) -> np.ndarray:
        """``H P H^T + R`` (stationary covariance by default)."""
        P = self.P_inf if P is None else P
        if P is None:
            raise ModelError("steady state has not been computed")
        S = self.H @ P @ self.H.T + self.R
        return 0.5 * (S + S.T)


def _check_noise(R, n_y: int) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.ndim == 0:
        R = R * np.eye(n_y)
    elif R.ndim == 1:
        R = np.diag(R)
    if R.shape != (n_y, n_y):
        raise ModelError(f"R must be {n_y}x{n_y}, got {R.shape}")
    try:
        np.linalg.cholesky(0.5 * (R + R.T))
    except np.linalg.LinAlgError as exc:
        raise ModelError("measurement noise covariance must be SPD") from exc
    return 0.5 * (R + R.T)


def augment(A_c: np.ndarray, B_c: np.ndarray, measurement: MeasurementMap,
            force_block: ForceBlock, R, Q_x=None) -> AugmentedSsm:
    """Continuous augmented model ``F_c^a = [[A_c, B_c H~], [0, F~]]``."""
    ns = A_c.shape[0]
    nm = B_c.shape[1]
    if ns != 2 * nm or force_block.n_forces != nm:
        raise ModelError(f"{force_block.n_forces} forces for {nm} modes / {ns} states")
    G, J = measurement.output_matrix, measurement.feedthrough
    if G.shape[1] != ns or J.shape[1] != nm:
        raise ModelError("measurement map does not match the modal model")
    Ht = force_block.H_c
    nf = force_block.dim
    F = np.zeros((ns + nf, ns + nf))
    F[:ns, :ns] = A_c
    F[:ns, ns:] = B_c @ Ht
    F[ns:, ns:] = force_block.F_c
    H = np.hstack([G, J @ Ht])
    Qc = np.zeros_like(F)
    Qc[ns:, ns:] = force_block.Q_c
    if Q_x is not None:
        Q_x = np.asarray(Q_x, dtype=float)
        if Q_x.shape != (ns, ns):
            raise ModelError(f"Q_x must be {ns}x{ns}")
    return AugmentedSsm(F, H, Qc, _check_noise(R, H.shape[0]), ns, Ht, Q_x)


def _check_damped(aug: AugmentedSsm) -> None:
    nm = aug.n_modes
    gam = -np.diag(aug.F_c[nm:2 * nm, nm:2 * nm])
    bad = np.flatnonzero(gam <= 0)
    if bad.size:
        raise ModelError(
            f"mode {bad[0] + 1} is undamped; the augmented model has no stationary covariance")


def steady_state(aug: AugmentedSsm) -> AugmentedSsm:
    """Solve the augmented Lyapunov equation for ``P_inf``."""
    _check_damped(aug)
    P = solve_lyapunov(aug.F_c, aug.Q_c)
    return replace(aug, P_inf=P)


def discretize(aug: AugmentedSsm, dt: float) -> AugmentedSsm:
    """Discrete ``F = exp(F_c dt)`` and ``Q = P_inf - F P_inf F^T`` (+ Q_x)."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    if aug.P_inf is None:
        aug = steady_state(aug)
    F = linalg.expm(aug.F_c * dt)
    Q = stationary_process_cov(aug.P_inf, F)
    if aug.Q_x is not None:
        ns = aug.n_states
        Q = Q.copy()
        Q[:ns, :ns] += aug.Q_x
    return replace(aug, dt=float(dt), F=F, Q=Q)


@dataclass(frozen=True)
class GplfmSetup:
    """Everything needed to build the discrete model for a candidate theta.

    The same GP prior is used for every modal force unless ``kernels`` is
    passed to :meth:`build`.
    """

    modal: ModalModel
    measurement: MeasurementMap
    dt: float
    nu: float = 2.5
    Q_x: np.ndarray | None = None
    _cont: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_cont", to_continuous_ss(self.modal))

    @property
    def n_outputs(self) -> int:
        return self.measurement.n_outputs

    def continuous(self, alpha: float, length_scale: float, R,
                   kernels: Sequence[KernelSpec] | None = None) -> AugmentedSsm:
        if kernels is None:
            kernels = [KernelSpec(alpha, length_scale, self.nu)] * self.modal.n_modes
        A_c, B_c = self._cont
        return steady_state(augment(A_c, B_c, self.measurement,
                                    block_force_model(kernels), R, self.Q_x))

    def build(self, alpha: float, length_scale: float, R,
              kernels: Sequence[KernelSpec] | None = None) -> AugmentedSsm:
        return discretize(self.continuous(alpha, length_scale, R, kernels), self.dt)
