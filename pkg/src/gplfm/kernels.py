"""Matérn Gaussian processes as linear time-invariant SDEs.

A stationary Matérn process with half-integer smoothness nu = p + 1/2 is the
first component of a (p+1)-dimensional companion-form SDE driven by white
noise.  This module builds that state-space model, its stationary
covariance and its discretisation.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb, gamma as gamma_fn, pi, sqrt

import numpy as np
from scipy import linalg

SUPPORTED_NU = (0.5, 1.5, 2.5)


class KernelError(ValueError):
    pass


class ConditioningError(ArithmeticError):
    """A covariance that must be PSD came out indefinite beyond round-off."""


@dataclass(frozen=True)
class KernelSpec:
    alpha: float
    length_scale: float
    nu: float = 2.5

    def __post_init__(self):
        if self.alpha <= 0 or self.length_scale <= 0:
            raise KernelError("alpha and length_scale must be positive")
        if self.nu not in SUPPORTED_NU:
            raise KernelError(f"nu must be one of {SUPPORTED_NU}, got {self.nu}")

    @property
    def order(self) -> int:
        """SDE order beta = nu + 1/2."""
        return int(self.nu + 0.5)

    @property
    def lam(self) -> float:
        return sqrt(2 * self.nu) / self.length_scale

    @property
    def spectral_density(self) -> float:
        """White-noise spectral density q_w."""
        nu = self.nu
        return (2 * self.alpha**2 * sqrt(pi) * self.lam ** (2 * nu)
                * gamma_fn(nu + 0.5) / gamma_fn(nu))


@dataclass(frozen=True)
class GpSsm:
    F_c: np.ndarray
    L_c: np.ndarray
    H_c: np.ndarray
    q_w: float
    P_inf: np.ndarray

    @property
    def Q_c(self) -> np.ndarray:
        return self.q_w * self.L_c @ self.L_c.T

    @property
    def order(self) -> int:
        return self.F_c.shape[0]


def matern_ssm(spec: KernelSpec) -> GpSsm:
    """Companion-form state-space model of a Matérn kernel."""
    beta, lam = spec.order, spec.lam
    # characteristic polynomial (s + lam)^beta
    coeffs = [float(comb(beta, i)) * lam ** (beta - i) for i in range(beta)]
    F = np.zeros((beta, beta))
    F[:-1, 1:] = np.eye(beta - 1)
    F[-1, :] = -np.array(coeffs)
    L = np.zeros((beta, 1))
    L[-1, 0] = 1.0
    H = np.zeros((1, beta))
    H[0, 0] = 1.0
    q = spec.spectral_density
    P = solve_lyapunov(F, q * L @ L.T)
    return GpSsm(F, L, H, q, P)


def matern_cov(tau, spec: KernelSpec):
    """Closed-form Matérn covariance at lag ``tau`` (symmetric in tau)."""
    r = np.abs(np.asarray(tau, dtype=float))
    a2 = spec.alpha**2
    x = spec.lam * r
    if spec.nu == 0.5:
        out = a2 * np.exp(-x)
    elif spec.nu == 1.5:
        out = a2 * (1 + x) * np.exp(-x)
    else:
        out = a2 * (1 + x + x**2 / 3) * np.exp(-x)
    return out if out.ndim else float(out)


def _check_hurwitz(F: np.ndarray) -> None:
    ev = np.linalg.eigvals(F)
    worst = ev[np.argmax(ev.real)]
    if worst.real >= 0:
        raise KernelError(f"F is not Hurwitz: eigenvalue {worst:.6g} has non-negative real part")


def solve_lyapunov(F: np.ndarray, Q: np.ndarray, *, kron_max: int = 9) -> np.ndarray:
    """Solve ``F P + P F^T + Q = 0`` for the stationary covariance P.

    Small systems use the Kronecker-product linear system; larger ones the
    Bartels-Stewart Schur method.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    _check_hurwitz(F)
    n = F.shape[0]
    if n <= kron_max:
        I = np.eye(n)
        A = np.kron(I, F) + np.kron(F, I)
        P = np.linalg.solve(A, -Q.reshape(-1, order="F")).reshape(n, n, order="F")
    else:
        P = linalg.solve_continuous_lyapunov(F, -Q)
    return 0.5 * (P + P.T)


def lyapunov_residual(F, P, Q) -> float:
    """Relative Frobenius residual of the continuous Lyapunov equation."""
    res = F @ P + P @ F.T + Q
    return float(np.linalg.norm(res) / max(np.linalg.norm(Q), 1e-300))


def kernel_from_ssm(ssm: GpSsm, tau):
    """Kernel values recovered from the state-space model at lag(s) ``tau``."""
    t = np.atleast_1d(np.asarray(tau, dtype=float))
    out = np.empty(t.shape)
    h = ssm.H_c
    for i, ti in enumerate(t.flat):
        E = linalg.expm(ssm.F_c * abs(ti))
        if ti >= 0:
            out.flat[i] = (h @ ssm.P_inf @ E.T @ h.T).item()
        else:
            out.flat[i] = (h @ E @ ssm.P_inf @ h.T).item()
    return out if np.ndim(tau) else float(out[0])


def stationary_process_cov(P_inf: np.ndarray, F: np.ndarray, *, rtol: float = 1e-12) -> np.ndarray:
    """Discrete process noise ``Q = P_inf - F P_inf F^T``, symmetrised and PSD-floored.

    Raises :class:`ConditioningError` if an eigenvalue is more negative than
    ``-rtol * trace``.
    """
    Q = P_inf - F @ P_inf @ F.T
    Q = 0.5 * (Q + Q.T)
    w, V = np.linalg.eigh(Q)
    tr = max(np.trace(Q), 0.0)
    if w.min() < -rtol * max(tr, 1e-300) * Q.shape[0] and w.min() < 0:
        raise ConditioningError(
            f"discrete process covariance indefinite: min eigenvalue {w.min():.3e}, trace {tr:.3e}")
    if w.min() < 0:
        Q = (V * np.clip(w, 0.0, None)) @ V.T
        Q = 0.5 * (Q + Q.T)
    return Q


def discretize_gp(ssm: GpSsm, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrix and process covariance of the sampled GP."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    F = linalg.expm(ssm.F_c * dt)
    return F, stationary_process_cov(ssm.P_inf, F)
