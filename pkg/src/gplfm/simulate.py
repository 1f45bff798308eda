"""Ground-truth simulation: Newmark integration, GP loads and sensors."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .estimator import MeasurementSet
from .kernels import KernelSpec, discretize_gp, matern_ssm
from .structural import StructuralModel


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Response:
    """Displacement, velocity and acceleration histories, shape (N, n_u)."""

    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return self.u.shape[0]

    def decimate(self, factor: int) -> "Response":
        return Response(self.u[::factor], self.v[::factor], self.a[::factor], self.dt * factor)


def newmark_operators(M, C, K, dt: float, gamma: float = 0.5, beta: float = 0.25):
    """Transition ``x_{k+1} = T x_k + W p_{k+1}`` for ``x = [u, v, a]``."""
    n = M.shape[0]
    a0 = 1.0 / (beta * dt**2)
    a1 = gamma / (beta * dt)
    K_eff = K + a1 * C + a0 * M
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)  # reported below
            lu = linalg.lu_factor(K_eff)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SimulationError("effective stiffness is singular") from exc
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0:
        raise SimulationError("effective stiffness is singular")
    Kinv = linalg.lu_solve(lu, np.eye(n))
    I = np.eye(n)
    # u_{k+1} = Kinv (p + M(a0 u + v/(beta dt) + (1/(2beta)-1) a)
    #                   + C(a1 u + (gamma/beta-1) v + dt(gamma/(2beta)-1) a))
    Mu = a0 * M + a1 * C
    Mv = M / (beta * dt) + (gamma / beta - 1) * C
    Ma = (1 / (2 * beta) - 1) * M + dt * (gamma / (2 * beta) - 1) * C
    Uu, Uv, Ua, Up = Kinv @ Mu, Kinv @ Mv, Kinv @ Ma, Kinv
    # a_{k+1} = a0 (u_{k+1} - u) - v/(beta dt) - (1/(2beta)-1) a
    Au = a0 * (Uu - I)
    Av = a0 * Uv - I / (beta * dt)
    Aa = a0 * Ua - (1 / (2 * beta) - 1) * I
    Ap = a0 * Up
    # v_{k+1} = v + dt((1-gamma) a + gamma a_{k+1})
    Vu = dt * gamma * Au
    Vv = I + dt * gamma * Av
    Va = dt * (1 - gamma) * I + dt * gamma * Aa
    Vp = dt * gamma * Ap
    T = np.block([[Uu, Uv, Ua], [Vu, Vv, Va], [Au, Av, Aa]])
    W = np.vstack([Up, Vp, Ap])
    return T, W


def simulate_newmark(model: StructuralModel, forces: np.ndarray, dt: float, *,
                     u0=None, v0=None, gamma: float = 0.5, beta: float = 0.25) -> Response:
    """Integrate ``M u'' + C u' + K u = p`` with the Newmark scheme.

    ``forces`` has shape (N, n_u) and holds nodal loads at every step.  The
    average-acceleration defaults are unconditionally stable.
    """
    if dt <= 0:
        raise SimulationError("time step must be positive")
    M, C, K = model.mass, model.damping, model.stiffness
    n = model.n_dofs
    p = np.asarray(forces, dtype=float)
    if p.ndim != 2 or p.shape[1] != n:
        raise SimulationError(f"forces must have shape (N, {n})")
    N = p.shape[0]
    u = np.zeros(n) if u0 is None else np.asarray(u0, float)
    v = np.zeros(n) if v0 is None else np.asarray(v0, float)
    a = np.linalg.solve(M, p[0] - C @ v - K @ u)
    T, W = newmark_operators(M, C, K, dt, gamma, beta)
    X = np.empty((N, 3 * n))
    X[0] = np.concatenate([u, v, a])
    Wp = p @ W.T
    x = X[0]
    for k in range(1, N):
        x = T @ x + Wp[k]
        X[k] = x
    return Response(X[:, :n], X[:, n:2 * n], X[:, 2 * n:], dt)


def sample_gp_load(spec: KernelSpec, n_steps: int, dt: float, seed=None,
                   n_series: int = 1) -> np.ndarray:
    """Stationary Matérn sample paths via the discrete SSM recursion.

    Returns an array of shape (n_steps, n_series).
    """
    rng = np.random.default_rng(seed)
    ssm = matern_ssm(spec)
    F, Q = discretize_gp(ssm, dt)
    b = ssm.order
    Lp = _psd_factor(ssm.P_inf)
    Lq = _psd_factor(Q)
    z0 = Lp @ rng.standard_normal((b, n_series))
    w = rng.standard_normal((n_steps, b, n_series))
    drive = np.einsum("ij,kjs->kis", Lq, w)
    out = np.empty((n_steps, n_series))
    z = z0
    for k in range(n_steps):
        out[k] = z[0]
        z = F @ z + drive[k]
    return out


def _psd_factor(P: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def observe(response: Response, channels: list[tuple[str, int]], fs: float,
            noise_var, seed=None, *, labels=None,
            strain_transform: np.ndarray | None = None) -> MeasurementSet:
    """Decimate to ``fs`` and add white Gaussian noise of variance ``noise_var``.

    ``channels`` lists (kind, index) with kind ``acceleration``,
    ``displacement`` or ``velocity`` (index = dof) or ``strain`` (index =
    row of ``strain_transform``).
    """
    ratio = 1.0 / (fs * response.dt)
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9 * ratio:
        raise SimulationError(f"sensor rate {fs} Hz does not divide the simulation rate")
    src = {"acceleration": response.a, "displacement": response.u, "velocity": response.v}
    cols = []
    for kind, idx in channels:
        if kind == "strain":
            if strain_transform is None:
                raise SimulationError("strain channel requested without a strain transform")
            cols.append(response.u[::factor] @ strain_transform[idx])
        elif kind in src:
            cols.append(src[kind][::factor, idx])
        else:
            raise SimulationError(f"unknown channel kind {kind!r}")
    Y = np.column_stack(cols)
    var = np.broadcast_to(np.asarray(noise_var, dtype=float), (Y.shape[1],))
    rng = np.random.default_rng(seed)
    Y = Y + rng.standard_normal(Y.shape) * np.sqrt(var)
    labels = labels or tuple(f"{k[0]}{i + 1}" for k, i in channels)
    return MeasurementSet(Y, 1.0 / fs, kinds=tuple(k for k, _ in channels), labels=tuple(labels))
