"""Structural models, modal reduction and measurement maps.

Two model builders are provided: a lumped mass-spring chain (fixed base,
free tip) and a planar cantilever beam discretised with two-node bending
elements.  Both produce a :class:`StructuralModel` which can be reduced to
its lowest modes with :func:`modal_decompose` and cast into continuous or
discrete state-space form.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg


class StructuralError(ValueError):
    """Invalid structural model or sensor definition."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BeamElement:
    """Two-node planar bending element.

    ``dofs`` holds the global indices of (v1, theta1, v2, theta2); -1 marks a
    constrained dof.
    """

    length: float
    half_depth: float
    dofs: tuple[int, int, int, int]
    shear_parameter: float = 0.0  # 12 EI / (kappa G A L^2); 0 for Euler-Bernoulli


@dataclass(frozen=True)
class StructuralModel:
    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray
    elements: tuple[BeamElement, ...] = ()
    force_selection: np.ndarray | None = None
    dof_labels: tuple[str, ...] = ()

    def __post_init__(self):
        M, C, K = (_frozen(x) for x in (self.mass, self.damping, self.stiffness))
        n = M.shape[0]
        for name, A in (("mass", M), ("damping", C), ("stiffness", K)):
            if A.shape != (n, n):
                raise StructuralError(f"{name} matrix must be {n}x{n}, got {A.shape}")
        scale = max(np.abs(M).max(), 1e-300)
        if not np.allclose(M, M.T, atol=1e-12 * scale):
            raise StructuralError("mass matrix is not symmetric")
        if not np.allclose(K, K.T, atol=1e-12 * max(np.abs(K).max(), 1e-300)):
            raise StructuralError("stiffness matrix is not symmetric")
        object.__setattr__(self, "mass", M)
        object.__setattr__(self, "damping", C)
        object.__setattr__(self, "stiffness", K)
        if self.force_selection is None:
            object.__setattr__(self, "force_selection", _frozen(np.eye(n)))
        else:
            S = _frozen(self.force_selection)
            if S.ndim != 2 or S.shape[0] != n:
                raise StructuralError("force selection must have one row per dof")
            if not np.all((np.count_nonzero(S, axis=0) == 1) & np.isclose(S.sum(axis=0), 1.0)):
                raise StructuralError("each force selection column needs exactly one unit entry")
            object.__setattr__(self, "force_selection", S)
        if not self.dof_labels:
            object.__setattr__(self, "dof_labels", tuple(f"dof{i + 1}" for i in range(n)))
        elif len(self.dof_labels) != n:
            raise StructuralError("one label per dof required")

    @property
    def n_dofs(self) -> int:
        return self.mass.shape[0]


@dataclass(frozen=True)
class ModalModel:
    """Truncated, mass-normalised modal basis with per-mode damping ratios."""

    mode_shapes: np.ndarray
    omega_sq: np.ndarray
    damping_ratios: np.ndarray

    def __post_init__(self):
        phi = _frozen(self.mode_shapes)
        w2 = _frozen(np.ravel(self.omega_sq))
        xi = _frozen(np.ravel(self.damping_ratios))
        if phi.ndim != 2 or phi.shape[1] != w2.size or xi.size != w2.size:
            raise StructuralError("mode shapes, frequencies and damping ratios disagree in size")
        if np.any(xi < 0) or np.any(xi >= 1):
            raise StructuralError("damping ratios must lie in [0, 1)")
        object.__setattr__(self, "mode_shapes", phi)
        object.__setattr__(self, "omega_sq", w2)
        object.__setattr__(self, "damping_ratios", xi)

    @property
    def n_modes(self) -> int:
        return self.omega_sq.size

    @property
    def omegas(self) -> np.ndarray:
        return np.sqrt(self.omega_sq)

    @property
    def frequencies_hz(self) -> np.ndarray:
        return self.omegas / (2 * np.pi)

    @property
    def gamma(self) -> np.ndarray:
        """Diagonal of the modal damping matrix, 2 xi_j omega_j (rad/s)."""
        return 2.0 * self.damping_ratios * self.omegas


@dataclass(frozen=True)
class Sensor:
    kind: str  # "acceleration" | "displacement" | "strain"
    dof: int | None = None
    element: int | None = None
    position: float = 0.5
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("acceleration", "displacement", "strain"):
            raise StructuralError(f"unknown sensor kind {self.kind!r}")
        if self.kind == "strain" and self.element is None:
            raise StructuralError("strain sensor needs an element index")
        if self.kind != "strain" and self.dof is None:
            raise StructuralError(f"{self.kind} sensor needs a dof index")


@dataclass(frozen=True)
class MeasurementMap:
    output_matrix: np.ndarray  # G, n_y x 2 n_m
    feedthrough: np.ndarray  # J, n_y x n_m
    kinds: tuple[str, ...]
    labels: tuple[str, ...]
    accel_selection: np.ndarray
    strain_selection: np.ndarray
    strain_transform: np.ndarray

    @property
    def n_outputs(self) -> int:
        return self.output_matrix.shape[0]


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------


def _modal_damping_matrix(M, K, ratios) -> np.ndarray:
    """Classically damped C with prescribed ratios in every mode."""
    w2, phi = linalg.eigh(K, M)
    w = np.sqrt(np.clip(w2, 0.0, None))
    MP = M @ phi
    return MP @ np.diag(2.0 * np.asarray(ratios) * w) @ MP.T


def _ratio_vector(damping_ratios, n: int) -> np.ndarray:
    xi = np.atleast_1d(np.asarray(damping_ratios, dtype=float))
    if xi.size == 1:
        xi = np.full(n, xi[0])
    if xi.size != n:
        raise StructuralError(f"expected {n} damping ratios, got {xi.size}")
    if np.any(xi < 0) or np.any(xi >= 1):
        raise StructuralError("damping ratios must lie in [0, 1)")
    return xi


def assemble_chain(n: int, m: float, k: float, damping_ratios=0.02, *,
                   tip_mass: float = 0.0,
                   force_selection: np.ndarray | None = None) -> StructuralModel:
    """Lumped mass-spring chain, fixed at the base and free at the tip.

    Damping is built from the mass-normalised modes so that every mode gets
    the requested ratio, ``C = M Phi diag(2 xi w) Phi^T M``.  ``damping_ratios``
    is a scalar or one value per mode.
    """
    if n < 1:
        raise StructuralError("chain needs at least one mass")
    if m <= 0 or k <= 0:
        raise StructuralError("mass and stiffness must be positive")
    if tip_mass < 0:
        raise StructuralError("tip mass must be non-negative")
    xi = _ratio_vector(damping_ratios, n)
    M = m * np.eye(n)
    M[-1, -1] += tip_mass
    K = np.zeros((n, n))
    for i in range(n):
        K[i, i] = 2 * k if i < n - 1 else k
        if i + 1 < n:
            K[i, i + 1] = K[i + 1, i] = -k
    C = _modal_damping_matrix(M, K, xi)
    return StructuralModel(M, C, K, force_selection=force_selection,
                           dof_labels=tuple(f"u{i + 1}" for i in range(n)))


def _beam_element_matrices(L: float, EI: float, rhoA: float, phi_s: float):
    c = EI / (L**3 * (1.0 + phi_s))
    ke = c * np.array([
        [12, 6 * L, -12, 6 * L],
        [6 * L, (4 + phi_s) * L**2, -6 * L, (2 - phi_s) * L**2],
        [-12, -6 * L, 12, -6 * L],
        [6 * L, (2 - phi_s) * L**2, -6 * L, (4 + phi_s) * L**2],
    ])
    me = rhoA * L / 420.0 * np.array([
        [156, 22 * L, 54, -13 * L],
        [22 * L, 4 * L**2, 13 * L, -3 * L**2],
        [54, 13 * L, 156, -22 * L],
        [-13 * L, -3 * L**2, -22 * L, 4 * L**2],
    ])
    return ke, me


def assemble_cantilever_beam(n_e: int, L_e: float, EI: float, rhoA: float,
                             half_depth: float, damping_ratios=0.0, *,
                             shear_stiffness: float | None = None,
                             tip_mass: float = 0.0) -> StructuralModel:
    """Planar cantilever of ``n_e`` identical elements, clamped at node 0.

    Dofs are ordered (v1, theta1, ..., v_ne, theta_ne).  Passing
    ``shear_stiffness`` (kappa G A) switches the stiffness and strain shape
    functions to the Timoshenko form; the mass stays the consistent
    Euler-Bernoulli one.
    """
    if n_e < 1:
        raise StructuralError("beam needs at least one element")
    if L_e <= 0:
        raise StructuralError("element length must be positive")
    if EI <= 0 or rhoA <= 0 or half_depth <= 0:
        raise StructuralError("section properties must be positive")
    phi_s = 0.0
    if shear_stiffness is not None:
        if shear_stiffness <= 0:
            raise StructuralError("shear stiffness must be positive")
        phi_s = 12.0 * EI / (shear_stiffness * L_e**2)

    n = 2 * n_e
    K = np.zeros((n, n))
    M = np.zeros((n, n))
    ke, me = _beam_element_matrices(L_e, EI, rhoA, phi_s)
    elements = []
    for e in range(n_e):
        dofs = (2 * e - 2, 2 * e - 1, 2 * e, 2 * e + 1)  # node e -> node e+1
        elements.append(BeamElement(L_e, half_depth, dofs, phi_s))
        for a, ga in enumerate(dofs):
            if ga < 0:
                continue
            for b, gb in enumerate(dofs):
                if gb < 0:
                    continue
                K[ga, gb] += ke[a, b]
                M[ga, gb] += me[a, b]
    M[n - 2, n - 2] += tip_mass
    K = 0.5 * (K + K.T)
    M = 0.5 * (M + M.T)
    xi = _ratio_vector(damping_ratios, n)
    C = _modal_damping_matrix(M, K, xi)
    labels = tuple(lbl for i in range(1, n_e + 1) for lbl in (f"v{i}", f"th{i}"))
    return StructuralModel(M, C, K, elements=tuple(elements), dof_labels=labels)


# ---------------------------------------------------------------------------
# modal reduction and state space
# ---------------------------------------------------------------------------


def modal_decompose(model: StructuralModel, n_m: int, damping_ratios=0.02) -> ModalModel:
    """Keep the ``n_m`` lowest mass-normalised modes of ``model``."""
    n = model.n_dofs
    if not 1 <= n_m <= n:
        raise StructuralError(f"number of modes must be in [1, {n}], got {n_m}")
    try:
        linalg.cholesky(model.mass)
    except linalg.LinAlgError as exc:
        raise StructuralError("mass matrix is not positive definite") from exc
    try:
        w2, phi = linalg.eigh(model.stiffness, model.mass, subset_by_index=[0, n_m - 1])
    except linalg.LinAlgError as exc:
        raise StructuralError(f"eigen-solver failed: {exc}") from exc
    w2 = np.clip(w2, 0.0, None)
    for j in range(n_m):
        col = phi[:, j]
        lead = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())[0]
        if col[lead] < 0:
            phi[:, j] = -col
    order = np.lexsort((np.arange(n_m), w2))
    return ModalModel(phi[:, order], w2[order], _ratio_vector(damping_ratios, n_m))


def to_continuous_ss(modal: ModalModel) -> tuple[np.ndarray, np.ndarray]:
    """Modal state-space matrices for x = [r, r_dot]."""
    n = modal.n_modes
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -np.diag(modal.omega_sq)
    A[n:, n:] = -np.diag(modal.gamma)
    B = np.vstack([np.zeros((n, n)), np.eye(n)])
    return A, B


def discretize_zoh(A_c: np.ndarray, B_c: np.ndarray, dt: float, *,
                   cond_limit: float = 1e12) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretisation.

    ``B = (A - I) A_c^-1 B_c`` when A_c is well conditioned; otherwise the
    input integral is taken from the exponential of the block matrix
    ``[[A_c, B_c], [0, 0]]``, which is the same series summed exactly.
    """
    if dt <= 0:
        raise ValueError("time step must be positive")
    A_c = np.atleast_2d(np.asarray(A_c, dtype=float))
    B_c = np.asarray(B_c, dtype=float).reshape(A_c.shape[0], -1)
    A = linalg.expm(A_c * dt)
    if np.linalg.cond(A_c) <= cond_limit:
        B = (A - np.eye(A.shape[0])) @ np.linalg.solve(A_c, B_c)
    else:
        n, p = B_c.shape
        blk = np.zeros((n + p, n + p))
        blk[:n, :n] = A_c
        blk[:n, n:] = B_c
        B = linalg.expm(blk * dt)[:n, n:]
    return A, B


# ---------------------------------------------------------------------------
# strain recovery and measurement model
# ---------------------------------------------------------------------------


def hermite_curvature(xi: float, L: float, shear_parameter: float = 0.0) -> np.ndarray:
    """Second derivative of the element shape functions w.r.t. xi."""
    p = shear_parameter
    return np.array([
        12 * xi - 6,
        L * (6 * xi - 4 - p),
        6 - 12 * xi,
        L * (6 * xi - 2 + p),
    ]) / (1.0 + p)


def strain_matrix(model: StructuralModel,
                  eval_positions: Sequence[tuple[int, float]]) -> np.ndarray:
    """Rows mapping global displacements to axial surface strain.

    Each entry of ``eval_positions`` is (element index, xi) with xi in [0, 1].
    """
    if not model.elements:
        raise StructuralError("model has no beam elements (no rotational dofs)")
    T = np.zeros((len(eval_positions), model.n_dofs))
    for row, (e, xi) in enumerate(eval_positions):
        if not 0 <= e < len(model.elements):
            raise StructuralError(f"element index {e} out of range")
        if not 0.0 <= xi <= 1.0:
            raise StructuralError(f"position {xi} outside [0, 1]")
        el = model.elements[e]
        B = -el.half_depth / el.length**2 * hermite_curvature(xi, el.length, el.shear_parameter)
        for b, g in zip(B, el.dofs):
            if g >= 0:
                T[row, g] += b
    return T


def build_measurement(model: StructuralModel, modal: ModalModel,
                      sensors: Sequence[Sensor]) -> MeasurementMap:
    """Output matrices G and J of y = G x + J f for the given sensors.

    Rows follow the order of ``sensors``.
    """
    if not sensors:
        raise StructuralError("sensor set is empty")
    n, nm = model.n_dofs, modal.n_modes
    phi = modal.mode_shapes
    W2 = np.diag(modal.omega_sq)
    Gam = np.diag(modal.gamma)
    strain_sensors = [s for s in sensors if s.kind == "strain"]
    T_s = (strain_matrix(model, [(s.element, s.position) for s in strain_sensors])
           if strain_sensors else np.zeros((0, n)))
    acc = [s for s in sensors if s.kind == "acceleration"]
    S_a = np.zeros((len(acc), n))
    G = np.zeros((len(sensors), 2 * nm))
    J = np.zeros((len(sensors), nm))
    i_str = i_acc = 0
    labels = []
    for row, s in enumerate(sensors):
        if s.kind != "strain" and not 0 <= s.dof < n:
            raise StructuralError(f"sensor dof {s.dof} out of range")
        if s.kind == "strain":
            G[row, :nm] = T_s[i_str] @ phi
            i_str += 1
            tag = f"eps_e{s.element + 1}"
        elif s.kind == "displacement":
            G[row, :nm] = phi[s.dof]
            tag = f"u_{model.dof_labels[s.dof]}"
        else:
            S_a[i_acc, s.dof] = 1.0
            i_acc += 1
            G[row, :nm] = -phi[s.dof] @ W2
            G[row, nm:] = -phi[s.dof] @ Gam
            J[row] = phi[s.dof]
            tag = f"a_{model.dof_labels[s.dof]}"
        labels.append(s.label or tag)
    return MeasurementMap(G, J, tuple(s.kind for s in sensors), tuple(labels),
                          S_a, np.eye(len(strain_sensors)), T_s)


def mac(phi_a, phi_b) -> float:
    """Modal assurance criterion between two mode shape vectors."""
    a = np.ravel(np.asarray(phi_a, dtype=float))
    b = np.ravel(np.asarray(phi_b, dtype=float))
    if a.shape != b.shape:
        raise ValueError("mode shapes must have equal length")
    na, nb = a @ a, b @ b
    if na == 0 or nb == 0:
        raise ValueError("zero mode shape vector")
    return float((a @ b) ** 2 / (na * nb))
