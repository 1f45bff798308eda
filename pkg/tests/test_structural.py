import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from gplfm.structural import (ModalModel, Sensor, StructuralError, assemble_cantilever_beam,
                              assemble_chain, build_measurement, discretize_zoh, mac,
                              modal_decompose, strain_matrix, to_continuous_ss)


def _expm_taylor(A, terms=40, squarings=10):
    """Scaling-and-squaring with a plain Taylor series (independent of scipy)."""
    As = A / 2.0**squarings
    E = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ As / k
        E = E + term
    for _ in range(squarings):
        E = E @ E
    return E


class TestChain:
    def test_two_dof_eigenvalues(self):
        model = assemble_chain(2, 1.0, 1.0, 0.0)
        modal = modal_decompose(model, 2, 0.0)
        expected = [(3 - np.sqrt(5)) / 2, (3 + np.sqrt(5)) / 2]
        np.testing.assert_allclose(modal.omega_sq, expected, rtol=1e-12)
        np.testing.assert_allclose(modal.omega_sq, [0.381966, 2.618034], atol=1e-6)

    def test_sdof(self):
        m, k = 3.0, 12.0
        modal = modal_decompose(assemble_chain(1, m, k), 1)
        np.testing.assert_allclose(modal.omega_sq, [k / m])
        np.testing.assert_allclose(modal.mode_shapes, [[1 / np.sqrt(m)]])

    def test_benchmark_frequencies(self):
        modal = modal_decompose(assemble_chain(10, 200.0, 5e3, 0.02), 3)
        np.testing.assert_allclose(modal.frequencies_hz, [0.12, 0.35, 0.58], atol=0.006)

    def test_damping_ratios_are_modal(self):
        model = assemble_chain(10, 200.0, 5e3, 0.02)
        modal = modal_decompose(model, 10)
        Cm = modal.mode_shapes.T @ model.damping @ modal.mode_shapes
        np.testing.assert_allclose(np.diag(Cm), 2 * 0.02 * modal.omegas, rtol=1e-9)
        off = Cm - np.diag(np.diag(Cm))
        assert np.abs(off).max() < 1e-10 * np.abs(Cm).max()

    def test_tip_mass_lowers_frequency(self):
        f0 = modal_decompose(assemble_chain(10, 200.0, 5e3), 1).frequencies_hz[0]
        f1 = modal_decompose(assemble_chain(10, 200.0, 5e3, tip_mass=2000.0), 1).frequencies_hz[0]
        assert f1 < f0

    @pytest.mark.parametrize("args", [(0, 1.0, 1.0), (3, -1.0, 1.0), (3, 1.0, 0.0)])
    def test_invalid(self, args):
        with pytest.raises(StructuralError):
            assemble_chain(*args)

    def test_damping_ratio_out_of_range(self):
        with pytest.raises(StructuralError):
            assemble_chain(3, 1.0, 1.0, 1.2)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 12), m=st.floats(0.1, 1e4), k=st.floats(0.1, 1e6),
           tip=st.floats(0.0, 5e3))
    def test_mass_normalisation(self, n, m, k, tip):
        model = assemble_chain(n, m, k, tip_mass=tip)
        modal = modal_decompose(model, n)
        phi = modal.mode_shapes
        assert np.abs(phi.T @ model.mass @ phi - np.eye(n)).max() < 1e-8


class TestCantilever:
    EI, rhoA, L = 2.1e7, 80.0, 3.0

    def test_single_element_tip_deflection(self):
        beam = assemble_cantilever_beam(1, self.L, self.EI, self.rhoA, 0.2)
        P = 1234.0
        u = np.linalg.solve(beam.stiffness, [P, 0.0])
        expected = P * self.L**3 / (3 * self.EI)
        assert abs(u[0] - expected) / expected < 1e-10

    def test_stiffness_positive_definite(self):
        beam = assemble_cantilever_beam(5, 1.0, self.EI, self.rhoA, 0.2)
        assert np.linalg.eigvalsh(beam.stiffness).min() > 0

    def test_frequency_converges_from_above(self):
        total = 12.0
        exact = 1.875104068711961**2 / (2 * np.pi) * np.sqrt(self.EI / self.rhoA) / total**2
        freqs = []
        for n_e in (2, 4, 8):
            beam = assemble_cantilever_beam(n_e, total / n_e, self.EI, self.rhoA, 0.2)
            freqs.append(modal_decompose(beam, 1, 0.0).frequencies_hz[0])
        errs = np.array(freqs) - exact
        assert np.all(errs > 0)
        assert np.all(np.diff(errs) < 0)
        assert errs[-1] / exact < 1e-5

    def test_timoshenko_is_softer(self):
        eb = assemble_cantilever_beam(4, 1.0, self.EI, self.rhoA, 0.2)
        tb = assemble_cantilever_beam(4, 1.0, self.EI, self.rhoA, 0.2, shear_stiffness=5e7)
        f_eb = modal_decompose(eb, 1).frequencies_hz[0]
        f_tb = modal_decompose(tb, 1).frequencies_hz[0]
        assert f_tb < f_eb


class TestStrain:
    def _beam(self, n_e=3, L_e=1.5, h=0.25):
        return assemble_cantilever_beam(n_e, L_e, 1e6, 50.0, h)

    def test_midpoint_of_end_translation(self):
        beam = self._beam(n_e=1, L_e=2.0)
        # clamped node 0, v2 = delta, theta2 = 0
        T = strain_matrix(beam, [(0, 0.5)])
        assert abs(T @ np.array([0.7, 0.0])).item() < 1e-15

    def test_rigid_translation(self):
        beam = self._beam()
        e = beam.elements[1]
        u = np.zeros(beam.n_dofs)
        u[e.dofs[0]] = u[e.dofs[2]] = 0.01
        T = strain_matrix(beam, [(1, xi) for xi in np.linspace(0, 1, 11)])
        assert np.abs(T @ u).max() == 0.0

    def test_rigid_rotation(self):
        beam = self._beam()
        L = beam.elements[0].length
        theta = 0.003
        x = L * np.arange(1, 4)
        u = np.zeros(beam.n_dofs)
        u[0::2] = theta * x
        u[1::2] = theta
        # element 0 is clamped at its root, so only the free elements are rigid
        T = strain_matrix(beam, [(e, xi) for e in (1, 2) for xi in (0.0, 0.3, 1.0)])
        assert np.abs(T @ u).max() < 1e-15

    @pytest.mark.parametrize("kappa", [1e-4, -2.5e-3, 0.7])
    def test_constant_curvature(self, kappa):
        beam = self._beam()
        h = beam.elements[0].half_depth
        x = beam.elements[0].length * np.arange(1, 4)
        u = np.zeros(beam.n_dofs)
        u[0::2] = 0.5 * kappa * x**2
        u[1::2] = kappa * x
        T = strain_matrix(beam, [(e, xi) for e in range(3) for xi in np.linspace(0, 1, 7)])
        eps = T @ u
        assert np.abs(eps - (-h * kappa)).max() < 1e-12 * max(1.0, abs(h * kappa))

    def test_root_strain_static_tip_load(self):
        n_e, L_e, EI, h, P = 4, 2.0, 3e6, 0.3, 500.0
        beam = assemble_cantilever_beam(n_e, L_e, EI, 40.0, h)
        f = np.zeros(beam.n_dofs)
        f[-2] = P
        u = np.linalg.solve(beam.stiffness, f)
        eps_root = (strain_matrix(beam, [(0, 0.0)]) @ u).item()
        expected = -h * P * n_e * L_e / EI
        assert abs(eps_root - expected) / abs(expected) < 1e-10

    def test_no_elements(self):
        with pytest.raises(StructuralError):
            strain_matrix(assemble_chain(3, 1.0, 1.0), [(0, 0.5)])

    def test_bad_position(self):
        with pytest.raises(StructuralError):
            strain_matrix(self._beam(), [(0, 1.5)])


class TestStateSpace:
    def test_sdof_matrix(self):
        w = 2 * np.pi * 0.2
        modal = ModalModel([[1.0]], [w**2], [0.05])
        A, B = to_continuous_ss(modal)
        np.testing.assert_allclose(A, [[0, 1], [-1.5791, -0.12566]], atol=5e-5)
        np.testing.assert_array_equal(B, [[0.0], [1.0]])

    def test_undamped_eigenvalues_imaginary(self):
        modal = ModalModel([[1.0]], [4.0], [0.0])
        ev = np.linalg.eigvals(to_continuous_ss(modal)[0])
        np.testing.assert_allclose(ev.real, 0.0, atol=1e-14)
        np.testing.assert_allclose(np.sort(ev.imag), [-2.0, 2.0])

    def test_damped_eigenvalues_stable(self):
        modal = modal_decompose(assemble_chain(10, 200.0, 5e3, 0.02), 5)
        assert np.linalg.eigvals(to_continuous_ss(modal)[0]).real.max() < 0

    def test_zoh_zero_matrix(self):
        A, B = discretize_zoh(np.zeros((1, 1)), np.ones((1, 1)), 0.25)
        np.testing.assert_allclose(A, [[1.0]])
        np.testing.assert_allclose(B, [[0.25]], rtol=1e-14)

    def test_zoh_undamped_det_one(self):
        A_c = np.array([[0.0, 1.0], [-9.0, 0.0]])
        A, _ = discretize_zoh(A_c, np.array([[0.0], [1.0]]), 0.013)
        assert abs(np.linalg.det(A) - 1.0) < 1e-13

    def test_zoh_against_taylor_oracle(self):
        A_c = np.array([[0.0, 1.0], [-(2 * np.pi) ** 2, -2 * 0.05 * 2 * np.pi]])
        B_c = np.array([[0.0], [1.0]])
        A, B = discretize_zoh(A_c, B_c, 0.01)
        np.testing.assert_allclose(A, _expm_taylor(A_c * 0.01), atol=1e-12)
        blk = np.zeros((3, 3))
        blk[:2, :2], blk[:2, 2:] = A_c, B_c
        np.testing.assert_allclose(B, _expm_taylor(blk * 0.01)[:2, 2:], atol=1e-12)

    def test_zoh_semigroup(self):
        modal = modal_decompose(assemble_chain(10, 200.0, 5e3, 0.02), 3)
        A_c, B_c = to_continuous_ss(modal)
        A1, _ = discretize_zoh(A_c, B_c, 0.013)
        A2, _ = discretize_zoh(A_c, B_c, 0.029)
        A12, _ = discretize_zoh(A_c, B_c, 0.042)
        assert np.abs(A1 @ A2 - A12).max() < 1e-10

    def test_singular_uses_block_path(self):
        # rigid-body mode: omega = 0 makes A_c singular
        A_c = np.array([[0.0, 1.0], [0.0, 0.0]])
        A, B = discretize_zoh(A_c, np.array([[0.0], [1.0]]), 0.5)
        np.testing.assert_allclose(A, [[1.0, 0.5], [0.0, 1.0]])
        np.testing.assert_allclose(B, [[0.125], [0.5]])

    def test_bad_step(self):
        with pytest.raises(ValueError):
            discretize_zoh(np.eye(1), np.eye(1), 0.0)


class TestMeasurement:
    def test_acceleration_row(self):
        model = assemble_chain(10, 200.0, 5e3, 0.02)
        modal = modal_decompose(model, 3)
        meas = build_measurement(model, modal, [Sensor("acceleration", dof=4)])
        phi = modal.mode_shapes
        np.testing.assert_allclose(meas.output_matrix[0, :3], -phi[4] * modal.omega_sq)
        np.testing.assert_allclose(meas.output_matrix[0, 3:], -phi[4] * modal.gamma)
        np.testing.assert_allclose(meas.feedthrough[0], phi[4])

    def test_benchmark_shape(self):
        model = assemble_chain(10, 200.0, 5e3, 0.02)
        modal = modal_decompose(model, 3)
        meas = build_measurement(model, modal, [Sensor("acceleration", dof=i) for i in range(10)])
        assert meas.n_outputs == 10
        assert meas.feedthrough.shape == (10, 3)
        assert meas.labels[0] == "a_u1"

    def test_strain_only_has_no_feedthrough(self):
        beam = assemble_cantilever_beam(4, 1.0, 1e6, 50.0, 0.2, 0.01)
        modal = modal_decompose(beam, 3, 0.01)
        meas = build_measurement(beam, modal, [Sensor("strain", element=0, position=0.0),
                                               Sensor("strain", element=2)])
        assert np.all(meas.feedthrough == 0.0)
        np.testing.assert_allclose(meas.output_matrix[:, :3], meas.strain_transform @ modal.mode_shapes)

    def test_displacement_row(self):
        model = assemble_chain(4, 1.0, 1.0, 0.02)
        modal = modal_decompose(model, 2)
        meas = build_measurement(model, modal, [Sensor("displacement", dof=2)])
        np.testing.assert_allclose(meas.output_matrix[0, :2], modal.mode_shapes[2])
        assert np.all(meas.output_matrix[0, 2:] == 0)

    def test_errors(self):
        model = assemble_chain(4, 1.0, 1.0)
        modal = modal_decompose(model, 2)
        with pytest.raises(StructuralError):
            build_measurement(model, modal, [])
        with pytest.raises(StructuralError):
            build_measurement(model, modal, [Sensor("acceleration", dof=9)])
        with pytest.raises(StructuralError):
            Sensor("strain")
        with pytest.raises(StructuralError):
            Sensor("velocity", dof=0)


class TestMac:
    def test_identical_and_orthogonal(self):
        assert mac([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
        assert mac([1, 0], [0, 1]) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(vec=st.lists(st.floats(-10, 10), min_size=2, max_size=8),
           c=st.floats(0.01, 100.0), sign=st.sampled_from([-1.0, 1.0]))
    def test_scale_and_sign_invariance(self, vec, c, sign):
        a = np.array(vec)
        if np.linalg.norm(a) < 1e-3:
            return
        b = np.cos(np.arange(a.size)) + 0.1
        assert mac(a, sign * c * a) == pytest.approx(1.0, abs=1e-12)
        assert mac(a, b) == pytest.approx(mac(sign * c * a, b), rel=1e-10, abs=1e-14)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            mac([0, 0], [1, 0])

    def test_eigenvectors_mac_identity(self):
        model = assemble_chain(6, 2.0, 10.0)
        phi = modal_decompose(model, 6).mode_shapes
        w2, V = linalg.eigh(model.stiffness, model.mass)
        for j in range(6):
            assert mac(phi[:, j], V[:, j]) == pytest.approx(1.0, abs=1e-12)
