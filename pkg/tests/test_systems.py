"""Closed-form benchmark systems and the trajectory generator."""

import dataclasses

import numpy as np
import pytest

from hamfit.core import DynamicsClass
from hamfit.odeint import IntegrationConfig, integrate
from hamfit.systems import (
    ConstantForce,
    GenerationConfig,
    GenerationError,
    LinearRamp,
    SineProduct,
    SystemSpec,
    forcing_value,
    generate_dataset,
    preset,
    preset_generation,
    true_grad_hamiltonian,
    true_hamiltonian,
    true_vector_field,
)

ALL_NAMES = ("P", "S", "HH", "DP", "DS", "UD", "WP", "FS", "DE")


class TestKnownValues:
    def test_pendulum_rest_energy(self):
        # hanging at rest: H = -m g l
        assert true_hamiltonian(preset("P"), np.array([0.0, 0.0])) == pytest.approx(-9.81)

    def test_spring_unit_displacement(self):
        assert true_hamiltonian(preset("S"), np.array([1.0, 0.0])) == pytest.approx(0.5)

    def test_henon_heiles_sixth(self):
        x = np.array([0.0, 1.0, 0.0, 0.0])
        assert true_hamiltonian(preset("HH"), x) == pytest.approx(1.0 / 6.0)

    def test_duffing_double_well(self):
        # alpha = -1, beta = 1: minima at q = +-1 with H = -1/4
        spec = preset("UD")
        assert true_hamiltonian(spec, np.array([1.0, 0.0])) == pytest.approx(-0.25)
        assert true_hamiltonian(spec, np.array([-1.0, 0.0])) == pytest.approx(-0.25)

    def test_damped_spring_field(self):
        f = true_vector_field(preset("DS"), np.array([1.0, 0.0]), t=3.7)
        np.testing.assert_allclose(f, [0.0, -1.0], atol=1e-15)

    def test_windy_pendulum_field_origin(self):
        f = true_vector_field(preset("WP"), np.array([0.0, 0.0]), t=2.0)
        np.testing.assert_allclose(f, [0.0, 0.2], atol=1e-15)


class TestForcings:
    def test_linear_ramp(self):
        assert forcing_value(LinearRamp(v=0.1), 2.0) == pytest.approx(0.2)

    def test_sine_product(self):
        f = forcing_value(SineProduct(F0=0.1, omega=1.0), 0.3)
        assert f == pytest.approx(0.1 * np.sin(0.3) * np.sin(0.6))

    def test_constant(self):
        assert forcing_value(ConstantForce(F_ext=0.39), 123.0) == pytest.approx(0.39)

    def test_vectorized_over_time(self):
        t = np.linspace(0.0, 1.0, 5)
        out = forcing_value(SineProduct(F0=2.0, omega=0.5), t)
        assert out.shape == t.shape


class TestGradients:
    @pytest.mark.parametrize("name", ALL_NAMES)
    def test_grad_matches_finite_differences(self, name):
        spec = preset(name)
        rng = np.random.default_rng(11)
        eps = 1e-6
        for _ in range(10):
            x = rng.normal(size=2 * spec.d)
            grad = true_grad_hamiltonian(spec, x)
            for k in range(2 * spec.d):
                step = np.zeros(2 * spec.d)
                step[k] = eps
                fd = (
                    true_hamiltonian(spec, x + step) - true_hamiltonian(spec, x - step)
                ) / (2 * eps)
                assert abs(fd - grad[k]) / max(abs(fd), 1.0) < 1e-6

    @pytest.mark.parametrize("name", ALL_NAMES)
    def test_field_is_structure_times_gradient(self, name):
        # qdot = dH/dp, pdot = -dH/dq - gamma dH/dp + F(t) on channel 0
        spec = preset(name)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(7, 2 * spec.d))
        t = 1.3
        grad = true_grad_hamiltonian(spec, x)
        d = spec.d
        f = true_vector_field(spec, x, t)
        np.testing.assert_allclose(f[:, :d], grad[:, d:], atol=1e-14)
        expect_p = -grad[:, :d]
        if spec.dynamics_class.has_dissipation:
            expect_p = expect_p - spec.constants["gamma"] * grad[:, d:]
        if spec.forcing is not None:
            expect_p = expect_p.copy()
            expect_p[:, 0] += forcing_value(spec.forcing, t)
        np.testing.assert_allclose(f[:, d:], expect_p, atol=1e-14)


class TestFlows:
    @pytest.mark.parametrize("name", ("P", "S", "HH"))
    def test_conservative_energy_drift(self, name):
        spec = preset(name)
        x0 = np.full(2 * spec.d, 0.2)
        times = np.linspace(0.0, 10.0, 101)
        out = integrate(
            lambda x, t: true_vector_field(spec, x, t),
            x0,
            times,
            IntegrationConfig(substeps=10),
        )
        h = true_hamiltonian(spec, out)
        drift = np.max(np.abs(h - h[0])) / max(abs(h[0]), 1.0)
        assert drift < 1e-6

    @pytest.mark.parametrize("name", ("DP", "DS", "UD"))
    def test_dissipative_energy_never_increases(self, name):
        spec = preset(name)
        x0 = np.array([1.0, 0.5])
        times = np.linspace(0.0, 10.0, 201)
        out = integrate(
            lambda x, t: true_vector_field(spec, x, t),
            x0,
            times,
            IntegrationConfig(substeps=10),
        )
        h = true_hamiltonian(spec, out)
        assert np.all(np.diff(h) <= 1e-10)


class TestSpecValidation:
    def test_gamma_required_for_dissipative(self):
        with pytest.raises(ValueError, match="gamma"):
            SystemSpec("DP", DynamicsClass.DISSIPATIVE, 1, {"m": 1.0, "g": 9.81, "l": 1.0})

    def test_gamma_forbidden_for_conservative(self):
        with pytest.raises(ValueError, match="gamma"):
            SystemSpec(
                "P", DynamicsClass.CONSERVATIVE, 1, {"m": 1.0, "g": 9.81, "l": 1.0, "gamma": 0.1}
            )

    def test_forcing_only_for_port(self):
        with pytest.raises(ValueError, match="forcing"):
            SystemSpec(
                "DP",
                DynamicsClass.DISSIPATIVE,
                1,
                {"m": 1.0, "g": 9.81, "l": 1.0, "gamma": 0.1},
                forcing=LinearRamp(0.1),
            )

    def test_class_must_match_name(self):
        with pytest.raises(ValueError):
            SystemSpec("P", DynamicsClass.DISSIPATIVE, 1, {"m": 1.0, "g": 9.81, "l": 1.0})

    def test_hh_dimension(self):
        with pytest.raises(ValueError, match="d = 2"):
            SystemSpec("HH", DynamicsClass.CONSERVATIVE, 1, {})


class TestPresets:
    def test_all_nine_exist(self):
        for name in ALL_NAMES:
            spec = preset(name)
            assert spec.name == name

    def test_long_names_resolve(self):
        assert preset("damped_pendulum").name == "DP"
        assert preset("henon_heiles").name == "HH"

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown system"):
            preset("XX")

    def test_pinned_constants(self):
        dp = preset("DP")
        assert dp.constants["gamma"] == 0.1
        assert dp.constants["g"] == 9.81
        assert preset("UD").constants["gamma"] == 0.3
        assert preset("DE").forcing == ConstantForce(F_ext=0.39)
        assert preset("WP").forcing == LinearRamp(v=0.1)
        assert preset("FS").forcing == SineProduct(F0=0.1, omega=1.0)

    def test_generation_noise_defaults(self):
        assert preset_generation("WP").noise_sigma == 0.01
        assert preset_generation("DP").noise_sigma == 0.1
        gen = preset_generation("DP")
        assert gen.trajectories == 100 and gen.steps == 100 and gen.t_end == 10.0


class TestGeneration:
    def small(self, name="DP", **kw):
        base = dataclasses.replace(preset_generation(name), trajectories=4, seed=5)
        return dataclasses.replace(base, **kw)

    def test_shapes_and_metadata(self):
        ds = generate_dataset(preset("DP"), self.small())
        assert ds.states.shape == (4, 100, 2)
        assert ds.dynamics_class is DynamicsClass.DISSIPATIVE
        assert ds.system_name == "DP"
        assert ds.noise_sigma_true == 0.1
        assert ds.seed == 5
        np.testing.assert_allclose(ds.times, np.linspace(0.0, 10.0, 100))

    def test_deterministic(self):
        a = generate_dataset(preset("DP"), self.small())
        b = generate_dataset(preset("DP"), self.small())
        np.testing.assert_array_equal(a.states, b.states)

    def test_trajectory_streams_are_prefix_stable(self):
        # adding trajectories must not change earlier ones
        few = generate_dataset(preset("DP"), self.small(trajectories=3))
        more = generate_dataset(preset("DP"), self.small(trajectories=6))
        np.testing.assert_array_equal(more.states[:3], few.states)

    def test_zero_noise_lies_on_true_flow(self):
        ds = generate_dataset(preset("DS"), self.small("DS", noise_sigma=0.0))
        spec = preset("DS")
        for i in range(ds.n_trajectories):
            ref = integrate(
                lambda x, t: true_vector_field(spec, x, t),
                ds.states[i, 0],
                ds.times,
                IntegrationConfig(substeps=10),
            )
            np.testing.assert_array_equal(ds.states[i], ref)

    def test_noise_level_scales(self):
        quiet = generate_dataset(preset("S"), self.small("S", noise_sigma=0.0))
        loud = generate_dataset(preset("S"), self.small("S", noise_sigma=0.1))
        resid = loud.states - quiet.states
        assert 0.05 < resid.std() < 0.2

    def test_empty_generation(self):
        ds = generate_dataset(preset("P"), self.small("P", trajectories=0))
        assert ds.n_trajectories == 0 and ds.d == 1

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_raises_generation_error(self):
        # Henon-Heiles escapes for energetic starts; the error says which rows
        gen = self.small("HH", trajectories=8, init_scale=2.0)
        with pytest.raises(GenerationError, match="diverged"):
            generate_dataset(preset("HH"), gen)

    def test_henon_heiles_bounded_at_small_scale(self):
        ds = generate_dataset(preset("HH"), self.small("HH", init_scale=0.1))
        assert np.all(np.isfinite(ds.states))
        assert ds.d == 2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GenerationConfig(steps=1)
        with pytest.raises(ValueError):
            GenerationConfig(noise_sigma=-1.0)
        with pytest.raises(ValueError):
            GenerationConfig(init_scale=0.0)
