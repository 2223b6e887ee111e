import numpy as np
import pytest

from schwingerflow import gauge
from schwingerflow import tensor as T
from schwingerflow.errors import ShapeError
from schwingerflow.tensor import TWO_PI, Tensor

from conftest import grad_check


def circ_dist(a, b):
    """Pointwise distance on the circle."""
    d = np.mod(np.asarray(a) - np.asarray(b), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def zero_links(batch, L):
    return gauge.LinkField(Tensor(np.zeros((batch, 2, L, L))))


class TestPlaquettes:
    def test_all_links_zero_gives_zero_plaquettes(self):
        p = gauge.plaquettes(zero_links(2, 4)).theta_P
        np.testing.assert_array_equal(p.data, np.zeros((2, 4, 4)))

    def test_pure_gauge_configuration_has_zero_plaquettes(self, rng):
        L = 6
        omega = rng.uniform(0, TWO_PI, size=(3, L, L))
        theta = np.zeros((3, 2, L, L))
        for mu in range(2):
            theta[:, mu] = omega - np.roll(omega, -1, axis=1 + mu)
        p = gauge.plaquettes(gauge.LinkField(Tensor(theta))).theta_P.data
        assert np.max(circ_dist(p, 0.0)) < 1e-12

    def test_plaquette_sum_telescopes_to_zero_mod_2pi(self, rng):
        U = gauge.random_links(2, 4, rng)
        total = gauge.plaquettes(U).theta_P.data.sum(axis=(1, 2))
        assert np.max(circ_dist(total, 0.0)) < 1e-10

    def test_cyclic_shift_covariance(self, rng):
        U = gauge.random_links(1, 6, rng)
        shifted = gauge.LinkField(Tensor(np.roll(U.theta.data, 2, axis=2)))
        p = gauge.plaquettes(U).theta_P.data
        ps = gauge.plaquettes(shifted).theta_P.data
        np.testing.assert_allclose(np.roll(p, 2, axis=1), ps, atol=1e-12)


class TestWilsonLoops:
    def test_all_links_zero_gives_zero_loops(self):
        w1, w2 = gauge.wilson_loops_2x1(zero_links(1, 4))
        np.testing.assert_array_equal(w1.data, np.zeros((1, 4, 4)))
        np.testing.assert_array_equal(w2.data, np.zeros((1, 4, 4)))

    def test_loops_equal_sum_of_constituent_plaquettes(self, rng):
        U = gauge.random_links(2, 6, rng)
        q = gauge.plaquette_angle(U).data
        w_mu, w_nu = gauge.wilson_loops_2x1(U)
        # default orientation (mu, nu) = (1, 0)
        assert np.max(circ_dist(w_mu.data, q + np.roll(q, -1, axis=2))) < 1e-10
        assert np.max(circ_dist(w_nu.data, q + np.roll(q, -1, axis=1))) < 1e-10

    def test_gauge_transformation_leaves_loops_invariant(self, rng):
        U = gauge.random_links(2, 6, rng)
        omega = rng.uniform(0, TWO_PI, size=(2, 6, 6))
        Ut = gauge.gauge_transform(U, omega)
        for a, b in zip(gauge.wilson_loops_2x1(U), gauge.wilson_loops_2x1(Ut)):
            assert np.max(circ_dist(a.data, b.data)) < 1e-10


class TestGaugeAction:
    def test_zero_links_beta2_L4(self):
        act = gauge.gauge_action(zero_links(3, 4), beta=2.0)
        np.testing.assert_allclose(act.data, np.full(3, -32.0), rtol=1e-14)

    def test_beta_zero_gives_zero(self, rng):
        act = gauge.gauge_action(gauge.random_links(2, 4, rng), beta=0.0)
        np.testing.assert_array_equal(act.data, np.zeros(2))

    def test_gradient_vs_finite_difference(self, rng):
        theta = T.parameter(rng.uniform(0, TWO_PI, size=(1, 2, 4, 4)))

        def loss():
            return gauge.gauge_action(gauge.LinkField(theta), beta=2.0).sum()

        worst = grad_check(loss, [theta], tol=1e-6)
        assert worst < 1e-6

    def test_invariant_under_gauge_transform(self, rng):
        U = gauge.random_links(4, 6, rng)
        omega = rng.uniform(0, TWO_PI, size=(4, 6, 6))
        a = gauge.gauge_action(U, 2.0).data
        b = gauge.gauge_action(gauge.gauge_transform(U, omega), 2.0).data
        np.testing.assert_allclose(a, b, atol=1e-10)


class TestGaugeTransform:
    def test_constant_omega_is_identity(self, rng):
        U = gauge.random_links(2, 4, rng)
        Ut = gauge.gauge_transform(U, np.full((2, 4, 4), 1.234))
        assert np.max(circ_dist(U.theta.data, Ut.theta.data)) < 1e-12

    def test_plaquettes_unchanged_elementwise(self, rng):
        U = gauge.random_links(2, 6, rng)
        omega = rng.uniform(0, TWO_PI, size=(2, 6, 6))
        p0 = gauge.plaquettes(U).theta_P.data
        p1 = gauge.plaquettes(gauge.gauge_transform(U, omega)).theta_P.data
        assert np.max(circ_dist(p0, p1)) < 1e-10

    def test_shape_validation(self, rng):
        U = gauge.random_links(2, 4, rng)
        with pytest.raises(ShapeError):
            gauge.gauge_transform(U, np.zeros((2, 3, 3)))


class TestLinkFieldBasics:
    def test_canonicalization_on_creation(self):
        theta = np.array([[-0.1, 7.0], [2.0, -9.0]]).reshape(1, 2, 1, 2)
        with pytest.raises(ShapeError):
            gauge.LinkField(Tensor(theta))  # non-square

    def test_angles_in_range(self, rng):
        theta = rng.uniform(-30, 30, size=(2, 2, 4, 4))
        U = gauge.LinkField(Tensor(theta))
        assert np.all((U.theta.data >= 0) & (U.theta.data < TWO_PI))

    def test_save_load_roundtrip(self, tmp_path, rng):
        U = gauge.random_links(3, 4, rng)
        path = tmp_path / "links.u1lf"
        gauge.save_links(path, U)
        V = gauge.load_links(path)
        assert V.L == 4 and V.batch == 3
        np.testing.assert_array_equal(U.theta.data, V.theta.data)

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.u1lf"
        path.write_bytes(b"XXXX\x04\x00\x00\x00" + b"\x00" * 256)
        with pytest.raises(ValueError):
            gauge.load_links(path)
