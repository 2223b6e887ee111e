import numpy as np
import pytest

from schwingerflow import flow, gauge
from schwingerflow import tensor as T
from schwingerflow.errors import DomainError
from schwingerflow.gauge import LinkField
from schwingerflow.tensor import TWO_PI, Tensor

from conftest import rel_err
from test_gauge import circ_dist


def small_flow(L=4, n_layers=8, hidden=8, n_knots=4, dtype="double", seed=3):
    rng = np.random.default_rng(seed)
    return flow.build_flow(L, n_layers=n_layers, n_knots=n_knots, hidden=hidden,
                           dilations=(1, 1, 1), rng=rng, dtype=dtype)


def randomize(model, rng, scale=1.0):
    """Non-trivial random model with activations kept O(1): weights get
    fan-in-scaled noise, biases small noise."""
    for name, p in model.params.named():
        if name.endswith("weight") and p.ndim == 4:
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            sigma = scale / np.sqrt(fan_in)
        else:
            sigma = 0.1 * scale
        p.data = (sigma * rng.normal(size=p.shape)).astype(p.data.dtype)
    return model


def random_spline(batch, L, n_knots, rng, scale=1.0, dtype="double"):
    raw = Tensor((scale * rng.normal(size=(batch, 3 * n_knots - 1, L, L))).astype(
        T.resolve_dtype(dtype)))
    return flow.CircularSpline.from_raw(raw, n_knots)


class TestPrior:
    def test_log_prob_closed_form(self, rng):
        prior = flow.UniformLinkPrior(4, dtype="double")
        z, lp = prior.sample(3, rng)
        np.testing.assert_allclose(lp.data, np.full(3, -32 * np.log(TWO_PI)),
                                   rtol=1e-14)

    def test_empirical_cos_mean_within_clt_bound(self):
        prior = flow.UniformLinkPrior(4, dtype="double")
        z, _ = prior.sample(31250, np.random.default_rng(11))  # 1e6 angles
        m = np.cos(z.theta.data).mean()
        n = z.theta.data.size
        assert abs(m) < 3 * np.sqrt(0.5 / n)

    def test_fixed_seed_bitwise_reproducible(self):
        prior = flow.UniformLinkPrior(4)
        z1, _ = prior.sample(2, np.random.default_rng(42))
        z2, _ = prior.sample(2, np.random.default_rng(42))
        np.testing.assert_array_equal(z1.theta.data, z2.theta.data)


class TestCircularSpline:
    def test_zero_raw_gives_identity_map(self, rng):
        params = random_spline(2, 4, 8, rng, scale=0.0)
        x = Tensor(rng.uniform(0, TWO_PI, size=(2, 4, 4)))
        y, logd = flow.spline_forward(x, params)
        np.testing.assert_allclose(y.data, x.data, atol=1e-12)
        np.testing.assert_allclose(logd.data, 0.0, atol=1e-12)

    def test_roundtrip_random_params(self, rng):
        params = random_spline(3, 4, 8, rng)
        x = Tensor(rng.uniform(0, TWO_PI, size=(3, 4, 4)))
        y, logd = flow.spline_forward(x, params)
        x2, logd_inv = flow.spline_inverse(y, params)
        assert np.max(circ_dist(x2.data, x.data)) < 1e-10
        np.testing.assert_allclose(logd_inv.data, -logd.data, atol=1e-9)

    def test_roundtrip_single_precision(self, rng):
        params = random_spline(2, 4, 8, rng, dtype="single")
        x = Tensor(rng.uniform(0, TWO_PI, size=(2, 4, 4)).astype(np.float32))
        y, _ = flow.spline_forward(x, params)
        x2, _ = flow.spline_inverse(y, params)
        # flat spline regions amplify float32 rounding by 1/f'
        assert np.max(circ_dist(x2.data, x.data)) < 1e-4

    def test_log_deriv_matches_finite_difference_of_forward(self, rng):
        params = random_spline(1, 2, 8, rng)
        x0 = rng.uniform(0.3, TWO_PI - 0.3, size=(1, 2, 2))
        h = 1e-6

        def fwd(xv):
            with T.no_grad():
                y, _ = flow.spline_forward(Tensor(xv), params)
            return y.data

        fd = (fwd(x0 + h) - fwd(x0 - h)) / (2 * h)
        with T.no_grad():
            _, logd = flow.spline_forward(Tensor(x0), params)
        assert rel_err(np.exp(logd.data), fd) < 1e-5

    def test_gradient_of_logdet_flows_to_raw_params(self, rng):
        from conftest import grad_check
        raw = T.parameter(0.5 * rng.normal(size=(1, 23, 2, 2)))
        x = Tensor(rng.uniform(0.2, TWO_PI - 0.2, size=(1, 2, 2)))

        def loss():
            params = flow.CircularSpline.from_raw(raw, 8)
            y, logd = flow.spline_forward(x, params)
            return (y + logd).sum()

        grad_check(loss, [raw], tol=1e-5)

    def test_monotone_per_site(self, rng):
        # same parameter set replicated over the batch, sorted inputs
        n = 64
        raw = rng.normal(size=(1, 23, 1, 1))
        params = flow.CircularSpline.from_raw(
            Tensor(np.repeat(raw, n, axis=0)), 8
        )
        xs = np.sort(rng.uniform(0, TWO_PI, size=n))
        with T.no_grad():
            y, _ = flow.spline_forward(Tensor(xs[:, None, None]), params)
        assert np.all(np.diff(y.data[:, 0, 0]) > 0)

    def test_domain_error(self, rng):
        params = random_spline(1, 2, 4, rng)
        with pytest.raises(DomainError):
            flow.spline_forward(Tensor(np.full((1, 2, 2), 7.0)), params)

    def test_inverse_of_identity_is_identity(self, rng):
        params = random_spline(1, 4, 8, rng, scale=0.0)
        y = Tensor(rng.uniform(0, TWO_PI, size=(1, 4, 4)))
        x, logd_inv = flow.spline_inverse(y, params)
        np.testing.assert_allclose(x.data, y.data, atol=1e-12)
        np.testing.assert_allclose(logd_inv.data, 0.0, atol=1e-12)


class TestMasks:
    def test_cycle_partitions_links(self):
        masks = flow.standard_masks(8, 16)
        for start in (0, 8):
            total = np.zeros((2, 8, 8), dtype=int)
            for m in masks[start:start + 8]:
                total += m.active_links
            np.testing.assert_array_equal(total, np.ones((2, 8, 8), dtype=int))

    def test_requires_multiple_of_four(self):
        with pytest.raises(ValueError):
            flow.standard_masks(6, 8)
        with pytest.raises(ValueError):
            flow.standard_masks(8, 12)

    def test_frozen_features_exclude_active_links(self):
        # brute force: a frozen plaquette at x must not touch any active link
        for m in flow.standard_masks(8, 8):
            L = 8
            mu, nu = m.mu, m.nu
            for x0 in range(L):
                for x1 in range(L):
                    if not m.frozen_plaq[x0, x1]:
                        continue
                    x = np.array([x0, x1])
                    emu = np.eye(2, dtype=int)[mu]
                    enu = np.eye(2, dtype=int)[nu]
                    touched = [(mu, x), (nu, (x + emu) % L),
                               (mu, (x + enu) % L), (nu, x)]
                    for d, site in touched:
                        assert not m.active_links[d, site[0], site[1]]

    def test_each_active_plaquette_has_one_active_link(self):
        for m in flow.standard_masks(4, 8):
            assert m.active_sites.sum() == 4  # L^2 / 4 active sites per layer


class TestCouplingLayer:
    def test_identity_at_zero_init(self, rng):
        model = small_flow(L=4)
        U = gauge.random_links(2, 4, rng)
        out, dlj = model.layers[0].forward(U)
        np.testing.assert_allclose(out.theta.data, U.theta.data, atol=1e-12)
        np.testing.assert_allclose(dlj.data, 0.0, atol=1e-12)

    def test_inactive_links_bitwise_unchanged(self, rng):
        model = randomize(small_flow(L=4), rng)
        layer = model.layers[0]
        U = gauge.random_links(2, 4, rng)
        out, _ = layer.forward(U)
        inactive = ~layer.masks.active_links
        np.testing.assert_array_equal(out.theta.data[:, inactive],
                                      U.theta.data[:, inactive])

    def test_gauge_equivariance(self, rng):
        model = randomize(small_flow(L=4), rng)
        layer = model.layers[3]
        U = gauge.random_links(2, 4, rng)
        omega = rng.uniform(0, TWO_PI, size=(2, 4, 4))
        a, dlj_a = layer.forward(gauge.gauge_transform(U, omega))
        b0, dlj_b = layer.forward(U)
        b = gauge.gauge_transform(b0, omega)
        assert np.max(circ_dist(a.theta.data, b.theta.data)) < 1e-10
        np.testing.assert_allclose(dlj_a.data, dlj_b.data, atol=1e-10)

    def test_layer_roundtrip(self, rng):
        model = randomize(small_flow(L=4), rng)
        layer = model.layers[5]
        U = gauge.random_links(3, 4, rng)
        V, dlj = layer.forward(U)
        W, dlj_inv = layer.reverse(V)
        assert np.max(circ_dist(W.theta.data, U.theta.data)) < 1e-10
        np.testing.assert_allclose(dlj_inv.data, -dlj.data, atol=1e-9)


class TestFlowModel:
    def test_identity_model_forward(self, rng):
        model = small_flow(L=4)
        z, lp = model.prior.sample(2, rng)
        phi, log_q = model.forward(z, lp)
        np.testing.assert_allclose(phi.theta.data, z.theta.data, atol=1e-11)
        np.testing.assert_allclose(log_q.data, lp.data, rtol=1e-12)

    def test_identity_model_reverse(self, rng):
        model = small_flow(L=4)
        U = gauge.random_links(2, 4, rng)
        z, log_q = model.reverse(U)
        np.testing.assert_allclose(z.theta.data, U.theta.data, atol=1e-11)

    def test_reverse_of_forward_is_identity(self, rng):
        model = randomize(small_flow(L=4), rng)
        z, lp = model.prior.sample(2, rng)
        phi, _ = model.forward(z, lp)
        z2, _ = model.reverse(phi)
        assert np.max(circ_dist(z2.theta.data, z.theta.data)) < 1e-8

    def test_forward_of_reverse_is_identity(self, rng):
        model = randomize(small_flow(L=4), rng)
        phi = gauge.random_links(2, 4, rng)
        z, _ = model.reverse(phi)
        phi2, _ = model.forward(z, model.prior.log_prob(z))
        assert np.max(circ_dist(phi2.theta.data, phi.theta.data)) < 1e-8

    def test_forward_and_reverse_log_q_agree(self, rng):
        model = randomize(small_flow(L=4), rng)
        z, lp = model.prior.sample(3, rng)
        phi, log_q_fwd = model.forward(z, lp)
        _, log_q_rev = model.reverse(phi)
        np.testing.assert_allclose(log_q_rev.data, log_q_fwd.data, atol=1e-8)

    def test_batch_permutation_equivariance(self, rng):
        model = randomize(small_flow(L=4), rng)
        z, lp = model.prior.sample(4, rng)
        perm = rng.permutation(4)
        zp = LinkField(Tensor(z.theta.data[perm]))
        phi, log_q = model.forward(z, lp)
        phi_p, log_q_p = model.forward(zp, Tensor(lp.data[perm]))
        np.testing.assert_array_equal(phi.theta.data[perm], phi_p.theta.data)
        np.testing.assert_array_equal(log_q.data[perm], log_q_p.data)

    def test_log_q_gauge_invariance(self, rng):
        model = randomize(small_flow(L=4), rng)
        phi = gauge.random_links(2, 4, rng)
        omega = rng.uniform(0, TWO_PI, size=(2, 4, 4))
        _, lq = model.reverse(phi)
        _, lq_t = model.reverse(gauge.gauge_transform(phi, omega))
        np.testing.assert_allclose(lq.data, lq_t.data, atol=1e-8)

    def test_reverse_graph_node_count_independent_of_L(self, rng):
        counts = []
        for L in (4, 8):
            model = randomize(small_flow(L=L), np.random.default_rng(1))
            phi = gauge.random_links(2, L, np.random.default_rng(2))
            _, log_q = model.reverse(phi)
            counts.append(T.graph_stats(log_q.sum()).node_count)
        assert counts[0] == counts[1]

    def test_parameter_names_follow_convention(self):
        model = small_flow(L=4, n_layers=8)
        names = [n for n, _ in model.params.named()]
        assert "coupling0.layer0.weight" in names
        assert "coupling7.layer2.bias" in names


class TestSingleLinkDensity:
    def make_single_link_model(self, rng, L=2, n_knots=8):
        active = np.zeros((L, L), dtype=bool)
        active[0, 0] = True
        masks = flow.MaskSet(0, 1, active)
        raw = T.parameter(
            (0.8 * rng.normal(size=(3 * n_knots - 1, L, L))).astype(np.float64)
        )
        layer = flow.CouplingLayer(masks, flow.ConstConditioner(raw), n_knots)
        return flow.FlowModel(L, [layer], flow.UniformLinkPrior(L, dtype="double"))

    def test_density_normalizes_by_quadrature(self, rng):
        L = 2
        model = self.make_single_link_model(rng, L=L)
        base = rng.uniform(0, TWO_PI, size=(1, 2, L, L))
        n = 512
        grid = np.linspace(0, TWO_PI, n, endpoint=False)
        theta = np.repeat(base, n, axis=0)
        theta[:, 0, 0, 0] = grid
        with T.no_grad():
            _, log_q = model.reverse(LinkField(Tensor(theta)))
        # q factorizes: (1/2pi)^7 over frozen links times q_a(theta | frozen)
        integral = np.mean(np.exp(log_q.data + 7 * np.log(TWO_PI))) * TWO_PI
        assert abs(integral - 1.0) < 1e-4

    def test_single_link_roundtrip(self, rng):
        model = self.make_single_link_model(rng)
        z, lp = model.prior.sample(4, rng)
        phi, lq = model.forward(z, lp)
        z2, lq2 = model.reverse(phi)
        assert np.max(circ_dist(z2.theta.data, z.theta.data)) < 1e-10
        np.testing.assert_allclose(lq2.data, lq.data, atol=1e-9)
