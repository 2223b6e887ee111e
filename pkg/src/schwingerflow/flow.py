"""Gauge-equivariant normalizing flow on U(1) link fields.

A model is a stack of coupling layers over a uniform prior on link angles.
Each layer transforms the plaquette angles anchored at a sparse set of
active sites through per-site circular rational-quadratic splines, then
updates the active link so its plaquette attains the transformed angle
(the plaquette angle is a unit-coefficient linear function of the active
link, so the update's Jacobian is exactly the spline derivative).

Spline parameters come from a conditioner network that sees only frozen
loop angles (plaquettes plus both 2x1-type rectangular loops) as
(cos, sin) channel pairs, masked to exclude any loop touching an active
link of the same layer; this makes every layer commute with gauge
transformations.

Mask schedule: with orientation (mu, nu) and offset k in {0,1,2,3}, a site
x is active when x_mu = k (mod 4) on even x_nu rows and x_mu = k+2 (mod 4)
on odd rows. Eight layers (four offsets for each orientation) touch every
link exactly once; the partition is validated at construction.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import DomainError, ShapeError
from .gauge import LinkField, loop_angles_2x1, plaquette_angle
from .tensor import TWO_PI, Tensor

# softplus(x + DERIV_SHIFT) equals 1 at x = 0, so zero logits give unit
# knot derivatives (identity spline)
DERIV_SHIFT = float(np.log(np.e - 1.0))


class UniformLinkPrior:
    """Independent uniform angles on [0, 2*pi); log density -2 L^2 log(2 pi)."""

    def __init__(self, L, dtype="single"):
        self.L = L
        self.dtype = T.resolve_dtype(dtype)

    def sample(self, batch, rng):
        theta = rng.uniform(0.0, TWO_PI, size=(batch, 2, self.L, self.L))
        z = LinkField(Tensor(theta.astype(self.dtype)))
        return z, self.log_prob(z)

    def log_prob(self, U: LinkField) -> Tensor:
        val = -2.0 * self.L * self.L * np.log(TWO_PI)
        return Tensor(np.full(U.batch, val, dtype=self.dtype))


# -- circular rational-quadratic splines --------------------------------------


class CircularSpline:
    """Per-site spline parameters: K bin widths/heights summing to 2*pi and
    K+1 positive knot derivatives with the periodic pair d_0 = d_K tied to 1."""

    def __init__(self, widths, heights, derivs, kx, ky):
        self.K = widths.shape[1]
        self.widths = widths
        self.heights = heights
        self.derivs = derivs    # [B, K+1, ...]
        self.kx = kx            # [B, K+1, ...] cumulative input knots, kx[0] = 0
        self.ky = ky

    @classmethod
    def from_raw(cls, raw: Tensor, n_knots: int):
        """Split conditioner output [B, 3K-1, ...] into K width logits,
        K height logits and K-1 interior derivative logits."""
        K = n_knots
        if raw.shape[1] != 3 * K - 1:
            raise ShapeError(
                f"spline expects {3 * K - 1} parameter channels, got {raw.shape[1]}"
            )
        widths = T.mul(TWO_PI, nn.softmax(raw[:, :K], axis=1))
        heights = T.mul(TWO_PI, nn.softmax(raw[:, K:2 * K], axis=1))
        interior = nn.softplus(raw[:, 2 * K:], shift=DERIV_SHIFT)
        edge = Tensor(np.ones((raw.shape[0], 1) + raw.shape[2:], dtype=raw.dtype))
        derivs = T.concat([edge, interior, edge], axis=1)
        zero = Tensor(np.zeros((raw.shape[0], 1) + raw.shape[2:], dtype=raw.dtype))
        kx = T.concat([zero, T.cumsum(widths, axis=1)], axis=1)
        ky = T.concat([zero, T.cumsum(heights, axis=1)], axis=1)
        return cls(widths, heights, derivs, kx, ky)


def _check_angle_domain(x, what):
    xd = x.data
    if np.any(xd < -1e-6) or np.any(xd >= TWO_PI + 1e-6):
        raise DomainError(f"{what}: input angle outside [0, 2*pi)")


def _bin_index(xd, knots_d):
    """Bin of each element: count of interior knots <= x, clamped to [0, K-1]."""
    return (xd[:, None] >= knots_d[:, 1:-1]).sum(axis=1)


def _gather_bin(arr: Tensor, idx) -> Tensor:
    return T.select(T.gather(arr, 1, idx[:, None]), 1, 0)


def _bin_params(params: CircularSpline, idx):
    w = _gather_bin(params.widths, idx)
    h = _gather_bin(params.heights, idx)
    d0 = _gather_bin(params.derivs, idx)
    d1 = _gather_bin(params.derivs, idx + 1)
    x0 = _gather_bin(params.kx, idx)
    y0 = _gather_bin(params.ky, idx)
    return w, h, d0, d1, x0, y0


def _log_derivative(s, d0, d1, xi, xi1m, den):
    poly = d1 * (xi * xi) + 2.0 * s * (xi * xi1m) + d0 * (xi1m * xi1m)
    return 2.0 * T.log(s) + T.log(poly) - 2.0 * T.log(den)


def spline_forward(theta: Tensor, params: CircularSpline):
    """Monotone circle map value and log of its derivative, elementwise."""
    _check_angle_domain(theta, "spline_forward")
    idx = _bin_index(theta.data, params.kx.data)
    w, h, d0, d1, x0, y0 = _bin_params(params, idx)
    s = h / w
    xi = (theta - x0) / w
    xi1m = 1.0 - xi
    a1 = d1 + d0 - 2.0 * s
    den = s + a1 * (xi * xi1m)
    y = y0 + h * (s * (xi * xi) + d0 * (xi * xi1m)) / den
    return T.wrap_angle(y), _log_derivative(s, d0, d1, xi, xi1m, den)


def spline_inverse(theta_out: Tensor, params: CircularSpline):
    """Exact inverse via the stable quadratic root; returns the pre-image and
    the log-derivative of the inverse (= -log_deriv at the pre-image)."""
    _check_angle_domain(theta_out, "spline_inverse")
    idx = _bin_index(theta_out.data, params.ky.data)
    w, h, d0, d1, x0, y0 = _bin_params(params, idx)
    s = h / w
    a1 = d1 + d0 - 2.0 * s
    t = theta_out - y0
    qa = h * (s - d0) + t * a1
    qb = h * d0 - t * a1
    qc = T.neg(s * t)
    xi = 2.0 * qc / (T.neg(qb) - T.sqrt(qb * qb - 4.0 * qa * qc))
    xi1m = 1.0 - xi
    x = x0 + xi * w
    den = s + a1 * (xi * xi1m)
    return T.wrap_angle(x), T.neg(_log_derivative(s, d0, d1, xi, xi1m, den))


# -- masks ---------------------------------------------------------------------

_MU, _NU = 0, 1
# links touched by each frozen feature, as (direction role, steps along mu,
# steps along nu) relative to the anchor site
_TOUCHED_PLAQ = ((_MU, 0, 0), (_NU, 1, 0), (_MU, 0, 1), (_NU, 0, 0))
_TOUCHED_LOOP_MU = ((_MU, 0, 0), (_MU, 1, 0), (_NU, 2, 0),
                    (_MU, 0, 1), (_MU, 1, 1), (_NU, 0, 0))
_TOUCHED_LOOP_NU = ((_MU, 0, 0), (_NU, 1, 0), (_NU, 1, 1),
                    (_MU, 0, 2), (_NU, 0, 1), (_NU, 0, 0))


class MaskSet:
    """Active sites/links of one layer plus the frozen-feature masks."""

    def __init__(self, mu, nu, active_sites):
        L = active_sites.shape[0]
        self.mu, self.nu = mu, nu
        self.active_sites = active_sites.astype(bool)
        links = np.zeros((2, L, L), dtype=bool)
        links[mu] = self.active_sites
        self.active_links = links
        self.frozen_plaq = self._feature_mask(_TOUCHED_PLAQ)
        self.frozen_loop_mu = self._feature_mask(_TOUCHED_LOOP_MU)
        self.frozen_loop_nu = self._feature_mask(_TOUCHED_LOOP_NU)
        self._check_non_interacting()

    def _roll_link(self, role, p, q):
        d = self.mu if role == _MU else self.nu
        arr = np.roll(self.active_links[d], -p, axis=self.mu)
        return np.roll(arr, -q, axis=self.nu)

    def _feature_mask(self, touched):
        ok = np.ones_like(self.active_sites)
        for role, p, q in touched:
            ok &= ~self._roll_link(role, p, q)
        return ok

    def _check_non_interacting(self):
        """Each active plaquette must contain exactly one active link (its own)."""
        count = np.zeros(self.active_sites.shape, dtype=int)
        for role, p, q in _TOUCHED_PLAQ:
            count += self._roll_link(role, p, q)
        if np.any(count[self.active_sites] != 1):
            raise ValueError("mask: active plaquettes share active links")


def standard_masks(L, n_layers):
    """Mask schedule: orientations (0,1) then (1,0), offsets k = 0..3 each,
    repeated in cycles of eight layers. Every link is active exactly once
    per cycle (validated)."""
    if L % 4 != 0:
        raise ValueError(f"standard mask schedule needs L divisible by 4, got {L}")
    if n_layers % 8 != 0:
        raise ValueError(f"number of layers must be a multiple of 8, got {n_layers}")
    coords = np.indices((L, L))
    masks = []
    for _ in range(n_layers // 8):
        for mu, nu in ((0, 1), (1, 0)):
            for k in range(4):
                offs = (k + 2 * (coords[nu] % 2)) % 4
                masks.append(MaskSet(mu, nu, coords[mu] % 4 == offs))
    for start in range(0, n_layers, 8):
        total = np.zeros((2, L, L), dtype=int)
        for m in masks[start:start + 8]:
            total += m.active_links
        if not np.all(total == 1):
            raise ValueError("mask cycle does not partition the links")
    return masks


# -- conditioners ---------------------------------------------------------------


class ConvConditioner:
    """Standard conditioner: three circular convolutions with LeakyReLU."""

    def __init__(self, layers, slope=0.01):
        self.layers = layers
        self.slope = slope

    def __call__(self, features):
        return nn.conditioner_forward(self.layers, features, self.slope)

    def named_parameters(self):
        for j, layer in enumerate(self.layers):
            yield f"layer{j}.weight", layer.weight
            yield f"layer{j}.bias", layer.bias


class ConstConditioner:
    """Learned per-site parameter field, independent of the features.

    Used by tiny models (L too small for 3x3 convolutions) and by tests
    that need a controllable parameter count.
    """

    def __init__(self, raw: Tensor):
        self.raw = raw

    def __call__(self, features):
        pad = Tensor(np.zeros((features.shape[0],) + self.raw.shape,
                              dtype=self.raw.dtype))
        return self.raw + pad

    def named_parameters(self):
        yield "raw", self.raw


# -- coupling layers -------------------------------------------------------------


class CouplingLayer:
    def __init__(self, masks: MaskSet, conditioner, n_knots=8):
        self.masks = masks
        self.conditioner = conditioner
        self.n_knots = n_knots
        dt = np.float64
        self._site_mask = masks.active_sites.astype(dt)
        self._fm = (masks.frozen_plaq.astype(dt),
                    masks.frozen_loop_mu.astype(dt),
                    masks.frozen_loop_nu.astype(dt))

    def _spline_params(self, U: LinkField):
        mu, nu = self.masks.mu, self.masks.nu
        q = plaquette_angle(U, mu, nu)
        wm, wn = loop_angles_2x1(U, mu, nu)
        fq, fm, fn = self._fm
        feats = T.stack(
            [T.cos(q) * fq, T.sin(q) * fq,
             T.cos(wm) * fm, T.sin(wm) * fm,
             T.cos(wn) * fn, T.sin(wn) * fn],
            axis=1,
        )
        raw = self.conditioner(feats)
        return CircularSpline.from_raw(raw, self.n_knots), T.wrap_angle(q)

    def _shift_links(self, U: LinkField, delta: Tensor) -> LinkField:
        """Add `delta` (masked to active sites) to the active-direction links."""
        masked = delta * self._site_mask
        zero = Tensor(np.zeros(masked.shape, dtype=masked.dtype))
        per_dir = [masked if mu == self.masks.mu else zero for mu in range(2)]
        return LinkField(U.theta + T.stack(per_dir, axis=1))

    def forward(self, U: LinkField):
        params, q = self._spline_params(U)
        q_new, logd = spline_forward(q, params)
        U_out = self._shift_links(U, q_new - q)
        delta_logj = T.sum_(logd * self._site_mask, axes=(1, 2))
        return U_out, delta_logj

    def reverse(self, U: LinkField):
        params, q_cur = self._spline_params(U)
        q_old, logd_inv = spline_inverse(q_cur, params)
        U_out = self._shift_links(U, q_old - q_cur)
        delta_logj_inv = T.sum_(logd_inv * self._site_mask, axes=(1, 2))
        return U_out, delta_logj_inv

    def named_parameters(self):
        return self.conditioner.named_parameters()


class FlowModel:
    """Ordered coupling layers over a uniform link prior."""

    def __init__(self, L, layers, prior: UniformLinkPrior):
        self.L = L
        self.layers = layers
        self.prior = prior
        self.params = nn.ParamRegistry()
        for i, layer in enumerate(layers):
            for name, p in layer.named_parameters():
                self.params.register(f"coupling{i}.{name}", p)

    def forward(self, z: LinkField, log_prob_z: Tensor):
        """phi = flow(z); log q(phi) = log q_pr(z) - sum of forward log-Jacobians."""
        U = z
        log_q = T.as_tensor(log_prob_z)
        for layer in self.layers:
            U, dlj = layer.forward(U)
            log_q = log_q - dlj
        return U, log_q

    def reverse(self, phi: LinkField):
        """z' = flow^{-1}(phi); log q(phi) = log q_pr(z') + sum of inverse
        log-Jacobians, rebuilt without touching the forward pass."""
        U = phi
        terms = []
        for layer in reversed(self.layers):
            U, dlj_inv = layer.reverse(U)
            terms.append(dlj_inv)
        log_q = self.prior.log_prob(U)
        for t in terms:
            log_q = log_q + t
        return U, log_q

    def sample(self, batch, rng):
        z, log_prob_z = self.prior.sample(batch, rng)
        return self.forward(z, log_prob_z)


def build_flow(L, n_layers=48, n_knots=8, hidden=64, dilations=(1, 2, 3),
               rng=None, dtype="single", slope=0.01) -> FlowModel:
    """Standard architecture: masked schedule plus three-conv conditioners
    (final convolution zero-initialized so the initial flow is the identity)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    masks = standard_masks(L, n_layers)
    out_channels = 3 * n_knots - 1
    layers = []
    for m in masks:
        convs = [
            nn.init_conv(6, hidden, dilations[0], rng, dtype=dtype),
            nn.init_conv(hidden, hidden, dilations[1], rng, dtype=dtype),
            nn.init_conv(hidden, out_channels, dilations[2], rng, dtype=dtype,
                         zero=True),
        ]
        layers.append(CouplingLayer(m, ConvConditioner(convs, slope), n_knots))
    return FlowModel(L, layers, UniformLinkPrior(L, dtype))
