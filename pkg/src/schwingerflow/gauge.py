"""U(1) gauge configurations on a periodic L x L lattice.

Links are stored as angles theta_mu(x) in [0, 2*pi), laid out as
[batch, 2, L, L] with direction mu displacing along lattice axis mu.
All derived loop fields are angle sums with periodic shifts.

The plaquette convention is

    theta_P(x) = theta_1(x) + theta_0(x+1) - theta_1(x+0) - theta_0(x),

i.e. orientation (mu, nu) = (1, 0); the generic `plaquette_angle` takes the
orientation explicitly for use in coupling layers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import TWO_PI, Tensor

MAGIC = b"U1LF"


class LinkField:
    """Gauge configuration; angles canonicalized to [0, 2*pi) on creation."""

    __slots__ = ("theta", "L")

    def __init__(self, theta):
        theta = T.as_tensor(theta)
        if theta.ndim != 4 or theta.shape[1] != 2 or theta.shape[2] != theta.shape[3]:
            raise ShapeError(f"LinkField expects [batch, 2, L, L], got {theta.shape}")
        if theta.shape[2] < 2:
            raise ShapeError("LinkField requires L >= 2")
        self.theta = T.wrap_angle(theta)
        self.L = theta.shape[2]

    @property
    def batch(self):
        return self.theta.shape[0]

    def detach(self):
        out = LinkField.__new__(LinkField)
        out.theta = self.theta.detach()
        out.L = self.L
        return out


@dataclass
class PlaquetteField:
    theta_P: Tensor


def _shift(t: Tensor, mu: int, n: int = 1) -> Tensor:
    """f(x) -> f(x + n*mu_hat) for fields whose last two axes are the lattice."""
    return T.roll(t, -n, axis=t.ndim - 2 + mu)


def plaquette_angle(U: LinkField, mu: int = 1, nu: int = 0) -> Tensor:
    """Uncanonicalized plaquette angle for orientation (mu, nu):
    theta_mu(x) + theta_nu(x+mu) - theta_mu(x+nu) - theta_nu(x)."""
    tm = T.select(U.theta, 1, mu)
    tn = T.select(U.theta, 1, nu)
    return tm + _shift(tn, mu) - _shift(tm, nu) - tn


def plaquettes(U: LinkField) -> PlaquetteField:
    return PlaquetteField(T.wrap_angle(plaquette_angle(U)))


def loop_angles_2x1(U: LinkField, mu: int = 1, nu: int = 0):
    """Rectangular loop angles for orientation (mu, nu): extent 2 along mu
    and extent 2 along nu, anchored at each site (uncanonicalized).

    Equal to the sum of the two plaquettes each loop encloses; built from
    link angles directly.
    """
    tm = T.select(U.theta, 1, mu)
    tn = T.select(U.theta, 1, nu)
    # 2 along mu: theta_mu(x) + theta_nu(x+2mu)... built as the 6-link contour
    w_mu = (
        tm
        + _shift(tm, mu)
        + _shift(tn, mu, 2)
        - _shift(_shift(tm, mu), nu)
        - _shift(tm, nu)
        - tn
    )
    # 2 along nu
    w_nu = (
        tm
        + _shift(tn, mu)
        + _shift(_shift(tn, mu), nu)
        - _shift(tm, nu, 2)
        - _shift(tn, nu)
        - tn
    )
    return w_mu, w_nu


def wilson_loops_2x1(U: LinkField):
    """Canonicalized 2x1 and 1x2 Wilson-loop angle fields, [batch, L, L] each."""
    w_mu, w_nu = loop_angles_2x1(U)
    return T.wrap_angle(w_mu), T.wrap_angle(w_nu)


def gauge_action(U: LinkField, beta: float) -> Tensor:
    """Pure-gauge action -beta * sum_x cos theta_P(x), per batch element."""
    p = plaquette_angle(U)
    return T.mul(-beta, T.sum_(T.cos(p), axes=(1, 2)))


def gauge_transform(U: LinkField, omega) -> LinkField:
    """theta_mu(x) -> theta_mu(x) + omega(x) - omega(x + mu_hat)."""
    omega = T.as_tensor(omega)
    if omega.shape != (U.batch, U.L, U.L):
        raise ShapeError(f"omega must be [batch, L, L], got {omega.shape}")
    new = []
    for mu in range(2):
        tm = T.select(U.theta, 1, mu)
        new.append(tm + omega - _shift(omega, mu))
    return LinkField(T.stack(new, axis=1))


def random_links(batch, L, rng, dtype="double") -> LinkField:
    theta = rng.uniform(0.0, TWO_PI, size=(batch, 2, L, L))
    return LinkField(Tensor(theta.astype(T.resolve_dtype(dtype))))


def save_links(path, U: LinkField):
    """Write configurations: 8-byte header (magic "U1LF", uint32 L, little
    endian), then per configuration a row-major [2, L, L] float64 array."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", U.L))
        data = np.ascontiguousarray(U.theta.data, dtype="<f8")
        f.write(data.tobytes())


def load_links(path) -> LinkField:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8 or head[:4] != MAGIC:
            raise ValueError(f"{path}: not a link-field file (bad magic)")
        (L,) = struct.unpack("<I", head[4:])
        raw = f.read()
    per_cfg = 2 * L * L * 8
    if len(raw) % per_cfg != 0:
        raise ValueError(f"{path}: truncated payload")
    batch = len(raw) // per_cfg
    theta = np.frombuffer(raw, dtype="<f8").reshape(batch, 2, L, L)
    return LinkField(Tensor(theta.copy()))
