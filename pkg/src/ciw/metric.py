"""Riemannian bookkeeping on a single chart.

Immersions u: U -> R^N are stored as an affine part A x + b plus a sampled
displacement, so maps like the flat chart of a square or torus keep exact
derivatives under spectral calculus (the displacement is the only sampled
part).  Pullbacks, metric errors, shortness classification, cone membership,
curve lengths and the linear/quadratic increment split all live here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .fields import GridField, differentiate, norm

__all__ = [
    "MetricField",
    "ImmersionState",
    "ConeMatrix",
    "ConeRejection",
    "Curve",
    "pullback",
    "metric_error",
    "shortness",
    "ShortnessReport",
    "cone_check",
    "cone_deviation",
    "curve_length",
    "image_length",
    "increment_split",
]


def _min_eigenvalues(sym_values):
    """Pointwise smallest eigenvalue of a (..., n, n) symmetric array."""
    n = sym_values.shape[-1]
    if n == 1:
        return sym_values[..., 0, 0]
    return np.linalg.eigvalsh(sym_values)[..., 0]


class MetricField:
    """Symmetric positive definite tensor field g on a chart."""

    def __init__(self, tensor: GridField, check: bool = True):
        if tensor.rank != "sym-tensor":
            raise ValueError("metric must be a sym-tensor field")
        if check:
            lam = _min_eigenvalues(tensor.values)
            if np.min(lam) <= 0:
                node = np.unravel_index(int(np.argmin(lam)), lam.shape)
                raise ValueError(
                    f"metric not positive definite at node {node} "
                    f"(min eigenvalue {np.min(lam):.3e})"
                )
        self.tensor = tensor

    @classmethod
    def flat(cls, domain, scale=1.0, mode="spectral"):
        n = domain.dim
        vals = np.zeros(domain.shape + (n, n))
        for i in range(n):
            vals[..., i, i] = scale
        return cls(GridField(domain, vals, "sym-tensor", mode), check=False)

    @property
    def domain(self):
        return self.tensor.domain

    def values(self):
        return self.tensor.values

    def __sub__(self, other):
        if isinstance(other, MetricField):
            other = other.tensor
        if isinstance(other, GridField):
            other = other.values
        return GridField(self.domain, self.tensor.values - other, "sym-tensor",
                         self.tensor.mode)


class ImmersionState:
    """Map u = A x + b + phi(x) into R^N with cached derivative data.

    phi is a sampled vector field on the domain (periodic whenever the
    domain is), so Du = A + Dphi is exact under the field's calculus mode.
    """

    def __init__(self, domain, affine, offset, phi: GridField, target: MetricField | None = None):
        self.domain = domain
        self.affine = np.asarray(affine, dtype=np.float64)
        self.offset = np.asarray(offset, dtype=np.float64)
        if phi.rank != "vector":
            raise ValueError("phi must be a vector field")
        self.phi = phi
        self.target = target
        N, n = self.affine.shape
        if n != domain.dim or phi.values.shape[-1] != N:
            raise ValueError("affine shape incompatible with domain/phi")
        self._jac = None
        self._pullback = None

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_values(cls, domain, values, mode="fd", target=None):
        phi = GridField(domain, values, "vector", mode)
        N = values.shape[-1]
        return cls(domain, np.zeros((N, domain.dim)), np.zeros(N), phi, target)

    @classmethod
    def from_affine(cls, domain, affine, offset=None, mode="spectral", target=None):
        affine = np.asarray(affine, dtype=np.float64)
        N = affine.shape[0]
        if offset is None:
            offset = np.zeros(N)
        phi = GridField(domain, np.zeros(domain.shape + (N,)), "vector", mode)
        return cls(domain, affine, offset, phi, target)

    # -- basic data ----------------------------------------------------------

    @property
    def ambient_dim(self):
        return self.affine.shape[0]

    @property
    def mode(self):
        return self.phi.mode

    def u_values(self):
        mesh = self.domain.meshgrid()
        x = np.stack(mesh, axis=-1)
        return x @ self.affine.T + self.offset + self.phi.values

    def jacobian(self):
        """Array of shape grid + (N, n) with Du = A + Dphi."""
        if self._jac is None:
            n = self.domain.dim
            N = self.ambient_dim
            jac = np.empty(self.domain.shape + (N, n))
            for i in range(n):
                dphi = differentiate(self.phi, i)
                jac[..., :, i] = self.affine[:, i] + dphi.values
            jac.setflags(write=False)
            self._jac = jac
        return self._jac

    def second_seminorm(self):
        """sup Hilbert-Schmidt norm of the full second derivative."""
        n = self.domain.dim
        total = np.zeros(self.domain.shape)
        for i in range(n):
            dphi = differentiate(self.phi, i)
            for j in range(n):
                d2 = differentiate(dphi, j)
                total += np.sum(d2.values ** 2, axis=-1)
        return float(np.sqrt(np.max(total)))

    def displace(self, w: GridField):
        """New immersion u + w (w a vector field on the same domain)."""
        phi = self.phi + w
        out = ImmersionState(self.domain, self.affine, self.offset, phi, self.target)
        return out

    def transformed(self, rotation, translation=None):
        """R u + b, for invariance checks."""
        R = np.asarray(rotation, dtype=np.float64)
        b = np.zeros(R.shape[0]) if translation is None else np.asarray(translation)
        phi_vals = self.phi.values @ R.T
        phi = GridField(self.domain, phi_vals, "vector", self.phi.mode)
        return ImmersionState(self.domain, R @ self.affine, R @ self.offset + b, phi,
                              self.target)

    def flagged_nodes(self, tol=1e-12):
        """Nodes where the Jacobian Gram matrix is rank deficient."""
        lam = _min_eigenvalues(self.pullback().values)
        return [tuple(int(i) for i in node) for node in np.argwhere(lam <= tol)]

    def refined(self, new_resolutions):
        """Move to a finer periodic grid by exact spectral zero-padding."""
        from .fields import spectral_refine

        phi = spectral_refine(self.phi, new_resolutions)
        return ImmersionState(phi.domain, self.affine, self.offset, phi, self.target)

    def pullback(self):
        if self._pullback is None:
            jac = self.jacobian()
            gram = np.einsum("...ai,...aj->...ij", jac, jac)
            gram = 0.5 * (gram + np.swapaxes(gram, -1, -2))
            self._pullback = GridField(self.domain, gram, "sym-tensor", self.phi.mode)
        return self._pullback


def pullback(u: ImmersionState) -> GridField:
    """(Du)^T (Du) pointwise; positive definite iff u is an immersion."""
    return u.pullback()


def metric_error(g: MetricField, u: ImmersionState) -> GridField:
    """h = g - u^# e, stored exactly as the difference of the fields."""
    return g - pullback(u)


@dataclass
class ShortnessReport:
    kind: str              # "strictly-short" | "short" | "not-short"
    margin: float          # min over nodes of min eigenvalue of h
    worst_node: tuple
    worst_eigenvalue: float

    def to_json(self):
        return json.dumps({
            "kind": self.kind,
            "margin": self.margin,
            "worst_node": list(self.worst_node),
            "worst_eigenvalue": self.worst_eigenvalue,
        })


SHORTNESS_TOL = 1e-10


def shortness(g: MetricField, u: ImmersionState) -> ShortnessReport:
    """Classify u against g by the sign of the metric error's eigenvalues."""
    h = metric_error(g, u)
    lam = _min_eigenvalues(h.values)
    worst = np.unravel_index(int(np.argmin(lam)), lam.shape)
    gamma = float(np.min(lam))
    if gamma > SHORTNESS_TOL:
        kind = "strictly-short"
    elif gamma >= -SHORTNESS_TOL:
        kind = "short"
    else:
        kind = "not-short"
    return ShortnessReport(kind, gamma, worst, gamma)


# ---------------------------------------------------------------------------
# cone of nearly isotropic matrices


class ConeRejection(ValueError):
    """Matrix rejected from the cone, with the reason attached."""


@dataclass(frozen=True)
class ConeMatrix:
    matrix: np.ndarray
    r: float
    deviation: float

    @property
    def trace(self):
        return float(np.trace(self.matrix))


def cone_deviation(A):
    """Hilbert-Schmidt distance of A / ((1/n)|tr A|) from the identity."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[-1]
    tr = np.trace(A, axis1=-2, axis2=-1)
    scale = np.abs(tr) / n
    eye = np.eye(n)
    dev = A / scale[..., None, None] - eye
    return np.sqrt(np.sum(dev * dev, axis=(-2, -1)))


def cone_check(A, r) -> ConeMatrix:
    """Accept A into the cone of opening r or raise ConeRejection."""
    A = np.asarray(A, dtype=np.float64)
    if np.max(np.abs(A - A.T)) > 1e-12:
        raise ConeRejection("matrix is not symmetric")
    tr = float(np.trace(A))
    if tr <= 0:
        raise ConeRejection(f"trace {tr:g} is not positive")
    dev = float(cone_deviation(A))
    if dev >= r:
        raise ConeRejection(f"deviation {dev:.6g} >= cone radius {r:g}")
    return ConeMatrix(A, float(r), dev)


# ---------------------------------------------------------------------------
# curves and lengths


class Curve:
    """Uniformly sampled C^1 curve t -> gamma(t) inside the domain."""

    def __init__(self, t, points):
        t = np.asarray(t, dtype=np.float64)
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        if len(t) < 32:
            raise ValueError("curves need at least 32 samples")
        dt = np.diff(t)
        if np.max(np.abs(dt - dt[0])) > 1e-9 * max(abs(dt[0]), 1e-300):
            raise ValueError("curve samples must be uniform in t")
        self.t = t
        self.points = points

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def velocity(self):
        """4th-order finite-difference d gamma/dt at the sample points."""
        p = self.points
        dt = self.dt
        v = np.empty_like(p)
        v[2:-2] = (p[:-4] - 8 * p[1:-3] + 8 * p[3:-1] - p[4:]) / (12 * dt)
        v[0] = (-25 * p[0] + 48 * p[1] - 36 * p[2] + 16 * p[3] - 3 * p[4]) / (12 * dt)
        v[1] = (-3 * p[0] - 10 * p[1] + 18 * p[2] - 6 * p[3] + p[4]) / (12 * dt)
        v[-1] = (25 * p[-1] - 48 * p[-2] + 36 * p[-3] - 16 * p[-4] + 3 * p[-5]) / (12 * dt)
        v[-2] = (3 * p[-1] + 10 * p[-2] - 18 * p[-3] + 6 * p[-4] - p[-5]) / (12 * dt)
        return v

    def to_csv(self, buf):
        n = self.points.shape[1]
        buf.write(",".join(["t"] + [f"x{i + 1}" for i in range(n)]) + "\n")
        for row in range(len(self.t)):
            cells = [repr(float(self.t[row]))] + [repr(float(x)) for x in self.points[row]]
            buf.write(",".join(cells) + "\n")

    @classmethod
    def from_csv(cls, buf):
        header = buf.readline()
        if not header.startswith("t,"):
            raise ValueError("curve CSV must start with a 't' column")
        data = np.array([[float(c) for c in line.split(",")]
                         for line in buf.read().strip().splitlines()])
        return cls(data[:, 0], data[:, 1:])


def _check_inside(domain, points):
    for ax in range(domain.dim):
        if domain.periodic[ax]:
            continue
        lo, hi = 0.0, domain.extents[ax]
        pad = 1e-9 * domain.extents[ax]
        if np.any(points[:, ax] < lo - pad) or np.any(points[:, ax] > hi + pad):
            raise ValueError(f"curve exits the domain along axis {ax}")


def _simpson_weights(npts, dt):
    """Composite Simpson; a 3/8 tail handles an even sample count."""
    w = np.zeros(npts)
    if npts % 2 == 1:
        w[0] = w[-1] = 1.0
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= dt / 3.0
    else:
        head = npts - 3
        w[:head + 1] = _simpson_weights(head + 1, dt)
        w38 = np.array([1.0, 3.0, 3.0, 1.0]) * (3.0 * dt / 8.0)
        w[-4:] += w38
    return w


def curve_length(curve: Curve, g: MetricField) -> float:
    """Composite quadrature of sqrt(g[gamma'(t), gamma'(t)])."""
    _check_inside(g.domain, curve.points)
    vel = curve.velocity()
    gvals = g.tensor.sample(curve.points)
    integrand = np.sqrt(np.einsum("pi,pij,pj->p", vel, gvals, vel))
    w = _simpson_weights(len(curve.t), curve.dt)
    return float(np.sum(w * integrand))


def image_length(u: ImmersionState, curve: Curve) -> float:
    """Euclidean length of u composed with the curve."""
    _check_inside(u.domain, curve.points)
    phi_vals = u.phi.sample(curve.points)
    img = curve.points @ u.affine.T + u.offset + phi_vals
    vel = Curve(curve.t, img).velocity()
    integrand = np.sqrt(np.sum(vel * vel, axis=1))
    w = _simpson_weights(len(curve.t), curve.dt)
    return float(np.sum(w * integrand))


# ---------------------------------------------------------------------------
# linear / quadratic split of a perturbation


def increment_split(u: ImmersionState, w: GridField):
    """L_ij = di u . dj w + dj u . di w and Q_ij = di w . dj w.

    pullback(u + w) = pullback(u) + L + Q holds to rounding.
    """
    if w.rank != "vector":
        raise ValueError("perturbation must be a vector field")
    n = u.domain.dim
    jac_u = u.jacobian()
    dw = [differentiate(w, i).values for i in range(n)]
    L = np.empty(u.domain.shape + (n, n))
    Q = np.empty(u.domain.shape + (n, n))
    for i in range(n):
        for j in range(i, n):
            lij = np.sum(jac_u[..., :, i] * dw[j], axis=-1) + \
                np.sum(jac_u[..., :, j] * dw[i], axis=-1)
            qij = np.sum(dw[i] * dw[j], axis=-1)
            L[..., i, j] = L[..., j, i] = lij
            Q[..., i, j] = Q[..., j, i] = qij
    mode = u.phi.mode
    return (GridField(u.domain, L, "sym-tensor", mode),
            GridField(u.domain, Q, "sym-tensor", mode))
