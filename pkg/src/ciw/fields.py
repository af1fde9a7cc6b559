"""Discrete function spaces on boxes and tori.

Fields are sampled on rectangular grids, axis-major (grid axes first, then
component axes).  Periodic axes use spectral calculus, box axes use 4th-order
centered finite differences with one-sided closures.  The module also carries
the mollifier with its product/convolution commutator diagnostic and the
shared log-log regression used by every scaling-law check.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridDomain",
    "GridField",
    "MollifierKernel",
    "CalculusError",
    "ResolutionError",
    "differentiate",
    "norm",
    "holder_seminorm",
    "mollify",
    "commutator_defect",
    "scaling_fit",
    "write_ciwf",
    "read_ciwf",
    "field_to_csv",
]

TWO_PI = 2.0 * np.pi

# rank codes used by the binary container
_RANK_SCALAR = 0
_RANK_VECTOR = 1
_RANK_SYMTENSOR = 2

_MODE_SPECTRAL = 0
_MODE_FD = 1


class CalculusError(ValueError):
    """Requested calculus mode is invalid for the domain."""


class ResolutionError(ValueError):
    """An operation asked for scales the grid cannot represent."""


@dataclass(frozen=True)
class GridDomain:
    """Rectangular sampling domain, possibly periodic per axis.

    Periodic axes sample [0, extent) at spacing extent/M; box axes include
    both endpoints at spacing extent/(M-1).
    """

    extents: tuple
    resolutions: tuple
    periodic: tuple

    def __post_init__(self):
        ext = tuple(float(e) for e in self.extents)
        res = tuple(int(m) for m in self.resolutions)
        per = tuple(bool(p) for p in self.periodic)
        if not (len(ext) == len(res) == len(per)):
            raise ValueError("extents, resolutions, periodic must have equal length")
        if len(ext) not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        for m in res:
            if m < 8:
                raise ValueError("resolution must be at least 8 samples per axis")
        for e, p in zip(ext, per):
            if e <= 0:
                raise ValueError("extent must be positive")
            if p:
                turns = e / TWO_PI
                if abs(turns - round(turns)) > 1e-12 or round(turns) < 1:
                    raise ValueError("periodic axes need extent = 2*pi * integer")
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "resolutions", res)
        object.__setattr__(self, "periodic", per)

    @property
    def dim(self):
        return len(self.extents)

    @property
    def shape(self):
        return self.resolutions

    def spacing(self, axis):
        m = self.resolutions[axis]
        if self.periodic[axis]:
            return self.extents[axis] / m
        return self.extents[axis] / (m - 1)

    def max_frequency(self, axis):
        """Largest representable integer frequency on a periodic axis."""
        return self.resolutions[axis] // 2

    def axis_coords(self, axis):
        m = self.resolutions[axis]
        if self.periodic[axis]:
            return np.arange(m) * self.spacing(axis)
        return np.linspace(0.0, self.extents[axis], m)

    def meshgrid(self):
        axes = [self.axis_coords(i) for i in range(self.dim)]
        return np.meshgrid(*axes, indexing="ij")

    def node_count(self):
        return int(np.prod(self.resolutions))


def periodic_box(dim, resolution):
    """All-periodic [0, 2pi)^dim domain at uniform resolution."""
    return GridDomain((TWO_PI,) * dim, (resolution,) * dim, (True,) * dim)


def unit_box(dim, resolution, extent=1.0):
    """Non-periodic box [0, extent]^dim."""
    return GridDomain((float(extent),) * dim, (resolution,) * dim, (False,) * dim)


class GridField:
    """Sampled scalar/vector/symmetric-tensor field with a calculus mode.

    values shape: domain.shape (+ (N,) for vectors, + (n, n) for sym-tensors).
    Values are never mutated in place; all operations return new fields.
    """

    def __init__(self, domain, values, rank="scalar", mode="spectral"):
        values = np.asarray(values, dtype=np.float64)
        if rank == "scalar":
            expect = tuple(domain.shape)
        elif rank == "vector":
            expect = tuple(domain.shape) + values.shape[-1:]
        elif rank == "sym-tensor":
            expect = tuple(domain.shape) + (domain.dim, domain.dim)
        else:
            raise ValueError(f"unknown rank {rank!r}")
        if values.shape != expect:
            raise ValueError(f"values shape {values.shape} != expected {expect}")
        if rank == "sym-tensor":
            asym = np.max(np.abs(values - np.swapaxes(values, -1, -2)))
            if asym > 1e-12:
                raise ValueError(f"sym-tensor values asymmetric by {asym:.3e}")
        if mode == "spectral" and not all(domain.periodic):
            raise CalculusError("spectral mode requires all axes periodic")
        if mode not in ("spectral", "fd"):
            raise ValueError(f"unknown calculus mode {mode!r}")
        self.domain = domain
        self.values = values
        self.values.setflags(write=False)
        self.rank = rank
        self.mode = mode

    @property
    def ncomp(self):
        if self.rank == "scalar":
            return 1
        if self.rank == "vector":
            return self.values.shape[-1]
        return self.domain.dim ** 2

    def with_values(self, values, rank=None):
        return GridField(self.domain, values, rank or self.rank, self.mode)

    def component(self, *idx):
        if self.rank == "scalar":
            raise ValueError("scalar field has no components")
        return GridField(self.domain, self.values[(Ellipsis,) + idx], "scalar", self.mode)

    def __add__(self, other):
        return self.with_values(self.values + _raw(other))

    def __sub__(self, other):
        return self.with_values(self.values - _raw(other))

    def __mul__(self, other):
        return self.with_values(self.values * _raw(other))

    __rmul__ = __mul__

    def pointwise_norm(self):
        """Euclidean / Hilbert-Schmidt norm per node, as an ndarray."""
        v = self.values
        if self.rank == "scalar":
            return np.abs(v)
        if self.rank == "vector":
            return np.sqrt(np.sum(v * v, axis=-1))
        return np.sqrt(np.sum(v * v, axis=(-2, -1)))

    def mean(self):
        grid_axes = tuple(range(self.domain.dim))
        return self.values.mean(axis=grid_axes)

    def sample(self, points):
        """Evaluate at off-grid points (shape (npts, dim) or (npts,) in 1-D).

        Grid-aligned points are gathered exactly; otherwise spectral fields
        in 1-D use exact trigonometric interpolation and everything else
        falls back to order-5 splines (wrapped on periodic axes).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != self.domain.dim:
            pts = pts.T
        comp_shape = self.values.shape[self.domain.dim:]
        flatv = self.values.reshape(self.domain.shape + (-1,))
        out = np.empty((pts.shape[0], flatv.shape[-1]))

        idx, on_grid = self._grid_indices(pts)
        if on_grid:
            for c in range(flatv.shape[-1]):
                out[:, c] = flatv[..., c][tuple(idx.T)]
            return out.reshape((pts.shape[0],) + comp_shape)

        if self.mode == "spectral" and self.domain.dim == 1:
            x = pts[:, 0]
            m = self.domain.resolutions[0]
            coef = np.fft.rfft(flatv[:, :], axis=0) / m
            k = np.arange(coef.shape[0])
            phase = np.exp(1j * np.outer(x, k))
            weights = np.ones(coef.shape[0])
            weights[1:] = 2.0
            if m % 2 == 0:
                weights[-1] = 1.0
            vals = np.real(phase @ (coef * weights[:, None]))
            return vals.reshape((pts.shape[0],) + comp_shape)

        from scipy.ndimage import map_coordinates

        coords = np.empty((self.domain.dim, pts.shape[0]))
        modes = []
        for ax in range(self.domain.dim):
            h = self.domain.spacing(ax)
            coords[ax] = pts[:, ax] / h
            modes.append("grid-wrap" if self.domain.periodic[ax] else "nearest")
        mode = modes[0] if len(set(modes)) == 1 else "grid-wrap"
        for c in range(flatv.shape[-1]):
            out[:, c] = map_coordinates(flatv[..., c], coords, order=5, mode=mode)
        return out.reshape((pts.shape[0],) + comp_shape)

    def _grid_indices(self, pts):
        idx = np.empty(pts.shape, dtype=np.int64)
        for ax in range(self.domain.dim):
            h = self.domain.spacing(ax)
            j = pts[:, ax] / h
            jr = np.round(j)
            if np.max(np.abs(j - jr)) > 1e-9:
                return None, False
            m = self.domain.resolutions[ax]
            if self.domain.periodic[ax]:
                idx[:, ax] = np.mod(jr.astype(np.int64), m)
            else:
                if np.any(jr < -0.5) or np.any(jr > m - 0.5):
                    return None, False
                idx[:, ax] = jr.astype(np.int64)
        return idx, True


def _raw(x):
    return x.values if isinstance(x, GridField) else x


# ---------------------------------------------------------------------------
# differentiation


def _spectral_derivative(values, domain, axis):
    m = domain.resolutions[axis]
    k = np.fft.fftfreq(m, d=1.0 / m)  # integer frequencies
    k = k * (TWO_PI / domain.extents[axis])
    if m % 2 == 0:
        k[m // 2] = 0.0  # Nyquist derivative is ambiguous; drop it
    shape = [1] * values.ndim
    shape[axis] = m
    fh = np.fft.fft(values, axis=axis)
    fh *= (1j * k).reshape(shape)
    return np.real(np.fft.ifft(fh, axis=axis))


# 4th order centered interior stencil and one-sided closures
_FD_INTERIOR = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_FD_EDGE0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
_FD_EDGE1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0


def _fd_derivative(values, domain, axis):
    h = domain.spacing(axis)
    v = np.moveaxis(values, axis, 0)
    out = np.zeros_like(v)
    if domain.periodic[axis]:
        for off, c in zip(range(-2, 3), _FD_INTERIOR):
            if c != 0.0:
                out += c * np.roll(v, -off, axis=0)
    else:
        out[2:-2] = (v[0:-4] - 8.0 * v[1:-3] + 8.0 * v[3:-1] - v[4:]) / 12.0
        out[0] = sum(c * v[j] for j, c in enumerate(_FD_EDGE0))
        out[1] = sum(c * v[j] for j, c in enumerate(_FD_EDGE1))
        out[-1] = -sum(c * v[-1 - j] for j, c in enumerate(_FD_EDGE0))
        out[-2] = -sum(c * v[-2 - (j - 1)] for j, c in enumerate(_FD_EDGE1))
    out /= h
    return np.moveaxis(out, 0, axis)


def differentiate(f: GridField, axis: int) -> GridField:
    """Partial derivative along a grid axis with the field's calculus mode."""
    if axis < 0 or axis >= f.domain.dim:
        raise ValueError(f"axis {axis} out of range for dim {f.domain.dim}")
    if f.mode == "spectral":
        if not f.domain.periodic[axis]:
            raise CalculusError("spectral derivative on a non-periodic axis")
        dv = _spectral_derivative(f.values, f.domain, axis)
    else:
        dv = _fd_derivative(f.values, f.domain, axis)
    return f.with_values(dv)


def gradient(f: GridField):
    """List of partial derivatives along every axis."""
    return [differentiate(f, ax) for ax in range(f.domain.dim)]


# ---------------------------------------------------------------------------
# norms


def norm(f: GridField, kind: str = "sup") -> float:
    """Sup norm (pointwise Hilbert-Schmidt) or C1 seminorm (sup of |Df|)."""
    if kind == "sup":
        return float(np.max(f.pointwise_norm()))
    if kind == "C1-seminorm":
        comps = f.values.reshape(f.domain.shape + (-1,))
        total = np.zeros(f.domain.shape)
        for c in range(comps.shape[-1]):
            fc = GridField(f.domain, comps[..., c], "scalar", f.mode)
            for ax in range(f.domain.dim):
                total += differentiate(fc, ax).values ** 2
        return float(np.sqrt(np.max(total)))
    raise ValueError(f"unknown norm kind {kind!r}")


def holder_seminorm(f: GridField, theta: float) -> float:
    """Estimate sup |f(x)-f(y)| / |x-y|^theta over dyadic axis separations.

    Pairs are taken along each axis at separations h, 2h, 4h, ... which
    preserves the seminorm up to a fixed constant at O(M^n log M) cost.
    """
    if not (0.0 < theta <= 1.0):
        raise ValueError("theta must lie in (0, 1]")
    best = 0.0
    v = f.values
    grid_axes = f.domain.dim
    for ax in range(grid_axes):
        m = f.domain.resolutions[ax]
        h = f.domain.spacing(ax)
        step = 1
        limit = m if f.domain.periodic[ax] else m - 1
        while step <= limit // 2:
            if f.domain.periodic[ax]:
                diff = np.roll(v, -step, axis=ax) - v
            else:
                sl_hi = [slice(None)] * v.ndim
                sl_lo = [slice(None)] * v.ndim
                sl_hi[ax] = slice(step, None)
                sl_lo[ax] = slice(None, -step)
                diff = v[tuple(sl_hi)] - v[tuple(sl_lo)]
            comp_axes = tuple(range(grid_axes, v.ndim))
            mag = np.sqrt(np.sum(diff * diff, axis=comp_axes)) if comp_axes else np.abs(diff)
            best = max(best, float(np.max(mag)) / (step * h) ** theta)
            step *= 2
    return best


# ---------------------------------------------------------------------------
# mollification


def _bump(t):
    """Even polynomial bump on [-1, 1]; C^7 at the endpoints."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = (1.0 - t[inside] ** 2) ** 8
    return out


@dataclass
class MollifierKernel:
    """Product bump kernel at scale ell, discretely normalized to unit mass."""

    ell: float
    profile: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.ell <= 0:
            raise ValueError("mollifier scale must be positive")
        if self.profile is None:
            self.profile = _bump

    def weights(self, domain, axis):
        """1-D discrete weights on the grid of `axis`, summing to 1."""
        h = domain.spacing(axis)
        half = int(np.floor(self.ell / h))
        if half < 2:
            raise ResolutionError(
                f"mollifier scale {self.ell:g} below 2 grid spacings ({2 * h:g})"
            )
        offsets = np.arange(-half, half + 1)
        w = self.profile(offsets * h / self.ell)
        s = w.sum()
        if s <= 0:
            raise ValueError("kernel profile has nonpositive discrete mass")
        w = w / s
        sym = np.max(np.abs(w - w[::-1]))
        if sym > 1e-10:
            raise ValueError("kernel must be even")
        return offsets, w

    def fourier_factor(self, domain, axis, freq):
        """Exact damping factor of the discrete kernel at integer frequency."""
        offsets, w = self.weights(domain, axis)
        h = domain.spacing(axis)
        return float(np.sum(w * np.cos(freq * offsets * h)))


def _convolve_axis(values, offsets, w, axis, periodic):
    v = np.moveaxis(values, axis, 0)
    out = np.zeros_like(v)
    m = v.shape[0]
    if periodic:
        for off, c in zip(offsets, w):
            out += c * np.roll(v, -off, axis=0)
    else:
        idx = np.arange(m)
        for off, c in zip(offsets, w):
            out += c * v[np.clip(idx + off, 0, m - 1)]
    return np.moveaxis(out, 0, axis)


def mollify(f: GridField, kernel: MollifierKernel) -> GridField:
    """Discrete convolution with the product kernel; exact on constants."""
    out = f.values.copy()
    for ax in range(f.domain.dim):
        offsets, w = kernel.weights(f.domain, ax)
        out = _convolve_axis(out, offsets, w, ax, f.domain.periodic[ax])
    return f.with_values(out)


def commutator_defect(f: GridField, g: GridField, kernel: MollifierKernel, r: int = 0) -> float:
    """|| (fg)*phi - (f*phi)(g*phi) ||_r for scalar fields on one domain."""
    if f.rank != "scalar" or g.rank != "scalar":
        raise ValueError("commutator defect is defined for scalar fields")
    if f.domain is not g.domain and f.domain != g.domain:
        raise ValueError("fields must share a domain")
    if r not in (0, 1):
        raise ValueError("r must be 0 or 1")
    prod = f.with_values(f.values * g.values)
    defect = mollify(prod, kernel) - mollify(f, kernel) * mollify(g, kernel)
    if r == 0:
        return norm(defect, "sup")
    return norm(defect, "C1-seminorm")


# ---------------------------------------------------------------------------
# spectral band control


def spectral_band(f: GridField, rel_tol=1e-12):
    """Per-axis largest wavenumber carrying coefficients above rel_tol * max.

    Only meaningful for spectral fields; used to keep derived quantities from
    dragging rounding-noise floors into high wavenumbers, where repeated
    differentiation would amplify them by the grid size.
    """
    bands = []
    vals = f.values.reshape(f.domain.shape + (-1,))
    for ax in range(f.domain.dim):
        m = f.domain.resolutions[ax]
        spec = np.abs(np.fft.rfft(vals, axis=ax))
        other = tuple(i for i in range(spec.ndim) if i != ax)
        profile = spec.max(axis=other)
        top = profile.max()
        if top <= 0:
            bands.append(0)
            continue
        above = np.nonzero(profile > rel_tol * top)[0]
        bands.append(int(above[-1]) if above.size else 0)
    return bands


def bandlimit(f: GridField, cuts) -> GridField:
    """Zero all modes with |k| > cut along each axis (rectangular mask)."""
    if np.isscalar(cuts):
        cuts = [cuts] * f.domain.dim
    vals = f.values.astype(np.float64, copy=True)
    shape = vals.shape
    flat = vals.reshape(f.domain.shape + (-1,))
    for ax in range(f.domain.dim):
        m = f.domain.resolutions[ax]
        cut = int(cuts[ax])
        if cut >= m // 2:
            continue
        spec = np.fft.rfft(flat, axis=ax)
        sl = [slice(None)] * spec.ndim
        sl[ax] = slice(cut + 1, None)
        spec[tuple(sl)] = 0.0
        flat = np.fft.irfft(spec, n=m, axis=ax)
    return f.with_values(flat.reshape(shape))


def spectral_refine(f: GridField, new_resolutions) -> GridField:
    """Upsample a periodic field by zero-padding its spectrum.

    Exact for band-limited data, so a converged state can move to a finer
    grid between stages without changing its values at the old nodes.
    """
    if f.mode != "spectral":
        raise CalculusError("spectral refinement needs spectral mode")
    if np.isscalar(new_resolutions):
        new_resolutions = [int(new_resolutions)] * f.domain.dim
    old = f.domain
    vals = f.values.reshape(old.shape + (-1,))
    for ax in range(old.dim):
        m_old, m_new = old.resolutions[ax], int(new_resolutions[ax])
        if m_new == m_old:
            continue
        if m_new < m_old:
            raise ValueError("refinement cannot reduce resolution")
        spec = np.fft.rfft(vals, axis=ax)
        pad = [(0, 0)] * spec.ndim
        pad[ax] = (0, m_new // 2 + 1 - spec.shape[ax])
        spec = np.pad(spec, pad)
        if m_old % 2 == 0:
            sl = [slice(None)] * spec.ndim
            sl[ax] = slice(m_old // 2, m_old // 2 + 1)
            spec[tuple(sl)] *= 0.5  # split the old Nyquist bin symmetrically
            # conjugate half handled by irfft symmetry
        vals = np.fft.irfft(spec, n=m_new, axis=ax) * (m_new / m_old)
    domain = GridDomain(old.extents, tuple(int(m) for m in new_resolutions),
                        old.periodic)
    shape = domain.shape + f.values.shape[old.dim:]
    return GridField(domain, vals.reshape(shape), f.rank, f.mode)


# ---------------------------------------------------------------------------
# scaling fits


def scaling_fit(pairs):
    """Least squares of log(value) vs log(scale) -> (slope, intercept, maxres)."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError("need at least 3 (scale, value) pairs")
    s = np.array([p[0] for p in pairs], dtype=np.float64)
    v = np.array([p[1] for p in pairs], dtype=np.float64)
    if np.any(s <= 0) or np.any(v <= 0):
        raise ValueError("scales and values must be positive")
    x, y = np.log(s), np.log(v)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(coef[0]), float(coef[1]), float(np.max(np.abs(resid)))


# ---------------------------------------------------------------------------
# serialization: CIWF binary container and CSV export

_MAGIC = b"CIWF"
_VERSION = 1
_RANK_CODE = {"scalar": _RANK_SCALAR, "vector": _RANK_VECTOR, "sym-tensor": _RANK_SYMTENSOR}
_RANK_NAME = {v: k for k, v in _RANK_CODE.items()}
_MODE_CODE = {"spectral": _MODE_SPECTRAL, "fd": _MODE_FD}
_MODE_NAME = {v: k for k, v in _MODE_CODE.items()}


def write_ciwf(f: GridField, path_or_buf):
    """Self-describing little-endian container; round-trips bit-exactly."""
    buf = path_or_buf if hasattr(path_or_buf, "write") else open(path_or_buf, "wb")
    close = buf is not path_or_buf
    try:
        d = f.domain
        buf.write(_MAGIC)
        buf.write(struct.pack("<H", _VERSION))
        buf.write(struct.pack("<H", d.dim))
        for ax in range(d.dim):
            buf.write(struct.pack("<dIB", d.extents[ax], d.resolutions[ax],
                                  1 if d.periodic[ax] else 0))
        ncomp = 1 if f.rank == "scalar" else f.values.shape[-1] if f.rank == "vector" else d.dim
        buf.write(struct.pack("<BHB", _RANK_CODE[f.rank], ncomp, _MODE_CODE[f.mode]))
        payload = np.ascontiguousarray(f.values, dtype="<f8")
        buf.write(struct.pack("<Q", payload.size))
        buf.write(payload.tobytes())
    finally:
        if close:
            buf.close()


def read_ciwf(path_or_buf) -> GridField:
    buf = path_or_buf if hasattr(path_or_buf, "read") else open(path_or_buf, "rb")
    close = buf is not path_or_buf
    try:
        if buf.read(4) != _MAGIC:
            raise ValueError("not a CIWF container (bad magic)")
        (version,) = struct.unpack("<H", buf.read(2))
        if version != _VERSION:
            raise ValueError(f"unsupported CIWF version {version}")
        (dim,) = struct.unpack("<H", buf.read(2))
        extents, res, per = [], [], []
        for _ in range(dim):
            e, m, p = struct.unpack("<dIB", buf.read(13))
            extents.append(e)
            res.append(m)
            per.append(bool(p))
        rank_c, ncomp, mode_c = struct.unpack("<BHB", buf.read(4))
        (count,) = struct.unpack("<Q", buf.read(8))
        data = np.frombuffer(buf.read(count * 8), dtype="<f8").astype(np.float64)
        domain = GridDomain(tuple(extents), tuple(res), tuple(per))
        rank = _RANK_NAME[rank_c]
        if rank == "scalar":
            shape = domain.shape
        elif rank == "vector":
            shape = domain.shape + (ncomp,)
        else:
            shape = domain.shape + (dim, dim)
        return GridField(domain, data.reshape(shape), rank, _MODE_NAME[mode_c])
    finally:
        if close:
            buf.close()


def field_to_csv(f: GridField, path_or_buf):
    """One row per node: coordinates then components, shortest-repr floats."""
    buf = path_or_buf if hasattr(path_or_buf, "write") else open(path_or_buf, "w")
    close = buf is not path_or_buf
    try:
        d = f.domain
        coord_names = [f"x{i + 1}" for i in range(d.dim)]
        flat = f.values.reshape(d.shape + (-1,)).reshape(d.node_count(), -1)
        comp_names = [f"c{i + 1}" for i in range(flat.shape[1])]
        buf.write(",".join(coord_names + comp_names) + "\n")
        mesh = d.meshgrid()
        coords = np.stack([m.ravel() for m in mesh], axis=1)
        for row in range(coords.shape[0]):
            cells = [repr(float(x)) for x in coords[row]] + [repr(float(x)) for x in flat[row]]
            buf.write(",".join(cells) + "\n")
    finally:
        if close:
            buf.close()
