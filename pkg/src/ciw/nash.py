"""The 1954 C1 iteration: frames, spiral steps, stages, and exponent laws.

A stage decomposes the metric error over a direction set and adds one
spiraling normal perturbation per direction, with frequencies chosen by an
adaptive doubling policy (the analysis only demands "lambda large").  The
iteration drives stages along a schedule of shrinking target gaps.  The
module also carries the exact rational exponent solver for the schedule
recursions and the Hoelder-threshold estimator for measured histories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .fields import (GridField, ResolutionError, bandlimit, norm,
                     holder_seminorm, scaling_fit, spectral_band)
from .metric import (ImmersionState, MetricField, cone_deviation, metric_error,
                     pullback, shortness)
from .decomp import DirectionSet, DecompositionError, certify_cone_radius

__all__ = [
    "Schedule",
    "StageReport",
    "IterationHistory",
    "CodimensionError",
    "FrameError",
    "FrequencyBudgetError",
    "InvariantViolation",
    "normal_frame",
    "spiral_step",
    "FrequencyPolicy",
    "stage",
    "iterate",
    "exponent_solve",
    "holder_report",
]

TWO_PI = 2.0 * np.pi


class CodimensionError(ValueError):
    pass


class FrameError(RuntimeError):
    pass


class FrequencyBudgetError(RuntimeError):
    pass


class InvariantViolation(AssertionError):
    pass


# ---------------------------------------------------------------------------
# normal frames


def _orthonormal_tangent(jac):
    """Gram-Schmidt the Jacobian columns; batched over the grid."""
    n = jac.shape[-1]
    cols = []
    for i in range(n):
        v = jac[..., :, i].copy()
        for t in cols:
            v -= np.sum(t * v, axis=-1, keepdims=True) * t
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.min(nrm) < 1e-12:
            bad = np.unravel_index(int(np.argmin(nrm)), nrm.shape[:-1])
            raise FrameError(f"rank-deficient Jacobian at node {bad}")
        cols.append(v / nrm)
    return cols


def _polar_2x2(M):
    """Batched orthogonal polar factor of (..., 2, 2) matrices."""
    U, _, Vt = np.linalg.svd(M)
    return U @ Vt


def _align_frames(zeta, eta, domain):
    """Gauge the per-node frames to vary continuously across the grid.

    Axis by axis: slices are aligned to their predecessor by batched
    Procrustes rotations inside the normal plane, then the wrap mismatch on
    periodic axes (normal-bundle holonomy of the transport) is distributed
    as a smooth in-plane angle ramp.  Orthogonality to the tangents is
    untouched throughout.
    """
    F = np.stack([zeta, eta], axis=-1)  # grid + (N, 2)

    def align(block, ref):
        M = np.swapaxes(block, -1, -2) @ ref
        return block @ _polar_2x2(M)

    for ax in range(domain.dim):
        Fm = np.moveaxis(F, ax, 0)
        m = Fm.shape[0]
        for i in range(1, m):
            Fm[i] = align(Fm[i], Fm[i - 1])
        if domain.periodic[ax]:
            # holonomy of the sweep: rotation carrying the wrapped frame
            # onto the start; it must be a rotation, not a reflection
            A = _polar_2x2(np.swapaxes(Fm[m - 1], -1, -2) @ Fm[0])
            if np.min(np.linalg.det(A)) < 0:
                raise FrameError(
                    f"normal bundle is non-orientable along axis {ax}"
                )
            theta = np.arctan2(A[..., 1, 0], A[..., 0, 0])
            ramp = np.arange(m) / m
            cs = np.cos(theta[None, ...] * ramp.reshape((m,) + (1,) * theta.ndim))
            sn = np.sin(theta[None, ...] * ramp.reshape((m,) + (1,) * theta.ndim))
            rot = np.stack([np.stack([cs, -sn], axis=-1),
                            np.stack([sn, cs], axis=-1)], axis=-2)
            Fm[:] = Fm @ rot
        F = np.moveaxis(Fm, 0, ax)
    return F[..., 0], F[..., 1]


def _frame_jump(vals, domain):
    worst = 0.0
    where = None
    for ax in range(domain.dim):
        rolled = np.roll(vals, -1, axis=ax)
        if not domain.periodic[ax]:
            sl = [slice(None)] * vals.ndim
            sl[ax] = slice(None, -1)
            diff = (rolled - vals)[tuple(sl)]
        else:
            diff = rolled - vals
        mag = np.sqrt(np.sum(diff * diff, axis=-1))
        m = float(np.max(mag))
        if m > worst:
            worst = m
            where = np.unravel_index(int(np.argmax(mag)), mag.shape)
    return worst, where


_LEVI_CIVITA_3 = np.zeros((3, 3, 3))
_LEVI_CIVITA_4 = np.zeros((4, 4, 4, 4))
for _perm, _sgn in (((0, 1, 2), 1), ((1, 2, 0), 1), ((2, 0, 1), 1),
                    ((0, 2, 1), -1), ((2, 1, 0), -1), ((1, 0, 2), -1)):
    _LEVI_CIVITA_3[_perm] = _sgn
import itertools as _it
for _perm in _it.permutations(range(4)):
    _sgn = 1
    _p = list(_perm)
    for _i in range(4):
        for _j in range(_i + 1, 4):
            if _p[_i] > _p[_j]:
                _sgn = -_sgn
    _LEVI_CIVITA_4[_perm] = _sgn


def _fixed_reference_zeta(tangents, grid_shape, N, floor=0.2):
    """First ambient basis vector whose tangent-projection residual never
    degenerates; gives a globally smooth normal seed without any sweep."""
    order = list(range(len(tangents), N)) + list(range(len(tangents)))
    for j in order:
        e = np.zeros(N)
        e[j] = 1.0
        v = np.broadcast_to(e, grid_shape + (N,)).copy()
        for t in tangents:
            v -= np.sum(t * v, axis=-1, keepdims=True) * t
        nrm = np.linalg.norm(v, axis=-1)
        if float(np.min(nrm)) >= floor:
            return v / nrm[..., None]
    return None


def _cross_normal(tangents, zeta, N):
    """Hodge-dual completion of (tangents..., zeta) to an orthonormal frame."""
    if N == 3:
        t = tangents[0]
        eta = np.einsum("abc,...b,...c->...a", _LEVI_CIVITA_3, t, zeta)
    elif N == 4:
        t1, t2 = tangents
        eta = np.einsum("abcd,...b,...c,...d->...a", _LEVI_CIVITA_4, t1, t2, zeta)
    else:
        return None
    nrm = np.linalg.norm(eta, axis=-1, keepdims=True)
    if float(np.min(nrm)) < 1e-12:
        return None
    return eta / nrm


def normal_frame(u: ImmersionState, jump_tol=0.5):
    """Two orthonormal unit normal fields (zeta, eta) along u.

    Fast path: a fixed ambient reference with non-degenerate projection plus
    the Hodge-dual completion (vectorized, smooth by construction).  When no
    fixed reference works globally (the normal plane sweeps every ambient
    direction, as on the Clifford torus), falls back to pivoted Gram-Schmidt
    gauged continuous by a Procrustes sweep.  Needs codimension >= 2.
    """
    n = u.domain.dim
    N = u.ambient_dim
    if N < n + 2:
        raise CodimensionError(
            f"normal frame needs N >= n + 2 (got N={N}, n={n}); "
            "codimension-one corrugations are out of scope"
        )
    jac = u.jacobian()
    tangents = _orthonormal_tangent(jac)
    mode = u.phi.mode

    if N == n + 2:
        zeta = _fixed_reference_zeta(tangents, u.domain.shape, N)
        if zeta is not None:
            eta = _cross_normal(tangents, zeta, N)
            if eta is not None:
                return (GridField(u.domain, zeta, "vector", mode),
                        GridField(u.domain, eta, "vector", mode))

    def project_out(v, basis):
        for t in basis:
            v = v - np.sum(t * v, axis=-1, keepdims=True) * t
        return v

    grid_shape = u.domain.shape
    chosen = []
    for _ in range(2):
        residuals = np.empty(grid_shape + (N,))
        cands = []
        for j in range(N):
            e = np.zeros(N)
            e[j] = 1.0
            v = project_out(np.broadcast_to(e, grid_shape + (N,)).copy(),
                            tangents + chosen)
            cands.append(v)
            residuals[..., j] = np.linalg.norm(v, axis=-1)
        pick = np.argmax(residuals, axis=-1)
        stacked = np.stack(cands, axis=-2)  # grid + (N_cand, N)
        v = np.take_along_axis(stacked, pick[..., None, None], axis=-2)[..., 0, :]
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.min(nrm) < 1e-12:
            bad = np.unravel_index(int(np.argmin(nrm)), grid_shape)
            raise FrameError(f"no normal direction at node {bad}")
        chosen.append(v / nrm)

    zeta, eta = _align_frames(chosen[0], chosen[1], u.domain)
    for vals in (zeta, eta):
        jump, where = _frame_jump(vals, u.domain)
        if jump > jump_tol:
            raise FrameError(f"frame discontinuity {jump:.3f} at node {where}")
    mode = u.phi.mode
    return (GridField(u.domain, zeta, "vector", mode),
            GridField(u.domain, eta, "vector", mode))


# ---------------------------------------------------------------------------
# spiral step


def _check_resolvable(domain, lam, xi, samples_per_wavelength=8):
    h = max(domain.spacing(ax) for ax in range(domain.dim))
    if lam * h > TWO_PI / samples_per_wavelength + 1e-12:
        raise ResolutionError(
            f"frequency {lam:g} unresolvable: need >= {samples_per_wavelength} "
            f"samples per wavelength (max is {TWO_PI / h / lam:.2f})"
        )
    for ax in range(domain.dim):
        if domain.periodic[ax]:
            turns = lam * xi[ax] * domain.extents[ax] / TWO_PI
            if abs(turns - round(turns)) > 1e-9:
                raise ResolutionError(
                    f"phase frequency {lam * xi[ax]:.6g} along periodic axis {ax} "
                    "is not an integer; pick lambda on the direction's ladder"
                )


def spiral_step(u: ImmersionState, a, xi, lam, frames=None,
                band_cut=None) -> ImmersionState:
    """u + (a/lambda)(sin(lambda x.xi) zeta + cos(lambda x.xi) eta).

    band_cut, when given, truncates the perturbation to its physical band
    before it joins the state.  Sampled amplitude/frame factors carry a flat
    rounding-noise floor which spectral differentiation amplifies linearly in
    the wavenumber; without the truncation that floor compounds across steps
    and eventually swamps small defect measurements on large grids.
    """
    xi = np.asarray(xi, dtype=np.float64)
    if abs(np.linalg.norm(xi) - 1.0) > 1e-12:
        raise ValueError("xi must be a unit vector")
    _check_resolvable(u.domain, lam, xi)
    if frames is None:
        frames = normal_frame(u)
    zeta, eta = frames
    mesh = u.domain.meshgrid()
    phase = sum(lam * xi[i] * mesh[i] for i in range(u.domain.dim))
    amp = a.values if isinstance(a, GridField) else np.asarray(a, dtype=np.float64)
    w_vals = (np.sin(phase)[..., None] * zeta.values +
              np.cos(phase)[..., None] * eta.values)
    w_vals = (amp[..., None] if np.ndim(amp) else amp) / lam * w_vals
    w = GridField(u.domain, w_vals, "vector", u.phi.mode)
    if band_cut is not None and u.phi.mode == "spectral":
        w = bandlimit(w, band_cut)
    return u.displace(w)


# ---------------------------------------------------------------------------
# stage


@dataclass
class FrequencyPolicy:
    """Doubling search for per-step frequencies.

    Starts each step at max(lambda_start, previous step's lambda) snapped to
    the direction's periodic ladder and doubles until the step defect fits
    its budget share; refuses to exceed the grid's resolvable band.
    """

    lambda_start: float = 8.0
    growth: float = 2.0
    samples_per_wavelength: int = 8
    step_share: float | None = None   # default: equal share of what remains
    max_trials: int = 40
    tighten_trials: int = 4

    def lambda_cap(self, domain):
        h = max(domain.spacing(ax) for ax in range(domain.dim))
        return TWO_PI / (self.samples_per_wavelength * h)

    def ladder_snap(self, lam, ladder):
        if ladder is None:
            return lam
        m = max(1, int(np.ceil(lam / ladder - 1e-9)))
        return m * ladder


@dataclass
class StageReport:
    frequencies: list
    amplitude_sups: list
    achieved_error: float
    c0_displacement: float
    c1_displacement: float
    wall_time: float
    input_error: float = 0.0
    trials: int = 0


_R0_CACHE = {}


def cone_certificate(dirs: DirectionSet):
    key = (dirs.n, dirs.name)
    if key not in _R0_CACHE:
        _R0_CACHE[key] = certify_cone_radius(dirs)
    return _R0_CACHE[key]


def stage(u: ImmersionState, g_target: MetricField, delta, dirs: DirectionSet,
          policy: FrequencyPolicy | None = None, r0=None):
    """One full correction pass: s_n spiral steps with decomposed amplitudes.

    Preconditions: the metric error g_target - u#e lies pointwise in the
    certified cone.  Postconditions (measured, reported): total C0 motion
    <= delta, final error <= delta, C1 motion <= C ||h||^(1/2).
    """
    t0 = time.time()
    policy = policy or FrequencyPolicy()
    if r0 is None:
        r0 = cone_certificate(dirs)
    periodic = any(u.domain.periodic)
    h = metric_error(g_target, u)
    hvals = h.values
    tr = np.trace(hvals, axis1=-2, axis2=-1)
    dev = cone_deviation(hvals)
    input_error = float(np.max(np.sqrt(np.sum(hvals * hvals, axis=(-2, -1)))))
    if input_error < 1e-14:
        rep = StageReport([], [], input_error, 0.0, 0.0, time.time() - t0,
                          input_error, 0)
        return u, rep
    bad = (tr <= 0) | (dev >= r0)
    if np.any(bad):
        node = np.unravel_index(int(np.argmax(bad)), bad.shape)
        raise DecompositionError(
            f"metric error leaves the cone at node {node} "
            f"(deviation {float(dev[node]):.4g} vs r0 {r0:.4g})"
        )
    mu2 = dirs.coefficients(hvals)
    if np.min(mu2) < -1e-12:
        node_flat = int(np.argmin(mu2))
        raise DecompositionError(f"negative amplitude^2 {np.min(mu2):.3e} "
                                 f"(flat index {node_flat})")
    amps = np.sqrt(np.clip(mu2, 0.0, None))

    s_n = dirs.count
    lam_cap = policy.lambda_cap(u.domain)
    ladders = []
    for k in range(s_n):
        ladder = dirs.frequency_ladder(k) if periodic else None
        if periodic and ladder is None:
            raise ResolutionError(
                f"direction set {dirs.name!r} has no periodic ladder for step {k}"
            )
        ladders.append(ladder)
    spectral = u.phi.mode == "spectral"
    if spectral:
        # carrier band of the incoming state; amplitude/frame factors live
        # within a few multiples of it and are truncated there so their
        # rounding-noise floor cannot ride up the spectrum
        in_band = max(spectral_band(u.phi), default=0)
        factor_cut = 4 * max(in_band, 8) + 64
        amps_f = bandlimit(GridField(u.domain, amps, "vector", "spectral"),
                           factor_cut)
        amps = np.clip(amps_f.values, 0.0, None)
    amp_sups = [float(np.max(np.abs(amps[..., k]))) for k in range(s_n)]
    active = [k for k in range(s_n) if amp_sups[k] >= 1e-14]
    trials = 0

    def cap_for(k):
        lad = ladders[k]
        return (int(lam_cap / lad) * lad) if lad else lam_cap

    def clean_frames(frames):
        if not spectral:
            return frames
        zeta, eta = (bandlimit(fr, factor_cut) for fr in frames)
        worst = max(
            float(np.max(np.abs(np.sum(zeta.values ** 2, axis=-1) - 1.0))),
            float(np.max(np.abs(np.sum(eta.values ** 2, axis=-1) - 1.0))),
            float(np.max(np.abs(np.sum(zeta.values * eta.values, axis=-1)))),
        )
        if worst > 1e-11:
            return frames  # truncation would distort the frame; keep as is
        return zeta, eta

    def _truncated_spiral_parts(state, k, lam, component):
        """Truncated w component and its derivatives in one spectral pass."""
        dom = state.domain
        xi = dirs.vectors[k]
        zeta, eta = state_frames[0]
        mesh = dom.meshgrid()
        phase = sum(lam * xi[i] * mesh[i] for i in range(dirs.n))
        wc = (amps[..., k] / lam) * (np.sin(phase) * zeta.values[..., component] +
                                     np.cos(phase) * eta.values[..., component])
        del phase
        cuts = [int(abs(lam * xi[i]) + factor_cut) for i in range(dirs.n)]
        spec = wc
        for ax in range(dirs.n - 1):
            m = dom.resolutions[ax]
            s = np.fft.rfft(spec, axis=ax)
            if cuts[ax] < m // 2:
                sl = [slice(None)] * s.ndim
                sl[ax] = slice(cuts[ax] + 1, None)
                s[tuple(sl)] = 0.0
            spec = np.fft.irfft(s, n=m, axis=ax)
        last = dirs.n - 1
        m = dom.resolutions[last]
        s = np.fft.rfft(spec, axis=last)
        if cuts[last] < m // 2:
            sl = [slice(None)] * s.ndim
            sl[last] = slice(cuts[last] + 1, None)
            s[tuple(sl)] = 0.0
        w_t = np.fft.irfft(s, n=m, axis=last)
        kfreq = np.fft.rfftfreq(m, d=1.0 / m)
        shape = [1] * s.ndim
        shape[last] = s.shape[last]
        d_last = np.fft.irfft(s * (1j * kfreq).reshape(shape), n=m, axis=last)
        del s
        derivs = []
        for ax in range(dirs.n):
            if ax == last:
                derivs.append(d_last)
            else:
                comp = GridField(dom, w_t, "scalar", "spectral")
                derivs.append(differentiate(comp, ax).values)
        return w_t, derivs

    state_frames = [None]

    def try_spiral(state, k, lam, frames, build=True):
        """Measure one candidate spiral's step defect.

        Spectral states get a fused pass per component: truncation and
        differentiation share one transform and the cached Jacobian updates
        incrementally, keeping peak memory to a couple of scalar fields.
        With build=False only the defect is returned (the accepted frequency
        is re-run once at the end, trading one extra pass for not holding a
        second full state during the search).
        """
        nonlocal trials
        trials += 1
        xi = dirs.vectors[k]
        if not spectral:
            a_field = GridField(u.domain, amps[..., k], "scalar", u.phi.mode)
            target_piece = np.einsum("...,i,j->...ij", amps[..., k] ** 2, xi, xi)
            cand = spiral_step(state, a_field, xi, lam, frames=frames)
            dv = pullback(cand).values - pullback(state).values - target_piece
            defect = float(np.max(np.sqrt(np.sum(dv ** 2, axis=(-2, -1)))))
            return cand, defect
        _check_resolvable(u.domain, lam, xi)
        state_frames[0] = frames
        dom = state.domain
        N = state.ambient_dim
        jac = state.jacobian()
        gram = np.zeros(dom.shape + (dirs.n, dirs.n))
        w_parts = [] if build else None
        dw_parts = [] if build else None
        for c in range(N):
            w_t, derivs = _truncated_spiral_parts(state, k, lam, c)
            for i in range(dirs.n):
                col_i = jac[..., c, i] + derivs[i]
                for j in range(i, dirs.n):
                    col_j = jac[..., c, j] + derivs[j] if j != i else col_i
                    gram[..., i, j] += col_i * col_j
            if build:
                w_parts.append(w_t)
                dw_parts.append(derivs)
        for i in range(dirs.n):
            for j in range(i + 1, dirs.n):
                gram[..., j, i] = gram[..., i, j]
        dv = gram - pullback(state).values
        dv -= np.einsum("...,i,j->...ij", amps[..., k] ** 2, xi, xi)
        defect = float(np.max(np.sqrt(np.sum(dv ** 2, axis=(-2, -1)))))
        del dv
        if not build:
            return None, defect
        phi_new = state.phi.values + np.stack(w_parts, axis=-1)
        jac_new = jac.copy()
        for c in range(N):
            for i in range(dirs.n):
                jac_new[..., c, i] += dw_parts[c][i]
        cand = ImmersionState(dom, state.affine, state.offset,
                              GridField(dom, phi_new, "vector", "spectral"),
                              state.target)
        cand._jac = jac_new
        cand._pullback = GridField(dom, gram, "sym-tensor", "spectral")
        return cand, defect

    def run_adaptive():
        """Predictive search: the defect is ~K/lambda, so one probe
        extrapolates the passing frequency; a short downward bisection then
        trims it to (near) minimal, which keeps the frequency growth across
        stages as small as the estimates allow."""
        current = u
        freqs = [0.0] * s_n
        spent = 0.0
        lam_prev = 0.0
        for pos, k in enumerate(active):
            frames = clean_frames(normal_frame(current))
            remaining = delta - spent
            share = remaining * (policy.step_share or 1.0 / (len(active) - pos))
            ladder = ladders[k]
            cap_eff = cap_for(k)
            lam_floor = policy.ladder_snap(max(policy.lambda_start, lam_prev), ladder)
            lam = lam_floor
            passing = None
            fail_hi = 0.0
            for _ in range(policy.max_trials):
                at_cap = lam >= cap_eff * (1 - 1e-9)
                lam = min(lam, cap_eff)
                _, defect = try_spiral(current, k, lam, frames, build=False)
                if defect <= share or (at_cap and defect <= remaining):
                    passing = (lam, defect)
                    break
                if at_cap:
                    raise FrequencyBudgetError(
                        f"step {k}: defect {defect:.3e} at the resolvable cap "
                        f"{cap_eff:.1f} exceeds the remaining budget {remaining:.3e}"
                    )
                fail_hi = max(fail_hi, lam)
                predicted = lam * defect / share * 1.15
                lam = policy.ladder_snap(
                    min(max(predicted, lam * 1.3), max(cap_eff, lam)), ladder)
            if passing is None:
                raise FrequencyBudgetError(
                    f"step {k}: no admissible frequency within {policy.max_trials} trials"
                )
            # trim back toward the smallest passing frequency
            lam_ok, defect = passing
            lo = max(fail_hi, lam_floor * 0.999)
            for _ in range(policy.tighten_trials):
                mid = policy.ladder_snap(np.sqrt(lo * lam_ok), ladder)
                if not (lo * 1.05 < mid < lam_ok * 0.999):
                    break
                _, defect_mid = try_spiral(current, k, mid, frames, build=False)
                if defect_mid <= share:
                    lam_ok, defect = mid, defect_mid
                else:
                    lo = mid
            cand, defect = try_spiral(current, k, lam_ok, frames)
            current = cand
            spent += defect
            freqs[k] = float(lam_ok)
            lam_prev = lam_ok
        return current, freqs

    def run_geometric():
        """Prescribed geometric frequency ladder up to the cap, total verified.

        Near the resolvable cap the adaptive shares over-invest early; the
        balanced ladder minimizes the summed linear-term defects instead.
        """
        current = u
        freqs = [0.0] * s_n
        spent = 0.0
        m = len(active)
        lam_prev = 0.0
        for pos, k in enumerate(active):
            cap_eff = cap_for(k)
            if m == 1 or pos == m - 1:
                lam = cap_eff
            else:
                lam = policy.lambda_start * (cap_eff / policy.lambda_start) ** (pos / (m - 1))
            lam = min(policy.ladder_snap(max(lam, lam_prev, policy.lambda_start),
                                         ladders[k]), cap_eff)
            frames = clean_frames(normal_frame(current))
            cand, defect = try_spiral(current, k, lam, frames)
            spent += defect
            if spent > delta:
                raise FrequencyBudgetError(
                    f"geometric ladder spent {spent:.3e} > stage budget "
                    f"{delta:.3e} by step {k}"
                )
            current = cand
            freqs[k] = float(lam)
            lam_prev = lam
        return current, freqs

    try:
        current, freqs = run_adaptive()
    except FrequencyBudgetError:
        current, freqs = run_geometric()

    diff = GridField(u.domain, current.phi.values - u.phi.values, "vector", u.phi.mode)
    err_field = metric_error(g_target, current)
    achieved = float(np.max(np.sqrt(np.sum(err_field.values ** 2, axis=(-2, -1)))))
    rep = StageReport(
        frequencies=freqs,
        amplitude_sups=amp_sups,
        achieved_error=achieved,
        c0_displacement=norm(diff, "sup"),
        c1_displacement=norm(diff, "C1-seminorm"),
        wall_time=time.time() - t0,
        input_error=input_error,
        trials=trials,
    )
    return current, rep


# ---------------------------------------------------------------------------
# schedules and iteration


@dataclass
class Schedule:
    """Target-gap sequence: geometric halving or the power-law ansatz."""

    epsilon: float = 0.5
    c0: float = 0.9
    stages: int = 6
    rule: str = "halving"        # or "power"
    lam: float | None = None     # power rule: lambda_q = lam^q
    theta0: float | None = None  # power rule: delta_q = lambda_q^(-2 theta0)

    def __post_init__(self):
        if not (0 < self.c0 < 1):
            raise ValueError("stage error factor c0 must lie in (0, 1)")
        if self.rule == "power":
            if self.lam is None or self.theta0 is None:
                raise ValueError("power rule needs lam and theta0")
            if self.lam <= 1 or not (0 < self.theta0 < 1):
                raise ValueError("power rule needs lam > 1 and theta0 in (0,1)")
        elif self.rule != "halving":
            raise ValueError(f"unknown schedule rule {self.rule!r}")
        deltas = [self.delta(q) for q in range(1, self.stages + 2)]
        if any(d2 >= d1 for d1, d2 in zip(deltas, deltas[1:])):
            raise ValueError("delta_q must be strictly decreasing")

    def delta(self, q):
        if self.rule == "halving":
            return self.epsilon * 2.0 ** (-q)
        return self.epsilon * self.lam ** (-2.0 * self.theta0 * q)


@dataclass
class IterationHistory:
    states: list
    reports: list
    deltas: list
    completed: bool
    stop_reason: str = ""

    def table(self):
        rows = []
        for q, rep in enumerate(self.reports, start=1):
            rows.append({
                "q": q,
                "delta_q": self.deltas[q - 1],
                "frequencies": rep.frequencies,
                "input_error": rep.input_error,
                "achieved_error": rep.achieved_error,
                "c0_displacement": rep.c0_displacement,
                "c1_displacement": rep.c1_displacement,
                "wall_time": rep.wall_time,
            })
        return rows


def iterate(u0: ImmersionState, g: MetricField, sched: Schedule,
            dirs: DirectionSet | None = None, policy: FrequencyPolicy | None = None,
            max_resolution=None, keep_states=True):
    """Run stages against targets g_q = g - delta_q Id.

    When a stage runs out of resolvable frequencies and `max_resolution`
    allows, the state moves to a doubled grid by exact spectral zero-padding
    and the stage retries; otherwise the run stops early with a truthful
    report.  Loss of strict shortness against g raises, never repairs.
    """
    from .decomp import primitive_directions

    n = u0.domain.dim
    if dirs is None:
        dirs = primitive_directions(n, periodic=any(u0.domain.periodic))
    rep0 = shortness(g, u0)
    if rep0.kind != "strictly-short" or rep0.margin <= sched.delta(1):
        raise InvariantViolation(
            f"need a strictly short start with margin > delta_1={sched.delta(1):g} "
            f"(got {rep0.kind}, margin {rep0.margin:g})"
        )
    states = [u0]
    reports = []
    deltas = []
    completed = True
    reason = ""
    current = u0
    flat_target = np.allclose(g.values() - g.values().reshape(-1, n, n)[0], 0.0)
    g_current = g
    base_policy = policy or FrequencyPolicy()
    freq_history = []

    def refine(state):
        nonlocal g_current
        state = state.refined([2 * m for m in state.domain.resolutions])
        g_current = MetricField.flat(
            state.domain, scale=float(g.values().reshape(-1, n, n)[0][0, 0]),
            mode="spectral")
        return state

    for q in range(1, sched.stages + 1):
        dq = sched.delta(q)
        deltas.append(dq)
        budget = sched.c0 * sched.delta(q + 1)
        # frequency hint from the measured growth of the last two stages
        hint = None
        if len(freq_history) >= 2 and freq_history[-2] > 0:
            hint = freq_history[-1] ** 2 / freq_history[-2]
        elif freq_history:
            hint = 4.0 * freq_history[-1]
        stage_policy = base_policy
        if hint is not None:
            stage_policy = replace(base_policy,
                                   lambda_start=max(base_policy.lambda_start,
                                                    hint / 3.0))
        while True:
            can_refine = (current.phi.mode == "spectral" and flat_target
                          and max_resolution is not None
                          and 2 * max(current.domain.resolutions) <= max_resolution)
            if (hint is not None and can_refine
                    and hint * 1.3 > stage_policy.lambda_cap(current.domain)):
                current = refine(current)
                continue
            target = MetricField(
                GridField(g_current.domain,
                          g_current.values() - dq * np.eye(n), "sym-tensor",
                          g_current.tensor.mode),
                check=False,
            )
            try:
                current, rep = stage(current, target, budget, dirs,
                                     policy=stage_policy)
                break
            except (FrequencyBudgetError, ResolutionError, DecompositionError) as exc:
                if not (isinstance(exc, (FrequencyBudgetError, ResolutionError))
                        and can_refine):
                    completed = False
                    reason = f"stage {q}: {exc}"
                    break
                current = refine(current)
        if not completed:
            break
        freq_history.append(max(rep.frequencies) if rep.frequencies else 0.0)
        reports.append(rep)
        if keep_states:
            states.append(current)
        else:
            # retain only the endpoints; big-grid histories do not fit memory
            del states[1:]
            states.append(current)
        if rep.achieved_error > budget * (1 + 1e-9):
            completed = False
            reason = (f"stage {q} missed its budget: {rep.achieved_error:.3e} "
                      f"> {budget:.3e}")
            break
        short_rep = shortness(g_current, current)
        if short_rep.kind == "not-short":
            raise InvariantViolation(
                f"shortness lost at stage {q}: min eigenvalue "
                f"{short_rep.worst_eigenvalue:.3e} at {short_rep.worst_node}"
            )
    return IterationHistory(states, reports, deltas, completed, reason)


# ---------------------------------------------------------------------------
# exponent calculus


def exponent_solve(p, a, b, c, d) -> Fraction:
    """Threshold exponent of delta_{q+2}^p = delta_{q+1}^a delta_q^b lam_q^c lam_{q+1}^d.

    Substitutes lambda_q = lambda^q, delta_q = lambda^(-2 theta q) and matches
    exponents in exact rational arithmetic.  The q-linear terms must cancel
    identically (p = a + b and c = -d); the constant term then pins theta.
    """
    p, a, b, c, d = (Fraction(v) for v in (p, a, b, c, d))
    if p != a + b:
        raise ValueError(f"inconsistent ansatz: p={p} != a+b={a + b}")
    if c + d != 0:
        raise ValueError(f"inconsistent ansatz: q-linear term needs c+d=0, got {c + d}")
    denom = 2 * a - 4 * p
    if denom == 0:
        raise ZeroDivisionError("degenerate recursion: no theta dependence")
    return d / denom


# ---------------------------------------------------------------------------
# Hoelder threshold estimation


def measure_holder_increments(history: IterationHistory, thetas):
    """Records of (delta, lambda, [D u_{q+1} - D u_q]_theta) per stage."""
    records = []
    for q in range(1, len(history.states)):
        prev, cur = history.states[q - 1], history.states[q]
        djac = cur.jacobian() - prev.jacobian()
        field_ = GridField(cur.domain, djac.reshape(cur.domain.shape + (-1,)),
                           "vector", cur.phi.mode)
        lam = max(history.reports[q - 1].frequencies) if history.reports[q - 1].frequencies else 1.0
        records.append({
            "delta": history.deltas[q - 1],
            "lam": lam,
            "increments": {th: holder_seminorm(field_, th) for th in thetas},
        })
    return records


def holder_report(records, thetas=None):
    """Largest summable exponent for the fitted schedule, plus fit diagnostics.

    Each record carries delta_q, lambda_q and measured derivative-increment
    seminorms per theta.  The increments are compared against the model
    delta^(1/2) lambda^theta; the schedule fit log delta ~ -2 theta0 log
    lambda gives the summability threshold.
    """
    records = list(records)
    if len(records) < 3:
        raise ValueError("need at least 3 recorded stages")
    lams = np.array([r["lam"] for r in records], dtype=np.float64)
    dels = np.array([r["delta"] for r in records], dtype=np.float64)
    if thetas is None:
        thetas = sorted(records[0]["increments"].keys())
    degenerate = np.max(lams) / np.min(lams) < 1.01
    if degenerate:
        theta_star = 1.0
    else:
        slope, _, _ = scaling_fit(list(zip(lams, dels)))
        theta_star = min(1.0, -slope / 2.0)
    prefactors = {}
    for th in thetas:
        vals = np.array([r["increments"][th] for r in records], dtype=np.float64)
        model = np.sqrt(dels) * lams ** th
        ratio = vals / model
        prefactors[th] = {
            "mean": float(np.mean(ratio)),
            "spread": float(np.max(ratio) / max(np.min(ratio), 1e-300)),
        }
    return {
        "theta": float(theta_star),
        "schedule_degenerate": bool(degenerate),
        "prefactors": prefactors,
    }
