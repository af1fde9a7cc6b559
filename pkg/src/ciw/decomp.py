"""Rank-one and stress decompositions.

Three solvers back the iteration schemes: the cone-localized metric
decomposition over s_n = n(n+1)/2 primitive directions, the Beltrami stress
decomposition over antipodal wavevector families of one integer shell, and
the nonnegative pipe-direction decomposition behind Mikado flows.  Every
solver is an exact linear solve (or deterministic active-set NNLS), so the
coefficient functions are real-analytic where defined and runs reproduce
bit-for-bit.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .metric import cone_deviation

__all__ = [
    "DirectionSet",
    "BeltramiFamily",
    "MikadoDirections",
    "DecompositionError",
    "primitive_directions",
    "local_decompose",
    "certify_cone_radius",
    "beltrami_family",
    "beltrami_coefficients",
    "mikado_directions",
    "mikado_coefficients",
    "nnls",
]


class DecompositionError(ValueError):
    pass


def _sym_basis_index(n):
    """Row ordering (diagonal then upper off-diagonal) for vec(Sym(n))."""
    idx = [(i, i) for i in range(n)]
    idx += [(i, j) for i in range(n) for j in range(i + 1, n)]
    return idx


def _vec_sym(A, index):
    A = np.asarray(A, dtype=np.float64)
    lead = A.shape[:-2]
    out = np.empty(lead + (len(index),))
    for r, (i, j) in enumerate(index):
        out[..., r] = A[..., i, j]
    return out


@dataclass(frozen=True)
class DirectionSet:
    """s_n unit vectors whose rank-one squares form a basis of Sym(n)."""

    n: int
    vectors: np.ndarray                      # (s_n, n)
    name: str = "default"
    _solve: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        s = self.n * (self.n + 1) // 2
        if vecs.shape != (s, self.n):
            raise ValueError(f"need exactly {s} direction vectors in R^{self.n}")
        norms = np.linalg.norm(vecs, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("direction vectors must be unit")
        index = _sym_basis_index(self.n)
        B = np.empty((s, s))
        for k in range(s):
            rank1 = np.outer(vecs[k], vecs[k])
            B[:, k] = _vec_sym(rank1, index)
        det = np.linalg.det(B)
        if abs(det) < 1e-12:
            raise ValueError("rank-one squares are linearly dependent")
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "_solve", np.linalg.inv(B))
        # Id must be interior: every coefficient strictly positive
        mu2 = self.coefficients(np.eye(self.n))
        if np.min(mu2) <= 0:
            raise ValueError("identity is not interior to the direction cone")

    @property
    def count(self):
        return self.vectors.shape[0]

    def coefficients(self, A):
        """mu_k^2 solving A = sum mu_k^2 xi_k (x) xi_k (no sign check)."""
        index = _sym_basis_index(self.n)
        rhs = _vec_sym(A, index)
        return rhs @ self._solve.T

    def reconstruct(self, mu2):
        mu2 = np.asarray(mu2, dtype=np.float64)
        rank1 = np.einsum("ki,kj->kij", self.vectors, self.vectors)
        return np.einsum("...k,kij->...ij", mu2, rank1)

    def frequency_ladder(self, k):
        """Positive multipliers t with t * xi_k integer, or None (free).

        On periodic charts the spiral phase lambda * (x . xi) is sampled on a
        torus, so lambda must land on this ladder to keep the field periodic.
        """
        v = self.vectors[k]
        scaled = _integer_direction(v)
        if scaled is None:
            return None
        return float(np.linalg.norm(scaled))

    def to_json(self):
        return json.dumps({
            "n": self.n,
            "name": self.name,
            "vectors": self.vectors.tolist(),
            "identity_coefficients": self.coefficients(np.eye(self.n)).tolist(),
        }, sort_keys=True)


def _integer_direction(v, max_den=64):
    """Smallest integer vector parallel to v, or None if v is irrational."""
    for q in range(1, max_den + 1):
        for lead in np.abs(v):
            if lead < 1e-12:
                continue
            cand = v * q / lead
            rounded = np.round(cand)
            if np.max(np.abs(cand - rounded)) < 1e-9 and np.any(rounded != 0):
                g = np.gcd.reduce(np.abs(rounded).astype(np.int64)[rounded != 0])
                return (rounded / g).astype(np.int64)
    return None


_THIRD = 2.0 * np.pi / 3.0


def primitive_directions(n, periodic=False):
    """Fixed direction sets per dimension.

    The planar default is the 120-degree triple (largest certified cone
    among the natural choices).  Periodic charts need phases lambda * x . xi
    that close up on the torus, so `periodic=True` in 2-D switches to unit
    vectors along integer directions; the 3-D set is integer-born already.
    """
    if n == 1:
        return DirectionSet(1, np.array([[1.0]]), name="line")
    if n == 2:
        if not periodic:
            ang = np.array([0.0, _THIRD, 2 * _THIRD])
            vecs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            return DirectionSet(2, vecs, name="third-turn")
        vecs = np.array([[0.0, 1.0], [2.0, 1.0], [2.0, -1.0]])
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        return DirectionSet(2, vecs, name="integer-2d")
    if n == 3:
        raw = np.array([
            [1.0, 1.0, 0.0], [1.0, -1.0, 0.0],
            [0.0, 1.0, 1.0], [0.0, 1.0, -1.0],
            [1.0, 0.0, 1.0], [1.0, 0.0, -1.0],
        ])
        raw /= np.sqrt(2.0)
        return DirectionSet(3, raw, name="face-diagonals")
    raise ValueError("only n in {1, 2, 3} supported")


def local_decompose(A, dirs: DirectionSet, r0=None, neg_tol=1e-12):
    """Positive coefficients mu_k with A = sum mu_k^2 xi_k (x) xi_k.

    A must lie in the certified cone (pass r0 from certify_cone_radius, or
    None to skip the membership check for callers that already verified it).
    """
    A = np.asarray(A, dtype=np.float64)
    if r0 is not None:
        dev = cone_deviation(A)
        tr = np.trace(A, axis1=-2, axis2=-1)
        if np.any(tr <= 0) or np.any(dev >= r0):
            raise DecompositionError(
                f"matrix outside certified cone (deviation {np.max(dev):.4g} >= {r0:g})"
            )
    mu2 = dirs.coefficients(A)
    bad = mu2 < -neg_tol
    if np.any(bad):
        k = int(np.argwhere(bad)[0][-1])
        raise DecompositionError(f"negative coefficient mu_{k}^2 = {np.min(mu2):.4g}")
    return np.sqrt(np.clip(mu2, 0.0, None))


def _boundary_samples(n, count, seed=20240901):
    """Unit-HS traceless symmetric matrices, Philox-seeded for reproducibility."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    mats = []
    while len(mats) < count:
        raw = rng.normal(size=(n, n))
        E = 0.5 * (raw + raw.T)
        E -= np.trace(E) / n * np.eye(n)
        nrm = np.linalg.norm(E)
        if nrm > 1e-12:
            mats.append(E / nrm)
    return np.array(mats)


def certify_cone_radius(dirs: DirectionSet, samples=10000, tol=1e-6, r_max=1.0):
    """Certified cone opening r0 for the direction set.

    Binary search (to `tol`) for the largest r such that Id + r E decomposes
    with all mu_k^2 > 0 over >= `samples` boundary directions E; returns half
    the found radius as the certificate.  In 1-D the cone is the whole
    half-line, so the search trivially tops out at r_max.
    """
    if dirs.n == 1:
        return 0.5 * r_max
    E = _boundary_samples(dirs.n, samples)
    eye = np.eye(dirs.n)

    def feasible(r):
        mats = eye[None, :, :] + r * E
        mu2 = dirs.coefficients(mats)
        return bool(np.min(mu2) > 0)

    lo, hi = 0.0, r_max
    if feasible(r_max):
        lo = r_max
    else:
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
    return 0.5 * lo


# ---------------------------------------------------------------------------
# Beltrami wavevector families


def _shell_pairs(shell):
    """Canonical antipodal representatives on the integer shell |k|^2 = shell."""
    r = int(np.floor(np.sqrt(shell)))
    reps = []
    for kx in range(-r, r + 1):
        for ky in range(-r, r + 1):
            for kz in range(-r, r + 1):
                if kx * kx + ky * ky + kz * kz != shell:
                    continue
                k = (kx, ky, kz)
                if k > tuple(-c for c in k):
                    reps.append(np.array(k))
    return reps


def _pair_matrix(k):
    khat = k / np.linalg.norm(k)
    return np.eye(3) - np.outer(khat, khat)


@dataclass(frozen=True)
class BeltramiFamily:
    """Antipodal wavevector pairs on one shell with solvable stress system.

    `shell` is the integer |k|^2 of the shell; the curl eigenvalue lambda0 is
    its square root (irrational for most shells, e.g. |k|^2 = 5).
    """

    shell: int
    pairs: np.ndarray                        # (6, 3) canonical representatives
    _solve: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64)
        if pairs.shape != (6, 3):
            raise ValueError("a family consists of 6 antipodal pairs")
        index = _sym_basis_index(3)
        B = np.empty((6, 6))
        for c, k in enumerate(pairs):
            B[:, c] = _vec_sym(_pair_matrix(k.astype(float)), index)
        if abs(np.linalg.det(B)) < 1e-10:
            raise ValueError("pair matrices do not span Sym(3)")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "_solve", np.linalg.inv(B))
        gid = self.coefficients(np.eye(3), r0=None)
        if np.min(gid) <= 0:
            raise ValueError("identity is not interior to the family cone")

    @property
    def lambda0(self):
        return float(np.sqrt(self.shell))

    def all_vectors(self):
        return np.concatenate([self.pairs, -self.pairs], axis=0)

    def coefficients(self, R, r0, neg_tol=1e-12):
        """gamma_k^2 per antipodal pair with R = sum gamma_k^2 (Id - khat khat).

        The paper's normalization sum over +-k with the 1/2 in front lands on
        the same per-pair system.  gamma_{-k} = gamma_k by construction.
        """
        R = np.asarray(R, dtype=np.float64)
        if r0 is not None:
            tr = np.trace(R, axis1=-2, axis2=-1)
            dev = cone_deviation(R)
            if np.any(tr <= 0) or np.any(dev > r0):
                raise DecompositionError(
                    f"stress outside certified cone (deviation {np.max(dev):.4g} > {r0:g})"
                )
        rhs = _vec_sym(R, _sym_basis_index(3))
        g2 = rhs @ self._solve.T
        if np.any(g2 < -neg_tol):
            raise DecompositionError(
                f"negative gamma^2 = {np.min(g2):.4g}: cone violation"
            )
        return g2

    def certify_radius(self, samples=10000, tol=1e-6):
        E = _boundary_samples(3, samples)
        eye = np.eye(3)

        def feasible(r):
            g2 = (
                _vec_sym(eye[None] + r * E, _sym_basis_index(3)) @ self._solve.T
            )
            return bool(np.min(g2) > 0)

        lo, hi = 0.0, 1.0
        if feasible(hi):
            lo = hi
        else:
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if feasible(mid):
                    lo = mid
                else:
                    hi = mid
        return 0.5 * lo

    def to_json(self):
        return json.dumps({
            "shell": int(self.shell),
            "lambda0": self.lambda0,
            "pairs": self.pairs.tolist(),
            "identity_coefficients": self.coefficients(np.eye(3), r0=None).tolist(),
        }, sort_keys=True)


def beltrami_family(shell=5, which=0):
    """Deterministic family construction on an integer shell.

    Enumerates 6-subsets of the shell's antipodal pairs in lexicographic
    order and keeps those that span Sym(3) with the identity interior; the
    subsets are then ranked by their worst identity coefficient.  `which`
    selects among disjoint winners, so which=0 and which=1 give the two
    disjoint families the time-partition parities use.  Both live on one
    shell: equal curl eigenvalues make cross-family interaction terms exact
    gradients, which the stress bookkeeping relies on.
    """
    reps = _shell_pairs(shell)
    if len(reps) < 6 * (which + 1):
        raise DecompositionError(
            f"shell {shell} has only {len(reps)} antipodal pairs"
        )
    order = sorted(range(len(reps)), key=lambda i: tuple(reps[i]))
    reps = [reps[i] for i in order]
    index = _sym_basis_index(3)
    chosen = []
    used = set()
    for _ in range(which + 1):
        best = None
        for combo in itertools.combinations(range(len(reps)), 6):
            if any(c in used for c in combo):
                continue
            B = np.empty((6, 6))
            for col, c in enumerate(combo):
                B[:, col] = _vec_sym(_pair_matrix(reps[c].astype(float)), index)
            if abs(np.linalg.det(B)) < 1e-10:
                continue
            gid = np.linalg.solve(B, _vec_sym(np.eye(3), index))
            worst = np.min(gid)
            if worst <= 1e-9:
                continue
            if best is None or worst > best[0] + 1e-15:
                best = (worst, combo)
        if best is None:
            raise DecompositionError(
                f"no admissible family of index {len(chosen)} on shell {shell}"
            )
        chosen.append(best[1])
        used.update(best[1])
    pairs = np.array([reps[c] for c in chosen[-1]])
    return BeltramiFamily(shell, pairs)


def beltrami_coefficients(R, family: BeltramiFamily, r0=None):
    """Nonnegative gamma_k per pair; see BeltramiFamily.coefficients."""
    g2 = family.coefficients(R, r0=r0)
    return np.sqrt(np.clip(g2, 0.0, None))


def beltrami_normalized_amplitudes(R, family: BeltramiFamily, r0=None):
    """a_k = sqrt(tr R / 3) * gamma_k(R / ((1/3) tr R)).

    Identical to beltrami_coefficients(R) by linearity of the solve; kept as
    the normalized-form helper.  (The raw sqrt(tr R) prefactor would triple
    the average stress, failing <W (x) W> = R.)
    """
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R, axis1=-2, axis2=-1)
    scaled = R / (tr / 3.0)[..., None, None]
    gam = beltrami_coefficients(scaled, family, r0=r0)
    return np.sqrt(tr / 3.0)[..., None] * gam


# ---------------------------------------------------------------------------
# deterministic nonnegative least squares (Lawson-Hanson active set)


def nnls(A, b, tol=None, maxiter=None):
    """min ||A x - b|| s.t. x >= 0, Lawson-Hanson with deterministic pivots.

    Ties in the gradient test break toward the lowest column index (argmax
    returns the first maximizer), so runs reproduce bit-for-bit.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = A.shape
    if tol is None:
        tol = 10 * np.finfo(float).eps * max(m, n) * max(np.max(np.abs(A)), 1.0)
    if maxiter is None:
        maxiter = 10 * n
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = A.T @ b
    outer = 0
    while outer < maxiter:
        outer += 1
        w_masked = np.where(passive, -np.inf, w)
        j = int(np.argmax(w_masked))
        if not np.isfinite(w_masked[j]) or w_masked[j] <= tol:
            break
        passive[j] = True
        inner = 0
        while True:
            inner += 1
            cols = np.flatnonzero(passive)
            z = np.zeros(n)
            sol, *_ = np.linalg.lstsq(A[:, cols], b, rcond=None)
            z[cols] = sol
            if np.min(z[cols], initial=np.inf) > 0:
                x = z
                break
            if inner > maxiter:
                x = np.clip(z, 0.0, None)
                break
            neg = cols[z[cols] <= 0]
            denom = x[neg] - z[neg]
            alpha = np.min(np.where(denom > 0, x[neg] / denom, np.inf))
            x = x + alpha * (z - x)
            zeroed = passive & (x <= 1e-14 * max(np.max(np.abs(x)), 1e-300))
            passive &= ~zeroed
            x[~passive] = 0.0
        w = A.T @ (b - A @ x)
    return x, float(np.linalg.norm(b - A @ x))


# ---------------------------------------------------------------------------
# Mikado directions


def _primitive_integer_vectors(lmax):
    """Canonical (antipodal-deduplicated) primitive k with |k| <= lmax."""
    out = []
    r = int(np.floor(lmax))
    for kx in range(-r, r + 1):
        for ky in range(-r, r + 1):
            for kz in range(-r, r + 1):
                k = (kx, ky, kz)
                if k == (0, 0, 0) or kx * kx + ky * ky + kz * kz > lmax * lmax:
                    continue
                if k <= tuple(-c for c in k):
                    continue
                g = np.gcd.reduce([abs(c) for c in k if c != 0])
                if g != 1:
                    continue
                out.append(np.array(k, dtype=np.int64))
    out.sort(key=tuple)
    return out


@dataclass(frozen=True)
class MikadoDirections:
    """Integer directions |k| <= lambda0 with their rank-one design matrix."""

    lambda0: int
    vectors: tuple
    design: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def build(cls, lambda0):
        vecs = _primitive_integer_vectors(lambda0)
        index = _sym_basis_index(3)
        design = np.empty((6, len(vecs)))
        for c, k in enumerate(vecs):
            kk = np.outer(k, k).astype(float)
            col = _vec_sym(kk, index)
            design[:, c] = col
        # off-diagonal rows enter the Frobenius inner product twice
        weights = np.array([1.0] * 3 + [np.sqrt(2.0)] * 3)
        design = design * weights[:, None]
        return cls(int(lambda0), tuple(tuple(int(c) for c in k) for k in vecs), design)

    def rhs(self, R):
        col = _vec_sym(np.asarray(R, dtype=np.float64), _sym_basis_index(3))
        weights = np.array([1.0] * 3 + [np.sqrt(2.0)] * 3)
        return col * weights


def mikado_directions(lambda0):
    return MikadoDirections.build(lambda0)


def mikado_coefficients(R, lambda0, residual_tol=1e-10):
    """Gamma_k >= 0 with R = sum Gamma_k^2 k (x) k over integer |k| <= lambda0.

    Returns (directions, Gamma, scale): Gamma is clipped to [0, 1] by the
    k-length rescaling k -> scale * k with scale^2 = max coefficient, so the
    represented field sum (Gamma_k scale k)-pipes keeps <W (x) W> = R.
    """
    R = np.asarray(R, dtype=np.float64)
    lam = np.linalg.eigvalsh(R)
    if lam[0] <= 0:
        raise DecompositionError("stress must be positive definite")
    dirs = mikado_directions(lambda0)
    c, resid = nnls(dirs.design, dirs.rhs(R))
    scale_ref = np.linalg.norm(R)
    if resid > residual_tol * max(scale_ref, 1e-300):
        raise DecompositionError(
            f"no nonnegative pipe decomposition at lambda0={lambda0} "
            f"(residual {resid:.3e}); raise lambda0"
        )
    scale2 = max(float(np.max(c)), 1.0)
    gamma = np.sqrt(c / scale2)
    return dirs, gamma, float(np.sqrt(scale2))
