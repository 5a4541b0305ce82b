"""Principal eigenvalue and ground state of -Laplacian/2 - nu for atom and shell measures.

Sign convention: a positive weight creates mass (attractive), a negative
weight kills.  ``lam`` is the bottom of the L2 spectrum; it is reported only
when strictly negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, special

from .model import MeasureKind, SignedNu

ROOT_TOL = 1e-12
ROOT_MAXITER = 200
# decay rates below this are indistinguishable from the threshold case lam = 0
KAPPA_MIN = 1e-6


@dataclass(frozen=True)
class EigenResult:
    """Principal eigenpair.

    ``h(x) = norm_constant * sum_i eigen_coeffs[i] * G_{-lam}(x, a_i)`` for atoms;
    for shells the same coefficients multiply the resolvent of the unit surface
    measure, and ``radial_coeffs`` holds the piecewise Bessel representation used
    for evaluation.
    """

    lam: float
    decay_rate: float
    eigen_coeffs: np.ndarray
    norm_constant: float
    dimension: int = 1
    kind: MeasureKind = MeasureKind.ATOMS_1D
    support: np.ndarray = field(default_factory=lambda: np.zeros(1))
    weights: np.ndarray = field(default_factory=lambda: np.ones(1))
    radial_coeffs: np.ndarray | None = None  # shape (n_regions, 2): (I, K) coefficients

    @property
    def alpha(self) -> float:
        return -self.lam

    def h(self, x) -> np.ndarray:
        return eigenfunction_eval(self, x)

    def profile(self) -> RateProfile:
        return rate_profile(self.lam)


# -- resolvents --------------------------------------------------------------


def _dist(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.linalg.norm(x - y, axis=-1)


def resolvent_free(alpha: float, x, y, d: int = 1):
    """alpha-resolvent density of d-dimensional Brownian motion (generator Laplacian/2)."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    s = math.sqrt(2.0 * alpha)
    if d == 1:
        r = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
        return np.exp(-s * r) / s
    r = np.asarray(_dist(x, y), dtype=float)
    nu = d / 2.0 - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = s * r
        val = 2.0 * (2.0 * np.pi) ** (-d / 2.0) * (r / s) ** (-nu) * special.kve(nu, z) * np.exp(-z)
    return np.where(r > 0, val, np.inf)


def resolvent_free_quad(alpha: float, r: float, d: int) -> float:
    """Same kernel by direct quadrature of int_0^inf e^{-alpha t} p_t dt (test oracle)."""

    def integrand(t):
        return math.exp(-alpha * t - r * r / (2 * t)) * (2 * math.pi * t) ** (-d / 2)

    val, _ = integrate.quad(integrand, 0.0, np.inf, limit=400, epsabs=0, epsrel=1e-11)
    return val


def resolvent_killed_point(alpha: float, gamma: float, x, y, at: float = 0.0):
    """Resolvent of 1-D Brownian motion killed at rate gamma on the local time at ``at``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    s = math.sqrt(2.0 * alpha)
    x = np.asarray(x, dtype=float) - at
    y = np.asarray(y, dtype=float) - at
    # rearranged to avoid cancellation as alpha -> 0
    direct = np.abs(x - y)
    via = np.abs(x) + np.abs(y)
    return -np.exp(-s * direct) * np.expm1(-s * (via - direct)) / s + np.exp(-s * via) / (s + gamma)


def _killed_resolvent_zero(gamma: float, x, y, at: float = 0.0):
    # alpha -> 0 limit of resolvent_killed_point
    x = np.asarray(x, dtype=float) - at
    y = np.asarray(y, dtype=float) - at
    return 1.0 / gamma + np.abs(x) + np.abs(y) - np.abs(x - y)


# -- root finding --------------------------------------------------------------


def bisect_root(f, lo: float, hi: float, tol: float = ROOT_TOL, maxiter: int = ROOT_MAXITER) -> float:
    """Bisection for a sign change of f on [lo, hi]; hi is doubled until f changes sign.

    Stops once |f(mid)| < tol and the bracket is relatively tight, or after
    ``maxiter`` halvings.
    """
    flo = f(lo)
    fhi = f(hi)
    n = 0
    while np.sign(fhi) == np.sign(flo) and fhi != 0:
        hi *= 2.0
        fhi = f(hi)
        n += 1
        if n > maxiter:
            raise RuntimeError("could not bracket a root")
    if fhi == 0:
        return hi
    mid = 0.5 * (lo + hi)
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0 or (abs(fm) < tol and hi - lo < 1e-13 * max(abs(mid), 1e-300)):
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return mid


# -- closed-form and transcendental solvers -----------------------------------


def _atom_norm_sq(alpha: float, pos: np.ndarray, coeffs: np.ndarray) -> float:
    """int (sum_j c_j G_alpha(x, a_j))^2 dx in closed form."""
    s = math.sqrt(2 * alpha)
    D = np.abs(pos[:, None] - pos[None, :])
    gram = (D + 1.0 / s) * np.exp(-s * D) / s**2
    return float(coeffs @ gram @ coeffs)


def _atom_norm_sq_quad(alpha: float, pos: np.ndarray, coeffs: np.ndarray) -> float:
    """Same integral by adaptive quadrature between atoms (test oracle)."""
    s = math.sqrt(2 * alpha)

    def h2(x):
        return float(np.dot(coeffs, np.exp(-s * np.abs(x - pos)) / s)) ** 2

    edges = np.concatenate(([-np.inf], np.sort(pos), [np.inf]))
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(h2, lo, hi, epsabs=0, epsrel=1e-10, limit=200)
        total += val
    return total


def _atom_result(alpha: float, pos, w, coeffs) -> EigenResult:
    pos = np.asarray(pos, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    norm = 1.0 / math.sqrt(_atom_norm_sq(alpha, pos, coeffs))
    return EigenResult(
        lam=-alpha,
        decay_rate=math.sqrt(2 * alpha),
        eigen_coeffs=coeffs,
        norm_constant=norm,
        support=pos,
        weights=np.asarray(w, dtype=float),
    )


def solve_lambda_single_atom(c: float, position: float = 0.0) -> EigenResult:
    """nu = c * delta_position in d = 1: lam = -c^2/2, h = sqrt(c) e^{-c|x|}."""
    if not c > 0:
        raise ValueError("atom weight must be positive")
    alpha = 0.5 * c * c
    # h(x) = K * G_alpha(x, 0) = K e^{-c|x|}/c with K = c^{3/2} normalizes exactly
    return EigenResult(
        lam=-alpha,
        decay_rate=c,
        eigen_coeffs=np.array([1.0]),
        norm_constant=c**1.5,
        support=np.array([float(position)]),
        weights=np.array([float(c)]),
    )


def two_atom_equation(A: float, gamma: float, beta: float, a: float) -> float:
    """A^2 - (beta - gamma) A - beta gamma (1 - e^{-2aA}); zero at A = sqrt(-2 lam)."""
    return A * A - (beta - gamma) * A - beta * gamma * (-math.expm1(-2 * a * A))


def solve_lambda_two_atoms_signed(gamma: float, beta: float, a: float) -> EigenResult | None:
    """nu = beta delta_a - gamma delta_0: killing at 0, creation at a > 0."""
    if gamma < 0 or not beta > 0 or not a > 0:
        raise ValueError("need gamma >= 0, beta > 0, a > 0")
    if not beta > gamma / (1 + 2 * a * gamma):
        return None

    def g(A):
        return two_atom_equation(A, gamma, beta, a)

    hi = max(beta, 1.0)
    while g(hi) <= 0:
        hi *= 2
    lo = hi
    while g(lo) >= 0:
        lo *= 0.5
        if lo < 1e-300:
            return None
    A = bisect_root(g, lo, hi)
    alpha = 0.5 * A * A
    # h = beta h(a) G^{killed}(., a); take h(a) = 1
    h0 = beta * float(resolvent_killed_point(alpha, gamma, 0.0, a))
    coeffs = np.array([-gamma * h0, beta * 1.0])
    return _atom_result(alpha, [0.0, a], [-gamma, beta], coeffs)


def _perron(M: np.ndarray, iters: int = 2000, tol: float = 1e-15) -> tuple[float, np.ndarray]:
    """Spectral radius and Perron vector of a nonnegative matrix by power iteration."""
    n = M.shape[0]
    v = np.ones(n) / n
    rho = 0.0
    for _ in range(iters):
        w = M @ v
        total = w.sum()
        if not total > 0:
            return 0.0, v
        rho_new = total / v.sum()
        w /= total
        if np.max(np.abs(w - v)) < tol:
            v = w
            rho = rho_new
            break
        v, rho = w, rho_new
    return float((M @ v).sum() / v.sum()), v


def _solve_alpha(top_eig, alpha_min=1e-14) -> float | None:
    """Largest alpha with top_eig(alpha) = 1, given top_eig decreasing."""
    if top_eig(alpha_min) <= 1.0:
        return None
    hi = 1.0
    while top_eig(hi) >= 1.0:
        hi *= 2
    lo = hi
    while top_eig(lo) < 1.0:
        lo *= 0.5
    return bisect_root(lambda al: top_eig(al) - 1.0, lo, hi)


def solve_lambda_atoms_general(atoms) -> EigenResult | None:
    """Principal eigenpair for d = 1 and nu = sum_i w_i delta_{a_i} (signed weights allowed).

    All-positive weights: spectral radius of M(alpha)_ij = w_j G_alpha(a_i, a_j).
    One negative atom: same construction with the resolvent killed at that atom.
    Several negative atoms: top eigenvalue of the symmetrized Birman-Schwinger
    matrix G^{1/2} W G^{1/2}.
    """
    pos = np.array([p for p, _ in atoms], dtype=float)
    w = np.array([v for _, v in atoms], dtype=float)
    if not np.any(w > 0):
        raise ValueError("at least one weight must be positive")
    keep = w != 0
    pos, w = pos[keep], w[keep]
    neg = w < 0

    def G(alpha):
        return resolvent_free(alpha, pos[:, None], pos[None, :])

    if not neg.any():
        alpha = _solve_alpha(lambda al: _perron(G(al) * w[None, :])[0], alpha_min=1e-300)
        if alpha is None:
            return None
        _, v = _perron(G(alpha) * w[None, :])
        return _atom_result(alpha, pos, w, w * v)

    if neg.sum() == 1:
        b = pos[neg][0]
        gam = -w[neg][0]
        pp, pw = pos[~neg], w[~neg]

        def Mk(alpha):
            return resolvent_killed_point(alpha, gam, pp[:, None], pp[None, :], at=b) * pw[None, :]

        M0 = _killed_resolvent_zero(gam, pp[:, None], pp[None, :], at=b) * pw[None, :]
        if _perron(M0)[0] <= 1.0:
            return None
        alpha = _solve_alpha(lambda al: _perron(Mk(al))[0], alpha_min=1e-300)
        if alpha is None:
            return None
        _, v = _perron(Mk(alpha))
        hb = float(np.dot(pw * v, resolvent_killed_point(alpha, gam, b, pp, at=b)))
        hvals = np.empty_like(w)
        hvals[~neg] = v
        hvals[neg] = hb
        return _atom_result(alpha, pos, w, w * hvals)

    def top(alpha):
        g = G(alpha)
        root = linalg.sqrtm(g).real
        return float(linalg.eigvalsh(root @ np.diag(w) @ root)[-1])

    alpha = _solve_alpha(top, alpha_min=1e-12)
    if alpha is None:
        return None
    g = G(alpha)
    vals, vecs = linalg.eig(g * w[None, :])
    k = int(np.argmin(np.abs(vals - 1.0)))
    v = np.real(vecs[:, k])
    v = v if v.sum() > 0 else -v
    return _atom_result(alpha, pos, w, w * v)


# -- shells ---------------------------------------------------------------------


def shell_check_lambda(d: int, r: float, R: float, beta: float, gamma: float) -> float:
    """Variational quantity whose value below 1 is equivalent to lam < 0.

    Killing shell of weight ``beta`` at radius ``r`` (beta = 0 allowed), creating
    shell of weight ``gamma`` at radius ``R``.
    """
    if d < 2 or not r > 0 or not R > 0 or r == R or beta < 0 or not gamma > 0:
        raise ValueError("invalid shell parameters")
    if r < R:
        if d == 2:
            return beta * (r / R) / (gamma * (1 + 2 * beta * r * math.log(R / r)))
        return (d - 2) / gamma * (
            beta * (r / R) ** (d - 1) / (d - 2 + 2 * beta * r * (1 - (r / R) ** (d - 2))) + 1 / (2 * R)
        )
    if d == 2:
        return beta * (r / R) / (gamma * (1 + 2 * beta * r * math.log(r / R)))
    return (d - 2) * (d - 2 + 2 * beta * r) / (2 * gamma * R * (d - 2 + 2 * beta * r * (1 - (R / r) ** (d - 2))))


def _radial_basis(kappa: float, rho, d: int):
    nu = d / 2.0 - 1.0
    z = kappa * np.asarray(rho, dtype=float)
    p = np.asarray(rho, dtype=float) ** (-nu)
    return p * special.iv(nu, z), p * special.kv(nu, z)


def _radial_sweep(kappa: float, d: int, radii: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Coefficients (a_k, b_k) of f = a u_I + b u_K on each region, starting from (1, 0)."""
    coeffs = np.zeros((len(radii) + 1, 2))
    a, b = 1.0, 0.0
    coeffs[0] = a, b
    for k, (R, wk) in enumerate(zip(radii, w)):
        uI, uK = _radial_basis(kappa, R, d)
        jump = -2.0 * wk * (a * uI + b * uK)
        # Wronskian u_I u_K' - u_I' u_K = -R^{1-d}
        a += uK * jump * R ** (d - 1)
        b -= uI * jump * R ** (d - 1)
        coeffs[k + 1] = a, b
    return coeffs


def _radial_mismatch(kappa: float, d: int, radii, w) -> float:
    a, _ = _radial_sweep(kappa, d, radii, w)[-1]
    return a


def lambda_radial_oracle(d: int, shells, return_coeffs: bool = False):
    """Ground-state eigenvalue for radial shell measures by matching Bessel solutions.

    ``shells`` holds (radius, signed weight) pairs.  Across a shell of weight w
    the radial profile satisfies f'(R+) - f'(R-) = -2 w f(R).  Returns lam < 0,
    or None when there is no negative eigenvalue.
    """
    if d < 2:
        raise ValueError("radial oracle needs d >= 2")
    pts = sorted((float(r), float(v)) for r, v in shells)
    radii = np.array([r for r, _ in pts])
    w = np.array([v for _, v in pts])
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    wpos = w[w > 0].sum()
    if wpos <= 0:
        return None
    kmax = 2.0 * wpos + 1.0
    grid = np.geomspace(kmax, 1e-7, 600)
    vals = np.array([_radial_mismatch(k, d, radii, w) for k in grid])
    found = None
    for i in range(len(grid) - 1):
        if vals[i] > 0 and vals[i + 1] <= 0:
            found = (grid[i + 1], grid[i])
            break
    if found is None:
        return (None, None) if return_coeffs else None
    kappa = bisect_root(lambda k: _radial_mismatch(k, d, radii, w), found[0], found[1], tol=0.0)
    if kappa < KAPPA_MIN:
        return (None, None) if return_coeffs else None
    lam = -0.5 * kappa * kappa
    if return_coeffs:
        coeffs = _radial_sweep(kappa, d, radii, w)
        coeffs[-1, 0] = 0.0  # exterior solution is the decaying one at the root
        return lam, coeffs
    return lam


def _radial_profile(kappa, d, radii, coeffs, rho):
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    region = np.searchsorted(radii, rho, side="right")
    a = coeffs[region, 0]
    b = coeffs[region, 1]
    out = np.zeros_like(rho)
    with np.errstate(over="ignore", invalid="ignore"):
        uI, uK = _radial_basis(kappa, np.maximum(rho, 1e-12), d)
    mi, mk = a != 0, b != 0
    out[mi] += a[mi] * uI[mi]
    out[mk] += b[mk] * uK[mk]
    return out


def _unit_sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def solve_lambda_shells(d: int, outer, inner=None) -> EigenResult | None:
    """Shell model: creating shell ``outer = (R, gamma)``, optional ``inner = (r, beta, sign)``.

    sign = -1 makes the inner shell killing (the variational criterion is then
    available via ``shell_check_lambda``); sign = +1 makes it creating.  lam
    itself always comes from the radial matching solver.
    """
    R, gamma = outer
    if d < 2 or not R > 0 or not gamma > 0:
        raise ValueError("invalid outer shell")
    shells = [(R, gamma)]
    if inner is not None:
        r, beta, sign = inner
        if not r > 0 or r == R or beta < 0 or sign not in (-1, 1):
            raise ValueError("invalid inner shell")
        if beta > 0:
            shells.append((r, sign * beta))
    lam, coeffs = lambda_radial_oracle(d, shells, return_coeffs=True)
    if lam is None:
        return None
    kappa = math.sqrt(-2 * lam)
    pts = sorted(shells)
    radii = np.array([p for p, _ in pts])
    w = np.array([v for _, v in pts])
    area = _unit_sphere_area(d)
    edges = np.concatenate(([0.0], radii, [np.inf]))
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(
            lambda rr: _radial_profile(kappa, d, radii, coeffs, rr)[0] ** 2 * rr ** (d - 1),
            lo,
            hi,
            epsabs=0,
            epsrel=1e-10,
            limit=200,
        )
        total += val
    norm = 1.0 / math.sqrt(area * total)
    fR = _radial_profile(kappa, d, radii, coeffs, radii)
    return EigenResult(
        lam=lam,
        decay_rate=kappa,
        eigen_coeffs=w * fR,
        norm_constant=norm,
        dimension=d,
        kind=MeasureKind.SHELLS_RADIAL,
        support=radii,
        weights=w,
        radial_coeffs=coeffs,
    )


def solve_lambda(nu: SignedNu) -> EigenResult | None:
    """Dispatch on the measure type."""
    if nu.kind is MeasureKind.ATOMS_1D:
        pts = nu.signed_points()
        if not any(w > 0 for _, w in pts):
            return None
        if len(pts) == 1:
            return solve_lambda_single_atom(pts[0][1], pts[0][0])
        return solve_lambda_atoms_general(pts)
    pts = nu.signed_points()
    if not any(w > 0 for _, w in pts):
        return None
    lam, coeffs = lambda_radial_oracle(nu.dimension, pts, return_coeffs=True)
    if lam is None:
        return None
    pos = [(r, w) for r, w in pts if w > 0]
    neg = [(r, w) for r, w in pts if w < 0]
    if len(pts) == 1 or (len(pos) == 1 and len(neg) == 1 and len(pts) == 2):
        inner = None if len(pts) == 1 else (neg[0][0], -neg[0][1], -1)
        return solve_lambda_shells(nu.dimension, pos[0], inner)
    return _shell_result_general(nu.dimension, pts, lam, coeffs)


def _shell_result_general(d, pts, lam, coeffs):
    pts = sorted(pts)
    radii = np.array([p for p, _ in pts])
    w = np.array([v for _, v in pts])
    kappa = math.sqrt(-2 * lam)
    total, _ = integrate.quad(
        lambda rr: _radial_profile(kappa, d, radii, coeffs, rr)[0] ** 2 * rr ** (d - 1),
        0,
        np.inf,
        points=None,
        limit=400,
    )
    norm = 1.0 / math.sqrt(_unit_sphere_area(d) * total)
    return EigenResult(
        lam=lam,
        decay_rate=kappa,
        eigen_coeffs=w * _radial_profile(kappa, d, radii, coeffs, radii),
        norm_constant=norm,
        dimension=d,
        kind=MeasureKind.SHELLS_RADIAL,
        support=radii,
        weights=w,
        radial_coeffs=coeffs,
    )


# -- grid oracle ------------------------------------------------------------------


def lambda_variational_oracle(nu: SignedNu, grid_halfwidth: float = 30.0, grid_step: float = 1e-3) -> float:
    """Smallest eigenvalue of the discretized form (1/2)int|u'|^2 - int u^2 dnu.

    d = 1: uniform grid on [-halfwidth, halfwidth] with Dirichlet ends, each atom
    a diagonal entry -w/step at its nearest node.  Shells: finite-volume radial
    form on (0, halfwidth] with cell-centred nodes.
    """
    h = grid_step
    pos = nu.support
    w = nu.nu_weights
    if nu.kind is MeasureKind.ATOMS_1D:
        if np.any(np.abs(pos) >= grid_halfwidth):
            raise ValueError("grid does not contain the support")
        n = int(round(2 * grid_halfwidth / h)) + 1
        x0 = -grid_halfwidth
        diag = np.full(n, 1.0 / h**2)
        off = np.full(n - 1, -0.5 / h**2)
        for p, wi in zip(pos, w):
            diag[int(round((p - x0) / h))] -= wi / h
        return float(linalg.eigh_tridiagonal(diag, off, select="i", select_range=(0, 0))[0][0])
    d = nu.dimension
    if np.any(pos >= grid_halfwidth):
        raise ValueError("grid does not contain the support")
    n = int(round(grid_halfwidth / h))
    faces = np.arange(n + 1) * h
    centres = faces[:-1] + 0.5 * h
    flux = 0.5 * faces ** (d - 1) / h
    mass = (faces[1:] ** d - faces[:-1] ** d) / d
    diag = flux[:-1] + flux[1:]
    off = -flux[1:-1]
    for R, wi in zip(pos, w):
        k = int(np.argmin(np.abs(centres - R)))
        diag[k] -= wi * R ** (d - 1)
    s = 1.0 / np.sqrt(mass)
    return float(
        linalg.eigh_tridiagonal(diag * s * s, off * s[:-1] * s[1:], select="i", select_range=(0, 0))[0][0]
    )


# -- evaluation and rate profile ------------------------------------------------------


def eigenfunction_eval(e: EigenResult, x) -> np.ndarray:
    """Ground state h at x (scalar, array of 1-D points, or (n, d) array for shells)."""
    if e.kind is MeasureKind.ATOMS_1D:
        x = np.asarray(x, dtype=float)
        s = e.decay_rate
        flat = x.reshape(-1) if x.ndim <= 1 else x[..., 0].reshape(-1)
        vals = (np.exp(-s * np.abs(flat[:, None] - e.support[None, :])) / s) @ e.eigen_coeffs
        out = e.norm_constant * vals
        return out.reshape(x.shape if x.ndim <= 1 else x.shape[:-1])
    x = np.asarray(x, dtype=float)
    rho = np.linalg.norm(x, axis=-1) if x.ndim >= 1 and x.shape[-1] == e.dimension else np.abs(x)
    return e.norm_constant * _radial_profile(e.decay_rate, e.dimension, e.support, e.radial_coeffs, rho)


@dataclass(frozen=True)
class RateProfile:
    lam: float

    @property
    def critical_delta(self) -> float:
        return math.sqrt(-self.lam / 2)

    @property
    def ballistic_delta(self) -> float:
        return math.sqrt(-2 * self.lam)

    def __call__(self, delta):
        delta = np.asarray(delta, dtype=float)
        b = self.ballistic_delta
        out = np.where(delta <= b, self.lam + b * delta, 0.5 * delta**2)
        return out if out.ndim else float(out)


def rate_profile(lam: float) -> RateProfile:
    if not lam < 0:
        raise ValueError("rate profile needs lam < 0")
    return RateProfile(float(lam))
